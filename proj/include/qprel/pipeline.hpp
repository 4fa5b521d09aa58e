#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "qprel/annotator.hpp"
#include "qprel/corpus.hpp"
#include "qprel/distiller.hpp"
#include "qprel/evalkit.hpp"
#include "qprel/neural.hpp"
#include "qprel/synthesizer.hpp"

namespace qprel {

struct DataConfig {
  std::size_t train = 3000;
  std::size_t validation = 600;
  std::size_t test = 2000;
  std::size_t cot_tuning = 10000;
  std::size_t exposures = 5000;
  double exposure_irrelevant_rate = 0.5;
  double nonessential_gap_rate = 0.4;
  bool operator==(const DataConfig&) const = default;
};

struct CotConfig {
  /// Over-strict bias injected into the kept CoT training data.
  double strictness = 0.9;
  /// Verdict flips in the raw simulator output; removed by the filter.
  double noise = 0.05;
  bool operator==(const CotConfig&) const = default;
};

/// KTO strength search: candidate learning rates are kto_train.adam.lr times
/// each scale. The kept candidate has the lowest purchase false-negative rate
/// among those whose validation precision stays within `precision_budget` of
/// the unaligned annotator; with none, the unaligned annotator is kept.
struct AlignConfig {
  std::vector<double> lr_scales{1.0, 0.7, 0.5, 0.35, 0.25};
  double precision_budget = 0.01;
  bool operator==(const AlignConfig&) const = default;
};

struct DsConfig {
  int iterations = 3;
  std::size_t candidates = 1500;
  bool operator==(const DsConfig&) const = default;
};

/// Every knob of a run. `vocab_size` in the model configs is filled from the
/// world at run time and must be 0 in the file.
struct PipelineConfig {
  CorpusConfig corpus;
  DataConfig data;
  nn::ModelConfig decoder;
  nn::ModelConfig teacher;
  nn::ModelConfig student;
  nn::TrainConfig cot_train;
  nn::TrainConfig kto_train;
  nn::TrainConfig teacher_train;
  nn::TrainConfig student_train;
  CotConfig cot;
  KtoConfig kto;
  AlignConfig align;
  DistillConfig distill;
  std::vector<double> alpha_grid{0.25, 0.5, 0.75};
  DsConfig ds;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out_dir = "runs";

  PipelineConfig();
  void validate() const;
  bool operator==(const PipelineConfig&) const = default;
};

/// A smaller configuration that keeps every stage meaningful.
PipelineConfig reduced_config();

nlohmann::json to_json(const PipelineConfig& c);
/// Starts from the defaults and applies the keys present. Unknown keys throw
/// ConfigError.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
/// Applies "dotted.key=value" to a config document. The value is parsed as
/// JSON when possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Artifact file names inside a seed directory.
namespace artifact {
inline constexpr const char* kWorld = "world.json";
inline constexpr const char* kTrain = "train.jsonl";
inline constexpr const char* kValidation = "validation.jsonl";
inline constexpr const char* kTest = "test.jsonl";
inline constexpr const char* kCotTuning = "cot_tuning.jsonl";
inline constexpr const char* kExposures = "exposures.jsonl";
inline constexpr const char* kPurchases = "purchases.jsonl";
inline constexpr const char* kCorpusSummary = "corpus_summary.json";
inline constexpr const char* kCotData = "cot_data.jsonl";
inline constexpr const char* kAnnotatorSft = "annotator_sft.ckpt.json";
inline constexpr const char* kAnnotatorMetrics = "annotator_metrics.json";
inline constexpr const char* kPreferences = "preferences.jsonl";
inline constexpr const char* kAnnotator = "annotator.ckpt.json";
inline constexpr const char* kAlignment = "alignment.json";
inline constexpr const char* kStudentBase = "student_base.ckpt.json";
inline constexpr const char* kMined = "mined.jsonl";
inline constexpr const char* kStudentRd = "student_rd.ckpt.json";
inline constexpr const char* kDsSummary = "ds_summary.json";
inline constexpr const char* kDsTrain = "ds_train.jsonl";
inline constexpr const char* kStudentDs = "student_ds.ckpt.json";
inline constexpr const char* kTeacherCots = "teacher_cots.jsonl";
inline constexpr const char* kTeacher = "teacher.ckpt.json";
inline constexpr const char* kTeacherPlain = "teacher_plain.ckpt.json";
inline constexpr const char* kTeacherMetrics = "teacher_metrics.json";
inline constexpr const char* kStudentKd = "student_kd.ckpt.json";
inline constexpr const char* kDistill = "distill.json";
inline constexpr const char* kSeedReport = "seed_report.json";
inline constexpr const char* kReport = "report.json";
}  // namespace artifact

/// Seed directory of a run: `<out>/seed_<seed>`.
std::filesystem::path seed_dir(const std::filesystem::path& out, std::uint64_t seed);

// One function per stage. Each reads its inputs from `dir` (throwing
// MissingArtifactError when absent) and writes only its own artifacts.
void stage_gen_corpus(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_train_annotator(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_align_annotator(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_train_student(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_mine_hard(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_synthesize(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_train_teacher(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_distill(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
SeedReport stage_evaluate(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);

/// Every stage in pipeline order.
SeedReport run_seed(const PipelineConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);

/// run_ablation over cfg.seeds, then the report at `<out>/report.json`.
AblationReport run_all(const PipelineConfig& cfg, const std::filesystem::path& out);

/// Model configs completed with the world's vocabulary size.
nn::ModelConfig with_vocab(nn::ModelConfig c, const World& world);

}  // namespace qprel
