#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qprel/annotator.hpp"
#include "qprel/corpus.hpp"
#include "qprel/synthesizer.hpp"

namespace qprel {

/// Binary metrics with Relevant as the positive class. Undefined precision
/// or recall is reported as 0 with its flag set.
struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool operator==(const Metrics&) const = default;
};

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn);
/// Throws ConfigError on empty or mismatched inputs.
Metrics evaluate(std::span<const Label> predicted, std::span<const Label> truth);
Metrics evaluate(const Judge& model, std::span<const LabeledPair> test_pairs);

enum class Stage : std::uint8_t { Base, RD, RDDS, RDDSKD };
inline constexpr std::size_t kNumStages = 4;
inline constexpr std::array<Stage, kNumStages> kAllStages{Stage::Base, Stage::RD, Stage::RDDS,
                                                          Stage::RDDSKD};
std::string_view stage_name(Stage s);

struct AlignmentSummary {
  double fn_rate_before = 0.0;  // purchased pairs verdicted Irrelevant
  double fn_rate_after = 0.0;
  double precision_before = 0.0;  // annotator on the test split
  double precision_after = 0.0;
  double mean_reward_desirable_before = 0.0;
  double mean_reward_desirable_after = 0.0;
  std::size_t preferences = 0;
  bool operator==(const AlignmentSummary&) const = default;
};

struct TeacherSummary {
  Metrics with_attrs;  // test split
  Metrics plain;
  double with_attrs_val_f1 = 0.0;
  double plain_val_f1 = 0.0;
  bool operator==(const TeacherSummary&) const = default;
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::array<Metrics, kNumStages> stages{};
  AlignmentSummary alignment;
  TeacherSummary teacher;
  double alpha = 0.0;  // selected by validation F1
  std::size_t mined = 0;
  std::vector<DsIterationSummary> ds;
  bool operator==(const SeedReport&) const = default;
};

/// One-sided sign test of "gap > 0" over seeds; ties are dropped.
struct SignTest {
  std::size_t positive = 0, negative = 0, ties = 0;
  double p_value = 1.0;
  bool operator==(const SignTest&) const = default;
};

SignTest sign_test(std::span<const double> gaps);

struct AblationReport {
  std::vector<SeedReport> seeds;
  std::array<double, kNumStages> mean_precision{};
  std::array<double, kNumStages> mean_recall{};
  std::array<double, kNumStages> mean_f1{};
  // Gaps RD - Base, RDDS - RD, RDDSKD - RDDS.
  std::array<SignTest, 3> gap_tests{};
  std::array<double, 3> mean_gaps{};
  double mean_teacher_attr_f1 = 0.0;
  double mean_teacher_plain_f1 = 0.0;
  bool complete = true;
  std::string error;  // failing stage when incomplete
  bool operator==(const AblationReport&) const = default;
};

/// Recomputes every aggregate field from `seeds`.
void aggregate(AblationReport& report);

nlohmann::json to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AblationReport& r);
AblationReport report_from_json(const nlohmann::json& j);

/// Plain-text table: one row per stage per seed, then the mean rows.
std::string render_table(const AblationReport& r);

/// Writes `path` (JSON) and the same path with extension ".txt" (table).
void emit_report(const AblationReport& report, const std::filesystem::path& path);

struct PipelineConfig;

/// Runs the full pipeline for every seed under `out_dir/seed_<n>`. A stage
/// failure stops the run and returns the report so far with `complete`
/// false.
AblationReport run_ablation(const PipelineConfig& config, std::span<const std::uint64_t> seeds,
                            const std::filesystem::path& out_dir);

}  // namespace qprel
