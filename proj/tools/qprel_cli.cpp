#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qprel/corpus_io.hpp"
#include "qprel/errors.hpp"
#include "qprel/pipeline.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

qprel::PipelineConfig load_config(const Options& o) {
  json doc = json::object();
  if (!o.config_path.empty()) {
    doc = qprel::io::read_json(o.config_path);
  }
  for (const auto& ov : o.overrides) {
    qprel::apply_override(doc, ov);
  }
  return qprel::pipeline_config_from_json(doc);
}

void print_error(const std::string& type, const std::string& message,
                 const std::string& artifact = {}) {
  json e{{"type", type}, {"message", message}};
  if (!artifact.empty()) {
    e["artifact"] = artifact;
  }
  std::cerr << json{{"error", e}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-product relevance pipeline"};
  app.require_subcommand(1);
  Options opt;

  using StageFn = void (*)(const qprel::PipelineConfig&, std::uint64_t, const fs::path&);
  struct StageCmd {
    const char* name;
    const char* help;
    StageFn fn;
  };
  const std::vector<StageCmd> stages{
      {"gen-corpus", "Generate the world, splits and logs", qprel::stage_gen_corpus},
      {"train-annotator", "Tune the CoT decoder on filtered, biased CoTs", qprel::stage_train_annotator},
      {"align-annotator", "Align the decoder with purchase preferences (KTO)", qprel::stage_align_annotator},
      {"train-student", "Train the base student on the train split", qprel::stage_train_student},
      {"mine-hard", "Mine student/annotator disagreements and retrain", qprel::stage_mine_hard},
      {"synthesize", "Error-type-aware synthesis loop", qprel::stage_synthesize},
      {"train-teacher", "Train attribute-augmented and plain teachers", qprel::stage_train_teacher},
      {"distill", "Distill the student from the teacher", qprel::stage_distill},
  };

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file (defaults when omitted)");
    sub->add_option("--override", opt.overrides, "key=value override, dotted keys")->take_all();
    sub->add_option("--seed", opt.seed, "Run seed (default: first config seed)");
    sub->add_option("--out", opt.out, "Output directory (default: config out_dir)");
  };

  std::vector<std::pair<CLI::App*, StageFn>> stage_subs;
  for (const auto& s : stages) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub);
    stage_subs.emplace_back(sub, s.fn);
  }
  CLI::App* evaluate = app.add_subcommand("evaluate", "Evaluate every stage's student on the test split");
  add_common(evaluate);
  CLI::App* run_all = app.add_subcommand("run-all", "Run every stage for every seed and emit the report");
  add_common(run_all);
  std::string config_out;
  CLI::App* dump = app.add_subcommand("dump-config", "Write the full default configuration");
  dump->add_option("path", config_out, "Destination file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (dump->parsed()) {
      qprel::io::write_json(config_out, qprel::to_json(qprel::PipelineConfig{}));
      return 0;
    }
    const qprel::PipelineConfig cfg = load_config(opt);
    const fs::path out = opt.out.empty() ? fs::path(cfg.out_dir) : fs::path(opt.out);
    const std::uint64_t seed = opt.seed.value_or(cfg.seeds.front());
    const fs::path dir = qprel::seed_dir(out, seed);

    for (const auto& [sub, fn] : stage_subs) {
      if (sub->parsed()) {
        fn(cfg, seed, dir);
        std::cout << json{{"stage", sub->get_name()}, {"seed", seed}, {"dir", dir.string()}}.dump()
                  << '\n';
        return 0;
      }
    }
    if (evaluate->parsed()) {
      qprel::stage_evaluate(cfg, seed, dir);
      std::cout << qprel::io::read_json(dir / qprel::artifact::kSeedReport).dump(2) << '\n';
      return 0;
    }
    if (run_all->parsed()) {
      qprel::PipelineConfig run_cfg = cfg;
      if (opt.seed) {
        run_cfg.seeds = {*opt.seed};
      }
      const qprel::AblationReport r = qprel::run_all(run_cfg, out);
      std::cout << qprel::render_table(r);
      if (!r.complete) {
        print_error("StageFailure", r.error);
        return 1;
      }
      return 0;
    }
  } catch (const qprel::MissingArtifactError& e) {
    print_error("MissingArtifact", e.what(), e.artifact());
    return 3;
  } catch (const qprel::ConfigError& e) {
    print_error("ConfigError", e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("Failure", e.what());
    return 1;
  }
  return 0;
}
