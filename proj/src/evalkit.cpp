#include "qprel/evalkit.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "qprel/errors.hpp"
#include "qprel/pipeline.hpp"

namespace qprel {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kNumStages> kStageNames{"Base", "+RD", "+RD+DS",
                                                               "+RD+DS+KD"};
constexpr std::array<std::string_view, 3> kGapNames{"+RD - Base", "+RD+DS - +RD",
                                                    "+RD+DS+KD - +RD+DS"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

json sign_json(const SignTest& t) {
  return json{{"positive", t.positive}, {"negative", t.negative}, {"ties", t.ties},
              {"p_value", t.p_value}};
}

SignTest sign_from(const json& j) {
  SignTest t;
  j.at("positive").get_to(t.positive);
  j.at("negative").get_to(t.negative);
  j.at("ties").get_to(t.ties);
  j.at("p_value").get_to(t.p_value);
  return t;
}

}  // namespace

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.precision_undefined = tp + fp == 0;
  m.recall_undefined = tp + fn == 0;
  m.precision = m.precision_undefined ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = m.recall_undefined ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double s = m.precision + m.recall;
  m.f1 = s > 0.0 ? 2.0 * m.precision * m.recall / s : 0.0;
  return m;
}

Metrics evaluate(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.empty() || predicted.size() != truth.size()) {
    throw ConfigError("evaluate needs equally sized, nonempty prediction and label lists");
  }
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool pred_pos = predicted[i] == Label::Relevant;
    const bool true_pos = truth[i] == Label::Relevant;
    if (pred_pos && true_pos) ++tp;
    else if (pred_pos) ++fp;
    else if (true_pos) ++fn;
    else ++tn;
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

Metrics evaluate(const Judge& model, std::span<const LabeledPair> test_pairs) {
  if (test_pairs.empty()) {
    throw ConfigError("evaluate needs a nonempty test set");
  }
  std::vector<Label> pred, truth;
  pred.reserve(test_pairs.size());
  truth.reserve(test_pairs.size());
  for (const auto& p : test_pairs) {
    pred.push_back(model(p.query, p.product));
    truth.push_back(p.label);
  }
  return evaluate(pred, truth);
}

std::string_view stage_name(Stage s) { return kStageNames[static_cast<std::size_t>(s)]; }

SignTest sign_test(std::span<const double> gaps) {
  SignTest t;
  for (double g : gaps) {
    if (g > 0.0) ++t.positive;
    else if (g < 0.0) ++t.negative;
    else ++t.ties;
  }
  const std::size_t n = t.positive + t.negative;
  double tail = 0.0;
  for (std::size_t i = t.positive; i <= n; ++i) {
    double c = 1.0;
    for (std::size_t k = 0; k < i; ++k) {
      c = c * static_cast<double>(n - k) / static_cast<double>(k + 1);
    }
    tail += c;
  }
  t.p_value = n == 0 ? 1.0 : tail / std::ldexp(1.0, static_cast<int>(n));
  return t;
}

void aggregate(AblationReport& r) {
  r.mean_precision.fill(0.0);
  r.mean_recall.fill(0.0);
  r.mean_f1.fill(0.0);
  r.mean_gaps.fill(0.0);
  r.mean_teacher_attr_f1 = 0.0;
  r.mean_teacher_plain_f1 = 0.0;
  const auto n = static_cast<double>(r.seeds.size());
  std::array<std::vector<double>, 3> gaps;
  for (const auto& s : r.seeds) {
    for (std::size_t k = 0; k < kNumStages; ++k) {
      r.mean_precision[k] += s.stages[k].precision / n;
      r.mean_recall[k] += s.stages[k].recall / n;
      r.mean_f1[k] += s.stages[k].f1 / n;
    }
    for (std::size_t g = 0; g < 3; ++g) {
      gaps[g].push_back(s.stages[g + 1].f1 - s.stages[g].f1);
      r.mean_gaps[g] += gaps[g].back() / n;
    }
    r.mean_teacher_attr_f1 += s.teacher.with_attrs.f1 / n;
    r.mean_teacher_plain_f1 += s.teacher.plain.f1 / n;
  }
  for (std::size_t g = 0; g < 3; ++g) {
    r.gap_tests[g] = sign_test(gaps[g]);
  }
}

json to_json(const Metrics& m) {
  return json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
              {"tp", m.tp},   {"fp", m.fp},   {"fn", m.fn},   {"tn", m.tn},
              {"precision_undefined", m.precision_undefined},
              {"recall_undefined", m.recall_undefined}};
}

Metrics metrics_from_json(const json& j) {
  Metrics m;
  j.at("precision").get_to(m.precision);
  j.at("recall").get_to(m.recall);
  j.at("f1").get_to(m.f1);
  j.at("tp").get_to(m.tp);
  j.at("fp").get_to(m.fp);
  j.at("fn").get_to(m.fn);
  j.at("tn").get_to(m.tn);
  j.at("precision_undefined").get_to(m.precision_undefined);
  j.at("recall_undefined").get_to(m.recall_undefined);
  return m;
}

json to_json(const AblationReport& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json stages = json::object();
    for (Stage st : kAllStages) {
      stages[std::string(stage_name(st))] = to_json(s.stages[static_cast<std::size_t>(st)]);
    }
    json ds = json::array();
    for (const auto& d : s.ds) {
      ds.push_back({{"iteration", d.iteration}, {"generated", d.generated},
                    {"rejected", d.rejected},   {"selected", d.selected},
                    {"filtered", d.filtered}});
    }
    const auto& a = s.alignment;
    seeds.push_back(
        {{"seed", s.seed},
         {"stages", stages},
         {"alignment",
          {{"fn_rate_before", a.fn_rate_before},
           {"fn_rate_after", a.fn_rate_after},
           {"precision_before", a.precision_before},
           {"precision_after", a.precision_after},
           {"mean_reward_desirable_before", a.mean_reward_desirable_before},
           {"mean_reward_desirable_after", a.mean_reward_desirable_after},
           {"preferences", a.preferences}}},
         {"teacher",
          {{"with_attrs", to_json(s.teacher.with_attrs)},
           {"plain", to_json(s.teacher.plain)},
           {"with_attrs_val_f1", s.teacher.with_attrs_val_f1},
           {"plain_val_f1", s.teacher.plain_val_f1}}},
         {"alpha", s.alpha},
         {"mined", s.mined},
         {"ds", ds}});
  }
  json mean = json::object();
  for (Stage st : kAllStages) {
    const auto k = static_cast<std::size_t>(st);
    mean[std::string(stage_name(st))] = {
        {"precision", r.mean_precision[k]}, {"recall", r.mean_recall[k]}, {"f1", r.mean_f1[k]}};
  }
  json gaps = json::array();
  for (std::size_t g = 0; g < 3; ++g) {
    gaps.push_back({{"gap", std::string(kGapNames[g])},
                    {"mean", r.mean_gaps[g]},
                    {"sign_test", sign_json(r.gap_tests[g])}});
  }
  return json{{"format", "qprel-report-v1"},
              {"complete", r.complete},
              {"error", r.error},
              {"seeds", seeds},
              {"mean", mean},
              {"gaps", gaps},
              {"teacher_mean_f1",
               {{"with_attrs", r.mean_teacher_attr_f1}, {"plain", r.mean_teacher_plain_f1}}}};
}

AblationReport report_from_json(const json& j) {
  if (j.value("format", "") != "qprel-report-v1") {
    throw IntegrityError("not a qprel report document");
  }
  AblationReport r;
  j.at("complete").get_to(r.complete);
  j.at("error").get_to(r.error);
  for (const auto& s : j.at("seeds")) {
    SeedReport sr;
    s.at("seed").get_to(sr.seed);
    for (Stage st : kAllStages) {
      sr.stages[static_cast<std::size_t>(st)] =
          metrics_from_json(s.at("stages").at(std::string(stage_name(st))));
    }
    const json& a = s.at("alignment");
    a.at("fn_rate_before").get_to(sr.alignment.fn_rate_before);
    a.at("fn_rate_after").get_to(sr.alignment.fn_rate_after);
    a.at("precision_before").get_to(sr.alignment.precision_before);
    a.at("precision_after").get_to(sr.alignment.precision_after);
    a.at("mean_reward_desirable_before").get_to(sr.alignment.mean_reward_desirable_before);
    a.at("mean_reward_desirable_after").get_to(sr.alignment.mean_reward_desirable_after);
    a.at("preferences").get_to(sr.alignment.preferences);
    const json& t = s.at("teacher");
    sr.teacher.with_attrs = metrics_from_json(t.at("with_attrs"));
    sr.teacher.plain = metrics_from_json(t.at("plain"));
    t.at("with_attrs_val_f1").get_to(sr.teacher.with_attrs_val_f1);
    t.at("plain_val_f1").get_to(sr.teacher.plain_val_f1);
    s.at("alpha").get_to(sr.alpha);
    s.at("mined").get_to(sr.mined);
    for (const auto& d : s.at("ds")) {
      sr.ds.push_back({d.at("iteration").get<int>(), d.at("generated").get<std::size_t>(),
                       d.at("rejected").get<std::size_t>(), d.at("selected").get<std::size_t>(),
                       d.at("filtered").get<std::size_t>()});
    }
    r.seeds.push_back(std::move(sr));
  }
  for (Stage st : kAllStages) {
    const auto k = static_cast<std::size_t>(st);
    const json& m = j.at("mean").at(std::string(stage_name(st)));
    m.at("precision").get_to(r.mean_precision[k]);
    m.at("recall").get_to(r.mean_recall[k]);
    m.at("f1").get_to(r.mean_f1[k]);
  }
  const json& gaps = j.at("gaps");
  for (std::size_t g = 0; g < 3; ++g) {
    gaps.at(g).at("mean").get_to(r.mean_gaps[g]);
    r.gap_tests[g] = sign_from(gaps.at(g).at("sign_test"));
  }
  j.at("teacher_mean_f1").at("with_attrs").get_to(r.mean_teacher_attr_f1);
  j.at("teacher_mean_f1").at("plain").get_to(r.mean_teacher_plain_f1);
  return r;
}

std::string render_table(const AblationReport& r) {
  std::string out;
  out += pad("Seed", 8) + pad("Model", 14) + pad("Precision", 11) + pad("Recall", 11) + "F1\n";
  for (const auto& s : r.seeds) {
    for (Stage st : kAllStages) {
      const Metrics& m = s.stages[static_cast<std::size_t>(st)];
      out += pad(std::to_string(s.seed), 8) + pad(std::string(stage_name(st)), 14) +
             pad(fmt(m.precision), 11) + pad(fmt(m.recall), 11) + fmt(m.f1) + "\n";
    }
  }
  for (Stage st : kAllStages) {
    const auto k = static_cast<std::size_t>(st);
    out += pad("mean", 8) + pad(std::string(stage_name(st)), 14) + pad(fmt(r.mean_precision[k]), 11) +
           pad(fmt(r.mean_recall[k]), 11) + fmt(r.mean_f1[k]) + "\n";
  }
  out += "\n";
  for (std::size_t g = 0; g < 3; ++g) {
    const SignTest& t = r.gap_tests[g];
    out += pad(std::string(kGapNames[g]), 22) + "mean " + fmt(r.mean_gaps[g]) + "  sign +" +
           std::to_string(t.positive) + " -" + std::to_string(t.negative) + " =" +
           std::to_string(t.ties) + "  p " + fmt(t.p_value) + "\n";
  }
  out += pad("Teacher F1", 22) + "with attrs " + fmt(r.mean_teacher_attr_f1) + "  plain " +
         fmt(r.mean_teacher_plain_f1) + "\n";
  if (!r.complete) {
    out += "INCOMPLETE: " + r.error + "\n";
  }
  return out;
}

void emit_report(const AblationReport& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::filesystem::path txt = path;
  txt.replace_extension(".txt");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << to_json(report).dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write report " + path.string());
  }
  std::ofstream out(txt, std::ios::binary | std::ios::trunc);
  out << render_table(report);
  if (!out) throw std::runtime_error("cannot write report table " + txt.string());
}

AblationReport run_ablation(const PipelineConfig& config, std::span<const std::uint64_t> seeds,
                            const std::filesystem::path& out_dir) {
  if (seeds.empty()) {
    throw ConfigError("run_ablation needs at least one seed");
  }
  AblationReport r;
  for (std::uint64_t seed : seeds) {
    try {
      r.seeds.push_back(run_seed(config, seed, seed_dir(out_dir, seed)));
    } catch (const std::exception& e) {
      r.complete = false;
      r.error = "seed " + std::to_string(seed) + ": " + e.what();
      break;
    }
  }
  aggregate(r);
  return r;
}

}  // namespace qprel
