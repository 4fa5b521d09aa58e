#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "qprel/errors.hpp"
#include "qprel/evalkit.hpp"
#include "qprel/rng.hpp"

using namespace qprel;

namespace {

constexpr Label R = Label::Relevant;
constexpr Label I = Label::Irrelevant;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

SeedReport fake_seed(std::uint64_t seed, double base) {
  SeedReport s;
  s.seed = seed;
  for (std::size_t k = 0; k < kNumStages; ++k) {
    s.stages[k] = metrics_from_counts(60 + 3 * k + seed, 20 - k, 15 - k, 70 + seed);
  }
  s.alignment.fn_rate_before = 0.4;
  s.alignment.fn_rate_after = 0.1 + base;
  s.alignment.preferences = 12;
  s.teacher.with_attrs = metrics_from_counts(80, 5, 6, 90);
  s.teacher.plain = metrics_from_counts(75, 9, 8, 88);
  s.alpha = 0.25;
  s.mined = 37;
  s.ds.push_back({0, 100, 3, 20, 18});
  return s;
}

}  // namespace

TEST_CASE("metrics worked examples") {
  const Metrics m = metrics_from_counts(3, 1, 2, 4);
  CHECK(m.precision == 0.75);
  CHECK(m.recall == 0.6);
  CHECK(m.f1 == doctest::Approx(0.6667).epsilon(1e-4));

  const std::vector<Label> truth{R, R, I, I, R};
  CHECK(evaluate(truth, truth).f1 == 1.0);
  CHECK(evaluate(truth, truth).precision == 1.0);

  const std::vector<Label> none(5, I);
  const Metrics z = evaluate(none, truth);
  CHECK(z.precision == 0.0);
  CHECK(z.precision_undefined);
  CHECK(z.recall == 0.0);
  CHECK(z.f1 == 0.0);

  CHECK_THROWS_AS(evaluate(std::vector<Label>{}, std::vector<Label>{}), ConfigError);
  CHECK_THROWS_AS(evaluate(none, std::vector<Label>{R}), ConfigError);
}

TEST_CASE("metrics agree with a brute-force confusion recount") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(200);
    std::vector<Label> pred(n), truth(n);
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = rng.bernoulli(0.5) ? R : I;
      truth[i] = rng.bernoulli(0.5) ? R : I;
      if (pred[i] == R && truth[i] == R) ++tp;
      if (pred[i] == R && truth[i] == I) ++fp;
      if (pred[i] == I && truth[i] == R) ++fn;
      if (pred[i] == I && truth[i] == I) ++tn;
    }
    const Metrics m = evaluate(pred, truth);
    CHECK(m.tp == tp);
    CHECK(m.fp == fp);
    CHECK(m.fn == fn);
    CHECK(m.tn == tn);
    if (tp + fp > 0) CHECK(m.precision == static_cast<double>(tp) / static_cast<double>(tp + fp));
    if (tp + fn > 0) CHECK(m.recall == static_cast<double>(tp) / static_cast<double>(tp + fn));
  }
}

TEST_CASE("sign test") {
  const std::vector<double> up{0.1, 0.2, 0.05};
  const SignTest t = sign_test(up);
  CHECK(t.positive == 3);
  CHECK(t.p_value == 0.125);
  const std::vector<double> mixed{0.1, -0.2, 0.0, 0.3};
  const SignTest m = sign_test(mixed);
  CHECK(m.ties == 1);
  CHECK(m.negative == 1);
  CHECK(m.p_value == 0.5);
  CHECK(sign_test(std::vector<double>{0.0}).p_value == 1.0);
}

TEST_CASE("report aggregation, round trip and stable emission") {
  AblationReport r;
  r.seeds = {fake_seed(1, 0.0), fake_seed(2, 0.01), fake_seed(3, 0.02)};
  aggregate(r);
  double mean0 = 0.0;
  for (const auto& s : r.seeds) mean0 += s.stages[0].f1 / 3.0;
  CHECK(r.mean_f1[0] == doctest::Approx(mean0).epsilon(1e-15));
  CHECK(r.gap_tests[0].positive + r.gap_tests[0].negative + r.gap_tests[0].ties == 3);

  CHECK(report_from_json(to_json(r)) == r);
  CHECK(report_from_json(nlohmann::json::parse(to_json(r).dump())) == r);

  std::istringstream lines(render_table(r));
  std::string line;
  std::size_t seed_rows = 0, mean_rows = 0;
  while (std::getline(lines, line)) {
    if (line.starts_with("mean ") && line.find('+') != std::string::npos) ++mean_rows;
    if (line.starts_with("mean ") && line.find("Base") != std::string::npos) ++mean_rows;
    if (!line.empty() && line[0] >= '1' && line[0] <= '3') ++seed_rows;
  }
  CHECK(seed_rows == 4 * r.seeds.size());
  CHECK(mean_rows == 4);

  const auto dir = std::filesystem::temp_directory_path() / "qprel_report_test";
  std::filesystem::create_directories(dir);
  emit_report(r, dir / "a.json");
  emit_report(r, dir / "b.json");
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
  CHECK(slurp(dir / "a.txt") == slurp(dir / "b.txt"));
  CHECK(report_from_json(nlohmann::json::parse(slurp(dir / "a.json"))) == r);
  std::filesystem::remove_all(dir);
}
