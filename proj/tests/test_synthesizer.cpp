#include <doctest.h>

#include <cmath>
#include <numeric>

#include "qprel/errors.hpp"
#include "qprel/synthesizer.hpp"

using namespace qprel;

namespace {

const World& world() {
  static const World w = gen_world(CorpusConfig{}, 31);
  return w;
}

const std::vector<LabeledPair>& seeds() {
  static const std::vector<LabeledPair> s = gen_pairs(world(), 600, 2);
  return s;
}

Label oracle(const Query& q, const Product& p) { return oracle_label(world(), q, p).label; }

}  // namespace

TEST_CASE("compatibility table and names") {
  CHECK(is_compatible({ErrorKind::NonEssentialDrop, Label::Relevant}));
  CHECK_FALSE(is_compatible({ErrorKind::NonEssentialDrop, Label::Irrelevant}));
  CHECK_FALSE(is_compatible({ErrorKind::CategorySwap, Label::Relevant}));
  for (const ErrorType t : kErrorTypes) {
    CHECK(error_type_from_name(error_type_name(t)) == t);
  }
  CHECK(error_type_name(kErrorTypes[0]) == "BrandSwap/Irrelevant");
  CHECK_THROWS_AS(error_type_from_name("CategorySwap/Relevant"), IntegrityError);
  CHECK_THROWS_AS(perturb(world(), seeds()[0], {ErrorKind::CategorySwap, Label::Relevant}, 1),
                  ConfigError);
}

TEST_CASE("perturb worked examples") {
  const World& w = world();
  bool brand_done = false, drop_done = false, reject_done = false;
  for (std::size_t i = 0; i < seeds().size(); ++i) {
    const LabeledPair& p = seeds()[i];
    const Assertion* brand = p.query.find(AttrKind::Brand);
    if (!brand_done && p.label == Label::Relevant && brand) {
      const auto out = perturb(w, p, {ErrorKind::BrandSwap, Label::Irrelevant}, i);
      REQUIRE(out.has_value());
      CHECK(out->product.single(AttrKind::Brand) != brand->attribute.value);
      CHECK(oracle_label(w, out->query, out->product).label == Label::Irrelevant);
      CHECK(out->source == Source::DSSynth);
      CHECK(out->product.id >= kSynthProductIdBase);
      CHECK(out->product.title_tokens == render_title(w.vocab, out->product.attributes));
      brand_done = true;
    }
    const Assertion* spec = p.query.find(AttrKind::Spec);
    if (!drop_done && p.label == Label::Relevant && spec && !spec->essential &&
        p.product.has(spec->attribute)) {
      const auto out = perturb(w, p, {ErrorKind::NonEssentialDrop, Label::Relevant}, i);
      REQUIRE(out.has_value());
      CHECK_FALSE(out->product.has(spec->attribute));
      CHECK(out->label == Label::Relevant);
      drop_done = true;
    }
    if (!reject_done && p.query.assertions.size() == 1) {
      CHECK_FALSE(perturb(w, p, {ErrorKind::EssentialDrop, Label::Irrelevant}, i).has_value());
      reject_done = true;
    }
  }
  CHECK(brand_done);
  CHECK(drop_done);
  CHECK(reject_done);
}

TEST_CASE("synthetic labels are sound over 10k pairs") {
  const SynthResult r = synthesize(world(), seeds(), ErrorProfile::uniform(), 10000, 5);
  CHECK(r.pairs.size() + r.rejected == 10000);
  CHECK(r.pairs.size() >= 10000 * 9 / 10);
  std::size_t unsound = 0;
  for (const auto& s : r.pairs) {
    unsound += oracle(s.pair.query, s.pair.product) != s.pair.label ? 1 : 0;
    CHECK(s.pair.label == s.type.target);
  }
  CHECK(unsound == 0);
}

TEST_CASE("synthesize follows the profile and is deterministic") {
  ErrorProfile cat;
  cat.weights[error_type_index({ErrorKind::CategorySwap, Label::Irrelevant})] = 1.0;
  const SynthResult only = synthesize(world(), seeds(), cat, 200, 1);
  for (const auto& s : only.pairs) {
    const OracleResult r = oracle_label(world(), s.pair.query, s.pair.product);
    CHECK(r.label == Label::Irrelevant);
    CHECK(r.reasons.front().outcome == Outcome::Mismatch);
  }

  ErrorProfile mixed;
  mixed.weights = {0.2, 0.1, 0.05, 0.05, 0.1, 0.1, 0.1, 0.1, 0.2};
  const SynthResult r = synthesize(world(), seeds(), mixed, 1000, 2);
  REQUIRE(r.rejected < 50);
  for (std::size_t i = 0; i < kNumErrorTypes; ++i) {
    const double f = static_cast<double>(r.type_counts[i]) / static_cast<double>(r.pairs.size());
    CHECK(std::abs(f - mixed.weights[i]) <= 0.05);
  }
  CHECK(synthesize(world(), seeds(), mixed, 1000, 2).pairs == r.pairs);

  CHECK_THROWS_AS(synthesize(world(), seeds(), ErrorProfile{}, 10, 1), ConfigError);
  CHECK_THROWS_AS(synthesize(world(), {}, mixed, 10, 1), ConfigError);
}

TEST_CASE("mine_error_types") {
  const auto eval = gen_pairs(world(), 800, 9);
  const ErrorProfile perfect = mine_error_types(world(), oracle, eval);
  CHECK(perfect.uniform_fallback);
  CHECK(std::accumulate(perfect.weights.begin(), perfect.weights.end(), 0.0) ==
        doctest::Approx(1.0).epsilon(1e-9));

  // Fails exactly the brand-mismatch pairs whose category matches.
  const Judge brand_blind = [](const Query& q, const Product& p) {
    const OracleResult r = oracle_label(world(), q, p);
    const Assertion* b = q.find(AttrKind::Brand);
    const bool cat_ok = r.reasons.front().outcome == Outcome::Match;
    if (cat_ok && b && !p.has(b->attribute)) return Label::Relevant;
    return r.label;
  };
  const ErrorProfile prof = mine_error_types(world(), brand_blind, eval);
  REQUIRE(prof.attributed > 0);
  CHECK_FALSE(prof.uniform_fallback);
  CHECK(prof.weight({ErrorKind::BrandSwap, Label::Irrelevant}) == 1.0);
  double sum = 0.0;
  for (double x : prof.weights) {
    CHECK(x >= 0.0);
    sum += x;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("select_confusing and filter_candidates equal brute force") {
  const SynthResult r = synthesize(world(), seeds(), ErrorProfile::uniform(), 500, 8);
  const Judge student = [](const Query& q, const Product& p) {
    return (q.id * 7 + p.id) % 2 == 0 ? Label::Relevant : Label::Irrelevant;
  };
  const auto picked = select_confusing(student, r.pairs);
  std::vector<SynthPair> expected;
  for (const auto& c : r.pairs) {
    if (student(c.pair.query, c.pair.product) != c.pair.label) expected.push_back(c);
  }
  CHECK(picked == expected);
  CHECK(select_confusing(student, picked) == picked);
  CHECK(select_confusing(oracle, r.pairs).empty());

  const auto kept = filter_candidates(student, picked);
  CHECK(kept.empty());
  const auto all = filter_candidates(oracle, r.pairs);
  CHECK(all == r.pairs);
  const Judge noisy = [](const Query& q, const Product& p) {
    const Label l = oracle(q, p);
    return q.id % 5 == 0 ? (l == Label::Relevant ? Label::Irrelevant : Label::Relevant) : l;
  };
  const auto filtered = filter_candidates(noisy, r.pairs);
  std::size_t disagree = 0;
  for (const auto& c : filtered) disagree += noisy(c.pair.query, c.pair.product) != c.pair.label;
  CHECK(disagree == 0);
  CHECK(filtered.size() < r.pairs.size());
}
