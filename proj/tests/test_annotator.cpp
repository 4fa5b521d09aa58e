#include <doctest.h>

#include <cmath>

#include "qprel/annotator.hpp"
#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

using namespace qprel;

namespace {

const World& world() {
  static const World w = gen_world(CorpusConfig{}, 21);
  return w;
}

nn::ModelConfig tiny_decoder() {
  nn::ModelConfig c;
  c.vocab_size = world().vocab.size();
  c.max_len = 48;
  c.hidden_dim = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.causal = true;
  return c;
}

// Pair whose only unmet assertion is a non-essential one.
LabeledPair gap_pair() {
  const World& w = world();
  for (const auto& p : gen_pairs(w, 2000, 5)) {
    if (only_nonessential_gaps(oracle_label(w, p.query, p.product).reasons)) return p;
  }
  FAIL("no non-essential gap pair generated");
  return {};
}

std::vector<PreferenceExample> prefs_for(const std::vector<LabeledPair>& pairs) {
  std::vector<PreferenceExample> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const CoTRecord c = render_cot(world(), pairs[i], 0.0, i);
    out.push_back({pairs[i].query, pairs[i].product, c.tokens, i % 2 == 0});
  }
  return out;
}

}  // namespace

TEST_CASE("render_cot: unbiased verdicts equal the oracle and parse back exactly") {
  const World& w = world();
  const auto pairs = gen_pairs(w, 500, 1);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const CoTRecord c = render_cot(w, pairs[i], 0.0, i);
    CHECK(c.verdict == pairs[i].label);
    CHECK(c.tokens.back() == verdict_token(c.verdict));
    CHECK(std::count(c.tokens.begin(), c.tokens.end(), verdict_token(c.verdict)) == 1);
    const ParseResult r = parse_cot(w.vocab, c.tokens);
    REQUIRE(r.record.has_value());
    CHECK(*r.record == c);
    CHECK_FALSE(r.repaired);
    CHECK(c.comparisons.size() == pairs[i].query.assertions.size());
  }
}

TEST_CASE("render_cot: strictness one flips non-essential-gap pairs") {
  const LabeledPair p = gap_pair();
  CHECK(p.label == Label::Relevant);
  CHECK(render_cot(world(), p, 1.0, 3).verdict == Label::Irrelevant);
  CHECK(render_cot(world(), p, 0.0, 3).verdict == Label::Relevant);
  const CoTRecord biased = render_cot(world(), p, 1.0, 3);
  CHECK(parse_cot(world().vocab, biased.tokens).record == biased);
  CHECK_THROWS_AS(render_cot(world(), p, 1.5, 3), ConfigError);
}

TEST_CASE("parse_cot: recovery keeps well-formed pieces") {
  const World& w = world();
  const LabeledPair p = gen_pairs(w, 1, 2)[0];
  const CoTRecord c = render_cot(w, p, 0.0, 0);
  std::vector<int> broken = c.tokens;
  broken.insert(broken.begin() + 1, tok::kOutcomeBase);  // stray outcome token
  CHECK_FALSE(parse_cot(w.vocab, broken).record.has_value());
  const ParseResult r = parse_cot(w.vocab, broken, true);
  REQUIRE(r.record.has_value());
  CHECK(r.repaired);
  CHECK(r.record->verdict == c.verdict);

  std::vector<int> no_verdict(c.tokens.begin(), c.tokens.end() - 1);
  CHECK_FALSE(parse_cot(w.vocab, no_verdict, true).record.has_value());
}

TEST_CASE("filter_cot_consistent") {
  const World& w = world();
  const auto pairs = gen_pairs(w, 10, 4);
  std::vector<CoTRecord> cots;
  std::vector<Label> labels;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    cots.push_back(render_cot(w, pairs[i], 0.0, i));
    labels.push_back(pairs[i].label);
  }
  CHECK(filter_cot_consistent(cots, labels) == cots);

  std::vector<Label> flipped;
  for (Label l : labels) flipped.push_back(l == Label::Relevant ? Label::Irrelevant : Label::Relevant);
  CHECK(filter_cot_consistent(cots, flipped).empty());

  std::vector<Label> mixed = labels;
  for (std::size_t i : {1u, 4u, 8u}) mixed[i] = flipped[i];
  const auto kept = filter_cot_consistent(cots, mixed);
  std::vector<CoTRecord> expected;
  for (std::size_t i = 0; i < cots.size(); ++i) {
    if (i != 1 && i != 4 && i != 8) expected.push_back(cots[i]);
  }
  CHECK(kept.size() == 7);
  CHECK(kept == expected);

  const std::vector<Label> short_labels(3, Label::Relevant);
  CHECK_THROWS_AS(filter_cot_consistent(cots, short_labels), DimensionError);
}

TEST_CASE("filter_cot_consistent is idempotent") {
  const World& w = world();
  const auto pairs = gen_pairs(w, 200, 6);
  std::vector<CoTRecord> cots;
  std::vector<Label> labels;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    cots.push_back(render_cot(w, pairs[i], 0.0, i, 0.3));
    labels.push_back(pairs[i].label);
  }
  const auto once = filter_cot_consistent(cots, labels);
  std::vector<Label> kept_labels;
  for (const auto& c : once) kept_labels.push_back(c.verdict);
  CHECK(filter_cot_consistent(once, kept_labels) == once);
  CHECK(once.size() < cots.size());
}

TEST_CASE("cot prompts truncate long titles and keep completion room") {
  const World& w = world();
  LabeledPair p = gen_pairs(w, 1, 8)[0];
  p.product.title_tokens.resize(80, p.product.title_tokens[0]);
  const auto prompt = cot_prompt(p.query, p.product, 48, kCompletionRoom);
  CHECK(prompt.size() <= 48 - kCompletionRoom);
  CHECK(prompt.front() == tok::kBos);
  CHECK(prompt.back() == tok::kSep);
}

TEST_CASE("training lowers the loss; zero epochs leaves the model unchanged") {
  const World& w = world();
  const auto pairs = gen_pairs(w, 40, 9);
  std::vector<CotExample> data;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    data.push_back(make_cot_example(pairs[i].query, pairs[i].product,
                                    render_cot(w, pairs[i], 0.0, i), 48));
  }
  nn::DecoderModel d(tiny_decoder(), 1);
  const nn::DecoderModel before = d;
  nn::TrainConfig cfg;
  cfg.epochs = 0;
  train_cot_model(d, data, cfg);
  CHECK(d.params()[0].value == before.params()[0].value);

  cfg.epochs = 3;
  cfg.adam.lr = 5e-3;
  const LmTrainReport r = train_cot_model(d, data, cfg);
  CHECK(r.probe_loss_after < r.probe_loss_before);
  CHECK_THROWS_AS(train_cot_model(d, std::span<const CotExample>{}, cfg), ConfigError);
}

TEST_CASE("annotate is deterministic and malformed output is Irrelevant") {
  const World& w = world();
  const nn::DecoderModel d(tiny_decoder(), 2);
  const auto pairs = gen_pairs(w, 20, 10);
  for (const auto& p : pairs) {
    const Annotation a = annotate(d, w.vocab, p.query, p.product);
    const Annotation b = annotate(d, w.vocab, p.query, p.product);
    CHECK(a.tokens == b.tokens);
    if (a.malformed) {
      CHECK(a.verdict == Label::Irrelevant);
      CHECK_FALSE(a.record.has_value());
    } else {
      CHECK(a.verdict == a.record->verdict);
    }
  }
}

TEST_CASE("build_preference_set pairs each strict verdict with a Relevant CoT") {
  const World& w = world();
  const ExposureLog ex = simulate_exposures(w, 300, 0.3, 1);
  const PurchaseLog log = simulate_purchases(w, ex, 0.4, 2);
  const nn::DecoderModel d(tiny_decoder(), 3);
  std::size_t k = 0;
  for (const auto& e : log.entries) {
    if (e.purchased && annotate(d, w.vocab, e.query, e.product).verdict == Label::Irrelevant) ++k;
  }
  const auto prefs = build_preference_set(d, log, w, 7);
  CHECK(prefs.size() == 2 * k);
  std::size_t desirable = 0;
  for (const auto& p : prefs) {
    CHECK(oracle_label(w, p.query, p.product).label == Label::Relevant);
    if (p.desirable) {
      ++desirable;
      CHECK(p.completion.back() == tok::kRelevant);
    }
  }
  CHECK(desirable == k);

  PurchaseLog none = log;
  for (auto& e : none.entries) e.purchased = false;
  CHECK(build_preference_set(d, none, w, 7).empty());
}

TEST_CASE("KTO identities") {
  const World& w = world();
  const nn::DecoderModel ref(tiny_decoder(), 4);
  nn::DecoderModel policy = ref;
  const auto prefs = prefs_for(gen_pairs(w, 6, 11));

  KtoConfig cfg;
  cfg.lambda_desirable = 1.0;
  cfg.lambda_undesirable = 2.0;
  const KtoLoss l = kto_loss(policy, ref, prefs, cfg, prefs, 0.0, false);
  double mean_lambda = 0.0;
  for (const auto& p : prefs) mean_lambda += p.desirable ? 1.0 : 2.0;
  mean_lambda /= static_cast<double>(prefs.size());
  CHECK(l.value == 0.5 * mean_lambda);
  for (double r : l.rewards) CHECK(r == 0.0);

  // r - z0 = ln 3 gives v = sigma(ln 3) = 0.75.
  KtoConfig unit;
  unit.beta = 1.0;
  const std::vector<PreferenceExample> one{prefs[0]};
  REQUIRE(one[0].desirable);
  CHECK(kto_loss(policy, ref, one, unit, one, -std::log(3.0), false).value ==
        doctest::Approx(0.25).epsilon(1e-12));
  CHECK(kto_value(std::log(3.0), 0.0, true, unit) == doctest::Approx(0.25).epsilon(1e-12));

  KtoConfig bad;
  bad.beta = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("KTO loss is monotone in the reward") {
  KtoConfig cfg;
  double prev_d = kto_value(-5.0, 0.3, true, cfg);
  double prev_u = kto_value(-5.0, 0.3, false, cfg);
  for (int i = 1; i < 100; ++i) {
    const double r = -5.0 + 10.0 * i / 99.0;
    const double d = kto_value(r, 0.3, true, cfg);
    const double u = kto_value(r, 0.3, false, cfg);
    CHECK(d < prev_d);
    CHECK(u > prev_u);
    prev_d = d;
    prev_u = u;
  }
}

TEST_CASE("align_kto raises desirable rewards; zero epochs is a no-op") {
  const World& w = world();
  const nn::DecoderModel d(tiny_decoder(), 5);
  const auto prefs = prefs_for(gen_pairs(w, 16, 12));
  nn::TrainConfig hyper;
  hyper.epochs = 0;
  const nn::DecoderModel same = align_kto(d, prefs, KtoConfig{}, hyper);
  CHECK(same.params()[0].value == d.params()[0].value);

  hyper.epochs = 4;
  hyper.batch_size = 8;
  hyper.adam.lr = 5e-3;
  AlignReport rep;
  align_kto(d, prefs, KtoConfig{}, hyper, &rep);
  CHECK(rep.mean_reward_desirable_after > rep.mean_reward_desirable_before);
  CHECK_THROWS_AS(align_kto(d, {}, KtoConfig{}, hyper), ConfigError);
}

TEST_CASE("mine_hard equals the brute-force disagreement set") {
  const World& w = world();
  const ExposureLog ex = simulate_exposures(w, 400, 0.5, 3);
  const Judge annotator = [&](const Query& q, const Product& p) {
    return oracle_label(w, q, p).label;
  };
  const Judge student = [](const Query& q, const Product& p) {
    return (q.id + p.id) % 3 == 0 ? Label::Relevant : Label::Irrelevant;
  };
  const MineResult r = mine_hard(annotator, student, ex);
  std::vector<LabeledPair> expected;
  for (const auto& e : ex.entries) {
    const Label a = oracle_label(w, e.query, e.product).label;
    const Label s = (e.query.id + e.product.id) % 3 == 0 ? Label::Relevant : Label::Irrelevant;
    if (a != s) expected.push_back({e.query, e.product, a, Source::RDMined});
  }
  CHECK(r.mined == expected);
  CHECK_FALSE(expected.empty());
  CHECK(mine_hard(annotator, annotator, ex).mined.empty());
}
