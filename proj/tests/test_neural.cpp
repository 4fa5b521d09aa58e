#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "qprel/errors.hpp"
#include "qprel/neural.hpp"
#include "qprel/rng.hpp"

using namespace qprel;
using namespace qprel::nn;

namespace {

ModelConfig tiny(bool causal, int vocab = 16) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.max_len = 12;
  c.hidden_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.causal = causal;
  return c;
}

std::size_t find_param(const ParamSet& ps, const std::string& name) {
  for (std::size_t i = 0; i < ps.count(); ++i) {
    if (ps[i].name == name) return i;
  }
  FAIL("no parameter " << name);
  return 0;
}

std::vector<int> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::size_t>(vocab)));
  return t;
}

}  // namespace

TEST_CASE("init is deterministic, finite and bounded") {
  const ModelConfig c = tiny(false);
  const EncoderModel a(c, 3), b(c, 3), other(c, 4);
  for (std::size_t i = 0; i < a.params().count(); ++i) {
    CHECK(a.params()[i].value == b.params()[i].value);
  }
  CHECK(a.params()[0].value != other.params()[0].value);
  CHECK(a.params().all_finite());
  for (const auto& t : a.params().tensors()) {
    if (t.init_bound > 0.0) {
      CHECK(t.value.cwiseAbs().maxCoeff() <= t.init_bound);
    }
  }
  ModelConfig bad = tiny(false);
  bad.hidden_dim = 64;
  bad.n_heads = 5;
  CHECK_THROWS_AS(EncoderModel(bad, 1), ConfigError);
}

TEST_CASE("encoder outputs a distribution and is order sensitive") {
  const EncoderModel m(tiny(false), 1);
  const std::vector<int> a{1, 5, 6, 2, 7, 8, 9};
  std::vector<int> b = a;
  std::swap(b[4], b[6]);
  const EncoderTrace ta = m.encode(a);
  const EncoderTrace tb = m.encode(b);
  CHECK(ta.probs.sum() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK((ta.probs.array() >= 0.0).all());
  CHECK((ta.cls - tb.cls).norm() > 1e-9);

  const std::vector<int> longer = random_tokens(30, 16, 2);
  const EncoderTrace tl = m.encode(longer);
  CHECK(tl.core.tokens.size() == 12);

  const std::vector<int> bad{1, 99};
  CHECK_THROWS_AS(m.encode(bad), DimensionError);
}

TEST_CASE("decoder is causal and its rows are distributions") {
  const DecoderModel m(tiny(true), 2);
  std::vector<int> seq = random_tokens(10, 16, 3);
  seq[3] = 2;  // a separator changes later segment ids
  const DecoderTrace t1 = m.forward(seq);
  for (Eigen::Index i = 0; i < t1.log_probs.rows(); ++i) {
    CHECK(t1.log_probs.row(i).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-6));
  }
  for (std::size_t j = 0; j < seq.size(); ++j) {
    std::vector<int> alt = seq;
    alt[j] = (alt[j] + 5) % 16;
    const DecoderTrace t2 = m.forward(alt);
    for (std::size_t i = 0; i < j; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      CHECK((t1.log_probs.row(r) - t2.log_probs.row(r)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("greedy decoding agrees with the full forward pass") {
  const DecoderModel m(tiny(true), 5);
  const std::vector<int> prompt{4, 7, 2, 9, 10, 2};
  const std::vector<int> stops{15};
  const GreedyResult g = m.greedy(prompt, stops);
  std::vector<int> seq = prompt;
  for (int t : g.tokens) {
    const DecoderTrace tr = m.forward(seq);
    Eigen::Index best = 0;
    tr.log_probs.row(tr.log_probs.rows() - 1).maxCoeff(&best);
    CHECK(best == t);
    seq.push_back(t);
  }
  CHECK(m.greedy(prompt, stops).tokens == g.tokens);
  CHECK(seq.size() <= 12);
}

TEST_CASE("segment ids advance after each separator") {
  const DecoderModel m(tiny(true), 1);
  const std::vector<int> t{4, 7, 2, 8, 2, 9, 2, 3};
  CHECK(m.segments_of(t) == std::vector<int>{0, 0, 0, 1, 1, 2, 2, 2});
}

TEST_CASE("ce_loss worked examples") {
  RowVec p(2), y(2);
  p << 1.0, 0.0;
  y << 1.0, 0.0;
  CHECK(ce_loss(p, y).value == doctest::Approx(0.0));
  p << 0.8, 0.2;
  CHECK(ce_loss(p, y).value == doctest::Approx(0.2231).epsilon(1e-4));
  p << 0.5, 0.5;
  y << 0.0, 1.0;
  CHECK(ce_loss(p, y).value == doctest::Approx(0.6931).epsilon(1e-4));
  p << 1.0, 0.0;
  CHECK(std::isfinite(ce_loss(p, y).value));
  CHECK(ce_loss(p, y).value == doctest::Approx(-std::log(kProbEpsilon)));
}

TEST_CASE("lm_loss of a uniform decoder is ln V") {
  DecoderModel m(tiny(true, 8), 1);
  m.params()[find_param(m.params(), "head_w")].value.setZero();
  m.params()[find_param(m.params(), "head_b")].value.setZero();
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto seq = random_tokens(9, 8, s);
    CHECK(std::abs(lm_loss(m, seq, 0, false) - std::log(8.0)) < 1e-9);
  }
  const std::vector<int> one{4};
  CHECK_THROWS_AS(lm_loss(m, one, 0, false), DimensionError);
}

TEST_CASE("lm_loss gradient matches finite differences") {
  DecoderModel m(tiny(true), 7);
  const auto seq = random_tokens(11, 16, 8);
  const GradCheckResult r = grad_check(
      m.params(), [&](bool g) { return lm_loss(m, seq, 3, g); }, 1e-4, 240, 1);
  CHECK(r.samples == 240);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst_param);
}

TEST_CASE("encoder ce gradient matches finite differences") {
  EncoderModel m(tiny(false), 9);
  const auto seq = random_tokens(10, 16, 10);
  const std::vector<int> seg{0, 0, 0, 0, 1, 1, 1, 2, 2, 2};
  const RowVec y = onehot(1, 2);
  const RowVec zero = RowVec::Zero(8);
  const GradCheckResult r = grad_check(
      m.params(),
      [&](bool g) {
        const EncoderTrace tr = m.encode(seq, seg);
        const ClassLoss l = ce_loss(tr.probs, y);
        if (g) m.backward(tr, l.d_probs, zero);
        return l.value;
      },
      1e-4, 240, 2);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst_param);
}

TEST_CASE("adam: zero gradient is a no-op, quadratic probe descends, runs repeat") {
  ParamSet ps;
  const std::size_t i = ps.add("x", 1, 3);
  ps[i].value << 1.0, -2.0, 0.5;
  const Mat before = ps[i].value;
  Adam opt(ps);
  AdamConfig cfg;
  cfg.lr = 0.01;
  ps.zero_grad();
  opt.step(ps, cfg);
  CHECK(ps[i].value == before);

  auto loss = [&] { return ps[i].value.squaredNorm(); };
  const double l0 = loss();
  ps[i].grad = 2.0 * ps[i].value;
  opt.step(ps, cfg);
  CHECK(loss() < l0);

  auto run = [](std::uint64_t seed) {
    DecoderModel m(tiny(true), seed);
    Adam o(m.params());
    const auto seq = random_tokens(10, 16, 4);
    for (int k = 0; k < 3; ++k) {
      m.params().zero_grad();
      lm_loss(m, seq);
      o.step(m.params(), AdamConfig{});
    }
    return m;
  };
  const DecoderModel a = run(1), b = run(1);
  for (std::size_t k = 0; k < a.params().count(); ++k) {
    CHECK(a.params()[k].value == b.params()[k].value);
  }
}

TEST_CASE("lr schedule decays linearly to zero") {
  TrainConfig c;
  CHECK(lr_scale(c, 0, 10) == doctest::Approx(1.0));
  CHECK(lr_scale(c, 5, 10) == doctest::Approx(0.5));
  c.linear_decay = false;
  CHECK(lr_scale(c, 9, 10) == 1.0);
}

TEST_CASE("checkpoints round-trip losslessly") {
  const auto dir = std::filesystem::temp_directory_path() / "qprel_ckpt_test";
  std::filesystem::create_directories(dir);
  EncoderModel e(tiny(false), 12);
  e.set_steps(42);
  save_checkpoint(e, dir / "e.json");
  const EncoderModel e2 = load_encoder(dir / "e.json");
  CHECK(e2.config() == e.config());
  CHECK(e2.seed() == 12);
  CHECK(e2.steps() == 42);
  for (std::size_t i = 0; i < e.params().count(); ++i) {
    CHECK(e2.params()[i].value == e.params()[i].value);
  }
  DecoderModel d(tiny(true), 13);
  save_checkpoint(d, dir / "d.json");
  CHECK(load_decoder(dir / "d.json").params()[0].value == d.params()[0].value);
  CHECK_THROWS_AS(load_encoder(dir / "d.json"), ConfigError);
  CHECK_THROWS_AS(load_encoder(dir / "missing.json"), MissingArtifactError);
  std::filesystem::remove_all(dir);
}
