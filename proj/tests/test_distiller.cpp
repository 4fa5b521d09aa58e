#include <doctest.h>

#include <algorithm>

#include "qprel/distiller.hpp"
#include "qprel/errors.hpp"

using namespace qprel;

namespace {

const World& world() {
  static const World w = gen_world(CorpusConfig{}, 41);
  return w;
}

nn::ModelConfig tiny_encoder(int layers) {
  nn::ModelConfig c;
  c.vocab_size = world().vocab.size();
  c.max_len = 32;
  c.hidden_dim = 8;
  c.n_layers = layers;
  c.n_heads = 2;
  c.ffn_dim = 16;
  return c;
}

nn::RowVec row(std::initializer_list<double> v) {
  nn::RowVec r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

bool is_marker(int t) { return t >= tok::kKeyAttrBase && t < tok::kFirstAttr; }

}  // namespace

TEST_CASE("distill_loss worked example and reductions") {
  const auto y = row({1, 0});
  const auto p = row({0.8, 0.2});
  const DistillLoss l = distill_loss(y, p, row({1, 0}), row({0, 1}), 0.5);
  CHECK(std::abs(l.value - 0.61157) < 1e-5);
  CHECK(l.mse == doctest::Approx(1.0));

  const auto h = row({0.3, -1.2, 0.7});
  const auto hh = row({-0.4, 0.1, 2.0});
  CHECK(distill_loss(y, p, h, hh, 1.0).value == nn::ce_loss(p, y).value);
  CHECK(distill_loss(y, p, h, h, 0.0).value == 0.0);

  // Joint permutation of the [CLS] coordinates leaves the loss unchanged.
  const auto hp = row({0.7, 0.3, -1.2});
  const auto hhp = row({2.0, -0.4, 0.1});
  CHECK(distill_loss(y, p, hp, hhp, 0.3).value ==
        doctest::Approx(distill_loss(y, p, h, hh, 0.3).value).epsilon(1e-15));

  CHECK_THROWS_AS(distill_loss(y, p, h, row({1, 2}), 0.5), DimensionError);
}

TEST_CASE("distill config validation") {
  DistillConfig c;
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.alpha = 0.5;
  c.hidden_dim = 8;
  CHECK_NOTHROW(c.check(tiny_encoder(2), tiny_encoder(1)));
  nn::ModelConfig wide = tiny_encoder(1);
  wide.hidden_dim = 16;
  wide.ffn_dim = 32;
  CHECK_THROWS_AS(c.check(tiny_encoder(2), wide), ConfigError);
}

TEST_CASE("rewrite_cot") {
  const Vocabulary& v = world().vocab;
  const CoTRecord rec = make_cot(
      v, {{AttrKind::Brand, 5}, {AttrKind::Spec, 12}}, {{AttrKind::Brand, 5}},
      {{{AttrKind::Brand, 5}, Outcome::Match}, {{AttrKind::Spec, 12}, Outcome::AbsentNonEssential}},
      Label::Relevant);
  const KeyAttrString k = rewrite_cot(rec);
  const std::vector<int> expected{
      tok::kKeyAttrBase + static_cast<int>(Outcome::Match),
      tok::kKindBase + static_cast<int>(kind_index(AttrKind::Brand)),
      tok::kKeyAttrBase + static_cast<int>(Outcome::AbsentNonEssential),
      tok::kKindBase + static_cast<int>(kind_index(AttrKind::Spec))};
  CHECK(k.tokens == expected);
  CHECK(v.name(k.tokens[0]) == "match:");
  CHECK(v.name(k.tokens[2]) == "miss*:");

  const CoTRecord other = make_cot(
      v, {{AttrKind::Brand, 7}, {AttrKind::Spec, 1}}, {{AttrKind::Brand, 7}, {AttrKind::Spec, 3}},
      {{{AttrKind::Brand, 7}, Outcome::Match}, {{AttrKind::Spec, 1}, Outcome::AbsentNonEssential}},
      Label::Irrelevant);
  CHECK(rewrite_cot(other) == k);

  CoTRecord broken = rec;
  broken.tokens.pop_back();
  CHECK_THROWS_AS(rewrite_cot(broken), IntegrityError);

  for (const auto& p : gen_pairs(world(), 300, 3)) {
    const KeyAttrString ks = rewrite_cot(render_cot(world(), p, 0.5, 1));
    CHECK(ks.tokens.size() <= kKeyAttrCap);
    CHECK(std::find(ks.tokens.begin(), ks.tokens.end(), tok::kRelevant) == ks.tokens.end());
    CHECK(std::find(ks.tokens.begin(), ks.tokens.end(), tok::kIrrelevant) == ks.tokens.end());
  }
}

TEST_CASE("teacher and student input layouts") {
  const LabeledPair p = gen_pairs(world(), 1, 4)[0];
  const KeyAttrString k = rewrite_cot(render_cot(world(), p, 0.0, 0));
  const EncoderInput s = student_input(p.query, p.product, 32);
  const EncoderInput t = teacher_input(p.query, p.product, k, 32);
  CHECK(std::none_of(s.tokens.begin(), s.tokens.end(), is_marker));
  CHECK(s.tokens.front() == tok::kCls);
  CHECK(s.tokens.size() == s.segments.size());

  const EncoderInput bare = teacher_input(p.query, p.product, KeyAttrString{}, 32);
  std::vector<int> with_sep = s.tokens;
  with_sep.push_back(tok::kSep);
  CHECK(bare.tokens == with_sep);
  CHECK(t.tokens.size() == bare.tokens.size() + k.tokens.size());
  CHECK(t.segments.back() == 2);

  Product longp = p.product;
  longp.title_tokens.resize(60, longp.title_tokens.front());
  const EncoderInput ls = student_input(p.query, longp, 32);
  const EncoderInput lt = teacher_input(p.query, longp, k, 32);
  CHECK(ls.tokens.size() == 32);
  CHECK(lt.tokens.size() == 32);
  CHECK(std::equal(p.query.tokens.begin(), p.query.tokens.end(), ls.tokens.begin() + 1));
  CHECK(std::equal(p.query.tokens.begin(), p.query.tokens.end(), lt.tokens.begin() + 1));
}

TEST_CASE("distill_loss gradient through the student matches finite differences") {
  nn::EncoderModel student(tiny_encoder(1), 3);
  const nn::EncoderModel teacher(tiny_encoder(2), 4);
  const LabeledPair p = gen_pairs(world(), 1, 5)[0];
  const EncoderInput in = student_input(p.query, p.product, 32);
  const EncoderInput tin =
      teacher_input(p.query, p.product, rewrite_cot(render_cot(world(), p, 0.0, 0)), 32);
  const nn::RowVec h = teacher.encode(tin.tokens, tin.segments).cls;
  const nn::RowVec y = nn::onehot(label_class(p.label), 2);
  const nn::GradCheckResult r = nn::grad_check(
      student.params(),
      [&](bool g) {
        const nn::EncoderTrace tr = student.encode(in.tokens, in.segments);
        const DistillLoss l = distill_loss(y, tr.probs, h, tr.cls, 0.4);
        if (g) student.backward(tr, l.d_probs, l.d_cls);
        return l.value;
      },
      1e-4, 240, 3);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst_param);
}

TEST_CASE("classifier training: alpha one equals plain CE, teacher learns") {
  const World& w = world();
  const auto train_pairs = gen_pairs(w, 120, 6);
  const auto val_pairs = gen_pairs(w, 120, 7, split_id_base(Split::Validation));
  std::vector<std::optional<CoTRecord>> cots;
  for (std::size_t i = 0; i < train_pairs.size(); ++i) cots.push_back(render_cot(w, train_pairs[i], 0.0, i));
  const auto teacher_train = teacher_examples(train_pairs, cots, 32);
  const auto student_train = student_examples(train_pairs, 32);
  const auto val = student_examples(val_pairs, 32);

  nn::TrainConfig hyper;
  hyper.epochs = 3;
  hyper.adam.lr = 3e-3;
  hyper.seed = 9;
  const nn::EncoderModel teacher =
      train_teacher(nn::EncoderModel(tiny_encoder(2), 1), teacher_train, hyper, {});

  DistillConfig dc;
  dc.hidden_dim = 8;
  dc.alpha = 1.0;
  const nn::EncoderModel init(tiny_encoder(1), 2);
  const nn::EncoderModel a = train_student(teacher, teacher_train, init, student_train, dc, hyper, {});
  const nn::EncoderModel b = train_classifier(init, student_train, {}, 1.0, hyper, {});
  for (std::size_t i = 0; i < a.params().count(); ++i) {
    CHECK(a.params()[i].value == b.params()[i].value);
  }

  dc.alpha = 0.5;
  ClassifierTrainReport rep;
  train_student(teacher, teacher_train, init, student_train, dc, hyper, val, &rep);
  REQUIRE(rep.epoch_mse.size() == 3);
  CHECK(rep.epoch_mse.back() < rep.epoch_mse.front());
  CHECK(rep.val_f1.size() == 3);
  CHECK(rep.best_epoch >= 0);

  std::vector<std::optional<CoTRecord>> missing = cots;
  missing[3].reset();
  CHECK_THROWS_AS(teacher_examples(train_pairs, missing, 32), MissingArtifactError);
}

TEST_CASE("student judge never sees attribute markers") {
  const auto pairs = gen_pairs(world(), 200, 8);
  for (const auto& ex : student_examples(pairs, 32)) {
    CHECK(std::none_of(ex.input.tokens.begin(), ex.input.tokens.end(), is_marker));
  }
}
