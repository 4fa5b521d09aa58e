#include "qprel/distiller.hpp"

#include <algorithm>
#include <numeric>

#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

namespace qprel {

KeyAttrString rewrite_cot(const CoTRecord& cot, std::size_t cap) {
  const int verdict = verdict_token(cot.verdict);
  if (cot.tokens.empty() || cot.tokens.back() != verdict) {
    throw IntegrityError("rewrite_cot: record does not end in its verdict token");
  }
  KeyAttrString out;
  for (const auto& c : cot.comparisons) {
    const auto kind = static_cast<std::size_t>(c.kind());
    const auto outcome = static_cast<std::size_t>(c.outcome);
    if (kind >= kNumKinds || outcome > static_cast<std::size_t>(Outcome::AbsentNonEssential)) {
      throw IntegrityError("rewrite_cot: comparison out of range");
    }
    if (out.tokens.size() + 2 > cap) {
      break;
    }
    out.tokens.push_back(tok::kKeyAttrBase + static_cast<int>(outcome));
    out.tokens.push_back(tok::kKindBase + static_cast<int>(kind));
  }
  return out;
}

EncoderInput teacher_input(const Query& q, const Product& p, const KeyAttrString& attrs,
                           int max_len) {
  const auto limit = static_cast<std::size_t>(max_len);
  std::vector<int> qt = q.tokens;
  std::vector<int> pt = p.title_tokens;
  std::vector<int> at = attrs.tokens;
  const auto total = [&] { return 3 + qt.size() + pt.size() + at.size(); };
  while (total() > limit && !at.empty()) at.pop_back();
  while (total() > limit && !pt.empty()) pt.pop_back();
  while (total() > limit && !qt.empty()) qt.pop_back();

  EncoderInput in;
  in.tokens.push_back(tok::kCls);
  in.tokens.insert(in.tokens.end(), qt.begin(), qt.end());
  in.tokens.push_back(tok::kSep);
  in.segments.assign(in.tokens.size(), 0);
  in.tokens.insert(in.tokens.end(), pt.begin(), pt.end());
  in.tokens.push_back(tok::kSep);
  in.segments.resize(in.tokens.size(), 1);
  in.tokens.insert(in.tokens.end(), at.begin(), at.end());
  in.segments.resize(in.tokens.size(), 2);
  return in;
}

EncoderInput student_input(const Query& q, const Product& p, int max_len) {
  const auto limit = static_cast<std::size_t>(max_len);
  std::vector<int> qt = q.tokens;
  std::vector<int> pt = p.title_tokens;
  while (2 + qt.size() + pt.size() > limit && !pt.empty()) pt.pop_back();
  while (2 + qt.size() + pt.size() > limit && !qt.empty()) qt.pop_back();

  EncoderInput in;
  in.tokens.push_back(tok::kCls);
  in.tokens.insert(in.tokens.end(), qt.begin(), qt.end());
  in.tokens.push_back(tok::kSep);
  in.segments.assign(in.tokens.size(), 0);
  in.tokens.insert(in.tokens.end(), pt.begin(), pt.end());
  in.segments.resize(in.tokens.size(), 1);
  return in;
}

void DistillConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("distill alpha must lie in [0, 1]");
  }
  if (hidden_dim <= 0) {
    throw ConfigError("distill hidden_dim must be positive");
  }
}

void DistillConfig::check(const nn::ModelConfig& teacher, const nn::ModelConfig& student) const {
  validate();
  if (teacher.hidden_dim != hidden_dim || student.hidden_dim != hidden_dim) {
    throw ConfigError("distillation needs teacher and student hidden_dim " +
                      std::to_string(hidden_dim) + ", got " + std::to_string(teacher.hidden_dim) +
                      " and " + std::to_string(student.hidden_dim));
  }
}

DistillLoss distill_loss(const nn::RowVec& y, const nn::RowVec& probs, const nn::RowVec& h,
                         const nn::RowVec& h_hat, double alpha) {
  if (h.size() != h_hat.size() || h.size() == 0) {
    throw DimensionError("distill_loss: teacher and student [CLS] sizes differ (" +
                         std::to_string(h.size()) + " vs " + std::to_string(h_hat.size()) + ")");
  }
  const nn::ClassLoss ce = nn::ce_loss(probs, y);
  const double inv_h = 1.0 / static_cast<double>(h.size());
  const nn::RowVec diff = h_hat - h;
  DistillLoss out;
  out.ce = ce.value;
  out.mse = inv_h * diff.squaredNorm();
  out.value = alpha * out.ce + (1.0 - alpha) * out.mse;
  out.d_probs = alpha * ce.d_probs;
  out.d_cls = ((1.0 - alpha) * 2.0 * inv_h) * diff;
  return out;
}

int label_class(Label l) { return l == Label::Relevant ? 0 : 1; }

Label predict_label(const nn::EncoderTrace& trace) {
  return trace.probs(0) >= trace.probs(1) ? Label::Relevant : Label::Irrelevant;
}

std::vector<Label> predict_all(const nn::EncoderModel& model, std::span<const EncodedExample> data) {
  std::vector<Label> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    out.push_back(predict_label(model.encode(ex.input.tokens, ex.input.segments)));
  }
  return out;
}

Metrics evaluate_encoder(const nn::EncoderModel& model, std::span<const EncodedExample> data) {
  std::vector<Label> truth;
  truth.reserve(data.size());
  for (const auto& ex : data) {
    truth.push_back(ex.label);
  }
  const auto pred = predict_all(model, data);
  return evaluate(pred, truth);
}

nn::EncoderModel train_classifier(nn::EncoderModel model, std::span<const EncodedExample> train,
                                  std::span<const nn::RowVec> teacher_cls, double alpha,
                                  const nn::TrainConfig& hyper,
                                  std::span<const EncodedExample> validation,
                                  ClassifierTrainReport* report) {
  if (train.empty()) {
    throw ConfigError("classifier training set is empty");
  }
  const bool distill = !teacher_cls.empty();
  if (distill && teacher_cls.size() != train.size()) {
    throw DimensionError("teacher [CLS] rows do not match the training set");
  }
  ClassifierTrainReport local;
  ClassifierTrainReport& rep = report ? *report : local;
  rep = ClassifierTrainReport{};

  const int n_classes = model.config().n_classes;
  const nn::RowVec zero_cls = nn::RowVec::Zero(model.config().hidden_dim);
  const auto bs = static_cast<std::size_t>(std::max(1, hyper.batch_size));
  const std::int64_t batches = static_cast<std::int64_t>((train.size() + bs - 1) / bs);
  const std::int64_t total = batches * hyper.epochs;
  nn::Adam opt(model.params());

  std::optional<nn::EncoderModel> best;
  double best_f1 = -1.0;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(hyper.seed, Stream::Shuffle, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0, mse_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t e = std::min(order.size(), b + bs);
      model.params().zero_grad();
      for (std::size_t k = b; k < e; ++k) {
        const std::size_t i = order[k];
        const EncodedExample& ex = train[i];
        const nn::EncoderTrace tr = model.encode(ex.input.tokens, ex.input.segments);
        const nn::RowVec y = nn::onehot(label_class(ex.label), n_classes);
        if (distill) {
          const DistillLoss l = distill_loss(y, tr.probs, teacher_cls[i], tr.cls, alpha);
          loss_sum += l.value;
          mse_sum += l.mse;
          model.backward(tr, l.d_probs, l.d_cls);
        } else {
          const nn::ClassLoss l = nn::ce_loss(tr.probs, y);
          loss_sum += l.value;
          model.backward(tr, l.d_probs, zero_cls);
        }
      }
      model.params().scale_grad(1.0 / static_cast<double>(e - b));
      opt.step(model.params(), hyper.adam, nn::lr_scale(hyper, rep.steps, total));
      ++rep.steps;
    }
    const auto n = static_cast<double>(train.size());
    rep.epoch_loss.push_back(loss_sum / n);
    if (distill) {
      rep.epoch_mse.push_back(mse_sum / n);
    }
    if (!validation.empty()) {
      const double f1 = evaluate_encoder(model, validation).f1;
      rep.val_f1.push_back(f1);
      if (f1 > best_f1) {
        best_f1 = f1;
        rep.best_epoch = epoch;
        best = model;
      }
    }
  }
  model.params().zero_grad();
  model.set_steps(model.steps() + rep.steps);
  if (best) {
    best->params().zero_grad();
    best->set_steps(model.steps());
    return *best;
  }
  return model;
}

std::vector<EncodedExample> teacher_examples(std::span<const LabeledPair> pairs,
                                             std::span<const std::optional<CoTRecord>> cots,
                                             int max_len) {
  if (cots.size() != pairs.size()) {
    throw MissingArtifactError("cot", "teacher data has " + std::to_string(pairs.size()) +
                                          " pairs but " + std::to_string(cots.size()) + " CoTs");
  }
  std::vector<EncodedExample> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!cots[i]) {
      throw MissingArtifactError("cot", "no CoT for training pair " + std::to_string(i));
    }
    out.push_back({teacher_input(pairs[i].query, pairs[i].product, rewrite_cot(*cots[i]), max_len),
                   pairs[i].label});
  }
  return out;
}

std::vector<EncodedExample> student_examples(std::span<const LabeledPair> pairs, int max_len) {
  std::vector<EncodedExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back({student_input(p.query, p.product, max_len), p.label});
  }
  return out;
}

nn::EncoderModel train_teacher(nn::EncoderModel init, std::span<const EncodedExample> train,
                               const nn::TrainConfig& hyper,
                               std::span<const EncodedExample> validation,
                               ClassifierTrainReport* report) {
  return train_classifier(std::move(init), train, {}, 1.0, hyper, validation, report);
}

nn::EncoderModel train_student(const nn::EncoderModel& teacher,
                               std::span<const EncodedExample> teacher_train,
                               nn::EncoderModel init, std::span<const EncodedExample> student_train,
                               const DistillConfig& cfg, const nn::TrainConfig& hyper,
                               std::span<const EncodedExample> validation,
                               ClassifierTrainReport* report) {
  cfg.check(teacher.config(), init.config());
  if (teacher_train.size() != student_train.size()) {
    throw DimensionError("teacher and student training sets differ in size");
  }
  std::vector<nn::RowVec> cls;
  cls.reserve(teacher_train.size());
  for (const auto& ex : teacher_train) {
    cls.push_back(teacher.encode(ex.input.tokens, ex.input.segments).cls);
  }
  return train_classifier(std::move(init), student_train, cls, cfg.alpha, hyper, validation,
                          report);
}

Judge student_judge(const nn::EncoderModel& model) {
  return [&model](const Query& q, const Product& p) {
    const EncoderInput in = student_input(q, p, model.config().max_len);
    return predict_label(model.encode(in.tokens, in.segments));
  };
}

}  // namespace qprel
