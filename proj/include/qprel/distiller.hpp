#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qprel/annotator.hpp"
#include "qprel/corpus.hpp"
#include "qprel/evalkit.hpp"
#include "qprel/neural.hpp"

namespace qprel {

/// Compact key-attribute rewrite of a CoT. One (marker, kind) token pair per
/// comparison, in comparison order:
///
///   match: k:brand  mismatch: k:model  miss: k:spec  miss*: k:audience
///
/// `miss:` marks an absent essential assertion, `miss*:` an absent
/// non-essential one. Values and the verdict are never included.
struct KeyAttrString {
  std::vector<int> tokens;
  bool operator==(const KeyAttrString&) const = default;
};

inline constexpr std::size_t kKeyAttrCap = 2 * kNumKinds;

/// Throws IntegrityError for a record whose comparisons are out of range or
/// whose token rendering does not end in its verdict.
KeyAttrString rewrite_cot(const CoTRecord& cot, std::size_t cap = kKeyAttrCap);

struct EncoderInput {
  std::vector<int> tokens;
  std::vector<int> segments;
  bool operator==(const EncoderInput&) const = default;
};

/// [CLS] query [SEP] title [SEP] attrs, segments 0 / 1 / 2. Over-length inputs
/// lose attrs from the tail first, then title tokens; the query is kept.
EncoderInput teacher_input(const Query& q, const Product& p, const KeyAttrString& attrs,
                           int max_len);
/// [CLS] query [SEP] title, segments 0 / 1.
EncoderInput student_input(const Query& q, const Product& p, int max_len);

struct DistillConfig {
  double alpha = 0.5;
  int hidden_dim = 64;
  void validate() const;
  /// Throws ConfigError unless both models have hidden_dim == H.
  void check(const nn::ModelConfig& teacher, const nn::ModelConfig& student) const;
  bool operator==(const DistillConfig&) const = default;
};

struct DistillLoss {
  double value = 0.0;
  double ce = 0.0;
  double mse = 0.0;  // (1/H) sum (h - h_hat)^2
  nn::RowVec d_probs;
  nn::RowVec d_cls;
};

/// alpha * CE(y_hat, y) + (1 - alpha) * (1/H) * ||h - h_hat||^2; h is constant.
DistillLoss distill_loss(const nn::RowVec& y, const nn::RowVec& probs, const nn::RowVec& h,
                         const nn::RowVec& h_hat, double alpha);

/// Class index convention: 0 = Relevant, 1 = Irrelevant.
int label_class(Label l);
Label predict_label(const nn::EncoderTrace& trace);

struct EncodedExample {
  EncoderInput input;
  Label label{Label::Relevant};
};

struct ClassifierTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_mse;  // mean MSE term per epoch; empty without a teacher
  std::vector<double> val_f1;     // per epoch; empty without validation data
  int best_epoch = -1;            // -1: final weights kept
  std::int64_t steps = 0;
};

/// Minibatch training of an encoder classifier. With `teacher_cls` (one row
/// per training example) the loss is distill_loss at `alpha`, otherwise
/// plain CE. With validation data, the weights of the epoch with the best
/// validation F1 are returned (earliest on ties).
nn::EncoderModel train_classifier(nn::EncoderModel model, std::span<const EncodedExample> train,
                                  std::span<const nn::RowVec> teacher_cls, double alpha,
                                  const nn::TrainConfig& hyper,
                                  std::span<const EncodedExample> validation,
                                  ClassifierTrainReport* report = nullptr);

/// Teacher examples from pairs and their CoTs (one CoT per pair). A missing
/// CoT throws MissingArtifactError.
std::vector<EncodedExample> teacher_examples(std::span<const LabeledPair> pairs,
                                             std::span<const std::optional<CoTRecord>> cots,
                                             int max_len);
std::vector<EncodedExample> student_examples(std::span<const LabeledPair> pairs, int max_len);

nn::EncoderModel train_teacher(nn::EncoderModel init, std::span<const EncodedExample> train,
                               const nn::TrainConfig& hyper,
                               std::span<const EncodedExample> validation,
                               ClassifierTrainReport* report = nullptr);

/// `teacher_train[i]` and `student_train[i]` must describe the same pair.
nn::EncoderModel train_student(const nn::EncoderModel& teacher,
                               std::span<const EncodedExample> teacher_train,
                               nn::EncoderModel init, std::span<const EncodedExample> student_train,
                               const DistillConfig& cfg, const nn::TrainConfig& hyper,
                               std::span<const EncodedExample> validation,
                               ClassifierTrainReport* report = nullptr);

/// Predictions of an encoder over encoded inputs.
std::vector<Label> predict_all(const nn::EncoderModel& model, std::span<const EncodedExample> data);
Metrics evaluate_encoder(const nn::EncoderModel& model, std::span<const EncodedExample> data);

/// Judge view of a student: scores student_input of each pair.
Judge student_judge(const nn::EncoderModel& model);

}  // namespace qprel
