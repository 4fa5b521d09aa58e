#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qprel::nn {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

/// Decoder segment ids advance after each occurrence of this token id.
inline constexpr int kSegmentSeparator = 2;

struct ModelConfig {
  int vocab_size = 0;
  int max_len = 48;
  int hidden_dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_dim = 128;
  bool causal = false;
  int n_segments = 3;
  int n_classes = 2;  // encoder head only

  /// Throws ConfigError on non-positive sizes or hidden_dim % n_heads != 0.
  void validate() const;
  int head_dim() const { return hidden_dim / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
  std::string name;
  Mat value;
  Mat grad;
  double init_bound = 0.0;
};

/// Flat registry of every trainable tensor of a model.
class ParamSet {
 public:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols);
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  std::size_t count() const { return tensors_.size(); }
  /// Total number of scalar parameters.
  std::size_t size() const;
  void zero_grad();
  void scale_grad(double factor);
  bool all_finite() const;
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

 private:
  std::vector<Tensor> tensors_;
};

struct LayerNormCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

struct BlockCache {
  LayerNormCache ln1;
  Mat a;       // ln1 output
  Mat qkv;     // n x 3H
  std::vector<Mat> probs;  // per head, n x n
  Mat attn;    // concatenated head outputs, n x H
  LayerNormCache ln2;
  Mat b;       // ln2 output
  Mat u;       // ffn pre-activation
  Mat g;       // gelu(u)
};

struct CoreTrace {
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
  Mat hidden;  // n x H, final layer-norm output
};

/// Shared embedding + transformer stack. Pre-norm blocks, GELU feed-forward,
/// final layer norm.
class Transformer {
 public:
  Transformer() = default;
  Transformer(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  std::uint64_t seed() const { return seed_; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }

 protected:
  CoreTrace forward_core(std::span<const int> tokens, std::span<const int> segments) const;
  /// Accumulates parameter gradients given dL/d(hidden).
  void backward_core(const CoreTrace& trace, const Mat& d_hidden);
  void check_tokens(std::span<const int> tokens) const;

  ModelConfig config_;
  ParamSet params_;
  std::uint64_t seed_ = 0;
  std::int64_t steps_ = 0;

  struct BlockIndex {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
  };
  std::size_t tok_emb_ = 0, pos_emb_ = 0, seg_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  std::vector<BlockIndex> blocks_;
  std::size_t head_w_ = 0, head_b_ = 0;
};

struct EncoderTrace {
  CoreTrace core;
  RowVec cls;     // [CLS] vector, length H
  RowVec logits;  // n_classes
  RowVec probs;   // n_classes, sums to 1
};

/// Bidirectional cross-encoder with a classification head on the [CLS] position.
class EncoderModel : public Transformer {
 public:
  EncoderModel() = default;
  EncoderModel(const ModelConfig& config, std::uint64_t seed);

  /// Inputs longer than max_len are cut at the tail. Segment ids default to 0.
  EncoderTrace encode(std::span<const int> tokens, std::span<const int> segments = {}) const;
  /// Accumulates gradients for dL/dprobs and an extra dL/dcls term.
  void backward(const EncoderTrace& trace, const RowVec& d_probs, const RowVec& d_cls);
};

struct DecoderTrace {
  CoreTrace core;
  Mat log_probs;  // n x vocab; row i is the distribution of the token after position i
};

struct GreedyResult {
  std::vector<int> tokens;  // generated tokens, including the stop token if reached
  bool stopped = false;
};

/// Causal decoder with a token-output head.
class DecoderModel : public Transformer {
 public:
  DecoderModel() = default;
  DecoderModel(const ModelConfig& config, std::uint64_t seed);

  DecoderTrace forward(std::span<const int> input) const;

  /// Sum of log P(tokens[i] | tokens[<i]) over i >= max(start, 1). When
  /// grad_scale != 0, accumulates grad_scale * d(sum)/d(params).
  double target_logprob(std::span<const int> tokens, std::size_t start, double grad_scale);
  double target_logprob(std::span<const int> tokens, std::size_t start) const;

  /// Greedy continuation of `prompt` with a key/value cache. Stops after
  /// emitting any of `stop_tokens` or when the sequence reaches max_len.
  GreedyResult greedy(std::span<const int> prompt, std::span<const int> stop_tokens) const;

  /// Segment of each position: the number of earlier separators, capped at
  /// n_segments - 1.
  std::vector<int> segments_of(std::span<const int> tokens) const;

 private:
  double target_logprob_impl(std::span<const int> tokens, std::size_t start, double grad_scale,
                             bool want_grad);
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline constexpr double kProbEpsilon = 1e-12;

struct ClassLoss {
  double value = 0.0;
  RowVec d_probs;
};

/// -sum_i y_i log(max(p_i, eps)).
ClassLoss ce_loss(const RowVec& probs, const RowVec& onehot);

RowVec onehot(int cls, int n_classes);

/// Mean next-token negative log-likelihood over tokens[start..] (start >= 1;
/// tokens[0] is the context-start token). Accumulates its gradient when
/// `with_grad`.
double lm_loss(DecoderModel& model, std::span<const int> tokens, std::size_t start = 0,
               bool with_grad = true);

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
  bool operator==(const AdamConfig&) const = default;
};

class Adam {
 public:
  explicit Adam(const ParamSet& params);
  /// Applies one step using the gradients stored in `params`.
  void step(ParamSet& params, const AdamConfig& cfg, double lr_scale = 1.0);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Mat> m_, v_;
  std::int64_t t_ = 0;
};

double grad_norm(const ParamSet& params);

/// Minibatch training schedule shared by every training loop.
struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  AdamConfig adam;
  bool linear_decay = true;  // learning rate decays linearly to zero
  std::uint64_t seed = 0;    // shuffling
  bool operator==(const TrainConfig&) const = default;
};

/// Learning-rate multiplier for `step` of `total` under `cfg`.
double lr_scale(const TrainConfig& cfg, std::int64_t step, std::int64_t total);

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t samples = 0;
  std::string worst_param;
};

/// Relative error with an absolute floor: |a - n| / max(|a| + |n|, floor).
inline constexpr double kGradCheckFloor = 1e-6;

/// `loss_fn(true)` must zero and accumulate gradients; `loss_fn(false)` must
/// only evaluate. Samples are spread evenly across tensors.
GradCheckResult grad_check(ParamSet& params, const std::function<double(bool)>& loss_fn,
                           double eps, std::size_t samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const Transformer& model, const std::filesystem::path& path);
EncoderModel load_encoder(const std::filesystem::path& path);
DecoderModel load_decoder(const std::filesystem::path& path);

}  // namespace qprel::nn
