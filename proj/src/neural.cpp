#include "qprel/neural.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

namespace qprel::nn {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, LayerNormCache& cache) {
  const Eigen::Index n = x.rows();
  const auto h = static_cast<double>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / h;
    const double var = (x.row(i).array() - mean).square().sum() / h;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
  }
  Mat y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

Mat layer_norm_backward(const Mat& dy, const LayerNormCache& cache, const Mat& gain, Mat& d_gain,
                        Mat& d_bias) {
  d_gain.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  d_bias.row(0) += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * gain.row(0).array();
  const Eigen::VectorXd mean1 = dxhat.rowwise().mean();
  const Eigen::VectorXd mean2 = dxhat.cwiseProduct(cache.xhat).rowwise().mean();
  Mat dx = dxhat;
  dx.colwise() -= mean1;
  dx -= (cache.xhat.array().colwise() * mean2.array()).matrix();
  dx = dx.array().colwise() * cache.rstd.array();
  return dx;
}

RowVec layer_norm_row(const RowVec& x, const Mat& gain, const Mat& bias) {
  const auto h = static_cast<double>(x.size());
  const double mean = x.sum() / h;
  const double var = (x.array() - mean).square().sum() / h;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  RowVec y = ((x.array() - mean) * rstd).matrix();
  return (y.array() * gain.row(0).array()).matrix() + bias.row(0);
}

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

void softmax_rows_inplace(Mat& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

RowVec softmax_row(const RowVec& x) {
  const double m = x.maxCoeff();
  RowVec e = (x.array() - m).exp().matrix();
  return e / e.sum();
}

void fill_uniform(Mat& m, double bound, Rng& rng) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      m(r, c) = rng.uniform(-bound, bound);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size <= 0 || max_len <= 0 || hidden_dim <= 0 || n_layers <= 0 || n_heads <= 0 ||
      ffn_dim <= 0 || n_segments <= 0 || n_classes <= 0) {
    throw ConfigError("model sizes must be positive");
  }
  if (hidden_dim % n_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

std::size_t ParamSet::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  Tensor t;
  t.name = std::move(name);
  t.value = Mat::Zero(rows, cols);
  t.grad = Mat::Zero(rows, cols);
  tensors_.push_back(std::move(t));
  return tensors_.size() - 1;
}

std::size_t ParamSet::size() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) {
    n += static_cast<std::size_t>(t.value.size());
  }
  return n;
}

void ParamSet::zero_grad() {
  for (auto& t : tensors_) {
    t.grad.setZero();
  }
}

void ParamSet::scale_grad(double factor) {
  for (auto& t : tensors_) {
    t.grad *= factor;
  }
}

bool ParamSet::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const Tensor& t) { return t.value.allFinite(); });
}

// ---------------------------------------------------------------------------

Transformer::Transformer(const ModelConfig& config, std::uint64_t seed)
    : config_(config), seed_(seed) {
  config_.validate();
  const Eigen::Index H = config_.hidden_dim;
  const Eigen::Index F = config_.ffn_dim;
  constexpr double kEmbBound = 0.5;

  std::vector<std::size_t> random_init;
  auto weight = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const std::size_t i = params_.add(name, rows, cols);
    params_[i].init_bound = 1.0 / std::sqrt(static_cast<double>(rows));
    random_init.push_back(i);
    return i;
  };
  auto zeros = [&](const std::string& name, Eigen::Index cols) {
    return params_.add(name, 1, cols);
  };
  auto ones = [&](const std::string& name, Eigen::Index cols) {
    const std::size_t i = params_.add(name, 1, cols);
    params_[i].value.setOnes();
    params_[i].init_bound = 1.0;
    return i;
  };

  tok_emb_ = params_.add("tok_emb", config_.vocab_size, H);
  pos_emb_ = params_.add("pos_emb", config_.max_len, H);
  seg_emb_ = params_.add("seg_emb", config_.n_segments, H);
  for (auto i : {tok_emb_, pos_emb_, seg_emb_}) {
    params_[i].init_bound = kEmbBound;
    random_init.push_back(i);
  }
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockIndex b{};
    b.ln1_g = ones(p + "ln1_g", H);
    b.ln1_b = zeros(p + "ln1_b", H);
    b.w_qkv = weight(p + "w_qkv", H, 3 * H);
    b.b_qkv = zeros(p + "b_qkv", 3 * H);
    b.w_o = weight(p + "w_o", H, H);
    b.b_o = zeros(p + "b_o", H);
    b.ln2_g = ones(p + "ln2_g", H);
    b.ln2_b = zeros(p + "ln2_b", H);
    b.w_1 = weight(p + "w_1", H, F);
    b.b_1 = zeros(p + "b_1", F);
    b.w_2 = weight(p + "w_2", F, H);
    b.b_2 = zeros(p + "b_2", H);
    blocks_.push_back(b);
  }
  lnf_g_ = ones("lnf_g", H);
  lnf_b_ = zeros("lnf_b", H);
  const Eigen::Index out = config_.causal ? config_.vocab_size : config_.n_classes;
  head_w_ = weight("head_w", H, out);
  head_b_ = zeros("head_b", out);

  for (std::size_t i : random_init) {
    Rng rng(derive_seed(seed, Stream::Init, i));
    fill_uniform(params_[i].value, params_[i].init_bound, rng);
  }
}

void Transformer::check_tokens(std::span<const int> tokens) const {
  for (int t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary of size " +
                           std::to_string(config_.vocab_size));
    }
  }
}

CoreTrace Transformer::forward_core(std::span<const int> tokens,
                                    std::span<const int> segments) const {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index H = config_.hidden_dim;
  const int d = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  CoreTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.segments.assign(n, 0);
  for (Eigen::Index i = 0; i < n && i < static_cast<Eigen::Index>(segments.size()); ++i) {
    const int s = segments[static_cast<std::size_t>(i)];
    if (s < 0 || s >= config_.n_segments) {
      throw DimensionError("segment id out of range");
    }
    tr.segments[static_cast<std::size_t>(i)] = s;
  }

  const Mat& tok = params_[tok_emb_].value;
  const Mat& pos = params_[pos_emb_].value;
  const Mat& seg = params_[seg_emb_].value;
  Mat x(n, H);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = tok.row(tr.tokens[static_cast<std::size_t>(i)]) + pos.row(i) +
               seg.row(tr.segments[static_cast<std::size_t>(i)]);
  }

  tr.blocks.resize(blocks_.size());
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const BlockIndex& bi = blocks_[l];
    BlockCache& c = tr.blocks[l];
    c.a = layer_norm(x, params_[bi.ln1_g].value, params_[bi.ln1_b].value, c.ln1);
    c.qkv = c.a * params_[bi.w_qkv].value;
    c.qkv.rowwise() += params_[bi.b_qkv].value.row(0);
    c.attn.resize(n, H);
    c.probs.resize(static_cast<std::size_t>(config_.n_heads));
    for (int h = 0; h < config_.n_heads; ++h) {
      const auto q = c.qkv.middleCols(h * d, d);
      const auto k = c.qkv.middleCols(H + h * d, d);
      const auto v = c.qkv.middleCols(2 * H + h * d, d);
      Mat s = (q * k.transpose()) * scale;
      if (config_.causal) {
        for (Eigen::Index i = 0; i < n; ++i) {
          for (Eigen::Index j = i + 1; j < n; ++j) {
            s(i, j) = -std::numeric_limits<double>::infinity();
          }
        }
      }
      softmax_rows_inplace(s);
      c.attn.middleCols(h * d, d) = s * v;
      c.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    x += c.attn * params_[bi.w_o].value;
    x.rowwise() += params_[bi.b_o].value.row(0);

    c.b = layer_norm(x, params_[bi.ln2_g].value, params_[bi.ln2_b].value, c.ln2);
    c.u = c.b * params_[bi.w_1].value;
    c.u.rowwise() += params_[bi.b_1].value.row(0);
    c.g = c.u.unaryExpr([](double u) { return gelu(u); });
    x += c.g * params_[bi.w_2].value;
    x.rowwise() += params_[bi.b_2].value.row(0);
  }
  tr.hidden = layer_norm(x, params_[lnf_g_].value, params_[lnf_b_].value, tr.final_ln);
  return tr;
}

void Transformer::backward_core(const CoreTrace& tr, const Mat& d_hidden) {
  const auto n = static_cast<Eigen::Index>(tr.tokens.size());
  const Eigen::Index H = config_.hidden_dim;
  const int d = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  auto& P = params_;

  Mat dx = layer_norm_backward(d_hidden, tr.final_ln, P[lnf_g_].value, P[lnf_g_].grad,
                               P[lnf_b_].grad);

  for (std::size_t li = blocks_.size(); li-- > 0;) {
    const BlockIndex& bi = blocks_[li];
    const BlockCache& c = tr.blocks[li];

    // Feed-forward residual branch.
    P[bi.w_2].grad.noalias() += c.g.transpose() * dx;
    P[bi.b_2].grad.row(0) += dx.colwise().sum();
    Mat du = dx * P[bi.w_2].value.transpose();
    du.array() *= c.u.unaryExpr([](double u) { return gelu_grad(u); }).array();
    P[bi.w_1].grad.noalias() += c.b.transpose() * du;
    P[bi.b_1].grad.row(0) += du.colwise().sum();
    const Mat d_b = du * P[bi.w_1].value.transpose();
    dx += layer_norm_backward(d_b, c.ln2, P[bi.ln2_g].value, P[bi.ln2_g].grad, P[bi.ln2_b].grad);

    // Attention residual branch.
    P[bi.w_o].grad.noalias() += c.attn.transpose() * dx;
    P[bi.b_o].grad.row(0) += dx.colwise().sum();
    const Mat d_attn = dx * P[bi.w_o].value.transpose();
    Mat d_qkv(n, 3 * H);
    for (int h = 0; h < config_.n_heads; ++h) {
      const Mat& p = c.probs[static_cast<std::size_t>(h)];
      const auto q = c.qkv.middleCols(h * d, d);
      const auto k = c.qkv.middleCols(H + h * d, d);
      const auto v = c.qkv.middleCols(2 * H + h * d, d);
      const auto d_o = d_attn.middleCols(h * d, d);
      const Mat d_p = d_o * v.transpose();
      d_qkv.middleCols(2 * H + h * d, d) = p.transpose() * d_o;
      const Eigen::VectorXd row_dot = d_p.cwiseProduct(p).rowwise().sum();
      Mat d_s = d_p;
      d_s.colwise() -= row_dot;
      d_s = d_s.cwiseProduct(p) * scale;
      d_qkv.middleCols(h * d, d) = d_s * k;
      d_qkv.middleCols(H + h * d, d) = d_s.transpose() * q;
    }
    P[bi.w_qkv].grad.noalias() += c.a.transpose() * d_qkv;
    P[bi.b_qkv].grad.row(0) += d_qkv.colwise().sum();
    const Mat d_a = d_qkv * P[bi.w_qkv].value.transpose();
    dx += layer_norm_backward(d_a, c.ln1, P[bi.ln1_g].value, P[bi.ln1_g].grad, P[bi.ln1_b].grad);
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    P[tok_emb_].grad.row(tr.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    P[pos_emb_].grad.row(i) += dx.row(i);
    P[seg_emb_].grad.row(tr.segments[static_cast<std::size_t>(i)]) += dx.row(i);
  }
}

// ---------------------------------------------------------------------------

EncoderModel::EncoderModel(const ModelConfig& config, std::uint64_t seed)
    : Transformer([&] {
        if (config.causal) {
          throw ConfigError("encoder config must not be causal");
        }
        return config;
      }(), seed) {}

EncoderTrace EncoderModel::encode(std::span<const int> tokens,
                                  std::span<const int> segments) const {
  if (tokens.empty()) {
    throw DimensionError("encoder input is empty");
  }
  const auto limit = static_cast<std::size_t>(config_.max_len);
  if (tokens.size() > limit) {
    tokens = tokens.first(limit);
  }
  if (segments.size() > tokens.size()) {
    segments = segments.first(tokens.size());
  }
  check_tokens(tokens);
  EncoderTrace tr;
  tr.core = forward_core(tokens, segments);
  tr.cls = tr.core.hidden.row(0);
  tr.logits = tr.cls * params_[head_w_].value + params_[head_b_].value.row(0);
  tr.probs = softmax_row(tr.logits);
  return tr;
}

void EncoderModel::backward(const EncoderTrace& tr, const RowVec& d_probs, const RowVec& d_cls) {
  if (d_probs.size() != tr.probs.size() || d_cls.size() != tr.cls.size()) {
    throw DimensionError("encoder backward: gradient shape mismatch");
  }
  const double dot = d_probs.dot(tr.probs);
  const RowVec d_logits = (tr.probs.array() * (d_probs.array() - dot)).matrix();
  params_[head_w_].grad.noalias() += tr.cls.transpose() * d_logits;
  params_[head_b_].grad.row(0) += d_logits;
  Mat d_hidden = Mat::Zero(tr.core.hidden.rows(), tr.core.hidden.cols());
  d_hidden.row(0) = d_logits * params_[head_w_].value.transpose() + d_cls;
  backward_core(tr.core, d_hidden);
}

// ---------------------------------------------------------------------------

DecoderModel::DecoderModel(const ModelConfig& config, std::uint64_t seed)
    : Transformer([&] {
        if (!config.causal) {
          throw ConfigError("decoder config must be causal");
        }
        return config;
      }(), seed) {}

std::vector<int> DecoderModel::segments_of(std::span<const int> tokens) const {
  std::vector<int> seg(tokens.size());
  int s = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    seg[i] = s;
    if (tokens[i] == kSegmentSeparator) {
      s = std::min(s + 1, config_.n_segments - 1);
    }
  }
  return seg;
}

DecoderTrace DecoderModel::forward(std::span<const int> input) const {
  if (input.empty()) {
    throw DimensionError("decoder input is empty");
  }
  if (input.size() > static_cast<std::size_t>(config_.max_len)) {
    throw DimensionError("decoder input of length " + std::to_string(input.size()) +
                         " exceeds max_len " + std::to_string(config_.max_len));
  }
  check_tokens(input);
  DecoderTrace tr;
  const std::vector<int> seg = segments_of(input);
  tr.core = forward_core(input, seg);
  Mat logits = tr.core.hidden * params_[head_w_].value;
  logits.rowwise() += params_[head_b_].value.row(0);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    logits.row(i).array() -= lse;
  }
  tr.log_probs = std::move(logits);
  return tr;
}

double DecoderModel::target_logprob_impl(std::span<const int> tokens, std::size_t start,
                                         double grad_scale, bool want_grad) {
  start = std::max<std::size_t>(start, 1);
  if (tokens.size() <= start) {
    throw DimensionError("no target positions in sequence");
  }
  check_tokens(tokens);
  const auto input = tokens.first(tokens.size() - 1);
  const DecoderTrace tr = forward(input);
  double sum = 0.0;
  for (std::size_t i = start; i < tokens.size(); ++i) {
    sum += tr.log_probs(static_cast<Eigen::Index>(i - 1), tokens[i]);
  }
  if (want_grad && grad_scale != 0.0) {
    Mat d_logits = Mat::Zero(tr.log_probs.rows(), tr.log_probs.cols());
    for (std::size_t i = start; i < tokens.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i - 1);
      d_logits.row(r) = -grad_scale * tr.log_probs.row(r).array().exp();
      d_logits(r, tokens[i]) += grad_scale;
    }
    params_[head_w_].grad.noalias() += tr.core.hidden.transpose() * d_logits;
    params_[head_b_].grad.row(0) += d_logits.colwise().sum();
    const Mat d_hidden = d_logits * params_[head_w_].value.transpose();
    backward_core(tr.core, d_hidden);
  }
  return sum;
}

double DecoderModel::target_logprob(std::span<const int> tokens, std::size_t start,
                                    double grad_scale) {
  return target_logprob_impl(tokens, start, grad_scale, true);
}

double DecoderModel::target_logprob(std::span<const int> tokens, std::size_t start) const {
  return const_cast<DecoderModel*>(this)->target_logprob_impl(tokens, start, 0.0, false);
}

GreedyResult DecoderModel::greedy(std::span<const int> prompt,
                                  std::span<const int> stop_tokens) const {
  const auto max_len = static_cast<std::size_t>(config_.max_len);
  if (prompt.empty() || prompt.size() > max_len) {
    throw DimensionError("greedy: prompt length must lie in [1, max_len]");
  }
  check_tokens(prompt);
  const Eigen::Index H = config_.hidden_dim;
  const int d = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const auto& P = params_;

  std::vector<Mat> k_cache(blocks_.size(), Mat(config_.max_len, H));
  std::vector<Mat> v_cache(blocks_.size(), Mat(config_.max_len, H));

  int segment = 0;
  auto step = [&](int token, Eigen::Index pos) -> RowVec {
    RowVec x = P[tok_emb_].value.row(token) + P[pos_emb_].value.row(pos) +
               P[seg_emb_].value.row(segment);
    if (token == kSegmentSeparator) {
      segment = std::min(segment + 1, config_.n_segments - 1);
    }
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const BlockIndex& bi = blocks_[l];
      const RowVec a = layer_norm_row(x, P[bi.ln1_g].value, P[bi.ln1_b].value);
      const RowVec qkv = a * P[bi.w_qkv].value + P[bi.b_qkv].value.row(0);
      k_cache[l].row(pos) = qkv.segment(H, H);
      v_cache[l].row(pos) = qkv.segment(2 * H, H);
      RowVec attn(H);
      for (int h = 0; h < config_.n_heads; ++h) {
        const auto q = qkv.segment(h * d, d);
        const auto keys = k_cache[l].block(0, h * d, pos + 1, d);
        const auto vals = v_cache[l].block(0, h * d, pos + 1, d);
        RowVec s = (q * keys.transpose()) * scale;
        s = softmax_row(s);
        attn.segment(h * d, d) = s * vals;
      }
      x += attn * P[bi.w_o].value + P[bi.b_o].value.row(0);
      const RowVec b = layer_norm_row(x, P[bi.ln2_g].value, P[bi.ln2_b].value);
      RowVec u = b * P[bi.w_1].value + P[bi.b_1].value.row(0);
      u = u.unaryExpr([](double v) { return gelu(v); });
      x += u * P[bi.w_2].value + P[bi.b_2].value.row(0);
    }
    const RowVec y = layer_norm_row(x, P[lnf_g_].value, P[lnf_b_].value);
    return y * P[head_w_].value + P[head_b_].value.row(0);
  };

  RowVec logits;
  Eigen::Index pos = 0;
  for (int t : prompt) {
    logits = step(t, pos++);
  }
  GreedyResult out;
  while (true) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    const int next = static_cast<int>(best);
    out.tokens.push_back(next);
    if (std::find(stop_tokens.begin(), stop_tokens.end(), next) != stop_tokens.end()) {
      out.stopped = true;
      break;
    }
    if (static_cast<std::size_t>(pos) + 1 >= max_len) {
      break;
    }
    logits = step(next, pos++);
  }
  return out;
}

// ---------------------------------------------------------------------------

RowVec onehot(int cls, int n_classes) {
  if (cls < 0 || cls >= n_classes) {
    throw DimensionError("class index out of range");
  }
  RowVec y = RowVec::Zero(n_classes);
  y(cls) = 1.0;
  return y;
}

ClassLoss ce_loss(const RowVec& probs, const RowVec& target) {
  if (probs.size() != target.size()) {
    throw DimensionError("ce_loss: probability and label sizes differ");
  }
  ClassLoss out;
  out.d_probs = RowVec::Zero(probs.size());
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (target(i) == 0.0) {
      continue;
    }
    if (probs(i) > kProbEpsilon) {
      out.value -= target(i) * std::log(probs(i));
      out.d_probs(i) = -target(i) / probs(i);
    } else {
      out.value -= target(i) * std::log(kProbEpsilon);
    }
  }
  return out;
}

double lm_loss(DecoderModel& model, std::span<const int> tokens, std::size_t start,
               bool with_grad) {
  start = std::max<std::size_t>(start, 1);
  if (tokens.size() <= start) {
    throw DimensionError("lm_loss: empty target sequence");
  }
  const double n = static_cast<double>(tokens.size() - start);
  const double lp = with_grad ? model.target_logprob(tokens, start, -1.0 / n)
                              : std::as_const(model).target_logprob(tokens, start);
  return -lp / n;
}

// ---------------------------------------------------------------------------

Adam::Adam(const ParamSet& params) {
  for (const auto& t : params.tensors()) {
    m_.push_back(Mat::Zero(t.value.rows(), t.value.cols()));
    v_.push_back(Mat::Zero(t.value.rows(), t.value.cols()));
  }
}

double grad_norm(const ParamSet& params) {
  double s = 0.0;
  for (const auto& t : params.tensors()) {
    s += t.grad.squaredNorm();
  }
  return std::sqrt(s);
}

double lr_scale(const TrainConfig& cfg, std::int64_t step, std::int64_t total) {
  if (!cfg.linear_decay || total <= 0) {
    return 1.0;
  }
  return std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(total));
}

void Adam::step(ParamSet& params, const AdamConfig& cfg, double lr_scale) {
  if (params.count() != m_.size()) {
    throw DimensionError("optimizer state does not match parameter set");
  }
  ++t_;
  double clip = 1.0;
  if (cfg.grad_clip > 0.0) {
    const double norm = grad_norm(params);
    if (norm > cfg.grad_clip) {
      clip = cfg.grad_clip / norm;
    }
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  const double lr = cfg.lr * lr_scale;
  for (std::size_t i = 0; i < params.count(); ++i) {
    Tensor& t = params[i];
    if (t.grad.rows() != m_[i].rows() || t.grad.cols() != m_[i].cols()) {
      throw DimensionError("optimizer state shape mismatch for " + t.name);
    }
    m_[i] = cfg.beta1 * m_[i] + (1.0 - cfg.beta1) * clip * t.grad;
    v_[i] = cfg.beta2 * v_[i] + (1.0 - cfg.beta2) * (clip * t.grad).cwiseAbs2();
    const Mat update =
        (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg.eps);
    t.value -= lr * update;
    if (cfg.weight_decay > 0.0) {
      t.value -= lr * cfg.weight_decay * t.value;
    }
  }
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(ParamSet& params, const std::function<double(bool)>& loss_fn,
                           double eps, std::size_t samples, std::uint64_t seed) {
  params.zero_grad();
  loss_fn(true);
  std::vector<Mat> analytic;
  for (const auto& t : params.tensors()) {
    analytic.push_back(t.grad);
  }

  GradCheckResult res;
  Rng rng(derive_seed(seed, Stream::GradCheck));
  const std::size_t n_tensors = params.count();
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t ti = s % n_tensors;
    Tensor& t = params[ti];
    const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(t.value.size())));
    double& w = t.value.data()[idx];
    const double w0 = w;
    w = w0 + eps;
    const double fp = loss_fn(false);
    w = w0 - eps;
    const double fm = loss_fn(false);
    w = w0;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[ti].data()[idx];
    const double rel =
        std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), kGradCheckFloor);
    if (rel > res.max_rel_error || res.samples == 0) {
      res.max_rel_error = std::max(res.max_rel_error, rel);
      if (rel >= res.max_rel_error) {
        res.worst_param = t.name + "[" + std::to_string(idx) + "]";
      }
    }
    ++res.samples;
  }
  return res;
}

}  // namespace qprel::nn
