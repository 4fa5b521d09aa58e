#include "qprel/annotator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

namespace qprel {

static_assert(tok::kSep == nn::kSegmentSeparator);

namespace {

bool is_outcome_token(int t) { return t >= tok::kOutcomeBase && t < tok::kOutcomeBase + 4; }
bool is_verdict_token(int t) { return t == tok::kRelevant || t == tok::kIrrelevant; }
bool is_marker(int t) {
  return t == tok::kQueryMark || t == tok::kProductMark || t == tok::kCompareMark ||
         t == tok::kVerdictMark;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<int> example_sequence(const PreferenceExample& ex, int max_len,
                                  std::size_t& completion_start) {
  std::vector<int> seq = cot_prompt(ex.query, ex.product, max_len, kCompletionRoom);
  completion_start = seq.size();
  seq.insert(seq.end(), ex.completion.begin(), ex.completion.end());
  if (seq.size() > static_cast<std::size_t>(max_len)) {
    seq.resize(static_cast<std::size_t>(max_len));
  }
  return seq;
}

/// Log-probability of the completion (or only its final token).
double completion_logprob(const nn::DecoderModel& m, const PreferenceExample& ex,
                          const KtoConfig& cfg) {
  std::size_t start = 0;
  const auto seq = example_sequence(ex, m.config().max_len, start);
  if (cfg.verdict_only) {
    start = seq.size() - 1;
  }
  return m.target_logprob(seq, start);
}

double completion_logprob_grad(nn::DecoderModel& m, const PreferenceExample& ex,
                               const KtoConfig& cfg, double grad_scale) {
  std::size_t start = 0;
  const auto seq = example_sequence(ex, m.config().max_len, start);
  if (cfg.verdict_only) {
    start = seq.size() - 1;
  }
  return m.target_logprob(seq, start, grad_scale);
}

/// Shared KTO core; `ref_logp(i, in_ref_batch)` supplies reference log-probs.
template <typename RefFn>
KtoLoss kto_loss_impl(nn::DecoderModel& policy, std::span<const PreferenceExample> batch,
                      const KtoConfig& cfg, std::span<const PreferenceExample> ref_batch,
                      std::optional<double> z0_override, bool with_grad, RefFn&& ref_logp) {
  if (batch.empty()) {
    throw ConfigError("kto_loss requires a nonempty batch");
  }
  KtoLoss out;
  if (z0_override) {
    out.z0 = *z0_override;
  } else if (!ref_batch.empty()) {
    double sum = 0.0;
    for (std::size_t i = 0; i < ref_batch.size(); ++i) {
      sum += completion_logprob(policy, ref_batch[i], cfg) - ref_logp(i, true);
    }
    out.z0 = std::max(0.0, sum / static_cast<double>(ref_batch.size()));
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  out.rewards.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const PreferenceExample& ex = batch[i];
    const double r = completion_logprob(policy, ex, cfg) - ref_logp(i, false);
    out.rewards.push_back(r);
    out.value += kto_value(r, out.z0, ex.desirable, cfg);
    if (with_grad) {
      double dv_dr = 0.0;
      if (ex.desirable) {
        const double s = sigmoid(cfg.beta * (r - out.z0));
        dv_dr = cfg.lambda_desirable * cfg.beta * s * (1.0 - s);
      } else {
        const double s = sigmoid(cfg.beta * (out.z0 - r));
        dv_dr = -cfg.lambda_undesirable * cfg.beta * s * (1.0 - s);
      }
      const double dl_dr = -inv_b * dv_dr;
      if (dl_dr != 0.0) {
        completion_logprob_grad(policy, ex, cfg, dl_dr);
      }
    }
  }
  out.value /= static_cast<double>(batch.size());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

int verdict_token(Label l) { return l == Label::Relevant ? tok::kRelevant : tok::kIrrelevant; }

std::vector<int> render_cot_tokens(const Vocabulary& vocab, const CoTRecord& r) {
  std::vector<int> t;
  t.reserve(5 + r.query_attrs.size() + r.product_attrs.size() + 2 * r.comparisons.size());
  t.push_back(tok::kQueryMark);
  for (const auto& a : r.query_attrs) {
    t.push_back(vocab.attr_token(a));
  }
  t.push_back(tok::kProductMark);
  for (const auto& a : r.product_attrs) {
    t.push_back(vocab.attr_token(a));
  }
  t.push_back(tok::kCompareMark);
  for (const auto& c : r.comparisons) {
    t.push_back(vocab.attr_token(c.attribute));
    t.push_back(tok::kOutcomeBase + static_cast<int>(c.outcome));
  }
  t.push_back(tok::kVerdictMark);
  t.push_back(verdict_token(r.verdict));
  return t;
}

CoTRecord make_cot(const Vocabulary& vocab, std::vector<Attribute> query_attrs,
                   std::vector<Attribute> product_attrs, std::vector<Comparison> comparisons,
                   Label verdict) {
  CoTRecord r;
  r.query_attrs = std::move(query_attrs);
  r.product_attrs = std::move(product_attrs);
  r.comparisons = std::move(comparisons);
  r.verdict = verdict;
  r.tokens = render_cot_tokens(vocab, r);
  return r;
}

ParseResult parse_cot(const Vocabulary& vocab, std::span<const int> tokens, bool recovery) {
  ParseResult out;
  if (!recovery) {
    std::size_t i = 0;
    auto expect = [&](int t) {
      if (i < tokens.size() && tokens[i] == t) {
        ++i;
        return true;
      }
      return false;
    };
    auto attrs_until = [&](int stop, std::vector<Attribute>& dst) {
      while (i < tokens.size() && tokens[i] != stop) {
        auto a = vocab.token_attr(tokens[i]);
        if (!a) {
          return false;
        }
        dst.push_back(*a);
        ++i;
      }
      return i < tokens.size();
    };
    std::vector<Attribute> qa, pa;
    std::vector<Comparison> cmp;
    if (!expect(tok::kQueryMark) || !attrs_until(tok::kProductMark, qa) ||
        !expect(tok::kProductMark) || !attrs_until(tok::kCompareMark, pa) ||
        !expect(tok::kCompareMark)) {
      return out;
    }
    while (i + 1 < tokens.size() && is_outcome_token(tokens[i + 1])) {
      const auto a = vocab.token_attr(tokens[i]);
      if (!a) {
        return out;
      }
      cmp.push_back({*a, static_cast<Outcome>(tokens[i + 1] - tok::kOutcomeBase)});
      i += 2;
    }
    if (!expect(tok::kVerdictMark) || i + 1 != tokens.size() || !is_verdict_token(tokens[i])) {
      return out;
    }
    const Label v = tokens[i] == tok::kRelevant ? Label::Relevant : Label::Irrelevant;
    out.record = make_cot(vocab, std::move(qa), std::move(pa), std::move(cmp), v);
    return out;
  }

  // Recovery: cut at the first verdict token, then keep every well-formed piece.
  const auto vit = std::find_if(tokens.begin(), tokens.end(), is_verdict_token);
  if (vit == tokens.end()) {
    return out;
  }
  const Label v = *vit == tok::kRelevant ? Label::Relevant : Label::Irrelevant;
  std::vector<Attribute> qa, pa;
  std::vector<Comparison> cmp;
  int section = 0;  // 0 none, 1 query, 2 product, 3 comparisons, 4 verdict
  for (auto it = tokens.begin(); it != vit; ++it) {
    const int t = *it;
    if (is_marker(t)) {
      section = t == tok::kQueryMark     ? 1
                : t == tok::kProductMark ? 2
                : t == tok::kCompareMark ? 3
                                         : 4;
      continue;
    }
    if (section == 1 || section == 2) {
      if (auto a = vocab.token_attr(t)) {
        (section == 1 ? qa : pa).push_back(*a);
      }
    } else if (section == 3 && std::next(it) != vit && is_outcome_token(*std::next(it))) {
      if (auto a = vocab.token_attr(t)) {
        cmp.push_back({*a, static_cast<Outcome>(*std::next(it) - tok::kOutcomeBase)});
        ++it;
      }
    }
  }
  out.record = make_cot(vocab, std::move(qa), std::move(pa), std::move(cmp), v);
  out.repaired = !std::equal(out.record->tokens.begin(), out.record->tokens.end(), tokens.begin(),
                             tokens.end());
  return out;
}

CoTRecord render_cot(const World& world, const Query& q, const Product& p, double strictness,
                     std::uint64_t seed, double noise) {
  if (!(strictness >= 0.0 && strictness <= 1.0) || !(noise >= 0.0 && noise <= 1.0)) {
    throw ConfigError("strictness and noise must lie in [0, 1]");
  }
  const OracleResult o = oracle_label(world, q, p);
  // Extraction reads the surface tokens, so attributes keep their rendered order.
  auto extract = [&](const std::vector<int>& tokens) {
    std::vector<Attribute> out;
    for (int t : tokens) {
      if (auto a = world.vocab.token_attr(t)) {
        out.push_back(*a);
      }
    }
    return out;
  };
  std::vector<Attribute> qa = extract(q.tokens);
  std::vector<Comparison> cmp;
  cmp.reserve(qa.size());
  for (const auto& a : qa) {
    const auto it = std::find_if(o.reasons.begin(), o.reasons.end(), [&](const AssertionOutcome& r) {
      return r.assertion.attribute == a;
    });
    if (it == o.reasons.end()) {
      throw IntegrityError("query " + std::to_string(q.id) + " renders an unasserted attribute");
    }
    cmp.push_back({a, it->outcome});
  }
  Rng rng(seed);
  const double u_strict = rng.uniform();
  const double u_noise = rng.uniform();
  Label verdict = o.label;
  if (only_nonessential_gaps(o.reasons) && u_strict < strictness) {
    verdict = Label::Irrelevant;
  }
  if (u_noise < noise) {
    verdict = verdict == Label::Relevant ? Label::Irrelevant : Label::Relevant;
  }
  return make_cot(world.vocab, std::move(qa), extract(p.title_tokens), std::move(cmp), verdict);
}

CoTRecord render_cot(const World& world, const LabeledPair& pair, double strictness,
                     std::uint64_t seed, double noise) {
  return render_cot(world, pair.query, pair.product, strictness, seed, noise);
}

std::vector<CoTRecord> filter_cot_consistent(std::span<const CoTRecord> cots,
                                             std::span<const Label> labels) {
  if (cots.size() != labels.size()) {
    throw DimensionError("filter_cot_consistent: " + std::to_string(cots.size()) +
                         " records but " + std::to_string(labels.size()) + " labels");
  }
  std::vector<CoTRecord> out;
  for (std::size_t i = 0; i < cots.size(); ++i) {
    if (cots[i].verdict == labels[i]) {
      out.push_back(cots[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> cot_prompt(const Query& q, const Product& p, int max_len, int completion_room) {
  const auto budget = static_cast<std::size_t>(std::max(3, max_len - completion_room));
  std::vector<int> qt = q.tokens;
  std::vector<int> pt = p.title_tokens;
  while (3 + qt.size() + pt.size() > budget && !pt.empty()) {
    pt.pop_back();
  }
  while (3 + qt.size() + pt.size() > budget && !qt.empty()) {
    qt.pop_back();
  }
  std::vector<int> out;
  out.reserve(3 + qt.size() + pt.size());
  out.push_back(tok::kBos);
  out.insert(out.end(), qt.begin(), qt.end());
  out.push_back(tok::kSep);
  out.insert(out.end(), pt.begin(), pt.end());
  out.push_back(tok::kSep);
  return out;
}

CotExample make_cot_example(const Query& q, const Product& p, const CoTRecord& cot, int max_len) {
  CotExample ex;
  ex.sequence = cot_prompt(q, p, max_len, kCompletionRoom);
  ex.completion_start = ex.sequence.size();
  ex.sequence.insert(ex.sequence.end(), cot.tokens.begin(), cot.tokens.end());
  if (ex.sequence.size() > static_cast<std::size_t>(max_len)) {
    throw ConfigError("decoder max_len " + std::to_string(max_len) + " cannot hold a " +
                      std::to_string(ex.sequence.size()) + "-token CoT example");
  }
  return ex;
}

LmTrainReport train_cot_model(nn::DecoderModel& decoder, std::span<const CotExample> data,
                              const nn::TrainConfig& cfg) {
  if (data.empty()) {
    throw ConfigError("train_cot_model requires a nonempty training set");
  }
  LmTrainReport report;
  const std::size_t probe_n = std::min<std::size_t>(data.size(), 64);
  auto probe_loss = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < probe_n; ++i) {
      s += nn::lm_loss(decoder, data[i].sequence, data[i].completion_start, false);
    }
    return s / static_cast<double>(probe_n);
  };
  report.probe_loss_before = probe_loss();

  const auto bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  const std::int64_t batches = static_cast<std::int64_t>((data.size() + bs - 1) / bs);
  const std::int64_t total = batches * cfg.epochs;
  nn::Adam opt(decoder.params());
  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, Stream::Shuffle, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t e = std::min(order.size(), b + bs);
      decoder.params().zero_grad();
      for (std::size_t k = b; k < e; ++k) {
        const CotExample& ex = data[order[k]];
        epoch_sum += nn::lm_loss(decoder, ex.sequence, ex.completion_start, true);
      }
      decoder.params().scale_grad(1.0 / static_cast<double>(e - b));
      opt.step(decoder.params(), cfg.adam, nn::lr_scale(cfg, report.steps, total));
      ++report.steps;
    }
    report.epoch_loss.push_back(epoch_sum / static_cast<double>(data.size()));
  }
  decoder.params().zero_grad();
  decoder.set_steps(decoder.steps() + report.steps);
  report.probe_loss_after = probe_loss();
  return report;
}

Annotation annotate(const nn::DecoderModel& decoder, const Vocabulary& vocab, const Query& q,
                    const Product& p) {
  const std::vector<int> prompt = cot_prompt(q, p, decoder.config().max_len, kCompletionRoom);
  static constexpr std::array<int, 2> kStops{tok::kRelevant, tok::kIrrelevant};
  const nn::GreedyResult g = decoder.greedy(prompt, kStops);
  Annotation a;
  a.tokens = g.tokens;
  ParseResult parsed = parse_cot(vocab, g.tokens, false);
  if (!parsed.record) {
    parsed = parse_cot(vocab, g.tokens, true);
  }
  if (parsed.record) {
    a.record = std::move(parsed.record);
    a.repaired = parsed.repaired;
    a.verdict = a.record->verdict;
  } else {
    a.malformed = true;
    a.verdict = Label::Irrelevant;
  }
  return a;
}

Judge annotator_judge(const nn::DecoderModel& decoder, const Vocabulary& vocab) {
  return [&decoder, &vocab](const Query& q, const Product& p) {
    return annotate(decoder, vocab, q, p).verdict;
  };
}

// ---------------------------------------------------------------------------

std::vector<PreferenceExample> build_preference_set(const nn::DecoderModel& decoder,
                                                    const PurchaseLog& purchases,
                                                    const World& world, std::uint64_t seed) {
  std::vector<PreferenceExample> out;
  for (std::size_t i = 0; i < purchases.entries.size(); ++i) {
    const LogEntry& e = purchases.entries[i];
    if (!e.purchased) {
      continue;
    }
    const Annotation ann = annotate(decoder, world.vocab, e.query, e.product);
    if (ann.verdict != Label::Irrelevant) {
      continue;
    }
    const CoTRecord winner =
        render_cot(world, e.query, e.product, 0.0, derive_seed(seed, Stream::Prefs, i));
    out.push_back({e.query, e.product, ann.tokens, false});
    out.push_back({e.query, e.product, winner.tokens, true});
  }
  return out;
}

void KtoConfig::validate() const {
  if (!(beta > 0.0) || !(lambda_desirable > 0.0) || !(lambda_undesirable > 0.0) ||
      ref_batch <= 0) {
    throw ConfigError("KTO beta, lambdas and ref_batch must be positive");
  }
}

double kto_value(double reward, double z0, bool desirable, const KtoConfig& cfg) {
  if (desirable) {
    return cfg.lambda_desirable - cfg.lambda_desirable * sigmoid(cfg.beta * (reward - z0));
  }
  return cfg.lambda_undesirable - cfg.lambda_undesirable * sigmoid(cfg.beta * (z0 - reward));
}

double kto_reward(const nn::DecoderModel& policy, const nn::DecoderModel& reference,
                  const PreferenceExample& ex, const KtoConfig& cfg) {
  return completion_logprob(policy, ex, cfg) - completion_logprob(reference, ex, cfg);
}

KtoLoss kto_loss(nn::DecoderModel& policy, const nn::DecoderModel& reference,
                 std::span<const PreferenceExample> batch, const KtoConfig& cfg,
                 std::span<const PreferenceExample> ref_batch, std::optional<double> z0_override,
                 bool with_grad) {
  cfg.validate();
  if (!(policy.config() == reference.config())) {
    throw ConfigError("kto_loss: policy and reference configs differ");
  }
  return kto_loss_impl(policy, batch, cfg, ref_batch, z0_override, with_grad,
                       [&](std::size_t i, bool in_ref) {
                         return completion_logprob(reference, in_ref ? ref_batch[i] : batch[i],
                                                   cfg);
                       });
}

nn::DecoderModel align_kto(const nn::DecoderModel& decoder,
                           std::span<const PreferenceExample> prefs, const KtoConfig& cfg,
                           const nn::TrainConfig& hyper, AlignReport* report) {
  cfg.validate();
  if (prefs.empty()) {
    throw ConfigError("align_kto requires a nonempty preference set");
  }
  nn::DecoderModel policy = decoder;
  const nn::DecoderModel& reference = decoder;

  std::vector<double> ref_logp(prefs.size());
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    ref_logp[i] = completion_logprob(reference, prefs[i], cfg);
  }
  auto mean_rewards = [&](double& des, double& undes) {
    double sd = 0.0, su = 0.0;
    std::size_t nd = 0, nu = 0;
    for (std::size_t i = 0; i < prefs.size(); ++i) {
      const double r = completion_logprob(policy, prefs[i], cfg) - ref_logp[i];
      (prefs[i].desirable ? sd : su) += r;
      ++(prefs[i].desirable ? nd : nu);
    }
    des = nd ? sd / static_cast<double>(nd) : 0.0;
    undes = nu ? su / static_cast<double>(nu) : 0.0;
  };
  AlignReport local;
  AlignReport& rep = report ? *report : local;
  rep = AlignReport{};
  mean_rewards(rep.mean_reward_desirable_before, rep.mean_reward_undesirable_before);

  const auto bs = static_cast<std::size_t>(std::max(1, hyper.batch_size));
  const std::int64_t batches = static_cast<std::int64_t>((prefs.size() + bs - 1) / bs);
  const std::int64_t total = batches * hyper.epochs;
  nn::Adam opt(policy.params());
  std::vector<std::size_t> order(prefs.size());
  std::vector<PreferenceExample> batch, ref_batch;
  std::vector<double> batch_ref, ref_batch_ref;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(hyper.seed, Stream::Shuffle, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t e = std::min(order.size(), b + bs);
      batch.clear();
      batch_ref.clear();
      for (std::size_t k = b; k < e; ++k) {
        batch.push_back(prefs[order[k]]);
        batch_ref.push_back(ref_logp[order[k]]);
      }
      ref_batch.clear();
      ref_batch_ref.clear();
      Rng zr(derive_seed(hyper.seed, Stream::Kto, static_cast<std::uint64_t>(rep.steps)));
      for (int k = 0; k < cfg.ref_batch; ++k) {
        const std::size_t j = zr.below(prefs.size());
        ref_batch.push_back(prefs[j]);
        ref_batch_ref.push_back(ref_logp[j]);
      }
      policy.params().zero_grad();
      const KtoLoss l = kto_loss_impl(policy, batch, cfg, ref_batch, std::nullopt, true,
                                      [&](std::size_t i, bool in_ref) {
                                        return in_ref ? ref_batch_ref[i] : batch_ref[i];
                                      });
      opt.step(policy.params(), hyper.adam, nn::lr_scale(hyper, rep.steps, total));
      rep.step_loss.push_back(l.value);
      ++rep.steps;
    }
  }
  policy.params().zero_grad();
  policy.set_steps(policy.steps() + rep.steps);
  mean_rewards(rep.mean_reward_desirable_after, rep.mean_reward_undesirable_after);
  return policy;
}

double purchase_false_negative_rate(const PurchaseLog& purchases, const Judge& judge) {
  std::size_t n = 0, fn = 0;
  for (const auto& e : purchases.entries) {
    if (!e.purchased) {
      continue;
    }
    ++n;
    if (judge(e.query, e.product) == Label::Irrelevant) {
      ++fn;
    }
  }
  return n ? static_cast<double>(fn) / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------

MineResult mine_hard(const Judge& annotator, const Judge& student, const ExposureLog& exposures) {
  MineResult out;
  for (const auto& e : exposures.entries) {
    const Label a = annotator(e.query, e.product);
    if (student(e.query, e.product) != a) {
      out.mined.push_back({e.query, e.product, a, Source::RDMined});
    }
  }
  return out;
}

MineResult mine_hard(const nn::DecoderModel& annotator, const Vocabulary& vocab,
                     const Judge& student, const ExposureLog& exposures) {
  std::size_t malformed = 0;
  const Judge judge = [&](const Query& q, const Product& p) {
    const Annotation a = annotate(annotator, vocab, q, p);
    malformed += a.malformed ? 1 : 0;
    return a.verdict;
  };
  MineResult out = mine_hard(judge, student, exposures);
  out.malformed = malformed;
  return out;
}

}  // namespace qprel
