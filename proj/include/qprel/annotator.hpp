#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "qprel/corpus.hpp"
#include "qprel/neural.hpp"

namespace qprel {

/// Any relevance judge over a query-product pair: a trained student, an
/// annotator decoder, or a test stub.
using Judge = std::function<Label(const Query&, const Product&)>;

// ---------------------------------------------------------------------------
// Chain-of-thought records
// ---------------------------------------------------------------------------

/// Outcome of one query assertion against the product.
struct Comparison {
  Attribute attribute;  // the asserted value
  Outcome outcome{Outcome::Match};
  AttrKind kind() const { return attribute.kind; }
  bool operator==(const Comparison&) const = default;
};

/// Structured reasoning chain. Token grammar:
///
///   <q> query-attrs... <p> product-attrs... <cmp> (attr o:outcome)... <v> REL|IRR
///
/// Extracted attributes follow the surface token order of the query and the
/// title; comparisons follow the query attributes. The verdict token is
/// always last and appears exactly once.
struct CoTRecord {
  std::vector<Attribute> query_attrs;
  std::vector<Attribute> product_attrs;
  std::vector<Comparison> comparisons;
  Label verdict{Label::Relevant};
  std::vector<int> tokens;
  bool operator==(const CoTRecord&) const = default;
};

int verdict_token(Label l);
std::vector<int> render_cot_tokens(const Vocabulary& vocab, const CoTRecord& record);
/// Builds a record from its structured fields and fills in `tokens`.
CoTRecord make_cot(const Vocabulary& vocab, std::vector<Attribute> query_attrs,
                   std::vector<Attribute> product_attrs, std::vector<Comparison> comparisons,
                   Label verdict);

struct ParseResult {
  std::optional<CoTRecord> record;
  bool repaired = false;  // recovery mode dropped or reordered something
};

/// Strict mode accepts only the exact grammar. Recovery mode keeps every
/// well-formed piece and requires only a trailing verdict token.
ParseResult parse_cot(const Vocabulary& vocab, std::span<const int> tokens, bool recovery = false);

/// Rule-based annotator: exact attribute extraction and oracle comparisons.
/// With probability `strictness`, a pair whose only gaps are
/// AbsentNonEssential is verdicted Irrelevant; with probability `noise` the
/// verdict is flipped outright.
CoTRecord render_cot(const World& world, const LabeledPair& pair, double strictness,
                     std::uint64_t seed, double noise = 0.0);
CoTRecord render_cot(const World& world, const Query& q, const Product& p, double strictness,
                     std::uint64_t seed, double noise = 0.0);

/// Keeps the records whose verdict equals the aligned reference label.
std::vector<CoTRecord> filter_cot_consistent(std::span<const CoTRecord> cots,
                                             std::span<const Label> labels);

// ---------------------------------------------------------------------------
// CoT decoder
// ---------------------------------------------------------------------------

/// Decoder prompt: [BOS] query [SEP] title [SEP]. Titles are cut from the tail
/// so the prompt leaves `completion_room` positions free.
std::vector<int> cot_prompt(const Query& q, const Product& p, int max_len, int completion_room);

/// Minimum positions reserved for the completion when building prompts.
inline constexpr int kCompletionRoom = 28;

struct CotExample {
  std::vector<int> sequence;  // prompt followed by completion
  std::size_t completion_start = 0;
};

CotExample make_cot_example(const Query& q, const Product& p, const CoTRecord& cot, int max_len);

struct LmTrainReport {
  std::vector<double> epoch_loss;
  double probe_loss_before = 0.0;
  double probe_loss_after = 0.0;
  std::int64_t steps = 0;
};

/// Fine-tunes the decoder with the mean next-token loss on completion tokens.
LmTrainReport train_cot_model(nn::DecoderModel& decoder, std::span<const CotExample> data,
                              const nn::TrainConfig& cfg);

struct Annotation {
  std::vector<int> tokens;  // raw generated completion
  std::optional<CoTRecord> record;
  bool malformed = false;  // no parseable record, even in recovery mode
  bool repaired = false;
  /// Record verdict; Irrelevant for malformed output.
  Label verdict{Label::Irrelevant};
};

/// Greedy decoding from the pair prompt, repaired by the recovery parser
/// when the strict grammar fails.
Annotation annotate(const nn::DecoderModel& decoder, const Vocabulary& vocab, const Query& q,
                    const Product& p);

Judge annotator_judge(const nn::DecoderModel& decoder, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Preference alignment
// ---------------------------------------------------------------------------

struct PreferenceExample {
  Query query;
  Product product;
  std::vector<int> completion;
  bool desirable = false;
  bool operator==(const PreferenceExample&) const = default;
};

/// For each purchased pair the decoder verdicts Irrelevant, emits its output
/// as undesirable and a strictness-free simulator CoT as desirable.
std::vector<PreferenceExample> build_preference_set(const nn::DecoderModel& decoder,
                                                    const PurchaseLog& purchases,
                                                    const World& world, std::uint64_t seed);

struct KtoConfig {
  double beta = 0.5;
  double lambda_desirable = 1.0;
  double lambda_undesirable = 1.0;
  int ref_batch = 32;
  /// Sum the log-ratio over the full completion, or only the verdict token.
  bool verdict_only = false;
  void validate() const;
  bool operator==(const KtoConfig&) const = default;
};

struct KtoLoss {
  double value = 0.0;
  double z0 = 0.0;
  std::vector<double> rewards;  // r per batch example
};

/// Policy-minus-reference log-probability of the completion given the pair
/// prompt.
double kto_reward(const nn::DecoderModel& policy, const nn::DecoderModel& reference,
                  const PreferenceExample& ex, const KtoConfig& cfg);

/// Mean over the batch of (lambda_y - v). z0 is the clamped mean reward over
/// `ref_batch` unless `z0_override` is given, and never receives gradient.
/// Gradients accumulate into `policy` when `with_grad`.
KtoLoss kto_loss(nn::DecoderModel& policy, const nn::DecoderModel& reference,
                 std::span<const PreferenceExample> batch, const KtoConfig& cfg,
                 std::span<const PreferenceExample> ref_batch,
                 std::optional<double> z0_override = std::nullopt, bool with_grad = true);

/// Loss contribution of one example given its reward and z0.
double kto_value(double reward, double z0, bool desirable, const KtoConfig& cfg);

struct AlignReport {
  double mean_reward_desirable_before = 0.0;
  double mean_reward_desirable_after = 0.0;
  double mean_reward_undesirable_before = 0.0;
  double mean_reward_undesirable_after = 0.0;
  std::vector<double> step_loss;
  std::int64_t steps = 0;
};

/// Aligns a copy of `decoder` against a frozen reference copy of itself.
nn::DecoderModel align_kto(const nn::DecoderModel& decoder,
                           std::span<const PreferenceExample> prefs, const KtoConfig& cfg,
                           const nn::TrainConfig& hyper, AlignReport* report = nullptr);

/// Share of purchased entries the judge verdicts Irrelevant.
double purchase_false_negative_rate(const PurchaseLog& purchases, const Judge& judge);

// ---------------------------------------------------------------------------
// Hard-sample mining
// ---------------------------------------------------------------------------

struct MineResult {
  std::vector<LabeledPair> mined;  // labeled with the annotator verdict
  std::size_t malformed = 0;
};

/// Exposure pairs where the student disagrees with the annotator.
MineResult mine_hard(const Judge& annotator, const Judge& student, const ExposureLog& exposures);
MineResult mine_hard(const nn::DecoderModel& annotator, const Vocabulary& vocab,
                     const Judge& student, const ExposureLog& exposures);

}  // namespace qprel
