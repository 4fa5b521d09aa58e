#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qprel {

// ---------------------------------------------------------------------------
// Attributes and vocabulary
// ---------------------------------------------------------------------------

enum class AttrKind : std::uint8_t { Category, Brand, Model, Audience, Spec };

inline constexpr std::size_t kNumKinds = 5;
inline constexpr std::array<AttrKind, kNumKinds> kAllKinds{
    AttrKind::Category, AttrKind::Brand, AttrKind::Model, AttrKind::Audience, AttrKind::Spec};

constexpr std::size_t kind_index(AttrKind k) { return static_cast<std::size_t>(k); }
/// Category, Brand and Model hold exactly one value per product; Audience and
/// Spec are additive sets.
constexpr bool is_single_valued(AttrKind k) {
  return k == AttrKind::Category || k == AttrKind::Brand || k == AttrKind::Model;
}
std::string_view kind_name(AttrKind k);
AttrKind kind_from_name(std::string_view name);

struct Attribute {
  AttrKind kind{AttrKind::Category};
  int value{0};
  auto operator<=>(const Attribute&) const = default;
};

/// Fixed special-token layout shared by every model in the pipeline.
namespace tok {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kOov = 3;
inline constexpr int kBos = 4;
inline constexpr int kEos = 5;
// Chain-of-thought structure.
inline constexpr int kQueryMark = 6;
inline constexpr int kProductMark = 7;
inline constexpr int kCompareMark = 8;
inline constexpr int kVerdictMark = 9;
inline constexpr int kRelevant = 10;
inline constexpr int kIrrelevant = 11;
inline constexpr int kKindBase = 12;     // + kind_index
inline constexpr int kOutcomeBase = 17;  // + Outcome
inline constexpr int kKeyAttrBase = 21;  // + Outcome, key-attribute markers
inline constexpr int kFirstAttr = 25;
}  // namespace tok

class Vocabulary {
 public:
  explicit Vocabulary(const std::array<int, kNumKinds>& table_sizes);

  int size() const { return size_; }
  int attr_token(Attribute a) const;
  /// Attribute encoded by a token, if it is an attribute token.
  std::optional<Attribute> token_attr(int token) const;
  std::string name(int token) const;
  /// Unknown names map to the out-of-vocabulary token.
  int id(std::string_view name) const;
  const std::array<int, kNumKinds>& table_sizes() const { return sizes_; }

 private:
  std::array<int, kNumKinds> sizes_{};
  std::array<int, kNumKinds> offsets_{};
  int size_{0};
};

// ---------------------------------------------------------------------------
// Domain records
// ---------------------------------------------------------------------------

struct Product {
  int id{0};
  std::vector<int> title_tokens;
  std::vector<Attribute> attributes;  // canonical (kind, value) order
  bool operator==(const Product&) const = default;
  std::optional<int> single(AttrKind k) const;
  bool has(Attribute a) const;
  bool has_kind(AttrKind k) const;
};

struct Assertion {
  Attribute attribute;
  bool essential{true};
  bool operator==(const Assertion&) const = default;
};

struct Query {
  int id{0};
  std::vector<int> tokens;
  std::vector<Assertion> assertions;  // canonical kind order, one per kind
  bool operator==(const Query&) const = default;
  const Assertion* find(AttrKind k) const;
};

enum class Label : std::uint8_t { Relevant, Irrelevant };
enum class Source : std::uint8_t { Oracle, RDMined, DSSynth };

std::string_view label_name(Label l);
Label label_from_name(std::string_view s);
std::string_view source_name(Source s);
Source source_from_name(std::string_view s);

struct LabeledPair {
  Query query;
  Product product;
  Label label{Label::Relevant};
  Source source{Source::Oracle};
  bool operator==(const LabeledPair&) const = default;
};

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

struct CorpusConfig {
  // Category, Brand, Model, Audience, Spec.
  std::array<int, kNumKinds> table_sizes{20, 50, 30, 5, 40};
  // Probability a query assertion of each kind is essential. Realised per
  // attribute value when the world is generated.
  std::array<double, kNumKinds> essential_prob{1.0, 1.0, 1.0, 0.5, 0.3};
  int catalog_size = 2000;
  int brands_per_category = 8;
  double model_prob = 0.7;
  int max_audiences = 2;
  int max_specs = 3;
  int max_query_assertions = 4;
  // Chance that a query's Audience/Spec assertion copies the anchor product.
  double copy_optional_prob = 0.6;
  double relevant_fraction = 0.5;
  double hard_negative_fraction = 0.7;
  // Share of feasible relevant exposures that become purchases.
  double purchase_share = 0.5;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
  bool operator==(const CorpusConfig&) const = default;
};

struct World {
  CorpusConfig config;
  std::uint64_t seed{0};
  Vocabulary vocab{config.table_sizes};
  std::vector<std::vector<int>> brands_of_category;
  std::vector<int> model_brand;
  // essential[kind][value]
  std::array<std::vector<bool>, kNumKinds> essential;
  std::vector<Product> catalog;

  bool is_essential(Attribute a) const;
};

World gen_world(const CorpusConfig& config, std::uint64_t seed);

/// Renders attributes into title tokens: brand model category specs audiences.
std::vector<int> render_title(const Vocabulary& vocab, std::span<const Attribute> attrs);
/// Renders assertions into query tokens: audience brand model spec category.
std::vector<int> render_query(const Vocabulary& vocab, std::span<const Assertion> assertions);
/// Sorts attributes canonically and re-renders the title.
void normalize(const World& world, Product& p);
void normalize(const World& world, Query& q);

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

enum class Outcome : std::uint8_t { Match, Mismatch, AbsentEssential, AbsentNonEssential };
std::string_view outcome_name(Outcome o);
Outcome outcome_from_name(std::string_view s);

struct AssertionOutcome {
  Assertion assertion;
  Outcome outcome{Outcome::Match};
  bool operator==(const AssertionOutcome&) const = default;
};

struct OracleResult {
  Label label{Label::Relevant};
  std::vector<AssertionOutcome> reasons;  // one per query assertion, same order
};

/// Ground truth: Relevant iff the category matches and every essential
/// assertion is met by an equal-valued product attribute. Throws
/// IntegrityError for values outside the world's tables or malformed records.
OracleResult oracle_label(const World& world, const Query& q, const Product& p);

/// True when every unmet assertion is AbsentNonEssential and at least one is.
bool only_nonessential_gaps(std::span<const AssertionOutcome> reasons);

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Query ids for split `i` start at i * kSplitIdStride.
inline constexpr int kSplitIdStride = 1'000'000;
enum class Split : int { Train = 0, Validation = 1, Test = 2, Exposure = 3, CotTuning = 4 };
constexpr int split_id_base(Split s) { return static_cast<int>(s) * kSplitIdStride; }

std::vector<LabeledPair> gen_pairs(const World& world, std::size_t n, std::uint64_t seed,
                                   int query_id_base = 0);

struct LogEntry {
  Query query;
  Product product;
  bool purchased{false};
  bool operator==(const LogEntry&) const = default;
};

struct ExposureLog {
  std::vector<LogEntry> entries;
};

struct PurchaseLog {
  std::vector<LogEntry> entries;  // every exposure, flagged
  std::optional<std::string> warning;
  std::size_t purchase_count() const;
};

ExposureLog simulate_exposures(const World& world, std::size_t n, double irrelevant_rate,
                               std::uint64_t seed);

/// Purchases are drawn only from oracle-Relevant exposures; at least
/// `nonessential_gap_rate` of them carry an absent non-essential assertion
/// when enough such exposures exist.
PurchaseLog simulate_purchases(const World& world, const ExposureLog& exposures,
                               double nonessential_gap_rate, std::uint64_t seed);

}  // namespace qprel
