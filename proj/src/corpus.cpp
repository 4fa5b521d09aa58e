#include "qprel/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

namespace qprel {

namespace {

constexpr std::array<std::string_view, kNumKinds> kKindNames{"Category", "Brand", "Model",
                                                             "Audience", "Spec"};
constexpr std::array<std::string_view, kNumKinds> kKindPrefix{"cat_", "brand_", "model_", "aud_",
                                                              "spec_"};
constexpr std::array<std::string_view, 4> kOutcomeNames{"Match", "Mismatch", "AbsentEssential",
                                                        "AbsentNonEssential"};
constexpr std::array<std::string_view, tok::kFirstAttr> kSpecialNames{
    "[PAD]",         "[CLS]",        "[SEP]",        "[OOV]",           "[BOS]",
    "[EOS]",         "<q>",          "<p>",          "<cmp>",           "<v>",
    "REL",           "IRR",          "k:category",   "k:brand",         "k:model",
    "k:audience",    "k:spec",       "o:match",      "o:mismatch",      "o:absent",
    "o:absent*",     "match:",       "mismatch:",    "miss:",           "miss*:"};

// Title template order: brand model category specs audiences.
constexpr std::array<AttrKind, kNumKinds> kTitleOrder{AttrKind::Brand, AttrKind::Model,
                                                      AttrKind::Category, AttrKind::Spec,
                                                      AttrKind::Audience};
// Query template order: audience brand model spec category.
constexpr std::array<AttrKind, kNumKinds> kQueryOrder{AttrKind::Audience, AttrKind::Brand,
                                                      AttrKind::Model, AttrKind::Spec,
                                                      AttrKind::Category};

void check_fraction(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ConfigError(std::string(what) + " must lie in [0, 1]");
  }
}

void check_attribute(const World& w, Attribute a, const char* where) {
  const int size = w.config.table_sizes[kind_index(a.kind)];
  if (a.value < 0 || a.value >= size) {
    throw IntegrityError(std::string(where) + ": " + std::string(kind_name(a.kind)) + " value " +
                         std::to_string(a.value) + " outside table of size " +
                         std::to_string(size));
  }
}

Outcome assess(const World& w, const Assertion& a, const Product& p) {
  const AttrKind k = a.attribute.kind;
  if (p.has(a.attribute)) {
    return Outcome::Match;
  }
  if (is_single_valued(k) && p.has_kind(k)) {
    return Outcome::Mismatch;
  }
  (void)w;
  return a.essential ? Outcome::AbsentEssential : Outcome::AbsentNonEssential;
}

bool relevant_fast(const World& w, const Query& q, const Product& p) {
  for (const auto& a : q.assertions) {
    const Outcome o = assess(w, a, p);
    if (o == Outcome::Mismatch || o == Outcome::AbsentEssential) {
      return false;
    }
  }
  return true;
}

Product make_product(const World& w, int id, Rng& rng) {
  const auto& cfg = w.config;
  Product p;
  p.id = id;
  const int cat = static_cast<int>(rng.below(static_cast<std::size_t>(cfg.table_sizes[0])));
  const auto& brands = w.brands_of_category[static_cast<std::size_t>(cat)];
  const int brand = brands[rng.below(brands.size())];
  p.attributes.push_back({AttrKind::Category, cat});
  p.attributes.push_back({AttrKind::Brand, brand});
  if (rng.bernoulli(cfg.model_prob)) {
    std::vector<int> owned;
    for (std::size_t m = 0; m < w.model_brand.size(); ++m) {
      if (w.model_brand[m] == brand) {
        owned.push_back(static_cast<int>(m));
      }
    }
    if (!owned.empty()) {
      p.attributes.push_back({AttrKind::Model, owned[rng.below(owned.size())]});
    }
  }
  auto add_set = [&](AttrKind kind, int max_count) {
    const int table = cfg.table_sizes[kind_index(kind)];
    const int count = static_cast<int>(rng.below(static_cast<std::size_t>(max_count + 1)));
    std::vector<int> values(static_cast<std::size_t>(table));
    std::iota(values.begin(), values.end(), 0);
    rng.shuffle(values);
    for (int i = 0; i < std::min(count, table); ++i) {
      p.attributes.push_back({kind, values[static_cast<std::size_t>(i)]});
    }
  };
  add_set(AttrKind::Audience, cfg.max_audiences);
  add_set(AttrKind::Spec, cfg.max_specs);
  normalize(w, p);
  return p;
}

Attribute random_value(const World& w, AttrKind kind, Rng& rng) {
  return {kind, static_cast<int>(rng.below(
                    static_cast<std::size_t>(w.config.table_sizes[kind_index(kind)])))};
}

std::vector<Attribute> values_of(const Product& p, AttrKind kind) {
  std::vector<Attribute> out;
  for (const auto& a : p.attributes) {
    if (a.kind == kind) {
      out.push_back(a);
    }
  }
  return out;
}

Query make_query(const World& w, const Product& anchor, int id, Rng& rng) {
  const auto& cfg = w.config;
  std::vector<AttrKind> optional{AttrKind::Brand, AttrKind::Model, AttrKind::Audience,
                                 AttrKind::Spec};
  rng.shuffle(optional);
  const std::size_t extra = rng.below(static_cast<std::size_t>(cfg.max_query_assertions));
  Query q;
  q.id = id;
  q.assertions.push_back({{AttrKind::Category, *anchor.single(AttrKind::Category)}, true});
  for (std::size_t i = 0; i < extra && i < optional.size(); ++i) {
    const AttrKind kind = optional[i];
    Attribute a;
    if (is_single_valued(kind)) {
      const auto v = anchor.single(kind);
      a = v ? Attribute{kind, *v} : random_value(w, kind, rng);
    } else {
      const auto present = values_of(anchor, kind);
      if (!present.empty() && rng.bernoulli(cfg.copy_optional_prob)) {
        a = present[rng.below(present.size())];
      } else {
        a = random_value(w, kind, rng);
      }
    }
    q.assertions.push_back({a, w.is_essential(a)});
  }
  normalize(w, q);
  return q;
}

std::optional<Product> pick_product(const World& w, const Query& q, Label target, Rng& rng) {
  const bool want_relevant = target == Label::Relevant;
  const bool hard = !want_relevant && rng.bernoulli(w.config.hard_negative_fraction);
  const int cat = q.assertions.front().attribute.value;
  std::vector<std::size_t> candidates;
  std::vector<std::size_t> fallback;
  for (std::size_t i = 0; i < w.catalog.size(); ++i) {
    const Product& p = w.catalog[i];
    if (relevant_fast(w, q, p) != want_relevant) {
      continue;
    }
    if (hard && p.single(AttrKind::Category) != cat) {
      fallback.push_back(i);
      continue;
    }
    candidates.push_back(i);
  }
  if (candidates.empty()) {
    candidates.swap(fallback);
  }
  if (candidates.empty()) {
    return std::nullopt;
  }
  return w.catalog[candidates[rng.below(candidates.size())]];
}

LabeledPair make_pair(const World& w, Label target, int query_id, Rng& rng) {
  constexpr int kTries = 16;
  for (int t = 0; t < kTries; ++t) {
    const Product& anchor = w.catalog[rng.below(w.catalog.size())];
    Query q = make_query(w, anchor, query_id, rng);
    if (auto p = pick_product(w, q, target, rng)) {
      return {std::move(q), std::move(*p), target, Source::Oracle};
    }
  }
  // Category-only query on its own anchor is always relevant.
  const Product& anchor = w.catalog[rng.below(w.catalog.size())];
  Query q;
  q.id = query_id;
  q.assertions.push_back({{AttrKind::Category, *anchor.single(AttrKind::Category)}, true});
  normalize(w, q);
  if (target == Label::Relevant) {
    return {std::move(q), anchor, Label::Relevant, Source::Oracle};
  }
  Product p = w.catalog[rng.below(w.catalog.size())];
  const Label label = oracle_label(w, q, p).label;
  return {std::move(q), std::move(p), label, Source::Oracle};
}

}  // namespace

std::string_view kind_name(AttrKind k) { return kKindNames[kind_index(k)]; }

AttrKind kind_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumKinds; ++i) {
    if (kKindNames[i] == name) {
      return kAllKinds[i];
    }
  }
  throw IntegrityError("unknown attribute kind '" + std::string(name) + "'");
}

std::string_view label_name(Label l) { return l == Label::Relevant ? "Relevant" : "Irrelevant"; }

Label label_from_name(std::string_view s) {
  if (s == "Relevant") {
    return Label::Relevant;
  }
  if (s == "Irrelevant") {
    return Label::Irrelevant;
  }
  throw IntegrityError("unknown label '" + std::string(s) + "'");
}

std::string_view source_name(Source s) {
  switch (s) {
    case Source::Oracle:
      return "Oracle";
    case Source::RDMined:
      return "RDMined";
    case Source::DSSynth:
      return "DSSynth";
  }
  return "Oracle";
}

Source source_from_name(std::string_view s) {
  if (s == "Oracle") {
    return Source::Oracle;
  }
  if (s == "RDMined") {
    return Source::RDMined;
  }
  if (s == "DSSynth") {
    return Source::DSSynth;
  }
  throw IntegrityError("unknown source '" + std::string(s) + "'");
}

std::string_view outcome_name(Outcome o) { return kOutcomeNames[static_cast<std::size_t>(o)]; }

Outcome outcome_from_name(std::string_view s) {
  for (std::size_t i = 0; i < kOutcomeNames.size(); ++i) {
    if (kOutcomeNames[i] == s) {
      return static_cast<Outcome>(i);
    }
  }
  throw IntegrityError("unknown outcome '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(const std::array<int, kNumKinds>& table_sizes) : sizes_(table_sizes) {
  int next = tok::kFirstAttr;
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    offsets_[k] = next;
    next += std::max(0, sizes_[k]);
  }
  size_ = next;
}

int Vocabulary::attr_token(Attribute a) const {
  const std::size_t k = kind_index(a.kind);
  if (a.value < 0 || a.value >= sizes_[k]) {
    return tok::kOov;
  }
  return offsets_[k] + a.value;
}

std::optional<Attribute> Vocabulary::token_attr(int token) const {
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    if (token >= offsets_[k] && token < offsets_[k] + sizes_[k]) {
      return Attribute{kAllKinds[k], token - offsets_[k]};
    }
  }
  return std::nullopt;
}

std::string Vocabulary::name(int token) const {
  if (token >= 0 && token < tok::kFirstAttr) {
    return std::string(kSpecialNames[static_cast<std::size_t>(token)]);
  }
  if (auto a = token_attr(token)) {
    return std::string(kKindPrefix[kind_index(a->kind)]) + std::to_string(a->value);
  }
  return std::string(kSpecialNames[tok::kOov]);
}

int Vocabulary::id(std::string_view name) const {
  for (std::size_t i = 0; i < kSpecialNames.size(); ++i) {
    if (kSpecialNames[i] == name) {
      return static_cast<int>(i);
    }
  }
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    const auto prefix = kKindPrefix[k];
    if (name.starts_with(prefix)) {
      const auto digits = name.substr(prefix.size());
      if (digits.empty() || digits.size() > 9 ||
          !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        return tok::kOov;
      }
      return attr_token({kAllKinds[k], std::stoi(std::string(digits))});
    }
  }
  return tok::kOov;
}

// ---------------------------------------------------------------------------

std::optional<int> Product::single(AttrKind k) const {
  for (const auto& a : attributes) {
    if (a.kind == k) {
      return a.value;
    }
  }
  return std::nullopt;
}

bool Product::has(Attribute a) const {
  return std::find(attributes.begin(), attributes.end(), a) != attributes.end();
}

bool Product::has_kind(AttrKind k) const {
  return std::any_of(attributes.begin(), attributes.end(),
                     [k](const Attribute& a) { return a.kind == k; });
}

const Assertion* Query::find(AttrKind k) const {
  for (const auto& a : assertions) {
    if (a.attribute.kind == k) {
      return &a;
    }
  }
  return nullptr;
}

std::size_t PurchaseLog::purchase_count() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                [](const LogEntry& e) { return e.purchased; }));
}

void CorpusConfig::validate() const {
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    if (table_sizes[k] <= 0) {
      throw ConfigError("attribute table for " + std::string(kKindNames[k]) + " is empty");
    }
    check_fraction(essential_prob[k], "essential_prob");
    if (is_single_valued(kAllKinds[k]) && essential_prob[k] != 1.0) {
      throw ConfigError(std::string(kKindNames[k]) + " assertions are always essential");
    }
  }
  if (catalog_size <= 0) {
    throw ConfigError("catalog_size must be positive");
  }
  if (brands_per_category <= 0) {
    throw ConfigError("brands_per_category must be positive");
  }
  if (max_audiences < 0 || max_specs < 0) {
    throw ConfigError("max_audiences and max_specs must be non-negative");
  }
  if (max_query_assertions < 1 || max_query_assertions > static_cast<int>(kNumKinds)) {
    throw ConfigError("max_query_assertions must lie in [1, 5]");
  }
  check_fraction(model_prob, "model_prob");
  check_fraction(copy_optional_prob, "copy_optional_prob");
  check_fraction(relevant_fraction, "relevant_fraction");
  check_fraction(hard_negative_fraction, "hard_negative_fraction");
  check_fraction(purchase_share, "purchase_share");
}

bool World::is_essential(Attribute a) const {
  const auto& table = essential[kind_index(a.kind)];
  const auto v = static_cast<std::size_t>(a.value);
  return v < table.size() ? table[v] : true;
}

World gen_world(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  World w;
  w.config = config;
  w.seed = seed;
  w.vocab = Vocabulary(config.table_sizes);

  Rng rng(derive_seed(seed, Stream::World, 0));
  const auto n_cat = static_cast<std::size_t>(config.table_sizes[0]);
  const auto n_brand = static_cast<std::size_t>(config.table_sizes[1]);
  const auto n_model = static_cast<std::size_t>(config.table_sizes[2]);

  std::vector<int> brands(n_brand);
  std::iota(brands.begin(), brands.end(), 0);
  w.brands_of_category.resize(n_cat);
  for (auto& list : w.brands_of_category) {
    rng.shuffle(brands);
    const std::size_t k = std::min(n_brand, static_cast<std::size_t>(config.brands_per_category));
    list.assign(brands.begin(), brands.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(list.begin(), list.end());
  }
  w.model_brand.resize(n_model);
  for (auto& b : w.model_brand) {
    b = static_cast<int>(rng.below(n_brand));
  }
  // Exactly round(p * size) values of each kind are essential.
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    const auto size = static_cast<std::size_t>(config.table_sizes[k]);
    auto& table = w.essential[k];
    table.assign(size, false);
    const auto count = static_cast<std::size_t>(
        std::llround(config.essential_prob[k] * static_cast<double>(size)));
    std::vector<std::size_t> order(size);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t i = 0; i < std::min(count, size); ++i) {
      table[order[i]] = true;
    }
  }

  w.catalog.reserve(static_cast<std::size_t>(config.catalog_size));
  for (int i = 0; i < config.catalog_size; ++i) {
    Rng prng(derive_seed(seed, Stream::World, static_cast<std::uint64_t>(i) + 1));
    w.catalog.push_back(make_product(w, i, prng));
  }
  return w;
}

std::vector<int> render_title(const Vocabulary& vocab, std::span<const Attribute> attrs) {
  std::vector<int> out;
  for (AttrKind kind : kTitleOrder) {
    for (const auto& a : attrs) {
      if (a.kind == kind) {
        out.push_back(vocab.attr_token(a));
      }
    }
  }
  return out;
}

std::vector<int> render_query(const Vocabulary& vocab, std::span<const Assertion> assertions) {
  std::vector<int> out;
  for (AttrKind kind : kQueryOrder) {
    for (const auto& a : assertions) {
      if (a.attribute.kind == kind) {
        out.push_back(vocab.attr_token(a.attribute));
      }
    }
  }
  return out;
}

void normalize(const World& world, Product& p) {
  std::sort(p.attributes.begin(), p.attributes.end());
  p.attributes.erase(std::unique(p.attributes.begin(), p.attributes.end()), p.attributes.end());
  p.title_tokens = render_title(world.vocab, p.attributes);
}

void normalize(const World& world, Query& q) {
  std::stable_sort(q.assertions.begin(), q.assertions.end(),
                   [](const Assertion& a, const Assertion& b) {
                     return a.attribute.kind < b.attribute.kind;
                   });
  q.tokens = render_query(world.vocab, q.assertions);
}

OracleResult oracle_label(const World& world, const Query& q, const Product& p) {
  std::array<int, kNumKinds> counts{};
  for (const auto& a : p.attributes) {
    check_attribute(world, a, "product");
    ++counts[kind_index(a.kind)];
  }
  if (counts[kind_index(AttrKind::Category)] != 1 || counts[kind_index(AttrKind::Brand)] != 1 ||
      counts[kind_index(AttrKind::Model)] > 1) {
    throw IntegrityError("product " + std::to_string(p.id) + " violates attribute cardinality");
  }
  std::array<int, kNumKinds> qcounts{};
  for (const auto& a : q.assertions) {
    check_attribute(world, a.attribute, "query");
    ++qcounts[kind_index(a.attribute.kind)];
  }
  if (qcounts[kind_index(AttrKind::Category)] != 1) {
    throw IntegrityError("query " + std::to_string(q.id) + " must assert exactly one Category");
  }

  OracleResult r;
  r.reasons.reserve(q.assertions.size());
  for (const auto& a : q.assertions) {
    const Outcome o = assess(world, a, p);
    r.reasons.push_back({a, o});
    if (o == Outcome::Mismatch || o == Outcome::AbsentEssential) {
      r.label = Label::Irrelevant;
    }
  }
  return r;
}

bool only_nonessential_gaps(std::span<const AssertionOutcome> reasons) {
  bool any_gap = false;
  for (const auto& r : reasons) {
    if (r.outcome == Outcome::AbsentNonEssential) {
      any_gap = true;
    } else if (r.outcome != Outcome::Match) {
      return false;
    }
  }
  return any_gap;
}

std::vector<LabeledPair> gen_pairs(const World& world, std::size_t n, std::uint64_t seed,
                                   int query_id_base) {
  if (n == 0) {
    throw ConfigError("gen_pairs requires n > 0");
  }
  std::vector<LabeledPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, Stream::Pairs, i));
    const Label target =
        rng.bernoulli(world.config.relevant_fraction) ? Label::Relevant : Label::Irrelevant;
    out.push_back(make_pair(world, target, query_id_base + static_cast<int>(i), rng));
  }
  return out;
}

ExposureLog simulate_exposures(const World& world, std::size_t n, double irrelevant_rate,
                               std::uint64_t seed) {
  check_fraction(irrelevant_rate, "irrelevant_rate");
  ExposureLog log;
  log.entries.reserve(n);
  const int base = split_id_base(Split::Exposure);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, Stream::Exposures, i));
    const Label target = rng.bernoulli(irrelevant_rate) ? Label::Irrelevant : Label::Relevant;
    LabeledPair p = make_pair(world, target, base + static_cast<int>(i), rng);
    log.entries.push_back({std::move(p.query), std::move(p.product), false});
  }
  return log;
}

PurchaseLog simulate_purchases(const World& world, const ExposureLog& exposures,
                               double nonessential_gap_rate, std::uint64_t seed) {
  check_fraction(nonessential_gap_rate, "nonessential_gap_rate");
  if (exposures.entries.empty()) {
    throw ConfigError("simulate_purchases requires a nonempty exposure log");
  }
  PurchaseLog log;
  log.entries = exposures.entries;
  for (auto& e : log.entries) {
    e.purchased = false;
  }

  // (priority key, index) per eligibility class.
  std::vector<std::pair<std::uint64_t, std::size_t>> gap, plain;
  for (std::size_t i = 0; i < log.entries.size(); ++i) {
    const auto& e = log.entries[i];
    const OracleResult r = oracle_label(world, e.query, e.product);
    if (r.label != Label::Relevant) {
      continue;
    }
    const bool has_gap = std::any_of(r.reasons.begin(), r.reasons.end(), [](const auto& o) {
      return o.outcome == Outcome::AbsentNonEssential;
    });
    (has_gap ? gap : plain).emplace_back(derive_seed(seed, Stream::Purchases, i), i);
  }
  if (gap.empty() && plain.empty()) {
    log.warning = "no oracle-Relevant exposures; purchase log is empty";
    return log;
  }

  const double g = nonessential_gap_rate;
  const auto G = static_cast<double>(gap.size());
  const auto N = static_cast<double>(plain.size());
  double feasible = 0.0;
  if ((g > 0.0 && gap.empty()) || (g < 1.0 && plain.empty())) {
    log.warning = "gap-rate target unattainable with the available exposures";
    feasible = G + N;
  } else if (g <= 0.0) {
    feasible = N;
  } else if (g >= 1.0) {
    feasible = G;
  } else {
    feasible = std::min(G / g, N / (1.0 - g));
  }
  const auto total = static_cast<std::size_t>(
      std::max(1.0, std::round(world.config.purchase_share * feasible)));
  std::size_t take_gap = std::min(gap.size(), static_cast<std::size_t>(std::ceil(
                                                  g * static_cast<double>(total) - 1e-9)));
  std::size_t take_plain = std::min(plain.size(), total - std::min(total, take_gap));
  if (log.warning) {
    // Fill from whichever class exists.
    take_gap = std::min(gap.size(), total);
    take_plain = std::min(plain.size(), total - take_gap);
  }

  std::sort(gap.begin(), gap.end());
  std::sort(plain.begin(), plain.end());
  for (std::size_t i = 0; i < take_gap; ++i) {
    log.entries[gap[i].second].purchased = true;
  }
  for (std::size_t i = 0; i < take_plain; ++i) {
    log.entries[plain[i].second].purchased = true;
  }
  return log;
}

}  // namespace qprel
