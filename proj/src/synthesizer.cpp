#include "qprel/synthesizer.hpp"

#include <algorithm>
#include <cmath>

#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

namespace qprel {

namespace {

constexpr std::array<std::string_view, 7> kErrorKindNames{
    "BrandSwap", "ModelEdit", "AudienceFlip", "SpecChange",
    "EssentialDrop", "NonEssentialDrop", "CategorySwap"};

void set_single(Product& p, AttrKind kind, std::optional<int> value) {
  std::erase_if(p.attributes, [kind](const Attribute& a) { return a.kind == kind; });
  if (value) {
    p.attributes.push_back({kind, *value});
  }
}

std::vector<int> models_of_brand(const World& w, int brand) {
  std::vector<int> out;
  for (std::size_t m = 0; m < w.model_brand.size(); ++m) {
    if (w.model_brand[m] == brand) {
      out.push_back(static_cast<int>(m));
    }
  }
  return out;
}

/// Keeps the product's model consistent with its (possibly new) brand.
void repair_model(const World& w, Product& p, Rng& rng) {
  const auto model = p.single(AttrKind::Model);
  const int brand = *p.single(AttrKind::Brand);
  if (!model || w.model_brand[static_cast<std::size_t>(*model)] == brand) {
    return;
  }
  const auto owned = models_of_brand(w, brand);
  set_single(p, AttrKind::Model,
             owned.empty() ? std::nullopt : std::optional<int>(owned[rng.below(owned.size())]));
}

template <typename Pred>
std::vector<int> pick_values(int table, Pred&& keep) {
  std::vector<int> out;
  for (int v = 0; v < table; ++v) {
    if (keep(v)) {
      out.push_back(v);
    }
  }
  return out;
}

bool mutate(const World& w, const Query& q, Product& p, ErrorType t, Rng& rng) {
  const auto& sizes = w.config.table_sizes;
  switch (t.kind) {
    case ErrorKind::BrandSwap: {
      const Assertion* a = q.find(AttrKind::Brand);
      if (!a) return false;
      const int cur = *p.single(AttrKind::Brand);
      const auto cat = static_cast<std::size_t>(*p.single(AttrKind::Category));
      std::vector<int> options;
      for (int b : w.brands_of_category[cat]) {
        if (b != cur && b != a->attribute.value) options.push_back(b);
      }
      if (options.empty()) {
        options = pick_values(sizes[kind_index(AttrKind::Brand)],
                              [&](int b) { return b != cur && b != a->attribute.value; });
      }
      if (options.empty()) return false;
      set_single(p, AttrKind::Brand, options[rng.below(options.size())]);
      repair_model(w, p, rng);
      return true;
    }
    case ErrorKind::ModelEdit: {
      const Assertion* a = q.find(AttrKind::Model);
      if (!a) return false;
      auto options = models_of_brand(w, *p.single(AttrKind::Brand));
      std::erase(options, a->attribute.value);
      if (const auto cur = p.single(AttrKind::Model); cur && options.size() > 1) {
        std::erase(options, *cur);
      }
      if (options.empty()) return false;
      set_single(p, AttrKind::Model, options[rng.below(options.size())]);
      return true;
    }
    case ErrorKind::AudienceFlip:
    case ErrorKind::SpecChange: {
      const AttrKind kind =
          t.kind == ErrorKind::AudienceFlip ? AttrKind::Audience : AttrKind::Spec;
      const Assertion* a = q.find(kind);
      if (!a || a->essential != (t.target == Label::Irrelevant)) return false;
      const auto options = pick_values(sizes[kind_index(kind)], [&](int v) {
        return v != a->attribute.value && !p.has({kind, v});
      });
      if (options.empty()) return false;
      std::erase(p.attributes, a->attribute);
      p.attributes.push_back({kind, options[rng.below(options.size())]});
      return true;
    }
    case ErrorKind::EssentialDrop:
    case ErrorKind::NonEssentialDrop: {
      const bool essential = t.kind == ErrorKind::EssentialDrop;
      std::vector<Attribute> options;
      for (const auto& a : q.assertions) {
        const AttrKind k = a.attribute.kind;
        if (a.essential == essential && k != AttrKind::Category && k != AttrKind::Brand &&
            p.has(a.attribute)) {
          options.push_back(a.attribute);
        }
      }
      if (options.empty()) return false;
      std::erase(p.attributes, options[rng.below(options.size())]);
      return true;
    }
    case ErrorKind::CategorySwap: {
      const int cur = *p.single(AttrKind::Category);
      const int brand = *p.single(AttrKind::Brand);
      const int n_cat = sizes[kind_index(AttrKind::Category)];
      auto options = pick_values(n_cat, [&](int c) {
        const auto& bs = w.brands_of_category[static_cast<std::size_t>(c)];
        return c != cur && std::find(bs.begin(), bs.end(), brand) != bs.end();
      });
      if (!options.empty()) {
        set_single(p, AttrKind::Category, options[rng.below(options.size())]);
        return true;
      }
      options = pick_values(n_cat, [&](int c) { return c != cur; });
      if (options.empty()) return false;
      const int c = options[rng.below(options.size())];
      const auto& bs = w.brands_of_category[static_cast<std::size_t>(c)];
      set_single(p, AttrKind::Category, c);
      set_single(p, AttrKind::Brand, bs[rng.below(bs.size())]);
      repair_model(w, p, rng);
      return true;
    }
  }
  return false;
}

}  // namespace

std::string_view error_kind_name(ErrorKind k) { return kErrorKindNames[static_cast<std::size_t>(k)]; }

ErrorKind error_kind_from_name(std::string_view s) {
  for (std::size_t i = 0; i < kErrorKindNames.size(); ++i) {
    if (kErrorKindNames[i] == s) {
      return static_cast<ErrorKind>(i);
    }
  }
  throw IntegrityError("unknown error kind '" + std::string(s) + "'");
}

bool is_compatible(ErrorType t) {
  return std::find(kErrorTypes.begin(), kErrorTypes.end(), t) != kErrorTypes.end();
}

std::size_t error_type_index(ErrorType t) {
  const auto it = std::find(kErrorTypes.begin(), kErrorTypes.end(), t);
  if (it == kErrorTypes.end()) {
    throw ConfigError("incompatible error type " + error_type_name(t));
  }
  return static_cast<std::size_t>(it - kErrorTypes.begin());
}

std::string error_type_name(ErrorType t) {
  return std::string(error_kind_name(t.kind)) + "/" + std::string(label_name(t.target));
}

ErrorType error_type_from_name(std::string_view s) {
  const auto slash = s.find('/');
  if (slash == std::string_view::npos) {
    throw IntegrityError("malformed error type '" + std::string(s) + "'");
  }
  const ErrorType t{error_kind_from_name(s.substr(0, slash)), label_from_name(s.substr(slash + 1))};
  if (!is_compatible(t)) {
    throw IntegrityError("incompatible error type '" + std::string(s) + "'");
  }
  return t;
}

ErrorProfile ErrorProfile::uniform() {
  ErrorProfile p;
  p.weights.fill(1.0 / static_cast<double>(kNumErrorTypes));
  p.uniform_fallback = true;
  return p;
}

std::optional<LabeledPair> perturb(const World& world, const LabeledPair& pair, ErrorType etype,
                                   std::uint64_t seed) {
  if (!is_compatible(etype)) {
    throw ConfigError("incompatible error type " + error_type_name(etype));
  }
  Rng rng(seed);
  LabeledPair out = pair;
  if (!mutate(world, out.query, out.product, etype, rng)) {
    return std::nullopt;
  }
  normalize(world, out.product);
  if (out.product.id < kSynthProductIdBase) {
    out.product.id += kSynthProductIdBase;
  }
  if (oracle_label(world, out.query, out.product).label != etype.target) {
    return std::nullopt;
  }
  out.label = etype.target;
  out.source = Source::DSSynth;
  return out;
}

std::optional<ErrorType> attribute_error(const World& world, const LabeledPair& pair,
                                         Label predicted) {
  const OracleResult r = oracle_label(world, pair.query, pair.product);
  if (predicted == r.label) {
    return std::nullopt;
  }
  const Product& p = pair.product;
  if (r.label == Label::Relevant) {
    for (const auto& o : r.reasons) {
      if (o.outcome != Outcome::AbsentNonEssential) continue;
      const AttrKind k = o.assertion.attribute.kind;
      if (!p.has_kind(k)) return ErrorType{ErrorKind::NonEssentialDrop, Label::Relevant};
      return ErrorType{k == AttrKind::Audience ? ErrorKind::AudienceFlip : ErrorKind::SpecChange,
                       Label::Relevant};
    }
    return std::nullopt;
  }
  for (const auto& o : r.reasons) {
    const AttrKind k = o.assertion.attribute.kind;
    if (o.outcome == Outcome::Mismatch) {
      switch (k) {
        case AttrKind::Category: return ErrorType{ErrorKind::CategorySwap, Label::Irrelevant};
        case AttrKind::Brand: return ErrorType{ErrorKind::BrandSwap, Label::Irrelevant};
        default: return ErrorType{ErrorKind::ModelEdit, Label::Irrelevant};
      }
    }
    if (o.outcome == Outcome::AbsentEssential) {
      if (k == AttrKind::Audience && p.has_kind(k)) {
        return ErrorType{ErrorKind::AudienceFlip, Label::Irrelevant};
      }
      if (k == AttrKind::Spec && p.has_kind(k)) {
        return ErrorType{ErrorKind::SpecChange, Label::Irrelevant};
      }
      return ErrorType{ErrorKind::EssentialDrop, Label::Irrelevant};
    }
  }
  return std::nullopt;
}

ErrorProfile mine_error_types(const World& world, const Judge& student,
                              std::span<const LabeledPair> eval_pairs) {
  ErrorProfile prof;
  std::array<std::size_t, kNumErrorTypes> counts{};
  for (const auto& pair : eval_pairs) {
    const Label pred = student(pair.query, pair.product);
    if (pred == pair.label) {
      continue;
    }
    if (const auto t = attribute_error(world, pair, pred)) {
      ++counts[error_type_index(*t)];
      ++prof.attributed;
    } else {
      ++prof.unattributed;
    }
  }
  if (prof.attributed == 0) {
    ErrorProfile u = ErrorProfile::uniform();
    u.unattributed = prof.unattributed;
    return u;
  }
  for (std::size_t i = 0; i < kNumErrorTypes; ++i) {
    prof.weights[i] = static_cast<double>(counts[i]) / static_cast<double>(prof.attributed);
  }
  return prof;
}

SynthResult synthesize(const World& world, std::span<const LabeledPair> seed_pairs,
                       const ErrorProfile& profile, std::size_t n, std::uint64_t seed) {
  if (seed_pairs.empty()) {
    throw ConfigError("synthesize requires nonempty seed pairs");
  }
  double total = 0.0;
  for (double w : profile.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ConfigError("error profile weights must be finite and non-negative");
    }
    total += w;
  }
  if (!(total > 0.0)) {
    throw ConfigError("error profile needs at least one positive weight");
  }
  // Seed pairs each type applies to, found by one probe perturbation each.
  std::array<std::vector<std::size_t>, kNumErrorTypes> pools;
  for (std::size_t k = 0; k < kNumErrorTypes; ++k) {
    if (profile.weights[k] <= 0.0) continue;
    const std::uint64_t probe = derive_seed(seed, Stream::Synth, n + k);
    for (std::size_t j = 0; j < seed_pairs.size(); ++j) {
      if (perturb(world, seed_pairs[j], kErrorTypes[k], derive_seed(probe, j))) {
        pools[k].push_back(j);
      }
    }
  }
  SynthResult out;
  out.requested = n;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, Stream::Synth, i));
    const std::size_t k = rng.weighted(profile.weights);
    const ErrorType t = kErrorTypes[k];
    const auto& pool = pools[k];
    bool accepted = false;
    for (int attempt = 0; attempt < kSynthRetries && !accepted && !pool.empty(); ++attempt) {
      const LabeledPair& base = seed_pairs[pool[rng.below(pool.size())]];
      if (auto p = perturb(world, base, t, rng.next_u64())) {
        out.pairs.push_back({std::move(*p), t});
        ++out.type_counts[error_type_index(t)];
        accepted = true;
      }
    }
    if (!accepted) {
      ++out.rejected;
    }
  }
  return out;
}

std::vector<SynthPair> select_confusing(const Judge& student, std::span<const SynthPair> candidates) {
  std::vector<SynthPair> out;
  for (const auto& c : candidates) {
    if (student(c.pair.query, c.pair.product) != c.pair.label) {
      out.push_back(c);
    }
  }
  return out;
}

std::vector<SynthPair> filter_candidates(const Judge& annotator,
                                         std::span<const SynthPair> candidates) {
  std::vector<SynthPair> out;
  for (const auto& c : candidates) {
    if (annotator(c.pair.query, c.pair.product) == c.pair.label) {
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace qprel
