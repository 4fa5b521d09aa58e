#include <doctest.h>

#include <algorithm>
#include <set>

#include "qprel/corpus.hpp"
#include "qprel/corpus_io.hpp"
#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

using namespace qprel;

namespace {

Query make_query(const World& w, std::vector<Assertion> as) {
  Query q;
  q.assertions = std::move(as);
  normalize(w, q);
  return q;
}

Product make_product(const World& w, std::vector<Attribute> attrs) {
  Product p;
  p.attributes = std::move(attrs);
  normalize(w, p);
  return p;
}

double relevant_fraction(const std::vector<LabeledPair>& pairs) {
  const auto n = std::count_if(pairs.begin(), pairs.end(),
                               [](const LabeledPair& p) { return p.label == Label::Relevant; });
  return static_cast<double>(n) / static_cast<double>(pairs.size());
}

}  // namespace

TEST_CASE("derive_seed separates streams and indices") {
  CHECK(derive_seed(1, Stream::Pairs, 0) == derive_seed(1, Stream::Pairs, 0));
  CHECK(derive_seed(1, Stream::Pairs, 0) != derive_seed(1, Stream::Pairs, 1));
  CHECK(derive_seed(1, Stream::Pairs, 0) != derive_seed(1, Stream::Exposures, 0));
  CHECK(derive_seed(1, Stream::Pairs, 0) != derive_seed(2, Stream::Pairs, 0));

  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(rng.below(7) < 7);
  }
  const std::vector<double> w{0.0, 1.0, 0.0};
  CHECK(rng.weighted(w) == 1);
}

TEST_CASE("gen_world is deterministic in (config, seed)") {
  const CorpusConfig cfg;
  const std::string a = io::serialize_world(gen_world(cfg, 7));
  const std::string b = io::serialize_world(gen_world(cfg, 7));
  CHECK(a == b);
  const World w7 = gen_world(cfg, 7);
  const World w8 = gen_world(cfg, 8);
  CHECK(w7.catalog != w8.catalog);
  CHECK(static_cast<int>(w7.catalog.size()) == cfg.catalog_size);

  const World back = io::world_from_manifest(io::world_manifest(w7));
  CHECK(io::serialize_world(back) == a);
}

TEST_CASE("invalid corpus configs are rejected") {
  CorpusConfig cfg;
  cfg.catalog_size = 0;
  CHECK_THROWS_AS(gen_world(cfg, 1), ConfigError);
  cfg = CorpusConfig{};
  cfg.table_sizes[1] = 0;
  CHECK_THROWS_AS(gen_world(cfg, 1), ConfigError);
  cfg = CorpusConfig{};
  cfg.essential_prob[0] = 0.5;
  CHECK_THROWS_AS(gen_world(cfg, 1), ConfigError);
  cfg = CorpusConfig{};
  cfg.relevant_fraction = 1.5;
  CHECK_THROWS_AS(gen_world(cfg, 1), ConfigError);
}

TEST_CASE("vocabulary covers every template token plus OOV") {
  const World w = gen_world(CorpusConfig{}, 3);
  std::set<int> seen;
  for (const auto& p : w.catalog) {
    for (int t : p.title_tokens) {
      CHECK(t >= tok::kFirstAttr);
      CHECK(t < w.vocab.size());
      CHECK(w.vocab.id(w.vocab.name(t)) == t);
    }
  }
  CHECK(w.vocab.id("no_such_token") == tok::kOov);
  CHECK(w.vocab.id("cat_99999") == tok::kOov);
  for (AttrKind k : kAllKinds) {
    for (int v = 0; v < w.config.table_sizes[kind_index(k)]; ++v) {
      const int t = w.vocab.attr_token({k, v});
      CHECK(w.vocab.token_attr(t) == Attribute{k, v});
    }
  }
}

TEST_CASE("oracle worked examples") {
  const World w = gen_world(CorpusConfig{}, 1);
  const Query q = make_query(w, {{{AttrKind::Category, 3}, true}, {{AttrKind::Brand, 5}, true}});
  CHECK(oracle_label(w, q, make_product(w, {{AttrKind::Category, 3}, {AttrKind::Brand, 5}})).label ==
        Label::Relevant);
  const OracleResult swapped =
      oracle_label(w, q, make_product(w, {{AttrKind::Category, 3}, {AttrKind::Brand, 9}}));
  CHECK(swapped.label == Label::Irrelevant);
  CHECK(swapped.reasons[1].outcome == Outcome::Mismatch);

  const Query qs = make_query(w, {{{AttrKind::Category, 3}, true}, {{AttrKind::Spec, 2}, false}});
  const OracleResult gap =
      oracle_label(w, qs, make_product(w, {{AttrKind::Category, 3}, {AttrKind::Brand, 1}}));
  CHECK(gap.label == Label::Relevant);
  CHECK(gap.reasons[1].outcome == Outcome::AbsentNonEssential);
  CHECK(only_nonessential_gaps(gap.reasons));

  const Query unknown = make_query(w, {{{AttrKind::Category, 999}, true}});
  CHECK_THROWS_AS(oracle_label(w, unknown, make_product(w, {{AttrKind::Category, 3},
                                                            {AttrKind::Brand, 1}})),
                  IntegrityError);
}

TEST_CASE("oracle equals the brute-force rule over a small attribute universe") {
  CorpusConfig cfg;
  cfg.table_sizes = {3, 3, 2, 2, 2};
  cfg.catalog_size = 20;
  cfg.brands_per_category = 2;
  const World w = gen_world(cfg, 11);

  std::vector<Product> products;
  for (int c = 0; c < 3; ++c)
    for (int b = 0; b < 3; ++b)
      for (int m = -1; m < 2; ++m)
        for (int am = 0; am < 4; ++am)
          for (int sm = 0; sm < 4; ++sm) {
            std::vector<Attribute> attrs{{AttrKind::Category, c}, {AttrKind::Brand, b}};
            if (m >= 0) attrs.push_back({AttrKind::Model, m});
            for (int v = 0; v < 2; ++v) {
              if (am & (1 << v)) attrs.push_back({AttrKind::Audience, v});
              if (sm & (1 << v)) attrs.push_back({AttrKind::Spec, v});
            }
            products.push_back(make_product(w, attrs));
          }

  // Optional assertion: -1 absent, otherwise value * 2 + essential.
  std::vector<Query> queries;
  for (int c = 0; c < 3; ++c)
    for (int b = -1; b < 3; ++b)
      for (int m = -1; m < 2; ++m)
        for (int a = -1; a < 4; ++a)
          for (int s = -1; s < 4; ++s) {
            std::vector<Assertion> as{{{AttrKind::Category, c}, true}};
            if (b >= 0) as.push_back({{AttrKind::Brand, b}, true});
            if (m >= 0) as.push_back({{AttrKind::Model, m}, true});
            if (a >= 0) as.push_back({{AttrKind::Audience, a / 2}, (a % 2) == 1});
            if (s >= 0) as.push_back({{AttrKind::Spec, s / 2}, (s % 2) == 1});
            queries.push_back(make_query(w, as));
          }

  std::size_t checked = 0, mismatches = 0, tolerance_violations = 0;
  for (const auto& q : queries) {
    for (const auto& p : products) {
      bool relevant = true;
      for (const auto& a : q.assertions) {
        const bool present = std::find(p.attributes.begin(), p.attributes.end(), a.attribute) !=
                             p.attributes.end();
        if (a.essential && !present) relevant = false;
      }
      const OracleResult r = oracle_label(w, q, p);
      mismatches += (r.label == Label::Relevant) != relevant ? 1 : 0;
      if (only_nonessential_gaps(r.reasons) && r.label != Label::Relevant) ++tolerance_violations;
      ++checked;
    }
  }
  CHECK(checked == products.size() * queries.size());
  CHECK(mismatches == 0);
  CHECK(tolerance_violations == 0);
}

TEST_CASE("gen_pairs: stored labels equal the oracle, balance and determinism") {
  const World w = gen_world(CorpusConfig{}, 3);
  const auto pairs = gen_pairs(w, 1000, 3);
  for (const auto& p : pairs) {
    CHECK(p.label == oracle_label(w, p.query, p.product).label);
    CHECK(p.source == Source::Oracle);
  }
  CHECK(pairs == gen_pairs(w, 1000, 3));

  const auto big = gen_pairs(w, 10000, 4);
  const double frac = relevant_fraction(big);
  CHECK(frac >= 0.45);
  CHECK(frac <= 0.55);

  const auto val = gen_pairs(w, 50, 9, split_id_base(Split::Validation));
  for (const auto& p : val) {
    CHECK(p.query.id >= split_id_base(Split::Validation));
    CHECK(p.query.id < split_id_base(Split::Test));
  }
  CHECK_THROWS_AS(gen_pairs(w, 0, 1), ConfigError);
}

TEST_CASE("simulate_exposures hits the irrelevant rate") {
  const World w = gen_world(CorpusConfig{}, 5);
  auto frac_irrelevant = [&](const ExposureLog& log) {
    std::size_t n = 0;
    for (const auto& e : log.entries) {
      n += oracle_label(w, e.query, e.product).label == Label::Irrelevant ? 1 : 0;
    }
    return static_cast<double>(n) / static_cast<double>(log.entries.size());
  };
  CHECK(frac_irrelevant(simulate_exposures(w, 500, 0.0, 1)) == 0.0);
  CHECK(frac_irrelevant(simulate_exposures(w, 500, 1.0, 1)) == 1.0);
  const double f = frac_irrelevant(simulate_exposures(w, 10000, 0.2, 2));
  CHECK(f >= 0.17);
  CHECK(f <= 0.23);
  CHECK_THROWS_AS(simulate_exposures(w, 10, 1.2, 1), ConfigError);
}

TEST_CASE("simulate_purchases: soundness and non-essential gap rate") {
  const World w = gen_world(CorpusConfig{}, 6);
  const ExposureLog ex = simulate_exposures(w, 10000, 0.3, 3);
  const PurchaseLog log = simulate_purchases(w, ex, 0.4, 4);
  REQUIRE(log.purchase_count() > 500);
  std::size_t gap = 0;
  for (const auto& e : log.entries) {
    if (!e.purchased) continue;
    const OracleResult r = oracle_label(w, e.query, e.product);
    CHECK(r.label == Label::Relevant);
    gap += only_nonessential_gaps(r.reasons) ? 1 : 0;
  }
  const double rate = static_cast<double>(gap) / static_cast<double>(log.purchase_count());
  CHECK(rate >= 0.35);
  CHECK(rate <= 0.45);

  const PurchaseLog none = simulate_purchases(w, simulate_exposures(w, 300, 1.0, 3), 0.4, 4);
  CHECK(none.purchase_count() == 0);
  CHECK(none.warning.has_value());
}

TEST_CASE("pairs round-trip through JSON Lines") {
  const World w = gen_world(CorpusConfig{}, 2);
  const auto pairs = gen_pairs(w, 50, 1);
  const auto rows = io::pairs_to_json(w.vocab, pairs);
  const std::string label = rows[0].at("label");
  CHECK((label == "Relevant" || label == "Irrelevant"));
  CHECK(io::pairs_from_json(w.vocab, rows) == pairs);
  CHECK_THROWS_AS(io::read_jsonl("/nonexistent/dir/x.jsonl"), MissingArtifactError);
}
