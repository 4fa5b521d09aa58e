#include "qprel/corpus_io.hpp"

#include <fstream>

#include "qprel/errors.hpp"

namespace qprel::io {

json to_json(const CorpusConfig& c) {
  json tables = json::object();
  json essential = json::object();
  for (AttrKind k : kAllKinds) {
    tables[std::string(kind_name(k))] = c.table_sizes[kind_index(k)];
    essential[std::string(kind_name(k))] = c.essential_prob[kind_index(k)];
  }
  return json{{"table_sizes", tables},
              {"essential_prob", essential},
              {"catalog_size", c.catalog_size},
              {"brands_per_category", c.brands_per_category},
              {"model_prob", c.model_prob},
              {"max_audiences", c.max_audiences},
              {"max_specs", c.max_specs},
              {"max_query_assertions", c.max_query_assertions},
              {"copy_optional_prob", c.copy_optional_prob},
              {"relevant_fraction", c.relevant_fraction},
              {"hard_negative_fraction", c.hard_negative_fraction},
              {"purchase_share", c.purchase_share}};
}

CorpusConfig corpus_config_from_json(const json& j) {
  CorpusConfig c;
  for (AttrKind k : kAllKinds) {
    const std::string name(kind_name(k));
    c.table_sizes[kind_index(k)] = j.at("table_sizes").at(name).get<int>();
    c.essential_prob[kind_index(k)] = j.at("essential_prob").at(name).get<double>();
  }
  j.at("catalog_size").get_to(c.catalog_size);
  j.at("brands_per_category").get_to(c.brands_per_category);
  j.at("model_prob").get_to(c.model_prob);
  j.at("max_audiences").get_to(c.max_audiences);
  j.at("max_specs").get_to(c.max_specs);
  j.at("max_query_assertions").get_to(c.max_query_assertions);
  j.at("copy_optional_prob").get_to(c.copy_optional_prob);
  j.at("relevant_fraction").get_to(c.relevant_fraction);
  j.at("hard_negative_fraction").get_to(c.hard_negative_fraction);
  j.at("purchase_share").get_to(c.purchase_share);
  c.validate();
  return c;
}

json to_json(const Attribute& a) {
  return json{{"kind", std::string(kind_name(a.kind))}, {"value", a.value}};
}

Attribute attribute_from_json(const json& j) {
  return {kind_from_name(j.at("kind").get<std::string>()), j.at("value").get<int>()};
}

json tokens_to_json(const Vocabulary& vocab, const std::vector<int>& tokens) {
  json arr = json::array();
  for (int t : tokens) {
    arr.push_back(vocab.name(t));
  }
  return arr;
}

std::vector<int> tokens_from_json(const Vocabulary& vocab, const json& j) {
  std::vector<int> out;
  out.reserve(j.size());
  for (const auto& s : j) {
    out.push_back(vocab.id(s.get<std::string>()));
  }
  return out;
}

json to_json(const Vocabulary& vocab, const Product& p) {
  json attrs = json::array();
  for (const auto& a : p.attributes) {
    attrs.push_back(to_json(a));
  }
  return json{{"id", p.id}, {"title_tokens", tokens_to_json(vocab, p.title_tokens)},
              {"attributes", attrs}};
}

Product product_from_json(const Vocabulary& vocab, const json& j) {
  Product p;
  p.id = j.at("id").get<int>();
  p.title_tokens = tokens_from_json(vocab, j.at("title_tokens"));
  for (const auto& a : j.at("attributes")) {
    p.attributes.push_back(attribute_from_json(a));
  }
  return p;
}

json to_json(const Vocabulary& vocab, const Query& q) {
  json assertions = json::array();
  for (const auto& a : q.assertions) {
    assertions.push_back(json{{"attribute", to_json(a.attribute)}, {"essential", a.essential}});
  }
  return json{{"id", q.id}, {"tokens", tokens_to_json(vocab, q.tokens)},
              {"assertions", assertions}};
}

Query query_from_json(const Vocabulary& vocab, const json& j) {
  Query q;
  q.id = j.at("id").get<int>();
  q.tokens = tokens_from_json(vocab, j.at("tokens"));
  for (const auto& a : j.at("assertions")) {
    q.assertions.push_back({attribute_from_json(a.at("attribute")), a.at("essential").get<bool>()});
  }
  return q;
}

json to_json(const Vocabulary& vocab, const LabeledPair& p) {
  return json{{"query", to_json(vocab, p.query)},
              {"product", to_json(vocab, p.product)},
              {"label", std::string(label_name(p.label))},
              {"source", std::string(source_name(p.source))}};
}

LabeledPair pair_from_json(const Vocabulary& vocab, const json& j) {
  return {query_from_json(vocab, j.at("query")), product_from_json(vocab, j.at("product")),
          label_from_name(j.at("label").get<std::string>()),
          source_from_name(j.at("source").get<std::string>())};
}

json to_json(const Vocabulary& vocab, const LogEntry& e, bool with_purchase_flag) {
  json j{{"query", to_json(vocab, e.query)}, {"product", to_json(vocab, e.product)}};
  if (with_purchase_flag) {
    j["purchased"] = e.purchased;
  }
  return j;
}

LogEntry log_entry_from_json(const Vocabulary& vocab, const json& j) {
  return {query_from_json(vocab, j.at("query")), product_from_json(vocab, j.at("product")),
          j.value("purchased", false)};
}

json world_manifest(const World& w) {
  return json{{"format", "qprel-world-v1"}, {"seed", w.seed}, {"config", to_json(w.config)}};
}

World world_from_manifest(const json& j) {
  return gen_world(corpus_config_from_json(j.at("config")), j.at("seed").get<std::uint64_t>());
}

std::string serialize_world(const World& w) {
  std::string out = world_manifest(w).dump();
  out.push_back('\n');
  for (const auto& p : w.catalog) {
    out += to_json(w.vocab, p).dump();
    out.push_back('\n');
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  for (const auto& r : records) {
    out << r.dump() << '\n';
  }
  if (!out) {
    throw std::runtime_error("write failed for " + path.string());
  }
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingArtifactError(path.filename().string(), "missing artifact " + path.string());
  }
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      rows.push_back(json::parse(line));
    }
  }
  return rows;
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingArtifactError(path.filename().string(), "missing artifact " + path.string());
  }
  return json::parse(in);
}

std::vector<json> pairs_to_json(const Vocabulary& vocab, const std::vector<LabeledPair>& pairs) {
  std::vector<json> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) {
    rows.push_back(to_json(vocab, p));
  }
  return rows;
}

std::vector<LabeledPair> pairs_from_json(const Vocabulary& vocab, const std::vector<json>& rows) {
  std::vector<LabeledPair> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    out.push_back(pair_from_json(vocab, r));
  }
  return out;
}

}  // namespace qprel::io
