#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "qprel/corpus.hpp"

namespace qprel::io {

using nlohmann::json;

json to_json(const CorpusConfig& c);
CorpusConfig corpus_config_from_json(const json& j);

json to_json(const Attribute& a);
Attribute attribute_from_json(const json& j);
json tokens_to_json(const Vocabulary& vocab, const std::vector<int>& tokens);
std::vector<int> tokens_from_json(const Vocabulary& vocab, const json& j);

json to_json(const Vocabulary& vocab, const Product& p);
Product product_from_json(const Vocabulary& vocab, const json& j);
json to_json(const Vocabulary& vocab, const Query& q);
Query query_from_json(const Vocabulary& vocab, const json& j);
json to_json(const Vocabulary& vocab, const LabeledPair& p);
LabeledPair pair_from_json(const Vocabulary& vocab, const json& j);
json to_json(const Vocabulary& vocab, const LogEntry& e, bool with_purchase_flag);
LogEntry log_entry_from_json(const Vocabulary& vocab, const json& j);

/// Config and seed; enough to regenerate the world bit-for-bit.
json world_manifest(const World& w);
World world_from_manifest(const json& j);
/// Manifest line followed by one line per product; used for byte comparisons.
std::string serialize_world(const World& w);

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records);
std::vector<json> read_jsonl(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

std::vector<json> pairs_to_json(const Vocabulary& vocab, const std::vector<LabeledPair>& pairs);
std::vector<LabeledPair> pairs_from_json(const Vocabulary& vocab, const std::vector<json>& rows);

}  // namespace qprel::io
