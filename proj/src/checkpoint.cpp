// Checkpoint format (single JSON document):
//
//   {
//     "format": "qprel-ckpt-v1",
//     "kind": "encoder" | "decoder",
//     "config": { vocab_size, max_len, hidden_dim, n_layers, n_heads, ffn_dim,
//                 causal, n_segments, n_classes },
//     "seed": <uint64>, "steps": <int64>,
//     "tensors": [ { "name", "rows", "cols", "data": [column-major doubles] } ]
//   }
//
// Doubles are written with round-trip precision, so loading reproduces every
// parameter bit-for-bit.

#include <fstream>

#include <json.hpp>

#include "qprel/errors.hpp"
#include "qprel/neural.hpp"

namespace qprel::nn {

namespace {

using nlohmann::json;

json config_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"max_len", c.max_len},
              {"hidden_dim", c.hidden_dim}, {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"ffn_dim", c.ffn_dim},
              {"causal", c.causal},         {"n_segments", c.n_segments},
              {"n_classes", c.n_classes}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_len").get_to(c.max_len);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("causal").get_to(c.causal);
  j.at("n_segments").get_to(c.n_segments);
  j.at("n_classes").get_to(c.n_classes);
  return c;
}

json read_doc(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingArtifactError(path.filename().string(), "missing checkpoint " + path.string());
  }
  json j = json::parse(in);
  if (j.value("format", "") != "qprel-ckpt-v1") {
    throw std::runtime_error("unrecognised checkpoint format in " + path.string());
  }
  return j;
}

template <typename Model>
Model restore(const json& j) {
  Model m(config_from(j.at("config")), j.at("seed").get<std::uint64_t>());
  m.set_steps(j.at("steps").get<std::int64_t>());
  auto& params = m.params();
  const auto& tensors = j.at("tensors");
  if (tensors.size() != params.count()) {
    throw DimensionError("checkpoint tensor count does not match model");
  }
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& t = tensors[i];
    Tensor& dst = params[i];
    if (t.at("name").get<std::string>() != dst.name ||
        t.at("rows").get<Eigen::Index>() != dst.value.rows() ||
        t.at("cols").get<Eigen::Index>() != dst.value.cols()) {
      throw DimensionError("checkpoint tensor " + dst.name + " has the wrong shape");
    }
    const auto& data = t.at("data");
    if (static_cast<Eigen::Index>(data.size()) != dst.value.size()) {
      throw DimensionError("checkpoint tensor " + dst.name + " has the wrong size");
    }
    for (Eigen::Index k = 0; k < dst.value.size(); ++k) {
      dst.value.data()[k] = data[static_cast<std::size_t>(k)].get<double>();
    }
  }
  return m;
}

}  // namespace

void save_checkpoint(const Transformer& model, const std::filesystem::path& path) {
  json tensors = json::array();
  for (const auto& t : model.params().tensors()) {
    json data = json::array();
    for (Eigen::Index k = 0; k < t.value.size(); ++k) {
      data.push_back(t.value.data()[k]);
    }
    tensors.push_back(json{{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()},
                           {"data", std::move(data)}});
  }
  const json doc{{"format", "qprel-ckpt-v1"},
                 {"kind", model.config().causal ? "decoder" : "encoder"},
                 {"config", config_json(model.config())},
                 {"seed", model.seed()},
                 {"steps", model.steps()},
                 {"tensors", std::move(tensors)}};
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write checkpoint " + path.string());
  }
  out << doc.dump() << '\n';
}

EncoderModel load_encoder(const std::filesystem::path& path) {
  const json j = read_doc(path);
  if (j.at("kind") != "encoder") {
    throw ConfigError(path.string() + " is not an encoder checkpoint");
  }
  return restore<EncoderModel>(j);
}

DecoderModel load_decoder(const std::filesystem::path& path) {
  const json j = read_doc(path);
  if (j.at("kind") != "decoder") {
    throw ConfigError(path.string() + " is not a decoder checkpoint");
  }
  return restore<DecoderModel>(j);
}

}  // namespace qprel::nn
