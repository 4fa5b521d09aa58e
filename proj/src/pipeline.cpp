#include "qprel/pipeline.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "qprel/corpus_io.hpp"
#include "qprel/errors.hpp"
#include "qprel/rng.hpp"

namespace qprel {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config documents
// ---------------------------------------------------------------------------

json model_json(const nn::ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"max_len", c.max_len},   {"hidden_dim", c.hidden_dim},
              {"n_layers", c.n_layers},     {"n_heads", c.n_heads},   {"ffn_dim", c.ffn_dim},
              {"causal", c.causal},         {"n_segments", c.n_segments}, {"n_classes", c.n_classes}};
}

nn::ModelConfig model_from(const json& j) {
  nn::ModelConfig c;
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

json train_json(const nn::TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"linear_decay", t.linear_decay},
              {"seed", t.seed},
              {"adam",
               {{"lr", t.adam.lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"weight_decay", t.adam.weight_decay},
                {"grad_clip", t.adam.grad_clip}}}};
}

nn::TrainConfig train_from(const json& j) {
  nn::TrainConfig t;
  j.at("epochs").get_to(t.epochs);
  j.at("batch_size").get_to(t.batch_size);
  j.at("linear_decay").get_to(t.linear_decay);
  j.at("seed").get_to(t.seed);
  const json& a = j.at("adam");
  a.at("lr").get_to(t.adam.lr);
  a.at("beta1").get_to(t.adam.beta1);
  a.at("beta2").get_to(t.adam.beta2);
  a.at("eps").get_to(t.adam.eps);
  a.at("weight_decay").get_to(t.adam.weight_decay);
  a.at("grad_clip").get_to(t.adam.grad_clip);
  return t;
}

void check_train(const nn::TrainConfig& t, const char* what) {
  if (t.epochs < 0 || t.batch_size <= 0 || !(t.adam.lr > 0.0)) {
    throw ConfigError(std::string(what) + ": epochs >= 0, batch_size > 0 and lr > 0 required");
  }
}

/// Every key of `patch` must exist in `base`, recursively through objects.
void check_known_keys(const json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) {
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    if (base.at(it.key()).is_object()) {
      if (!it.value().is_object()) {
        throw ConfigError("config key '" + key + "' must be an object");
      }
      check_known_keys(base.at(it.key()), it.value(), key);
    }
  }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

json cot_json(const Vocabulary& v, const CoTRecord& r) {
  json qa = json::array(), pa = json::array(), cmp = json::array();
  for (const auto& a : r.query_attrs) qa.push_back(io::to_json(a));
  for (const auto& a : r.product_attrs) pa.push_back(io::to_json(a));
  for (const auto& c : r.comparisons) {
    cmp.push_back({{"attribute", io::to_json(c.attribute)},
                   {"outcome", std::string(outcome_name(c.outcome))}});
  }
  return json{{"query_attrs", qa},
              {"product_attrs", pa},
              {"comparisons", cmp},
              {"verdict", std::string(label_name(r.verdict))},
              {"tokens", io::tokens_to_json(v, r.tokens)}};
}

CoTRecord cot_from(const Vocabulary& v, const json& j) {
  std::vector<Attribute> qa, pa;
  std::vector<Comparison> cmp;
  for (const auto& a : j.at("query_attrs")) qa.push_back(io::attribute_from_json(a));
  for (const auto& a : j.at("product_attrs")) pa.push_back(io::attribute_from_json(a));
  for (const auto& c : j.at("comparisons")) {
    cmp.push_back({io::attribute_from_json(c.at("attribute")),
                   outcome_from_name(c.at("outcome").get<std::string>())});
  }
  CoTRecord r = make_cot(v, std::move(qa), std::move(pa), std::move(cmp),
                         label_from_name(j.at("verdict").get<std::string>()));
  if (r.tokens != io::tokens_from_json(v, j.at("tokens"))) {
    throw IntegrityError("CoT record tokens disagree with its fields");
  }
  return r;
}

json synth_json(const Vocabulary& v, const SynthPair& s) {
  json j = io::to_json(v, s.pair);
  j["error_type"] = error_type_name(s.type);
  return j;
}

// ---------------------------------------------------------------------------
// Artifact access
// ---------------------------------------------------------------------------

World load_world(const fs::path& dir) { return io::world_from_manifest(io::read_json(dir / artifact::kWorld)); }

std::vector<LabeledPair> load_pairs(const World& w, const fs::path& path) {
  return io::pairs_from_json(w.vocab, io::read_jsonl(path));
}

void save_pairs(const World& w, const fs::path& path, const std::vector<LabeledPair>& pairs) {
  io::write_jsonl(path, io::pairs_to_json(w.vocab, pairs));
}

std::vector<LogEntry> load_log(const World& w, const fs::path& path) {
  std::vector<LogEntry> out;
  for (const auto& r : io::read_jsonl(path)) {
    out.push_back(io::log_entry_from_json(w.vocab, r));
  }
  return out;
}

PurchaseLog load_purchases(const World& w, const fs::path& dir) {
  PurchaseLog log;
  log.entries = load_log(w, dir / artifact::kPurchases);
  return log;
}

nn::DecoderModel load_decoder_artifact(const fs::path& path) {
  if (!fs::exists(path)) {
    throw MissingArtifactError(path.filename().string(), "missing artifact " + path.string());
  }
  return nn::load_decoder(path);
}

nn::EncoderModel load_encoder_artifact(const fs::path& path) {
  if (!fs::exists(path)) {
    throw MissingArtifactError(path.filename().string(), "missing artifact " + path.string());
  }
  return nn::load_encoder(path);
}

/// Per-seed training schedule: the file's seed mixed with the run seed.
nn::TrainConfig seeded(nn::TrainConfig t, std::uint64_t seed, std::uint64_t stage) {
  t.seed = derive_seed(derive_seed(seed, Stream::Shuffle, stage), t.seed);
  return t;
}

enum InitSlot : std::uint64_t { kDecoderInit = 0, kStudentInit = 1, kTeacherInit = 2 };

nn::EncoderModel student_init(const PipelineConfig& cfg, const World& w, std::uint64_t seed) {
  return nn::EncoderModel(with_vocab(cfg.student, w), derive_seed(seed, Stream::Init, kStudentInit));
}

enum ShuffleStage : std::uint64_t {
  kCotStage = 0,
  kKtoStage = 1,
  kBaseStage = 2,
  kRdStage = 3,
  kDsStage = 4,  // + iteration
  kTeacherStage = 16,
  kPlainStage = 17,
  kKdStage = 18,  // + alpha index
  kBalanceIndex = 64,
};

/// Every index once, then minority-class indices drawn with replacement until
/// both labels are equally frequent.
std::vector<std::size_t> balanced_indices(const std::vector<EncodedExample>& data,
                                          std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < data.size(); ++i) by_class[label_class(data[i].label)].push_back(i);
  std::vector<std::size_t> out(data.size());
  std::iota(out.begin(), out.end(), 0);
  const std::size_t minority = by_class[0].size() < by_class[1].size() ? 0 : 1;
  const auto& pool = by_class[minority];
  if (pool.empty()) return out;
  Rng rng(derive_seed(seed, Stream::Shuffle, kBalanceIndex));
  for (std::size_t k = pool.size(); k < by_class[1 - minority].size(); ++k) {
    out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

std::vector<EncodedExample> pick(const std::vector<EncodedExample>& data,
                                 const std::vector<std::size_t>& idx) {
  std::vector<EncodedExample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(data[i]);
  return out;
}

/// CE student fine-tuned from `init`, selected on validation F1. `init` is
/// returned unchanged when no epoch matches its validation F1.
nn::EncoderModel train_ce_student(const PipelineConfig& cfg, std::uint64_t seed, std::uint64_t stage,
                                  const nn::EncoderModel& init, const std::vector<LabeledPair>& data,
                                  const std::vector<LabeledPair>& validation,
                                  ClassifierTrainReport* report) {
  const int max_len = cfg.student.max_len;
  const auto all = student_examples(data, max_len);
  const auto train = pick(all, balanced_indices(all, derive_seed(seed, Stream::Shuffle, stage)));
  const auto val = student_examples(validation, max_len);
  const double incumbent = evaluate_encoder(init, val).f1;
  ClassifierTrainReport local;
  ClassifierTrainReport& rep = report ? *report : local;
  nn::EncoderModel out =
      train_classifier(init, train, {}, 1.0, seeded(cfg.student_train, seed, stage), val, &rep);
  return rep.val_f1.empty() || evaluate_encoder(out, val).f1 >= incumbent ? out : init;
}

json train_report_json(const ClassifierTrainReport& r) {
  return json{{"epoch_loss", r.epoch_loss},
              {"epoch_mse", r.epoch_mse},
              {"val_f1", r.val_f1},
              {"best_epoch", r.best_epoch},
              {"steps", r.steps}};
}

/// CoT of an annotation; malformed output becomes an empty comparison list.
CoTRecord annotation_cot(const Vocabulary& v, const Annotation& a) {
  if (a.record) {
    return *a.record;
  }
  return make_cot(v, {}, {}, {}, a.verdict);
}


}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

PipelineConfig::PipelineConfig() {
  decoder.causal = true;
  decoder.n_layers = 2;
  teacher.n_layers = 4;
  student.n_layers = 2;

  cot_train.epochs = 15;
  cot_train.batch_size = 16;
  cot_train.adam.lr = 2e-3;
  kto_train.epochs = 1;
  kto_train.batch_size = 16;
  kto_train.adam.lr = 5e-5;
  teacher_train.epochs = 15;
  teacher_train.batch_size = 16;
  teacher_train.adam.lr = 1e-3;
  student_train.epochs = 15;
  student_train.batch_size = 16;
  student_train.adam.lr = 1e-3;
}

void PipelineConfig::validate() const {
  corpus.validate();
  for (const auto* m : {&decoder, &teacher, &student}) {
    if (m->vocab_size != 0) {
      throw ConfigError("model vocab_size is derived from the world and must be 0");
    }
    nn::ModelConfig probe = *m;
    probe.vocab_size = 1;
    probe.validate();
  }
  if (!decoder.causal || teacher.causal || student.causal) {
    throw ConfigError("decoder must be causal; teacher and student bidirectional");
  }
  check_train(cot_train, "cot_train");
  check_train(kto_train, "kto_train");
  check_train(teacher_train, "teacher_train");
  check_train(student_train, "student_train");
  kto.validate();
  distill.check(teacher, student);
  if (align.lr_scales.empty() || !(align.precision_budget >= 0.0)) {
    throw ConfigError("align needs at least one lr scale and a non-negative precision budget");
  }
  for (double s : align.lr_scales) {
    if (!(s > 0.0)) {
      throw ConfigError("align.lr_scales must be positive");
    }
  }
  if (alpha_grid.empty()) {
    throw ConfigError("alpha_grid must not be empty");
  }
  for (double a : alpha_grid) {
    DistillConfig d = distill;
    d.alpha = a;
    d.validate();
  }
  for (double r : {cot.strictness, cot.noise, data.exposure_irrelevant_rate,
                   data.nonessential_gap_rate}) {
    if (!(r >= 0.0 && r <= 1.0)) {
      throw ConfigError("strictness, noise and data rates must lie in [0, 1]");
    }
  }
  if (data.train == 0 || data.validation == 0 || data.test == 0 || data.cot_tuning == 0 ||
      data.exposures == 0) {
    throw ConfigError("every data split needs at least one pair");
  }
  if (ds.iterations < 0) {
    throw ConfigError("ds.iterations must be non-negative");
  }
  if (seeds.empty()) {
    throw ConfigError("at least one seed is required");
  }
}

PipelineConfig reduced_config() {
  PipelineConfig c;
  c.corpus.catalog_size = 600;
  c.data.train = 200;
  c.data.validation = 150;
  c.data.test = 200;
  c.data.cot_tuning = 400;
  c.data.exposures = 400;
  c.decoder.hidden_dim = 32;
  c.decoder.ffn_dim = 64;
  c.teacher.hidden_dim = 32;
  c.teacher.ffn_dim = 64;
  c.teacher.n_layers = 2;
  c.student.hidden_dim = 32;
  c.student.ffn_dim = 64;
  c.student.n_layers = 1;
  c.distill.hidden_dim = 32;
  c.cot_train.epochs = 2;
  c.kto_train.epochs = 1;
  c.teacher_train.epochs = 2;
  c.student_train.epochs = 2;
  c.ds.iterations = 1;
  c.ds.candidates = 100;
  c.seeds = {1};
  return c;
}

json to_json(const PipelineConfig& c) {
  return json{
      {"corpus", io::to_json(c.corpus)},
      {"data",
       {{"train", c.data.train},
        {"validation", c.data.validation},
        {"test", c.data.test},
        {"cot_tuning", c.data.cot_tuning},
        {"exposures", c.data.exposures},
        {"exposure_irrelevant_rate", c.data.exposure_irrelevant_rate},
        {"nonessential_gap_rate", c.data.nonessential_gap_rate}}},
      {"models",
       {{"decoder", model_json(c.decoder)},
        {"teacher", model_json(c.teacher)},
        {"student", model_json(c.student)}}},
      {"training",
       {{"cot", train_json(c.cot_train)},
        {"kto", train_json(c.kto_train)},
        {"teacher", train_json(c.teacher_train)},
        {"student", train_json(c.student_train)}}},
      {"cot", {{"strictness", c.cot.strictness}, {"noise", c.cot.noise}}},
      {"kto",
       {{"beta", c.kto.beta},
        {"lambda_desirable", c.kto.lambda_desirable},
        {"lambda_undesirable", c.kto.lambda_undesirable},
        {"ref_batch", c.kto.ref_batch},
        {"verdict_only", c.kto.verdict_only}}},
      {"align",
       {{"lr_scales", c.align.lr_scales}, {"precision_budget", c.align.precision_budget}}},
      {"distill",
       {{"alpha", c.distill.alpha}, {"hidden_dim", c.distill.hidden_dim}, {"alpha_grid", c.alpha_grid}}},
      {"ds", {{"iterations", c.ds.iterations}, {"candidates", c.ds.candidates}}},
      {"seeds", c.seeds},
      {"out_dir", c.out_dir},
  };
}

PipelineConfig pipeline_config_from_json(const json& j) {
  if (!j.is_object()) {
    throw ConfigError("pipeline config must be a JSON object");
  }
  PipelineConfig c;
  json doc = to_json(c);
  check_known_keys(doc, j, "");
  doc.merge_patch(j);
  try {
    c.corpus = io::corpus_config_from_json(doc.at("corpus"));
    const json& d = doc.at("data");
    d.at("train").get_to(c.data.train);
    d.at("validation").get_to(c.data.validation);
    d.at("test").get_to(c.data.test);
    d.at("cot_tuning").get_to(c.data.cot_tuning);
    d.at("exposures").get_to(c.data.exposures);
    d.at("exposure_irrelevant_rate").get_to(c.data.exposure_irrelevant_rate);
    d.at("nonessential_gap_rate").get_to(c.data.nonessential_gap_rate);
    c.decoder = model_from(doc.at("models").at("decoder"));
    c.teacher = model_from(doc.at("models").at("teacher"));
    c.student = model_from(doc.at("models").at("student"));
    c.cot_train = train_from(doc.at("training").at("cot"));
    c.kto_train = train_from(doc.at("training").at("kto"));
    c.teacher_train = train_from(doc.at("training").at("teacher"));
    c.student_train = train_from(doc.at("training").at("student"));
    doc.at("cot").at("strictness").get_to(c.cot.strictness);
    doc.at("cot").at("noise").get_to(c.cot.noise);
    const json& k = doc.at("kto");
    k.at("beta").get_to(c.kto.beta);
    k.at("lambda_desirable").get_to(c.kto.lambda_desirable);
    k.at("lambda_undesirable").get_to(c.kto.lambda_undesirable);
    k.at("ref_batch").get_to(c.kto.ref_batch);
    k.at("verdict_only").get_to(c.kto.verdict_only);
    doc.at("align").at("lr_scales").get_to(c.align.lr_scales);
    doc.at("align").at("precision_budget").get_to(c.align.precision_budget);
    doc.at("distill").at("alpha").get_to(c.distill.alpha);
    doc.at("distill").at("hidden_dim").get_to(c.distill.hidden_dim);
    doc.at("distill").at("alpha_grid").get_to(c.alpha_grid);
    doc.at("ds").at("iterations").get_to(c.ds.iterations);
    doc.at("ds").at("candidates").get_to(c.ds.candidates);
    doc.at("seeds").get_to(c.seeds);
    doc.at("out_dir").get_to(c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must have the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) {
    value = raw;
  }
  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) {
      throw ConfigError("override key '" + key + "' has an empty component");
    }
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (next.is_null()) {
      next = json::object();
    }
    if (!next.is_object()) {
      throw ConfigError("override key '" + key + "' descends into a non-object");
    }
    node = &next;
  }
  (*node)[parts.back()] = std::move(value);
}

nn::ModelConfig with_vocab(nn::ModelConfig c, const World& world) {
  c.vocab_size = world.vocab.size();
  return c;
}

fs::path seed_dir(const fs::path& out, std::uint64_t seed) {
  return out / ("seed_" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void stage_gen_corpus(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = gen_world(cfg.corpus, seed);
  auto split = [&](Split s, std::size_t n) {
    return gen_pairs(w, n, derive_seed(seed, Stream::Pairs, static_cast<std::uint64_t>(s)),
                     split_id_base(s));
  };
  fs::create_directories(dir);
  io::write_json(dir / artifact::kWorld, io::world_manifest(w));
  save_pairs(w, dir / artifact::kTrain, split(Split::Train, cfg.data.train));
  save_pairs(w, dir / artifact::kValidation, split(Split::Validation, cfg.data.validation));
  save_pairs(w, dir / artifact::kTest, split(Split::Test, cfg.data.test));
  save_pairs(w, dir / artifact::kCotTuning, split(Split::CotTuning, cfg.data.cot_tuning));

  const ExposureLog exposures = simulate_exposures(
      w, cfg.data.exposures, cfg.data.exposure_irrelevant_rate, derive_seed(seed, Stream::Exposures));
  const PurchaseLog purchases = simulate_purchases(w, exposures, cfg.data.nonessential_gap_rate,
                                                   derive_seed(seed, Stream::Purchases));
  std::vector<json> rows;
  for (const auto& e : exposures.entries) rows.push_back(io::to_json(w.vocab, e, false));
  io::write_jsonl(dir / artifact::kExposures, rows);
  rows.clear();
  for (const auto& e : purchases.entries) rows.push_back(io::to_json(w.vocab, e, true));
  io::write_jsonl(dir / artifact::kPurchases, rows);

  std::size_t gap = 0;
  for (const auto& e : purchases.entries) {
    if (e.purchased && only_nonessential_gaps(oracle_label(w, e.query, e.product).reasons)) ++gap;
  }
  io::write_json(dir / artifact::kCorpusSummary,
                 json{{"seed", seed},
                      {"catalog", w.catalog.size()},
                      {"exposures", exposures.entries.size()},
                      {"purchases", purchases.purchase_count()},
                      {"purchases_with_nonessential_gap", gap},
                      {"purchase_warning", purchases.warning ? json(*purchases.warning) : json()}});
}

void stage_train_annotator(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = load_world(dir);
  const auto pairs = load_pairs(w, dir / artifact::kCotTuning);
  const auto validation = load_pairs(w, dir / artifact::kValidation);

  std::vector<CoTRecord> raw;
  std::vector<Label> labels;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    raw.push_back(render_cot(w, pairs[i], 0.0, derive_seed(seed, Stream::Cot, i), cfg.cot.noise));
    labels.push_back(pairs[i].label);
  }
  // Consistency filter on the raw simulator output, then the strictness bias.
  std::vector<std::size_t> kept_idx;
  const auto kept_raw = filter_cot_consistent(raw, labels);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].verdict == labels[i]) kept_idx.push_back(i);
  }
  std::vector<json> rows;
  std::vector<CotExample> data;
  const int max_len = cfg.decoder.max_len;
  for (std::size_t i : kept_idx) {
    const CoTRecord cot =
        render_cot(w, pairs[i], cfg.cot.strictness, derive_seed(seed, Stream::Cot, i));
    rows.push_back(cot_json(w.vocab, cot));
    data.push_back(make_cot_example(pairs[i].query, pairs[i].product, cot, max_len));
  }
  io::write_jsonl(dir / artifact::kCotData, rows);

  nn::DecoderModel decoder(with_vocab(cfg.decoder, w), derive_seed(seed, Stream::Init, kDecoderInit));
  const LmTrainReport rep = train_cot_model(decoder, data, seeded(cfg.cot_train, seed, kCotStage));
  nn::save_checkpoint(decoder, dir / artifact::kAnnotatorSft);

  // Held-out agreement with the biased simulator the decoder imitates.
  std::size_t agree = 0, malformed = 0;
  for (std::size_t i = 0; i < validation.size(); ++i) {
    const Annotation a = annotate(decoder, w.vocab, validation[i].query, validation[i].product);
    const CoTRecord ref = render_cot(w, validation[i], cfg.cot.strictness,
                                     derive_seed(seed, Stream::Cot, kSplitIdStride + i));
    agree += a.verdict == ref.verdict ? 1 : 0;
    malformed += a.malformed ? 1 : 0;
  }
  io::write_json(dir / artifact::kAnnotatorMetrics,
                 json{{"raw_cots", raw.size()},
                      {"kept_cots", kept_raw.size()},
                      {"epoch_loss", rep.epoch_loss},
                      {"probe_loss_before", rep.probe_loss_before},
                      {"probe_loss_after", rep.probe_loss_after},
                      {"steps", rep.steps},
                      {"heldout_agreement",
                       static_cast<double>(agree) / static_cast<double>(validation.size())},
                      {"heldout_malformed", malformed}});
}

void stage_align_annotator(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = load_world(dir);
  const nn::DecoderModel sft = load_decoder_artifact(dir / artifact::kAnnotatorSft);
  const PurchaseLog purchases = load_purchases(w, dir);
  const auto validation = load_pairs(w, dir / artifact::kValidation);
  const auto test = load_pairs(w, dir / artifact::kTest);

  const auto prefs = build_preference_set(sft, purchases, w, seed);
  std::vector<json> rows;
  for (const auto& p : prefs) {
    rows.push_back({{"query", io::to_json(w.vocab, p.query)},
                    {"product", io::to_json(w.vocab, p.product)},
                    {"completion", io::tokens_to_json(w.vocab, p.completion)},
                    {"desirable", p.desirable}});
  }
  io::write_jsonl(dir / artifact::kPreferences, rows);

  const Judge sft_judge = annotator_judge(sft, w.vocab);
  const double sft_fn = purchase_false_negative_rate(purchases, sft_judge);
  const double sft_val_precision = evaluate(sft_judge, validation).precision;

  AlignReport rep;
  nn::DecoderModel aligned = sft;
  double chosen_scale = 0.0;
  double best_fn = sft_fn;
  json candidates = json::array();
  for (double scale : prefs.empty() ? std::vector<double>{} : cfg.align.lr_scales) {
    nn::TrainConfig hyper = seeded(cfg.kto_train, seed, kKtoStage);
    hyper.adam.lr *= scale;
    AlignReport cand_rep;
    nn::DecoderModel cand = align_kto(sft, prefs, cfg.kto, hyper, &cand_rep);
    const Judge judge = annotator_judge(cand, w.vocab);
    const double fn = purchase_false_negative_rate(purchases, judge);
    const double val_precision = evaluate(judge, validation).precision;
    const bool within = sft_val_precision - val_precision <= cfg.align.precision_budget;
    candidates.push_back({{"lr_scale", scale},
                          {"fn_rate", fn},
                          {"validation_precision", val_precision},
                          {"within_budget", within}});
    if (within && fn < best_fn) {
      best_fn = fn;
      chosen_scale = scale;
      aligned = std::move(cand);
      rep = std::move(cand_rep);
    }
  }
  nn::save_checkpoint(aligned, dir / artifact::kAnnotator);

  AlignmentSummary s;
  s.preferences = prefs.size();
  s.fn_rate_before = sft_fn;
  s.fn_rate_after = best_fn;
  s.precision_before = evaluate(sft_judge, test).precision;
  s.precision_after = evaluate(annotator_judge(aligned, w.vocab), test).precision;
  s.mean_reward_desirable_before = rep.mean_reward_desirable_before;
  s.mean_reward_desirable_after = rep.mean_reward_desirable_after;
  io::write_json(dir / artifact::kAlignment,
                 json{{"preferences", s.preferences},
                      {"fn_rate_before", s.fn_rate_before},
                      {"fn_rate_after", s.fn_rate_after},
                      {"precision_before", s.precision_before},
                      {"precision_after", s.precision_after},
                      {"mean_reward_desirable_before", s.mean_reward_desirable_before},
                      {"mean_reward_desirable_after", s.mean_reward_desirable_after},
                      {"mean_reward_undesirable_before", rep.mean_reward_undesirable_before},
                      {"mean_reward_undesirable_after", rep.mean_reward_undesirable_after},
                      {"validation_precision_before", sft_val_precision},
                      {"lr_scale", chosen_scale},
                      {"candidates", candidates},
                      {"steps", rep.steps},
                      {"step_loss", rep.step_loss}});
}

void stage_train_student(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = load_world(dir);
  const auto train = load_pairs(w, dir / artifact::kTrain);
  const auto validation = load_pairs(w, dir / artifact::kValidation);
  ClassifierTrainReport rep;
  const auto student =
      train_ce_student(cfg, seed, kBaseStage, student_init(cfg, w, seed), train, validation, &rep);
  nn::save_checkpoint(student, dir / artifact::kStudentBase);
}

void stage_mine_hard(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = load_world(dir);
  const nn::DecoderModel annotator = load_decoder_artifact(dir / artifact::kAnnotator);
  const nn::EncoderModel base = load_encoder_artifact(dir / artifact::kStudentBase);
  ExposureLog exposures;
  exposures.entries = load_log(w, dir / artifact::kExposures);
  const auto train = load_pairs(w, dir / artifact::kTrain);
  const auto validation = load_pairs(w, dir / artifact::kValidation);

  const MineResult mined = mine_hard(annotator, w.vocab, student_judge(base), exposures);
  save_pairs(w, dir / artifact::kMined, mined.mined);

  std::vector<LabeledPair> data = train;
  data.insert(data.end(), mined.mined.begin(), mined.mined.end());
  const auto student = train_ce_student(cfg, seed, kRdStage, base, data, validation, nullptr);
  nn::save_checkpoint(student, dir / artifact::kStudentRd);
}

void stage_synthesize(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = load_world(dir);
  const nn::DecoderModel annotator = load_decoder_artifact(dir / artifact::kAnnotator);
  nn::EncoderModel current = load_encoder_artifact(dir / artifact::kStudentRd);
  const auto train = load_pairs(w, dir / artifact::kTrain);
  const auto mined = load_pairs(w, dir / artifact::kMined);
  const auto validation = load_pairs(w, dir / artifact::kValidation);

  std::vector<LabeledPair> data = train;
  data.insert(data.end(), mined.begin(), mined.end());
  const std::vector<LabeledPair> seed_pairs = data;
  const Judge annot = annotator_judge(annotator, w.vocab);

  json iterations = json::array();
  for (int it = 1; it <= cfg.ds.iterations; ++it) {
    const Judge student = student_judge(current);
    const ErrorProfile profile = mine_error_types(w, student, validation);
    const SynthResult cand = synthesize(w, seed_pairs, profile, cfg.ds.candidates,
                                        derive_seed(seed, Stream::Synth, static_cast<std::uint64_t>(it)));
    const auto selected = select_confusing(student, cand.pairs);
    const auto kept = filter_candidates(annot, selected);

    std::vector<json> rows;
    for (const auto& c : cand.pairs) rows.push_back(synth_json(w.vocab, c));
    io::write_jsonl(dir / ("synth_candidates_" + std::to_string(it) + ".jsonl"), rows);
    rows.clear();
    for (const auto& c : kept) rows.push_back(synth_json(w.vocab, c));
    io::write_jsonl(dir / ("synth_accepted_" + std::to_string(it) + ".jsonl"), rows);

    for (const auto& c : kept) data.push_back(c.pair);
    current = train_ce_student(cfg, seed, kDsStage + static_cast<std::uint64_t>(it), current, data,
                               validation, nullptr);

    json weights = json::object();
    for (std::size_t i = 0; i < kNumErrorTypes; ++i) {
      weights[error_type_name(kErrorTypes[i])] = profile.weights[i];
    }
    iterations.push_back({{"iteration", it},
                          {"generated", cand.pairs.size()},
                          {"rejected", cand.rejected},
                          {"selected", selected.size()},
                          {"filtered", kept.size()},
                          {"profile", weights},
                          {"profile_uniform_fallback", profile.uniform_fallback},
                          {"unattributed_errors", profile.unattributed}});
  }
  save_pairs(w, dir / artifact::kDsTrain, data);
  nn::save_checkpoint(current, dir / artifact::kStudentDs);
  io::write_json(dir / artifact::kDsSummary, json{{"iterations", iterations}});
}

void stage_train_teacher(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = load_world(dir);
  const nn::DecoderModel annotator = load_decoder_artifact(dir / artifact::kAnnotator);
  const auto train = load_pairs(w, dir / artifact::kDsTrain);
  const auto validation = load_pairs(w, dir / artifact::kValidation);
  const auto test = load_pairs(w, dir / artifact::kTest);

  // One CoT per pair of every split, in split order.
  std::vector<json> rows;
  auto annotate_split = [&](const std::vector<LabeledPair>& pairs, const char* split) {
    std::vector<std::optional<CoTRecord>> cots;
    for (const auto& p : pairs) {
      const Annotation a = annotate(annotator, w.vocab, p.query, p.product);
      cots.emplace_back(annotation_cot(w.vocab, a));
      rows.push_back({{"split", split}, {"malformed", a.malformed}, {"cot", cot_json(w.vocab, *cots.back())}});
    }
    return cots;
  };
  const auto cot_train = annotate_split(train, "train");
  const auto cot_val = annotate_split(validation, "validation");
  const auto cot_test = annotate_split(test, "test");
  io::write_jsonl(dir / artifact::kTeacherCots, rows);

  const int max_len = cfg.teacher.max_len;
  const auto balance = balanced_indices(student_examples(train, max_len),
                                        derive_seed(seed, Stream::Shuffle, kTeacherStage));
  const auto t_train = pick(teacher_examples(train, cot_train, max_len), balance);
  const auto t_val = teacher_examples(validation, cot_val, max_len);
  const auto t_test = teacher_examples(test, cot_test, max_len);
  auto plain = [&](const std::vector<LabeledPair>& pairs) {
    std::vector<EncodedExample> out;
    for (const auto& p : pairs) out.push_back({teacher_input(p.query, p.product, {}, max_len), p.label});
    return out;
  };
  const auto p_train = pick(plain(train), balance), p_val = plain(validation), p_test = plain(test);

  const nn::ModelConfig mc = with_vocab(cfg.teacher, w);
  const std::uint64_t init_seed = derive_seed(seed, Stream::Init, kTeacherInit);
  ClassifierTrainReport rep_attr, rep_plain;
  const auto teacher = train_teacher(nn::EncoderModel(mc, init_seed), t_train,
                                     seeded(cfg.teacher_train, seed, kTeacherStage), t_val, &rep_attr);
  const auto teacher_plain = train_teacher(nn::EncoderModel(mc, init_seed), p_train,
                                           seeded(cfg.teacher_train, seed, kPlainStage), p_val, &rep_plain);
  nn::save_checkpoint(teacher, dir / artifact::kTeacher);
  nn::save_checkpoint(teacher_plain, dir / artifact::kTeacherPlain);

  const Metrics attr_test = evaluate_encoder(teacher, t_test);
  const Metrics plain_test = evaluate_encoder(teacher_plain, p_test);
  io::write_json(dir / artifact::kTeacherMetrics,
                 json{{"with_attrs", to_json(attr_test)},
                      {"plain", to_json(plain_test)},
                      {"with_attrs_val_f1", evaluate_encoder(teacher, t_val).f1},
                      {"plain_val_f1", evaluate_encoder(teacher_plain, p_val).f1},
                      {"with_attrs_training", train_report_json(rep_attr)},
                      {"plain_training", train_report_json(rep_plain)}});
}

void stage_distill(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const World w = load_world(dir);
  const nn::EncoderModel teacher = load_encoder_artifact(dir / artifact::kTeacher);
  const nn::EncoderModel incumbent = load_encoder_artifact(dir / artifact::kStudentDs);
  const auto train = load_pairs(w, dir / artifact::kDsTrain);
  const auto validation = load_pairs(w, dir / artifact::kValidation);

  std::vector<std::optional<CoTRecord>> cots;
  for (const auto& r : io::read_jsonl(dir / artifact::kTeacherCots)) {
    if (r.at("split").get<std::string>() == "train") cots.emplace_back(cot_from(w.vocab, r.at("cot")));
  }
  const auto s_all = student_examples(train, cfg.student.max_len);
  const auto balance = balanced_indices(s_all, derive_seed(seed, Stream::Shuffle, kKdStage));
  const auto t_train = pick(teacher_examples(train, cots, cfg.teacher.max_len), balance);
  const auto s_train = pick(s_all, balance);
  const auto s_val = student_examples(validation, cfg.student.max_len);

  std::optional<nn::EncoderModel> best;
  double best_f1 = -1.0, best_alpha = 0.0;
  json sweep = json::array();
  for (std::size_t k = 0; k < cfg.alpha_grid.size(); ++k) {
    DistillConfig dc = cfg.distill;
    dc.alpha = cfg.alpha_grid[k];
    ClassifierTrainReport rep;
    nn::EncoderModel s = train_student(teacher, t_train, incumbent, s_train, dc,
                                       seeded(cfg.student_train, seed, kKdStage + k), s_val, &rep);
    const double f1 = evaluate_encoder(s, s_val).f1;
    sweep.push_back({{"alpha", dc.alpha}, {"val_f1", f1}, {"training", train_report_json(rep)}});
    if (f1 > best_f1) {
      best_f1 = f1;
      best_alpha = dc.alpha;
      best = std::move(s);
    }
  }
  // Alpha 1 stands for the undistilled incumbent.
  const double incumbent_f1 = evaluate_encoder(incumbent, s_val).f1;
  const bool kept = best_f1 < incumbent_f1;
  nn::save_checkpoint(kept ? incumbent : *best, dir / artifact::kStudentKd);
  io::write_json(dir / artifact::kDistill, json{{"alpha", kept ? 1.0 : best_alpha},
                                                {"val_f1", kept ? incumbent_f1 : best_f1},
                                                {"incumbent_val_f1", incumbent_f1},
                                                {"kept_incumbent", kept},
                                                {"sweep", sweep},
                                                {"seed", seed}});
}

SeedReport stage_evaluate(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  (void)cfg;
  const World w = load_world(dir);
  const auto test = load_pairs(w, dir / artifact::kTest);
  SeedReport r;
  r.seed = seed;
  const char* ckpts[kNumStages] = {artifact::kStudentBase, artifact::kStudentRd, artifact::kStudentDs,
                                   artifact::kStudentKd};
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const nn::EncoderModel m = load_encoder_artifact(dir / ckpts[s]);
    r.stages[s] = evaluate(student_judge(m), test);
  }
  const json al = io::read_json(dir / artifact::kAlignment);
  r.alignment.preferences = al.at("preferences").get<std::size_t>();
  r.alignment.fn_rate_before = al.at("fn_rate_before").get<double>();
  r.alignment.fn_rate_after = al.at("fn_rate_after").get<double>();
  r.alignment.precision_before = al.at("precision_before").get<double>();
  r.alignment.precision_after = al.at("precision_after").get<double>();
  r.alignment.mean_reward_desirable_before = al.at("mean_reward_desirable_before").get<double>();
  r.alignment.mean_reward_desirable_after = al.at("mean_reward_desirable_after").get<double>();

  const json tm = io::read_json(dir / artifact::kTeacherMetrics);
  r.teacher.with_attrs = metrics_from_json(tm.at("with_attrs"));
  r.teacher.plain = metrics_from_json(tm.at("plain"));
  r.teacher.with_attrs_val_f1 = tm.at("with_attrs_val_f1").get<double>();
  r.teacher.plain_val_f1 = tm.at("plain_val_f1").get<double>();

  r.alpha = io::read_json(dir / artifact::kDistill).at("alpha").get<double>();
  r.mined = io::read_jsonl(dir / artifact::kMined).size();
  for (const auto& it : io::read_json(dir / artifact::kDsSummary).at("iterations")) {
    r.ds.push_back({it.at("iteration").get<int>(), it.at("generated").get<std::size_t>(),
                    it.at("rejected").get<std::size_t>(), it.at("selected").get<std::size_t>(),
                    it.at("filtered").get<std::size_t>()});
  }
  AblationReport single;
  single.seeds.push_back(r);
  aggregate(single);
  io::write_json(dir / artifact::kSeedReport, to_json(single).at("seeds").at(0));
  return r;
}

SeedReport run_seed(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  stage_gen_corpus(cfg, seed, dir);
  stage_train_annotator(cfg, seed, dir);
  stage_align_annotator(cfg, seed, dir);
  stage_train_student(cfg, seed, dir);
  stage_mine_hard(cfg, seed, dir);
  stage_synthesize(cfg, seed, dir);
  stage_train_teacher(cfg, seed, dir);
  stage_distill(cfg, seed, dir);
  return stage_evaluate(cfg, seed, dir);
}

AblationReport run_all(const PipelineConfig& cfg, const fs::path& out) {
  cfg.validate();
  AblationReport r = run_ablation(cfg, cfg.seeds, out);
  emit_report(r, out / artifact::kReport);
  return r;
}

}  // namespace qprel
