#include "pcpe/commands.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pcpe/cache.hpp"
#include "pcpe/checkpoint.hpp"
#include "pcpe/evaluation.hpp"
#include "pcpe/io_util.hpp"
#include "pcpe/training.hpp"

namespace pcpe {

using json = nlohmann::ordered_json;

namespace {

constexpr std::size_t kValidationCandidates = 20;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter number(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    c.*field = parse_number<T>(k, v);
  };
}
Setter flag(bool RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_bool(k, v); };
}
Setter text(std::string RunConfig::*field) {
  return [field](RunConfig& c, const std::string&, const std::string& v) { c.*field = v; };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data", text(&RunConfig::data)},
      {"valid", text(&RunConfig::valid)},
      {"schema", text(&RunConfig::schema)},
      {"d", number(&RunConfig::d)},
      {"n_layers", number(&RunConfig::n_layers)},
      {"n_heads", number(&RunConfig::n_heads)},
      {"ffn_mult", number(&RunConfig::ffn_mult)},
      {"max_positions", number(&RunConfig::max_positions)},
      {"dropout", number(&RunConfig::dropout)},
      {"share_t2_t3", flag(&RunConfig::share_t2_t3)},
      {"share_all", flag(&RunConfig::share_all)},
      {"l_q", number(&RunConfig::l_q)},
      {"l_p", number(&RunConfig::l_p)},
      {"l_c", number(&RunConfig::l_c)},
      {"m", number(&RunConfig::m)},
      {"fusion", text(&RunConfig::fusion)},
      {"baseline", text(&RunConfig::baseline)},
      {"prefuse_personas", flag(&RunConfig::prefuse_personas)},
      {"ablation", text(&RunConfig::ablation)},
      {"batch_size", number(&RunConfig::batch_size)},
      {"epochs", number(&RunConfig::epochs)},
      {"eval_every_steps", number(&RunConfig::eval_every_steps)},
      {"patience", number(&RunConfig::patience)},
      {"lr", number(&RunConfig::lr)},
      {"seed", number(&RunConfig::seed)},
      {"min_freq", number(&RunConfig::min_freq)},
      {"threads", number(&RunConfig::threads)},
      {"checkpoint", text(&RunConfig::checkpoint)},
      {"cache", text(&RunConfig::cache)},
      {"log", text(&RunConfig::log)},
      {"strict", flag(&RunConfig::strict)},
      {"out_dir", text(&RunConfig::out_dir)},
      {"n_dialogues", number(&RunConfig::n_dialogues)},
      {"n_valid", number(&RunConfig::n_valid)},
      {"n_attributes", number(&RunConfig::n_attributes)},
      {"n_values_per_attribute", number(&RunConfig::n_values_per_attribute)},
      {"vocab_size", number(&RunConfig::vocab_size)},
      {"n_candidates", number(&RunConfig::n_candidates)},
      {"signal_strength", number(&RunConfig::signal_strength)},
  };
  return table;
}

void require(const std::string& value, const char* key, const char* command) {
  if (value.empty()) throw ConfigError(std::string(command) + ": '" + key + "' is required");
}

/// JSONL sink: the log file when configured, `fallback` otherwise.
class LogSink {
 public:
  LogSink(const std::string& path, std::ostream& fallback) : out_(&fallback) {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw ConfigError("cannot open log file " + path);
      out_ = &file_;
    }
  }
  void write(const json& j) { *out_ << j.dump() << '\n' << std::flush; }
  bool to_file() const { return file_.is_open(); }

 private:
  std::ofstream file_;
  std::ostream* out_;
};

std::vector<Dialogue> load_encoded(const std::string& path, const Vocabularies& v,
                                   const ModelConfig& mc) {
  return load_dialogues(path, v, mc.encode_options());
}

}  // namespace

// ---- RunConfig ---------------------------------------------------------------

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, key, value);
  explicit_keys.insert(key);
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.encoder.d = d;
  mc.encoder.n_layers = n_layers;
  mc.encoder.n_heads = n_heads;
  mc.encoder.ffn_mult = ffn_mult;
  mc.encoder.max_positions = max_positions;
  mc.encoder.dropout_rate = dropout;
  mc.encoder.share_t2_t3 = share_t2_t3;
  mc.encoder.share_all = share_all;
  mc.limits = {l_q, l_p, l_c};
  mc.schema = parse_schema(schema);
  mc.baseline = parse_baseline(baseline);
  mc.prefuse_personas = prefuse_personas;
  mc.m = m;
  mc.fusion = parse_fusion(fusion);
  mc.ablation = parse_ablation(ablation);
  return mc;
}

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s;
  s.n_dialogues = n_dialogues;
  s.n_valid = n_valid;
  s.n_attributes = n_attributes;
  s.n_values_per_attribute = n_values_per_attribute;
  s.vocab_size = vocab_size;
  s.n_candidates = n_candidates;
  s.seed = seed;
  s.signal_strength = signal_strength;
  return s;
}

std::string RunConfig::to_json() const {
  json j;
  j["data"] = data;
  j["valid"] = valid;
  j["schema"] = schema;
  j["d"] = d;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["ffn_mult"] = ffn_mult;
  j["max_positions"] = max_positions;
  j["dropout"] = dropout;
  j["share_t2_t3"] = share_t2_t3;
  j["share_all"] = share_all;
  j["l_q"] = l_q;
  j["l_p"] = l_p;
  j["l_c"] = l_c;
  j["m"] = m;
  j["fusion"] = fusion;
  j["baseline"] = baseline;
  j["prefuse_personas"] = prefuse_personas;
  j["ablation"] = ablation;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["eval_every_steps"] = eval_every_steps;
  j["patience"] = patience;
  j["lr"] = lr;
  j["seed"] = seed;
  j["min_freq"] = min_freq;
  j["threads"] = threads;
  j["checkpoint"] = checkpoint;
  j["cache"] = cache;
  j["log"] = log;
  j["strict"] = strict;
  return j.dump();
}

// ---- sidecar vocabularies ----------------------------------------------------

std::filesystem::path vocab_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".vocab";
}

std::filesystem::path attributes_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".attrs.json";
}

void save_vocabularies(const std::filesystem::path& checkpoint, const Vocabularies& v) {
  v.words.save(vocab_path(checkpoint));
  if (v.attributes) v.attributes->save(attributes_path(checkpoint));
}

Vocabularies load_vocabularies(const std::filesystem::path& checkpoint, PersonaSchema schema) {
  Vocabularies v;
  v.words = Vocab::load(vocab_path(checkpoint));
  if (schema == PersonaSchema::Kv) v.attributes = AttributeVocab::load(attributes_path(checkpoint));
  return v;
}

Model load_model(const RunConfig& cfg) {
  require(cfg.checkpoint, "checkpoint", "load");
  ModelConfig mc = read_checkpoint_config(cfg.checkpoint);
  const ModelConfig given = cfg.model_config();
  if (cfg.is_set("schema")) mc.schema = given.schema;
  if (cfg.is_set("baseline")) mc.baseline = given.baseline;
  if (cfg.is_set("prefuse_personas")) mc.prefuse_personas = given.prefuse_personas;
  if (cfg.is_set("m")) mc.m = given.m;
  if (cfg.is_set("fusion")) mc.fusion = given.fusion;
  if (cfg.is_set("ablation")) mc.ablation = given.ablation;
  if (cfg.is_set("d")) mc.encoder.d = given.encoder.d;
  if (cfg.is_set("n_layers")) mc.encoder.n_layers = given.encoder.n_layers;
  if (cfg.is_set("n_heads")) mc.encoder.n_heads = given.encoder.n_heads;
  if (cfg.is_set("ffn_mult")) mc.encoder.ffn_mult = given.encoder.ffn_mult;
  if (cfg.is_set("share_t2_t3")) mc.encoder.share_t2_t3 = given.encoder.share_t2_t3;
  if (cfg.is_set("share_all")) mc.encoder.share_all = given.encoder.share_all;
  Model model(mc, 0);
  load_parameters(cfg.checkpoint, model);
  return model;
}

// ---- commands ----------------------------------------------------------------

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  require(cfg.data, "data", "train");
  require(cfg.valid, "valid", "train");
  require(cfg.checkpoint, "checkpoint", "train");
  ModelConfig mc = cfg.model_config();
  LogSink log(cfg.log, out);

  const auto raw_train = read_raw_dialogues(cfg.data);
  const auto raw_valid = read_raw_dialogues(cfg.valid);
  if (raw_train.empty()) throw DataError(cfg.data + ": no dialogues");
  if (raw_valid.empty()) throw DataError(cfg.valid + ": no dialogues");
  const Vocabularies vocabs = build_vocabularies(raw_train, mc.schema, cfg.min_freq);
  mc.set_vocab_sizes(vocabs);
  const auto train = encode_dialogues(raw_train, vocabs, mc.encode_options());
  const auto valid = encode_dialogues(raw_valid, vocabs, mc.encode_options());
  if (cfg.strict) check_candidate_count(valid, kValidationCandidates);

  Model model(mc, cfg.seed);
  {
    json j;
    j["event"] = "config";
    j["run"] = json::parse(cfg.to_json());
    j["model"] = json::parse(mc.to_json());
    j["parameters"] = model.parameter_count();
    j["train_dialogues"] = train.size();
    j["valid_dialogues"] = valid.size();
    log.write(j);
  }
  save_vocabularies(cfg.checkpoint, vocabs);

  TrainOptions opts;
  opts.batch_size = cfg.batch_size;
  opts.epochs = cfg.epochs;
  opts.eval_every_steps = cfg.eval_every_steps;
  opts.seed = cfg.seed;
  opts.patience = cfg.patience;
  opts.eval_threads = cfg.threads;
  opts.adam.lr = cfg.lr;

  TrainResult result;
  try {
    result = train_model(
        model, train, valid, opts, [&](const json& j) { log.write(j); },
        [&](const Model& m) { save_checkpoint(cfg.checkpoint, m); });
  } catch (const NumericError& e) {
    json j;
    j["event"] = "abort";
    j["error"] = e.what();
    j["checkpoint"] = std::filesystem::exists(cfg.checkpoint) ? cfg.checkpoint : "";
    log.write(j);
    err << "training aborted; last good checkpoint kept at " << cfg.checkpoint << '\n';
    throw;
  }
  json done;
  done["event"] = "done";
  done["steps"] = result.steps;
  done["best_step"] = result.best_step;
  done["stopped_early"] = result.stopped_early;
  done["best"] = json::parse(result.best.to_json());
  log.write(done);
  if (log.to_file()) out << result.best.to_json() << '\n';
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  require(cfg.data, "data", "eval");
  const Model model = load_model(cfg);
  const Vocabularies vocabs = load_vocabularies(cfg.checkpoint, model.config().schema);
  const auto dialogues = load_encoded(cfg.data, vocabs, model.config());
  if (dialogues.empty()) throw DataError(cfg.data + ": no dialogues");
  if (cfg.strict) check_candidate_count(dialogues, kValidationCandidates);

  Evaluation ev;
  if (!cfg.cache.empty()) {
    const EmbeddingCache cache = EmbeddingCache::load(cfg.cache);
    CachedScorer scorer(model, &cache, &cache, cfg.strict ? CacheMode::Strict : CacheMode::Permissive,
                        [&](const std::string& msg) { err << "warning: " << msg << '\n'; });
    ev = evaluate_with(dialogues, [&](const Dialogue& d) { return scorer.score(d); }, cfg.threads);
  } else {
    ev = evaluate(model, dialogues, cfg.threads);
  }
  out << ev.report.to_json() << '\n' << ev.report.to_table();
  return 0;
}

int cmd_score(const RunConfig& cfg, std::istream& in, std::ostream& out, std::ostream& err) {
  const Model model = load_model(cfg);
  const Vocabularies vocabs = load_vocabularies(cfg.checkpoint, model.config().schema);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = trim(buf.str());
  if (text.empty()) throw DataError("score: expected one dialogue on stdin");
  const RawDialogue raw = parse_dialogue_line(text, 1);
  const Dialogue d = encode_dialogue(raw, vocabs, model.config().encode_options());

  ScoreRow row;
  if (!cfg.cache.empty()) {
    const EmbeddingCache cache = EmbeddingCache::load(cfg.cache);
    CachedScorer scorer(model, &cache, &cache, cfg.strict ? CacheMode::Strict : CacheMode::Permissive,
                        [&](const std::string& msg) { err << "warning: " << msg << '\n'; });
    row = scorer.score(d);
  } else {
    row = model.rank(d);
  }
  json ranked = json::array();
  for (auto i : row.ranking) {
    json j;
    j["candidate_index"] = i;
    j["logit"] = row.logits[i];
    j["score"] = row.scores[i];
    ranked.push_back(j);
  }
  out << ranked.dump() << '\n';
  return 0;
}

int cmd_cache(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  require(cfg.data, "data", "cache");
  require(cfg.cache, "cache", "cache");
  const Model model = load_model(cfg);
  const Vocabularies vocabs = load_vocabularies(cfg.checkpoint, model.config().schema);
  const auto dialogues = load_encoded(cfg.data, vocabs, model.config());

  std::vector<TokenIds> candidates;
  std::vector<PersonaEntry> personas;
  for (const auto& d : dialogues) {
    candidates.insert(candidates.end(), d.candidates.begin(), d.candidates.end());
    personas.insert(personas.end(), d.personas.begin(), d.personas.end());
  }
  EmbeddingCache cache = build_candidate_cache(model, candidates, cfg.threads);
  if (model.config().persona_stream()) cache.merge(build_persona_cache(model, personas, cfg.threads));
  if (std::filesystem::exists(cfg.cache)) {
    EmbeddingCache existing = EmbeddingCache::load(cfg.cache);
    existing.merge(cache);
    cache = std::move(existing);
    err << "merged into existing cache " << cfg.cache << '\n';
  }
  cache.save(cfg.cache);

  json j;
  j["cache"] = cfg.cache;
  j["fingerprint"] = fingerprint_hex(cache.fingerprint());
  j["sentences"] = cache.count(CacheKind::Sentence);
  j["word_matrices"] = cache.count(CacheKind::WordMatrix);
  j["personas"] = cache.count(CacheKind::Persona);
  out << j.dump() << '\n';
  return 0;
}

int cmd_synth(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  require(cfg.out_dir, "out_dir", "synth");
  const SynthCorpus corpus = generate_synthetic(cfg.synth_spec());
  std::filesystem::create_directories(cfg.out_dir);
  const auto train = std::filesystem::path(cfg.out_dir) / "train.jsonl";
  const auto valid = std::filesystem::path(cfg.out_dir) / "valid.jsonl";
  write_dialogues(train, corpus.train);
  write_dialogues(valid, corpus.valid);
  json j;
  j["train"] = train.string();
  j["valid"] = valid.string();
  j["train_dialogues"] = corpus.train.size();
  j["valid_dialogues"] = corpus.valid.size();
  out << j.dump() << '\n';
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const InputError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const CacheError*>(&e)) return 5;
  return 1;
}

}  // namespace pcpe
