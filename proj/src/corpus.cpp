#include "pcpe/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "pcpe/io_util.hpp"

namespace pcpe {

using json = nlohmann::ordered_json;

// ---- Vocab -----------------------------------------------------------------

Vocab::Vocab() {
  push("<pad>");
  push("<unk>");
  push("<sep>");
}

void Vocab::push(std::string token) {
  index_.emplace(token, tokens_.size());
  tokens_.push_back(std::move(token));
}

Vocab Vocab::build(std::span<const std::vector<std::string>> streams, std::size_t min_freq) {
  if (streams.empty()) throw InputError("build_vocab: empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& s : streams)
    for (const auto& t : s) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  for (auto& [tok, n] : kept) {
    if (!v.find(tok)) v.push(tok);
  }
  return v;
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (v.find(t)) throw DataError("vocab: duplicate token '" + t + "'");
    v.push(t);
  }
  return v;
}

std::optional<std::size_t> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocab::id(std::string_view token) const { return find(token).value_or(kUnk); }

void Vocab::save(const std::filesystem::path& path) const {
  std::ostringstream os;
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) os << tokens_[i] << '\n';
  write_file_atomic(path, os.str());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("vocab: cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_tokens(tokens);
}

// ---- tokenisation ------------------------------------------------------------

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (char ch : text) {
    auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (std::isalnum(u) || u >= 0x80) {
      word.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
      out.emplace_back(1, ch);
    }
  }
  flush();
  return out;
}

TokenIds tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len,
                  Truncate keep) {
  if (max_len == 0) throw InputError("tokenize: max_len must be at least 1");
  auto words = split_words(text);
  TokenIds ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(vocab.id(w));
  if (ids.size() > max_len) {
    if (keep == Truncate::KeepTail) {
      ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(max_len));
    } else {
      ids.resize(max_len);
    }
  }
  return ids;
}

// ---- JSON lines ----------------------------------------------------------------

namespace {

[[noreturn]] void fail(std::size_t line_no, const std::string& what) {
  throw DataError("line " + std::to_string(line_no) + ": " + what);
}

const json& field(const json& obj, const char* name, std::size_t line_no) {
  auto it = obj.find(name);
  if (it == obj.end()) fail(line_no, std::string("missing required field '") + name + "'");
  return *it;
}

std::string string_field(const json& obj, const char* name, std::size_t line_no) {
  const auto& v = field(obj, name, line_no);
  if (!v.is_string()) fail(line_no, std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

std::vector<std::string> string_list(const json& obj, const char* name, std::size_t line_no) {
  const auto& v = field(obj, name, line_no);
  if (!v.is_array()) fail(line_no, std::string("field '") + name + "' must be a list");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) fail(line_no, std::string("field '") + name + "' must hold strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

std::pair<std::string, bool> scalar_text(const json& v, const char* name, std::size_t line_no) {
  if (v.is_string()) return {v.get<std::string>(), false};
  if (v.is_number()) return {v.dump(), true};
  fail(line_no, std::string("persona field '") + name + "' must be a string or number");
}

}  // namespace

RawDialogue parse_dialogue_line(std::string_view line, std::size_t line_no) {
  json obj;
  try {
    obj = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!obj.is_object()) fail(line_no, "expected a JSON object");

  RawDialogue d;
  d.id = string_field(obj, "id", line_no);
  const auto& personas = field(obj, "personas", line_no);
  if (!personas.is_array()) fail(line_no, "field 'personas' must be a list");
  bool saw_text = false, saw_kv = false;
  for (const auto& p : personas) {
    if (p.is_string()) {
      saw_text = true;
      d.text_personas.push_back(p.get<std::string>());
    } else if (p.is_object()) {
      saw_kv = true;
      RawKv kv;
      auto key = field(p, "key", line_no);
      if (!key.is_string()) fail(line_no, "persona field 'key' must be a string");
      kv.key = key.get<std::string>();
      std::tie(kv.value, kv.value_is_number) = scalar_text(field(p, "value", line_no), "value", line_no);
      std::tie(kv.speaker, kv.speaker_is_number) =
          scalar_text(field(p, "speaker", line_no), "speaker", line_no);
      d.kv_personas.push_back(std::move(kv));
    } else {
      fail(line_no, "persona entries must be strings or {key, value, speaker} objects");
    }
  }
  if (saw_text && saw_kv) fail(line_no, "mixed text and key-value personas");
  d.schema = saw_kv ? PersonaSchema::Kv : PersonaSchema::Text;
  d.history = string_list(obj, "history", line_no);
  d.query = string_field(obj, "query", line_no);
  d.candidates = string_list(obj, "candidates", line_no);
  const auto& ti = field(obj, "true_index", line_no);
  if (!ti.is_number_integer() || ti.get<long long>() < 0) {
    fail(line_no, "field 'true_index' must be a non-negative integer");
  }
  d.true_index = ti.get<std::size_t>();
  if (d.true_index >= d.candidates.size()) {
    fail(line_no, "field 'true_index' = " + std::to_string(d.true_index) +
                      " is out of range for " + std::to_string(d.candidates.size()) +
                      " candidates");
  }
  return d;
}

std::string dialogue_to_json_line(const RawDialogue& d) {
  json obj;
  obj["id"] = d.id;
  json personas = json::array();
  if (d.schema == PersonaSchema::Text) {
    for (const auto& p : d.text_personas) personas.push_back(p);
  } else {
    for (const auto& kv : d.kv_personas) {
      json e;
      e["key"] = kv.key;
      e["value"] = kv.value_is_number ? json::parse(kv.value) : json(kv.value);
      e["speaker"] = kv.speaker_is_number ? json::parse(kv.speaker) : json(kv.speaker);
      personas.push_back(std::move(e));
    }
  }
  obj["personas"] = std::move(personas);
  obj["history"] = d.history;
  obj["query"] = d.query;
  obj["candidates"] = d.candidates;
  obj["true_index"] = d.true_index;
  return obj.dump();
}

std::vector<RawDialogue> read_raw_dialogues(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dialogue file " + path.string());
  std::vector<RawDialogue> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_dialogue_line(line, line_no));
  }
  return out;
}

void write_dialogues(const std::filesystem::path& path, std::span<const RawDialogue> dialogues) {
  std::string body;
  for (const auto& d : dialogues) {
    body += dialogue_to_json_line(d);
    body += '\n';
  }
  write_file_atomic(path, body);
}

std::pair<std::size_t, std::string> persona_segment(std::string_view text) {
  static constexpr std::string_view kSelf = "your persona:";
  static constexpr std::string_view kPartner = "partner's persona:";
  auto strip = [](std::string_view s) {
    auto b = s.find_first_not_of(' ');
    return b == std::string_view::npos ? std::string() : std::string(s.substr(b));
  };
  if (text.starts_with(kPartner)) return {1, strip(text.substr(kPartner.size()))};
  if (text.starts_with(kSelf)) return {0, strip(text.substr(kSelf.size()))};
  return {0, std::string(text)};
}

std::string flatten_kv(std::span<const RawKv> pairs) {
  std::string out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i) out += " , ";
    out += pairs[i].key + " : " + pairs[i].value;
  }
  return out;
}

std::vector<std::vector<RawKv>> group_by_speaker(std::span<const RawKv> pairs) {
  std::vector<std::string> order;
  std::vector<std::vector<RawKv>> groups;
  for (const auto& kv : pairs) {
    auto it = std::find(order.begin(), order.end(), kv.speaker);
    if (it == order.end()) {
      order.push_back(kv.speaker);
      groups.emplace_back();
      groups.back().push_back(kv);
    } else {
      groups[static_cast<std::size_t>(it - order.begin())].push_back(kv);
    }
  }
  return groups;
}

// ---- AttributeVocab ------------------------------------------------------------

namespace {

std::optional<double> parse_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::string tmp(s);
  char* end = nullptr;
  double v = std::strtod(tmp.c_str(), &end);
  if (end != tmp.c_str() + tmp.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

AttributeVocab AttributeVocab::build(std::span<const RawDialogue> training) {
  std::map<std::string, std::vector<std::string>> by_key;
  std::vector<std::vector<std::string>> key_stream(1), speaker_stream(1);
  for (const auto& d : training) {
    for (const auto& kv : d.kv_personas) {
      by_key[kv.key].push_back(kv.value);
      key_stream[0].push_back(kv.key);
      speaker_stream[0].push_back(kv.speaker);
    }
  }
  if (by_key.empty()) throw DataError("attribute vocabulary: no key-value personas in training data");
  AttributeVocab av;
  av.keys_ = Vocab::build(key_stream, 1);
  av.speakers_ = Vocab::build(speaker_stream, 1);
  for (auto& [key, vals] : by_key) {
    std::vector<double> nums;
    for (const auto& v : vals) {
      auto x = parse_number(v);
      if (!x) {
        nums.clear();
        break;
      }
      nums.push_back(*x);
    }
    if (nums.empty()) continue;
    std::sort(nums.begin(), nums.end());
    std::vector<double> edges;
    for (std::size_t q = 1; q < kBuckets; ++q) {
      std::size_t idx = std::min(nums.size() - 1, q * nums.size() / kBuckets);
      edges.push_back(nums[idx]);
    }
    av.edges_[key] = std::move(edges);
  }
  std::vector<std::vector<std::string>> value_stream(1);
  for (const auto& [key, vals] : by_key) {
    if (av.edges_.count(key)) {
      for (std::size_t b = 0; b < kBuckets; ++b)
        value_stream[0].push_back(key + "#b" + std::to_string(b));
    } else {
      for (const auto& v : vals) value_stream[0].push_back(v);
    }
  }
  av.values_ = Vocab::build(value_stream, 1);
  return av;
}

std::string AttributeVocab::value_token(std::string_view key, std::string_view value) const {
  auto it = edges_.find(std::string(key));
  if (it == edges_.end()) return std::string(value);
  auto x = parse_number(value);
  if (!x) return std::string(value);
  auto bucket = std::upper_bound(it->second.begin(), it->second.end(), *x) - it->second.begin();
  return std::string(key) + "#b" + std::to_string(bucket);
}

void AttributeVocab::save(const std::filesystem::path& path) const {
  auto tail = [](const Vocab& v) {
    return std::vector<std::string>(v.tokens().begin() + Vocab::kReserved, v.tokens().end());
  };
  json obj;
  obj["keys"] = tail(keys_);
  obj["values"] = tail(values_);
  obj["speakers"] = tail(speakers_);
  obj["numeric_edges"] = json::object();
  for (const auto& [k, e] : edges_) obj["numeric_edges"][k] = e;
  write_file_atomic(path, obj.dump(2) + "\n");
}

AttributeVocab AttributeVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("attribute vocab: cannot open " + path.string());
  try {
    json obj = json::parse(in);
    AttributeVocab av;
    av.keys_ = Vocab::from_tokens(obj.at("keys").get<std::vector<std::string>>());
    av.values_ = Vocab::from_tokens(obj.at("values").get<std::vector<std::string>>());
    av.speakers_ = Vocab::from_tokens(obj.at("speakers").get<std::vector<std::string>>());
    for (auto& [k, e] : obj.at("numeric_edges").items()) {
      av.edges_[k] = e.get<std::vector<double>>();
    }
    return av;
  } catch (const json::exception& e) {
    throw DataError("attribute vocab " + path.string() + ": " + e.what());
  }
}

// ---- encoding ----------------------------------------------------------------

std::vector<std::vector<std::string>> dialogue_token_streams(const RawDialogue& d) {
  std::vector<std::vector<std::string>> out;
  for (const auto& p : d.text_personas) out.push_back(split_words(persona_segment(p).second));
  for (const auto& g : group_by_speaker(d.kv_personas)) out.push_back(split_words(flatten_kv(g)));
  for (const auto& h : d.history) out.push_back(split_words(h));
  out.push_back(split_words(d.query));
  for (const auto& c : d.candidates) out.push_back(split_words(c));
  return out;
}

Vocabularies build_vocabularies(std::span<const RawDialogue> training, PersonaSchema schema,
                                std::size_t min_freq) {
  std::vector<std::vector<std::string>> streams;
  for (const auto& d : training) {
    auto s = dialogue_token_streams(d);
    streams.insert(streams.end(), std::make_move_iterator(s.begin()),
                   std::make_move_iterator(s.end()));
  }
  Vocabularies v{Vocab::build(streams, min_freq), std::nullopt};
  if (schema == PersonaSchema::Kv) v.attributes = AttributeVocab::build(training);
  return v;
}

namespace {

constexpr std::size_t kUnbounded = static_cast<std::size_t>(-1);

std::vector<std::string> persona_texts(const RawDialogue& raw) {
  std::vector<std::string> out;
  if (raw.schema == PersonaSchema::Text) {
    for (const auto& p : raw.text_personas) out.push_back(persona_segment(p).second);
  } else {
    for (const auto& g : group_by_speaker(raw.kv_personas)) out.push_back(flatten_kv(g));
  }
  return out;
}

}  // namespace

Dialogue encode_dialogue(const RawDialogue& raw, const Vocabularies& vocabs,
                         const EncodeOptions& options) {
  if (raw.schema != options.schema &&
      !(raw.text_personas.empty() && raw.kv_personas.empty())) {
    throw DataError("dialogue " + raw.id + ": persona schema does not match the configured schema");
  }
  const auto& lim = options.limits;
  Dialogue d;
  d.id = raw.id;
  d.true_index = raw.true_index;

  TokenIds prefix;
  switch (options.routing) {
    case PersonaRouting::Structured:
      if (options.schema == PersonaSchema::Kv) {
        if (!vocabs.attributes) throw ConfigError("KV personas need an attribute vocabulary");
        const auto& av = *vocabs.attributes;
        for (const auto& group : group_by_speaker(raw.kv_personas)) {
          PersonaEntry e;
          for (const auto& kv : group) {
            e.kv.push_back({av.key_id(kv.key), av.value_id(kv.key, kv.value),
                            av.speaker_id(kv.speaker)});
          }
          if (e.kv.size() > lim.l_p) e.kv.resize(lim.l_p);
          d.personas.push_back(std::move(e));
        }
        break;
      }
      [[fallthrough]];
    case PersonaRouting::FlattenToText: {
      const auto texts = persona_texts(raw);
      for (std::size_t i = 0; i < texts.size(); ++i) {
        PersonaEntry e;
        const std::string& body = texts[i];
        e.segment = raw.schema == PersonaSchema::Text ? persona_segment(raw.text_personas[i]).first
                                                      : std::min<std::size_t>(i, 1);
        // Persona text keeps its head: entries start with the salient clause.
        e.tokens = tokenize(body, vocabs.words, lim.l_p, Truncate::KeepHead);
        if (!e.tokens.empty()) d.personas.push_back(std::move(e));
      }
      break;
    }
    case PersonaRouting::Prefuse:
      for (const auto& text : persona_texts(raw)) {
        if (!prefix.empty()) prefix.push_back(Vocab::kSep);
        auto t = tokenize(text, vocabs.words, kUnbounded);
        prefix.insert(prefix.end(), t.begin(), t.end());
      }
      break;
    case PersonaRouting::Withhold:
      break;
  }

  for (const auto& h : raw.history) d.history.push_back(tokenize(h, vocabs.words, kUnbounded));
  d.query = tokenize(raw.query, vocabs.words, kUnbounded);

  TokenIds ctx = prefix;
  if (!ctx.empty()) ctx.push_back(Vocab::kSep);
  for (const auto& h : d.history) {
    ctx.insert(ctx.end(), h.begin(), h.end());
    ctx.push_back(Vocab::kSep);
  }
  ctx.insert(ctx.end(), d.query.begin(), d.query.end());
  if (ctx.size() > lim.l_q) ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(lim.l_q));
  if (ctx.empty()) throw DataError("dialogue " + raw.id + ": empty query context");
  d.context = std::move(ctx);

  for (const auto& c : raw.candidates) {
    auto t = tokenize(c, vocabs.words, lim.l_c, Truncate::KeepHead);
    if (t.empty()) throw DataError("dialogue " + raw.id + ": empty candidate");
    d.candidates.push_back(std::move(t));
  }
  return d;
}

std::vector<Dialogue> encode_dialogues(std::span<const RawDialogue> raw,
                                       const Vocabularies& vocabs, const EncodeOptions& options) {
  std::vector<Dialogue> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(encode_dialogue(r, vocabs, options));
  return out;
}

std::vector<Dialogue> load_dialogues(const std::filesystem::path& path,
                                     const Vocabularies& vocabs, const EncodeOptions& options) {
  auto raw = read_raw_dialogues(path);
  return encode_dialogues(raw, vocabs, options);
}

void check_candidate_count(std::span<const Dialogue> dialogues, std::size_t expected) {
  for (const auto& d : dialogues) {
    if (d.candidates.size() != expected) {
      throw DataError("dialogue " + d.id + ": expected " + std::to_string(expected) +
                      " candidates, found " + std::to_string(d.candidates.size()));
    }
  }
}

// ---- batching ----------------------------------------------------------------

PaddedSeqs pad_sequences(std::span<const TokenIds> seqs) {
  PaddedSeqs p;
  p.n = seqs.size();
  for (const auto& s : seqs) p.len = std::max(p.len, s.size());
  if (p.n == 0 || p.len == 0) throw InputError("pad_sequences: nothing to pad");
  p.ids.assign(p.n * p.len, Vocab::kPad);
  p.mask.assign(p.n * p.len, 0);
  for (std::size_t i = 0; i < p.n; ++i) {
    std::copy(seqs[i].begin(), seqs[i].end(), p.ids.begin() + static_cast<std::ptrdiff_t>(i * p.len));
    std::fill_n(p.mask.begin() + static_cast<std::ptrdiff_t>(i * p.len), seqs[i].size(), 1);
    p.lengths.push_back(seqs[i].size());
  }
  return p;
}

std::vector<Batch> make_batches(std::span<const Dialogue> dialogues, std::size_t batch_size,
                                std::uint64_t shuffle_seed, BatchMode mode) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (mode == BatchMode::Train && batch_size < 2) {
    throw ConfigError("training batch size must be at least 2 for in-batch negatives");
  }
  std::vector<std::size_t> order(dialogues.size());
  std::iota(order.begin(), order.end(), 0);
  if (mode == BatchMode::Train) {
    std::mt19937_64 rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::size_t n = std::min(batch_size, order.size() - start);
    if (mode == BatchMode::Train && n < batch_size) break;
    Batch b;
    std::vector<TokenIds> ctx, cands;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& d = dialogues[order[start + k]];
      b.rows.push_back(order[start + k]);
      ctx.push_back(d.context);
      if (mode == BatchMode::Train) {
        cands.push_back(d.candidates.at(d.true_index));
        b.labels.push_back(k);
      } else {
        b.candidate_offsets.push_back(cands.size());
        cands.insert(cands.end(), d.candidates.begin(), d.candidates.end());
        b.labels.push_back(d.true_index);
      }
    }
    if (mode == BatchMode::Eval) b.candidate_offsets.push_back(cands.size());
    b.pooled = mode == BatchMode::Train;
    b.contexts = pad_sequences(ctx);
    b.candidates = pad_sequences(cands);
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---- synthetic corpus -------------------------------------------------------

std::string synth_value_token(std::size_t attr, std::size_t value) {
  return "a" + std::to_string(attr) + "v" + std::to_string(value);
}

std::string synth_key_token(std::size_t attr) { return "attr" + std::to_string(attr); }

namespace {

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::string fillers(std::mt19937_64& rng, std::size_t vocab_size, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += "w" + std::to_string(uniform(rng, 0, vocab_size - 1));
  }
  return out;
}

std::string response_with(std::mt19937_64& rng, std::size_t vocab_size, const std::string& value) {
  auto words = split_words(fillers(rng, vocab_size, uniform(rng, 2, 4)));
  auto pos = static_cast<std::ptrdiff_t>(uniform(rng, 0, words.size()));
  words.insert(words.begin() + pos, value);
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

RawDialogue synth_dialogue(const SynthSpec& spec, std::mt19937_64& rng, std::string id,
                           std::size_t n_candidates) {
  const std::size_t n_vals = spec.n_values_per_attribute;
  const std::size_t attr = kSynthDesignatedAttribute;
  RawDialogue d;
  d.id = std::move(id);
  d.schema = PersonaSchema::Kv;

  std::size_t self_value = 0;
  for (const char* speaker : {kSynthSelfSpeaker, "1"}) {
    for (std::size_t a = 0; a < spec.n_attributes; ++a) {
      std::size_t v = uniform(rng, 0, n_vals - 1);
      if (a == attr && std::string(speaker) == kSynthSelfSpeaker) self_value = v;
      d.kv_personas.push_back(
          {synth_key_token(a), synth_value_token(a, v), false, speaker, false});
    }
  }

  d.history.push_back(fillers(rng, spec.vocab_size, uniform(rng, 2, 4)));
  // The query names every option of the designated attribute, shuffled.
  std::vector<std::size_t> options(n_vals);
  std::iota(options.begin(), options.end(), 0);
  std::shuffle(options.begin(), options.end(), rng);
  d.query = fillers(rng, spec.vocab_size, uniform(rng, 2, 4));
  for (auto v : options) d.query += " " + synth_value_token(attr, v);

  const bool signal = std::bernoulli_distribution(spec.signal_strength)(rng);
  std::vector<std::size_t> others;
  for (std::size_t v = 0; v < n_vals; ++v)
    if (v != self_value) others.push_back(v);
  std::size_t true_value = self_value;
  if (!signal && !others.empty()) true_value = others[uniform(rng, 0, others.size() - 1)];

  std::vector<std::size_t> pool;
  for (auto v : others)
    if (v != true_value) pool.push_back(v);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::size_t> values{true_value};
  for (std::size_t k = 1; k < n_candidates; ++k) {
    if (k - 1 < pool.size()) {
      values.push_back(pool[k - 1]);
    } else if (!pool.empty()) {
      values.push_back(pool[uniform(rng, 0, pool.size() - 1)]);
    } else {
      values.push_back(others.empty() ? self_value : others[uniform(rng, 0, others.size() - 1)]);
    }
  }
  d.true_index = uniform(rng, 0, n_candidates - 1);
  std::swap(values[0], values[d.true_index]);
  for (auto v : values)
    d.candidates.push_back(response_with(rng, spec.vocab_size, synth_value_token(attr, v)));
  return d;
}

std::string padded_id(const char* prefix, std::size_t i) {
  std::string n = std::to_string(i);
  return std::string(prefix) + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
}

}  // namespace

SynthCorpus generate_synthetic(const SynthSpec& spec) {
  if (spec.n_dialogues == 0 || spec.n_attributes == 0 || spec.n_values_per_attribute == 0 ||
      spec.vocab_size == 0 || spec.n_candidates == 0) {
    throw ConfigError("synthetic corpus: all counts must be positive");
  }
  if (!(spec.signal_strength >= 0.0 && spec.signal_strength <= 1.0)) {
    throw ConfigError("synthetic corpus: signal_strength must lie in [0, 1]");
  }
  std::mt19937_64 rng(spec.seed);
  SynthCorpus c;
  for (std::size_t i = 0; i < spec.n_dialogues; ++i)
    c.train.push_back(synth_dialogue(spec, rng, padded_id("train-", i), 1));
  for (std::size_t i = 0; i < spec.n_valid; ++i)
    c.valid.push_back(synth_dialogue(spec, rng, padded_id("valid-", i), spec.n_candidates));
  return c;
}

}  // namespace pcpe
