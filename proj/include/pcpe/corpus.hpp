#pragma once

// Tokenisation, vocabularies, dialogue files, batching and the synthetic
// persona-determined corpus.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pcpe/tensor.hpp"

namespace pcpe {

using TokenIds = std::vector<std::size_t>;

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kSep = 2;
  static constexpr std::size_t kReserved = 3;

  Vocab();

  /// Keeps tokens seen at least min_freq times. Ids after the reserved ones
  /// are ordered by descending count, then lexicographically.
  static Vocab build(std::span<const std::vector<std::string>> streams,
                     std::size_t min_freq);
  /// Reserved ids followed by `tokens` in the given order.
  static Vocab from_tokens(std::span<const std::string> tokens);

  std::size_t id(std::string_view token) const;
  std::optional<std::size_t> find(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line; line n holds id n + 3.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void push(std::string token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Lowercases, then splits on whitespace and punctuation: a word is a run of
/// ASCII alphanumerics (or non-ASCII bytes); any other printable char is its
/// own token.
std::vector<std::string> split_words(std::string_view text);

enum class Truncate { KeepTail, KeepHead };

/// Maps text to ids (UNK for misses) and truncates to max_len.
TokenIds tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len,
                  Truncate keep = Truncate::KeepTail);

// ---- raw dialogue records ---------------------------------------------------

enum class PersonaSchema { Text, Kv };

struct RawKv {
  std::string key;
  std::string value;
  bool value_is_number = false;
  std::string speaker;
  bool speaker_is_number = false;

  bool operator==(const RawKv&) const = default;
};

/// A dialogue exactly as stored on disk, before vocabulary lookup.
struct RawDialogue {
  std::string id;
  PersonaSchema schema = PersonaSchema::Text;
  std::vector<std::string> text_personas;
  std::vector<RawKv> kv_personas;
  std::vector<std::string> history;
  std::string query;
  std::vector<std::string> candidates;
  std::size_t true_index = 0;

  bool operator==(const RawDialogue&) const = default;
};

/// Parses one JSON line. `line_no` is only used for error messages.
RawDialogue parse_dialogue_line(std::string_view line, std::size_t line_no);
std::string dialogue_to_json_line(const RawDialogue& d);

std::vector<RawDialogue> read_raw_dialogues(const std::filesystem::path& path);
/// Written atomically (temp file + rename).
void write_dialogues(const std::filesystem::path& path,
                     std::span<const RawDialogue> dialogues);

/// Splits "your persona: ..." / "partner's persona: ..." prefixes into a
/// segment id (0 self, 1 partner) and the remaining text.
std::pair<std::size_t, std::string> persona_segment(std::string_view text);

/// "k1 : v1 , k2 : v2 , ..." for the pairs of one speaker.
std::string flatten_kv(std::span<const RawKv> pairs);

/// KV pairs grouped by speaker in order of first appearance.
std::vector<std::vector<RawKv>> group_by_speaker(std::span<const RawKv> pairs);

// ---- attribute vocabulary -----------------------------------------------------

/// Key, value and speaker vocabularies for KV personas. Keys whose every
/// training value is numeric are quantile-bucketised into kBuckets bins;
/// other keys are categorical and their values get their own ids.
class AttributeVocab {
 public:
  static constexpr std::size_t kBuckets = 8;

  static AttributeVocab build(std::span<const RawDialogue> training);

  std::size_t key_id(std::string_view key) const { return keys_.id(key); }
  std::size_t speaker_id(std::string_view speaker) const { return speakers_.id(speaker); }
  /// Bucket token for numeric keys, the value itself otherwise.
  std::string value_token(std::string_view key, std::string_view value) const;
  std::size_t value_id(std::string_view key, std::string_view value) const {
    return values_.id(value_token(key, value));
  }

  const Vocab& keys() const { return keys_; }
  const Vocab& values() const { return values_; }
  const Vocab& speakers() const { return speakers_; }
  const std::map<std::string, std::vector<double>>& numeric_edges() const {
    return edges_;
  }

  void save(const std::filesystem::path& path) const;
  static AttributeVocab load(const std::filesystem::path& path);

 private:
  Vocab keys_;
  Vocab values_;
  Vocab speakers_;
  std::map<std::string, std::vector<double>> edges_;
};

// ---- encoded dialogues ------------------------------------------------------

struct KvTriple {
  std::size_t key = 0;
  std::size_t value = 0;
  std::size_t speaker = 0;
  auto operator<=>(const KvTriple&) const = default;
};

/// Either a tokenised persona sentence (with its segment id) or the KV pairs
/// of one speaker.
struct PersonaEntry {
  TokenIds tokens;
  std::size_t segment = 0;
  std::vector<KvTriple> kv;

  bool is_kv() const { return !kv.empty(); }
};

struct Dialogue {
  std::string id;
  std::vector<PersonaEntry> personas;
  std::vector<TokenIds> history;
  TokenIds query;
  /// Query-side encoder input: [persona prefix SEP] history turns SEP-joined,
  /// then the query, tail-truncated.
  TokenIds context;
  std::vector<TokenIds> candidates;
  std::size_t true_index = 0;
};

struct Limits {
  std::size_t l_q = 32;
  std::size_t l_p = 16;
  std::size_t l_c = 16;
};

/// How personas reach the model.
enum class PersonaRouting {
  Structured,     // text entries or KV entries through T1
  FlattenToText,  // KV pairs flattened per speaker, routed through text T1
  Prefuse,        // flattened and prepended to the query text
  Withhold,       // personas dropped entirely
};

struct EncodeOptions {
  PersonaSchema schema = PersonaSchema::Text;
  PersonaRouting routing = PersonaRouting::Structured;
  Limits limits;
};

struct Vocabularies {
  Vocab words;
  std::optional<AttributeVocab> attributes;
};

/// Word-level token streams of a raw dialogue (including flattened KV text),
/// for vocabulary building.
std::vector<std::vector<std::string>> dialogue_token_streams(const RawDialogue& d);
Vocabularies build_vocabularies(std::span<const RawDialogue> training,
                                PersonaSchema schema, std::size_t min_freq);

Dialogue encode_dialogue(const RawDialogue& raw, const Vocabularies& vocabs,
                         const EncodeOptions& options);
std::vector<Dialogue> encode_dialogues(std::span<const RawDialogue> raw,
                                       const Vocabularies& vocabs,
                                       const EncodeOptions& options);

/// read_raw_dialogues + encode_dialogues; schema mismatches are DataErrors.
std::vector<Dialogue> load_dialogues(const std::filesystem::path& path,
                                     const Vocabularies& vocabs,
                                     const EncodeOptions& options);

/// Validation protocol check: exactly `expected` candidates per dialogue.
void check_candidate_count(std::span<const Dialogue> dialogues, std::size_t expected);

// ---- batching ---------------------------------------------------------------

/// n sequences right-padded with PAD to a common length.
struct PaddedSeqs {
  std::size_t n = 0;
  std::size_t len = 0;
  TokenIds ids;
  Mask mask;
  std::vector<std::size_t> lengths;
};

PaddedSeqs pad_sequences(std::span<const TokenIds> seqs);

enum class BatchMode { Train, Eval };

struct Batch {
  std::vector<std::size_t> rows;    // indices into the dialogue list
  std::vector<std::size_t> labels;  // per row: index of the true candidate
  PaddedSeqs contexts;
  /// Train: the rows' true responses, shared by every row.
  /// Eval: every row's own candidates, concatenated in row order.
  PaddedSeqs candidates;
  std::vector<std::size_t> candidate_offsets;  // eval only; size rows+1
  bool pooled = false;
};

std::vector<Batch> make_batches(std::span<const Dialogue> dialogues,
                                std::size_t batch_size, std::uint64_t shuffle_seed,
                                BatchMode mode);

// ---- synthetic corpus -------------------------------------------------------

struct SynthSpec {
  std::size_t n_dialogues = 4000;
  std::size_t n_valid = 500;
  std::size_t n_attributes = 4;
  std::size_t n_values_per_attribute = 20;
  std::size_t vocab_size = 200;
  std::size_t n_candidates = 20;
  std::uint64_t seed = 1;
  double signal_strength = 0.95;
};

struct SynthCorpus {
  std::vector<RawDialogue> train;
  std::vector<RawDialogue> valid;
};

/// Name of the token carrying attribute `attr`'s value `value`.
std::string synth_value_token(std::size_t attr, std::size_t value);
std::string synth_key_token(std::size_t attr);
/// Attribute whose value the true response encodes.
inline constexpr std::size_t kSynthDesignatedAttribute = 0;
inline constexpr const char* kSynthSelfSpeaker = "0";

SynthCorpus generate_synthetic(const SynthSpec& spec);

}  // namespace pcpe
