#pragma once

// Precomputed candidate and persona embeddings keyed by content hash.
//
// File layout: "PCCH", u32 version, 32-byte model fingerprint, u64 entry
// count, then per entry: u64 hash, u8 kind, u32 rank, u64 extents,
// little-endian f64 values. Entries are written in (hash, kind) order.

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "pcpe/model.hpp"

namespace pcpe {

inline constexpr std::uint32_t kCacheVersion = 1;

using Fingerprint = std::array<std::uint8_t, 32>;
std::string fingerprint_hex(const Fingerprint& f);

enum class CacheKind : std::uint8_t { Sentence = 0, WordMatrix = 1, Persona = 2 };

/// 64-bit FNV-1a over the token ids.
std::uint64_t content_hash(const TokenIds& tokens);
/// KV entries hash their sorted (key, value, speaker) triples; text entries
/// hash their segment and tokens.
std::uint64_t persona_hash(const PersonaEntry& entry);

struct CacheEntry {
  Shape shape;
  std::vector<double> values;

  Tensor tensor() const { return Tensor::from(shape, values); }
};

class EmbeddingCache {
 public:
  explicit EmbeddingCache(const Fingerprint& fingerprint) : fingerprint_(fingerprint) {}

  const Fingerprint& fingerprint() const { return fingerprint_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t count(CacheKind kind) const;

  /// Keeps the first value stored under (hash, kind).
  void put(std::uint64_t hash, CacheKind kind, const Tensor& t);
  const CacheEntry* find(std::uint64_t hash, CacheKind kind) const;
  /// CacheError when the fingerprints differ.
  void merge(const EmbeddingCache& other);

  void save(const std::filesystem::path& path) const;
  static EmbeddingCache load(const std::filesystem::path& path);

 private:
  Fingerprint fingerprint_;
  std::map<std::pair<std::uint64_t, CacheKind>, CacheEntry> entries_;
};

/// Sentence embeddings for every distinct candidate, plus word matrices when
/// the model scores with Col-Fuse.
EmbeddingCache build_candidate_cache(const Model& model, std::span<const TokenIds> candidates,
                                     std::size_t threads = 0);
/// Aggregated persona vectors, one per distinct entry.
EmbeddingCache build_persona_cache(const Model& model, std::span<const PersonaEntry> entries,
                                   std::size_t threads = 0);

enum class CacheMode { Strict, Permissive };

using WarnFn = std::function<void(const std::string&)>;

/// Scores dialogues from cached embeddings. Strict mode refuses stale caches
/// and misses with a CacheError; permissive mode recomputes and warns.
class CachedScorer {
 public:
  CachedScorer(const Model& model, const EmbeddingCache* candidates,
               const EmbeddingCache* personas, CacheMode mode, WarnFn warn = {});

  ScoreRow score(const Dialogue& d) const;

 private:
  CandidateEncoding candidate(const TokenIds& tokens) const;
  Tensor persona(const PersonaEntry& entry) const;
  void miss(const std::string& what, std::uint64_t hash) const;

  const Model& model_;
  const EmbeddingCache* candidates_;
  const EmbeddingCache* personas_;
  CacheMode mode_;
  WarnFn warn_;
  bool word_matrices_;
};

ScoreRow score_with_cache(const Model& model, const Dialogue& d, const EmbeddingCache* candidates,
                          const EmbeddingCache* personas, CacheMode mode = CacheMode::Strict);

}  // namespace pcpe
