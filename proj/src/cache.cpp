#include "pcpe/cache.hpp"

#include <algorithm>
#include <cstdio>

#include "pcpe/io_util.hpp"
#include "pcpe/parallel.hpp"

namespace pcpe {

namespace {
constexpr std::string_view kMagic = "PCCH";

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}
}  // namespace

std::string fingerprint_hex(const Fingerprint& f) {
  std::string out;
  char buf[3];
  for (auto b : f) {
    std::snprintf(buf, sizeof buf, "%02x", b);
    out += buf;
  }
  return out;
}

std::uint64_t content_hash(const TokenIds& tokens) {
  Fnv1a h;
  for (auto t : tokens) h.add_u64(t);
  return h.value();
}

std::uint64_t persona_hash(const PersonaEntry& entry) {
  Fnv1a h;
  if (entry.is_kv()) {
    auto kv = entry.kv;
    std::sort(kv.begin(), kv.end());
    h.add_u64(1);
    for (const auto& t : kv) {
      h.add_u64(t.key);
      h.add_u64(t.value);
      h.add_u64(t.speaker);
    }
  } else {
    h.add_u64(0);
    h.add_u64(entry.segment);
    for (auto t : entry.tokens) h.add_u64(t);
  }
  return h.value();
}

std::size_t EmbeddingCache::count(CacheKind kind) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [kind](const auto& e) { return e.first.second == kind; }));
}

void EmbeddingCache::put(std::uint64_t hash, CacheKind kind, const Tensor& t) {
  entries_.try_emplace({hash, kind}, CacheEntry{t.shape(), {t.data().begin(), t.data().end()}});
}

const CacheEntry* EmbeddingCache::find(std::uint64_t hash, CacheKind kind) const {
  auto it = entries_.find({hash, kind});
  return it == entries_.end() ? nullptr : &it->second;
}

void EmbeddingCache::merge(const EmbeddingCache& other) {
  if (other.fingerprint_ != fingerprint_) {
    throw CacheError("cache merge: fingerprint " + fingerprint_hex(other.fingerprint_) +
                     " does not match " + fingerprint_hex(fingerprint_));
  }
  for (const auto& [key, e] : other.entries_) entries_.try_emplace(key, e);
}

void EmbeddingCache::save(const std::filesystem::path& path) const {
  ByteWriter out;
  out.bytes(kMagic);
  out.u32(kCacheVersion);
  out.bytes(std::string_view(reinterpret_cast<const char*>(fingerprint_.data()), fingerprint_.size()));
  out.u64(entries_.size());
  for (const auto& [key, e] : entries_) {
    out.u64(key.first);
    out.u8(static_cast<std::uint8_t>(key.second));
    out.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto x : e.shape) out.u64(x);
    out.f64s(e.values);
  }
  write_file_atomic(path, out.str());
}

EmbeddingCache EmbeddingCache::load(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw CacheError("cache " + path.string() + ": no such file");
  const std::string raw = read_file(path);
  ByteReader<CacheError> in(raw, "cache " + path.string());
  if (in.bytes(4) != kMagic) throw CacheError("cache " + path.string() + ": bad magic");
  if (auto v = in.u32(); v != kCacheVersion) {
    throw CacheError("cache " + path.string() + ": unsupported version " + std::to_string(v));
  }
  Fingerprint f;
  auto fp = in.bytes(f.size());
  std::copy(fp.begin(), fp.end(), f.begin());
  EmbeddingCache cache(f);
  const auto n = in.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto hash = in.u64();
    const auto kind = in.u8();
    if (kind > static_cast<std::uint8_t>(CacheKind::Persona)) {
      throw CacheError("cache " + path.string() + ": unknown entry kind " + std::to_string(kind));
    }
    CacheEntry e;
    const auto rank = in.u32();
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(in.u64());
    e.values = in.f64s(shape_numel(e.shape));
    cache.entries_.emplace(std::make_pair(hash, static_cast<CacheKind>(kind)), std::move(e));
  }
  if (!in.done()) throw CacheError("cache " + path.string() + ": trailing bytes");
  return cache;
}

EmbeddingCache build_candidate_cache(const Model& model, std::span<const TokenIds> candidates,
                                     std::size_t threads) {
  std::map<std::uint64_t, const TokenIds*> unique;
  for (const auto& c : candidates) unique.try_emplace(content_hash(c), &c);
  std::vector<std::pair<std::uint64_t, const TokenIds*>> work(unique.begin(), unique.end());
  std::vector<CandidateEncoding> enc(work.size());
  parallel_for(work.size(), threads, [&](std::size_t i) { enc[i] = model.encode_candidate(*work[i].second); });

  const bool words = model.config().fusion == FusionKind::ColFuse;
  EmbeddingCache cache(model.fingerprint());
  for (std::size_t i = 0; i < work.size(); ++i) {
    cache.put(work[i].first, CacheKind::Sentence, enc[i].sentence);
    if (words) cache.put(work[i].first, CacheKind::WordMatrix, enc[i].words);
  }
  return cache;
}

EmbeddingCache build_persona_cache(const Model& model, std::span<const PersonaEntry> entries,
                                   std::size_t threads) {
  if (!model.persona_encoder()) throw ConfigError("persona cache: this model has no persona stream");
  std::map<std::uint64_t, const PersonaEntry*> unique;
  for (const auto& e : entries) unique.try_emplace(persona_hash(e), &e);
  std::vector<std::pair<std::uint64_t, const PersonaEntry*>> work(unique.begin(), unique.end());
  std::vector<Tensor> vecs(work.size());
  parallel_for(work.size(), threads, [&](std::size_t i) { vecs[i] = model.persona_vector(*work[i].second); });

  EmbeddingCache cache(model.fingerprint());
  for (std::size_t i = 0; i < work.size(); ++i) cache.put(work[i].first, CacheKind::Persona, vecs[i]);
  return cache;
}

CachedScorer::CachedScorer(const Model& model, const EmbeddingCache* candidates,
                           const EmbeddingCache* personas, CacheMode mode, WarnFn warn)
    : model_(model),
      candidates_(candidates),
      personas_(personas),
      mode_(mode),
      warn_(std::move(warn)),
      word_matrices_(model.config().fusion == FusionKind::ColFuse) {
  const Fingerprint f = model.fingerprint();
  for (const EmbeddingCache** c : {&candidates_, &personas_}) {
    if (*c == nullptr || (*c)->fingerprint() == f) continue;
    const std::string msg = "cache fingerprint " + fingerprint_hex((*c)->fingerprint()) +
                            " does not match the model (" + fingerprint_hex(f) + ")";
    if (mode_ == CacheMode::Strict) throw CacheError(msg);
    if (warn_) warn_(msg + "; ignoring the cache");
    *c = nullptr;
  }
}

void CachedScorer::miss(const std::string& what, std::uint64_t hash) const {
  const std::string msg = "cache miss: " + what + " " + hash_hex(hash);
  if (mode_ == CacheMode::Strict) throw CacheError(msg);
  if (warn_) warn_(msg + "; recomputing");
}

CandidateEncoding CachedScorer::candidate(const TokenIds& tokens) const {
  const auto h = content_hash(tokens);
  const CacheEntry* s = candidates_ ? candidates_->find(h, CacheKind::Sentence) : nullptr;
  const CacheEntry* w = candidates_ && word_matrices_ ? candidates_->find(h, CacheKind::WordMatrix) : nullptr;
  if (s && (!word_matrices_ || w)) {
    CandidateEncoding c;
    c.sentence = s->tensor();
    if (w) c.words = w->tensor();
    return c;
  }
  miss(s ? "candidate word matrix" : "candidate", h);
  return model_.encode_candidate(tokens);
}

Tensor CachedScorer::persona(const PersonaEntry& entry) const {
  const auto h = persona_hash(entry);
  if (personas_) {
    if (const CacheEntry* e = personas_->find(h, CacheKind::Persona)) return e->tensor();
  }
  miss("persona", h);
  return model_.persona_vector(entry);
}

ScoreRow CachedScorer::score(const Dialogue& d) const {
  Tensor persona_vecs;
  if (model_.config().persona_stream()) {
    if (d.personas.empty()) {
      throw DataError("dialogue " + d.id + ": the persona-coded stream needs at least one persona entry");
    }
    std::vector<Tensor> vecs;
    for (const auto& e : d.personas) vecs.push_back(persona(e));
    NoGradGuard guard;
    persona_vecs = concat_rows(vecs);
  }
  ContextEncoding ctx = model_.encode_context(d, std::move(persona_vecs));
  std::vector<CandidateEncoding> cands;
  cands.reserve(d.candidates.size());
  for (const auto& c : d.candidates) cands.push_back(candidate(c));
  return model_.score(ctx, cands);
}

ScoreRow score_with_cache(const Model& model, const Dialogue& d, const EmbeddingCache* candidates,
                          const EmbeddingCache* personas, CacheMode mode) {
  return CachedScorer(model, candidates, personas, mode).score(d);
}

}  // namespace pcpe
