#pragma once

#include <type_traits>
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lime/binary_io.hpp"
#include "lime/model.hpp"

namespace lime {

class CacheMissError : public std::runtime_error {
 public:
  CacheMissError(std::vector<std::uint64_t> ids, const std::string& msg)
      : std::runtime_error(msg), ids_(std::move(ids)) {}
  const std::vector<std::uint64_t>& ids() const noexcept { return ids_; }

 private:
  std::vector<std::uint64_t> ids_;
};

class StaleCacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCacheMagic[8] = {'L', 'I', 'M', 'E', 'Q', 'K', '1', '\0'};
inline constexpr std::uint32_t kCacheVersion = 1;

/// Hash of every parameter the cached weight rows depend on: the link
/// embeddings and the item-side query/key projections with their norms.
/// Native-precision bytes are hashed, so any change to one scalar flips it.
template <class T>
std::uint64_t model_fingerprint(const Model<T>& m) {
  if (!is_lime(m.kind())) throw std::logic_error("fingerprint requested for non-LIME model " + model_kind_name(m.kind()));
  const auto& p = m.decoupled();
  const std::pair<const char*, const Param<T>*> parts[] = {
      {"links", &m.links()},           {"w_q", &p.w_q},
      {"w_k", &p.w_k},                 {"norm_q.gain", &p.norm_q.gain},
      {"norm_q.bias", &p.norm_q.bias}, {"norm_k.gain", &p.norm_k.gain},
      {"norm_k.bias", &p.norm_k.bias}};
  ByteWriter w;
  w.u8(sizeof(T));
  for (const auto& [name, param] : parts) {
    const Tensor<T>& t = **param;
    w.u16(static_cast<std::uint16_t>(std::char_traits<char>::length(name)));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t dim : t.shape()) w.u32(static_cast<std::uint32_t>(dim));
    for (T v : t.values()) {
      if constexpr (sizeof(T) == 4)
        w.f32(static_cast<float>(v));
      else
        w.f64(static_cast<double>(v));
    }
  }
  Fnv1a64 h;
  h.update(w.str());
  return h.digest();
}

/// Per-item decoupled attention weight rows, keyed by item id and kept
/// sorted by id.
template <class T>
class QKCache {
 public:
  QKCache() = default;
  QKCache(std::size_t links, std::uint64_t fingerprint) : links_(links), fingerprint_(fingerprint) {}

  std::size_t links() const noexcept { return links_; }
  std::uint64_t fingerprint() const noexcept { return fingerprint_; }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::uint64_t>& ids() const noexcept { return ids_; }
  const std::vector<T>& data() const noexcept { return rows_; }

  std::span<const T> row_at(std::size_t index) const { return {rows_.data() + index * links_, links_}; }

  /// Index of `id`, or size() when absent.
  std::size_t find(std::uint64_t id) const {
    auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
    return it != ids_.end() && *it == id ? static_cast<std::size_t>(it - ids_.begin()) : ids_.size();
  }

  /// Rows must arrive in strictly increasing id order.
  void append(std::uint64_t id, std::span<const T> row) {
    if (row.size() != links_)
      throw ShapeError("cache row for item " + std::to_string(id) + " has " + std::to_string(row.size()) +
                       " entries, expected " + std::to_string(links_));
    if (!ids_.empty() && id <= ids_.back())
      throw std::invalid_argument("cache ids must be strictly increasing: " + std::to_string(id) + " after " +
                                  std::to_string(ids_.back()));
    ids_.push_back(id);
    rows_.insert(rows_.end(), row.begin(), row.end());
  }

  /// Gathers rows for `ids` into an M×ℓ tensor; every absent id is reported.
  Tensor<T> lookup(std::span<const std::uint64_t> ids) const {
    Tensor<T> out = Tensor<T>::matrix(ids.size(), links_);
    std::vector<std::uint64_t> missing;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::size_t k = find(ids[i]);
      if (k == ids_.size()) {
        missing.push_back(ids[i]);
        continue;
      }
      std::copy_n(rows_.data() + k * links_, links_, out.data() + i * links_);
    }
    if (!missing.empty()) {
      std::string msg = "cache miss for " + std::to_string(missing.size()) + " item id(s):";
      for (std::size_t i = 0; i < missing.size() && i < 50; ++i) msg += " " + std::to_string(missing[i]);
      if (missing.size() > 50) msg += " ...";
      throw CacheMissError(std::move(missing), msg);
    }
    return out;
  }

  void check_fresh(std::uint64_t model_fp) const {
    if (model_fp != fingerprint_)
      throw StaleCacheError("stale QK cache: built for model fingerprint " + std::to_string(fingerprint_) +
                            ", serving model has " + std::to_string(model_fp));
  }

 private:
  std::size_t links_ = 0;
  std::uint64_t fingerprint_ = 0;
  std::vector<std::uint64_t> ids_;
  std::vector<T> rows_;
};

/// Stage 1: weight rows for every item of the corpus. Rows are computed in
/// chunks with the same code path the monolithic forward pass uses.
template <class T>
QKCache<T> build_cache(const Model<T>& model, std::span<const std::uint64_t> ids, const Tensor<T>& embeddings,
                       std::size_t chunk = 4096) {
  if (ids.empty()) throw std::invalid_argument("build_cache: empty item corpus");
  if (embeddings.rows() != ids.size())
    throw ShapeError("build_cache: " + std::to_string(ids.size()) + " ids for " + std::to_string(embeddings.rows()) +
                     " embeddings");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (ids[order[i]] == ids[order[i - 1]])
      throw std::invalid_argument("build_cache: duplicate item id " + std::to_string(ids[order[i]]));

  QKCache<T> cache(model.config().links, model_fingerprint(model));
  Binder<T> b;
  for (std::size_t start = 0; start < order.size(); start += chunk) {
    const std::size_t end = std::min(order.size(), start + chunk);
    std::span<const std::size_t> rows(order.data() + start, end - start);
    Var<T> w = model.decoupled_weights(b, kernels::gather_rows(embeddings, rows));
    for (std::size_t i = 0; i < rows.size(); ++i) cache.append(ids[rows[i]], w.value().row(i));
  }
  return cache;
}

/// Stage 2: candidate-independent user computation.
template <class T>
UserState<T> compute_user_state(const Model<T>& model, const Tensor<T>& history, const Tensor<T>& context,
                                std::uint64_t request_id = 0) {
  Binder<T> b;
  return model.user_state(b, history, context, request_id);
}

/// Stage 3 for LIME models: cached weight rows times the precomputed link
/// values, then the interaction MLP. Candidate embeddings only feed the
/// interaction MLP.
template <class T>
Tensor<T> score_with_cache(const Model<T>& model, const UserState<T>& state, const QKCache<T>& cache,
                           std::span<const std::uint64_t> ids, const Tensor<T>& candidates) {
  if (!is_lime(model.kind())) throw std::logic_error("score_with_cache needs a LIME model");
  if (ids.size() != candidates.rows())
    throw ShapeError("score_with_cache: " + std::to_string(ids.size()) + " ids for " +
                     std::to_string(candidates.rows()) + " candidates");
  cache.check_fresh(model_fingerprint(model));
  if (cache.links() != model.config().links)
    throw StaleCacheError("cache has " + std::to_string(cache.links()) + " links, model has " +
                          std::to_string(model.config().links));
  Binder<T> b;
  Var<T> o = Model<T>::mix_links(cache.lookup(ids), state.link_values);
  Var<T> logits = model.interaction_logits(b, o, candidates, state.context);
  return logits.value().reshaped({logits.rows()});
}

/// Stage 3 without a cache (non-LIME models, or LIME recomputing weights).
template <class T>
Tensor<T> score_candidates(const Model<T>& model, const UserState<T>& state, const Tensor<T>& candidates) {
  Binder<T> b;
  Var<T> logits = model.candidate_logits(b, state, candidates);
  return logits.value().reshaped({logits.rows()});
}

/// Result of one served request with per-stage accounting.
template <class T>
struct PipelineRun {
  Tensor<T> scores;
  FlopCounts stage2, stage3;
  double stage2_ms = 0, stage3_ms = 0;
};

/// Runs stages 2 and 3 for one request. LIME models require a cache and use
/// it; other models score directly from the user state.
template <class T>
PipelineRun<T> run_pipeline(const Model<T>& model, const std::type_identity_t<QKCache<T>>* cache, const RankingRequest<T>& req) {
  using clock = std::chrono::steady_clock;
  model.validate(req);
  PipelineRun<T> run;
  FlopMeter meter;
  auto t0 = clock::now();
  UserState<T> st = compute_user_state(model, req.history, req.context, req.request_id);
  auto t1 = clock::now();
  run.stage2 = meter.elapsed();
  meter.reset();
  if (is_lime(model.kind())) {
    if (!cache) throw std::invalid_argument("run_pipeline: LIME model needs a QK cache");
    if (req.candidate_ids.size() != req.candidates.rows())
      throw std::invalid_argument("run_pipeline: LIME scoring needs one id per candidate");
    run.scores = score_with_cache(model, st, *cache, req.candidate_ids, req.candidates);
  } else {
    run.scores = score_candidates(model, st, req.candidates);
  }
  auto t2 = clock::now();
  run.stage3 = meter.elapsed();
  run.stage2_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  run.stage3_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  return run;
}

/// Per-stage FLOP totals of a run as flat key/value pairs.
template <class T>
std::vector<std::pair<std::string, std::uint64_t>> flop_report(const PipelineRun<T>& run) {
  return {{"stage2_total", run.stage2.total()},
          {"stage2_attention", run.stage2.attention()},
          {"stage3_total", run.stage3.total()},
          {"stage3_attention", run.stage3.attention()},
          {"stage3_mlp", run.stage3[FlopTag::Mlp]}};
}

// --- cache file ------------------------------------------------------------

template <class T>
std::string serialize_cache(const QKCache<T>& c) {
  ByteWriter w;
  w.bytes(std::string_view(kCacheMagic, 8));
  w.u32(kCacheVersion);
  w.u32(static_cast<std::uint32_t>(c.links()));
  w.u64(c.size());
  w.u64(c.fingerprint());
  for (std::size_t i = 0; i < c.size(); ++i) {
    w.u64(c.ids()[i]);
    for (T v : c.row_at(i)) w.f32(static_cast<float>(v));
  }
  return w.take();
}

template <class T>
QKCache<T> parse_cache(std::string_view bytes, const std::string& source = "cache") {
  ByteReader r(bytes, source);
  if (r.bytes(8, "magic") != std::string_view(kCacheMagic, 8)) r.fail("bad magic, not a QK cache file");
  const auto version = r.u32("version");
  if (version != kCacheVersion) r.fail("unsupported cache version " + std::to_string(version));
  const std::size_t links = r.u32("link count");
  const std::uint64_t count = r.u64("entry count");
  const std::uint64_t fp = r.u64("fingerprint");
  if (links == 0) r.fail("zero link count");
  if (count > r.remaining() / (8 + 4 * links)) r.fail("entry count " + std::to_string(count) + " exceeds file size");
  QKCache<T> c(links, fp);
  std::vector<T> row(links);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t id = r.u64("item id");
    for (auto& v : row) v = static_cast<T>(r.f32("weight"));
    if (c.size() && id <= c.ids().back())
      r.fail("entries not sorted ascending by id (" + std::to_string(id) + " after " + std::to_string(c.ids().back()) +
             ")");
    c.append(id, row);
  }
  if (!r.done()) r.fail("trailing bytes after " + std::to_string(count) + " entries");
  return c;
}

template <class T>
void write_cache(const QKCache<T>& c, const std::string& path) {
  write_file(path, serialize_cache(c));
}

template <class T>
QKCache<T> read_cache(const std::string& path) {
  return parse_cache<T>(read_file(path), path);
}

}  // namespace lime
