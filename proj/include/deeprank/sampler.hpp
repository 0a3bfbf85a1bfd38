#pragma once

// Online triplet sampling over per-category weighted reservoirs.
//
// Each image enters its category's buffer with key u^(1/w), u ~ U(0,1). A full
// buffer evicts its minimum-key entry when a larger key arrives, so a uniform
// draw from a buffer is a draw proportional to total relevance.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "deeprank/core.hpp"

namespace deeprank {

enum class QueryBufferPolicy { uniform, proportional_to_occupancy };
enum class SamplingMode { weighted, uniform };

inline const char* to_string(SamplingMode m) {
  return m == SamplingMode::weighted ? "weighted" : "uniform";
}

struct SamplerConfig {
  std::size_t capacity = 64;
  double positive_cap = std::numeric_limits<double>::infinity();  // T_p
  double relevance_margin = 0.05;                                 // T_r
  double out_of_class_ratio = 0.2;
  int max_failures = 50;
  QueryBufferPolicy query_policy = QueryBufferPolicy::uniform;
  SamplingMode mode = SamplingMode::weighted;

  void validate() const {
    auto fail = [](const std::string& m) {
      throw Error(ErrorCode::config, "SamplerConfig: " + m);
    };
    if (capacity < 1) fail("capacity must be >= 1");
    if (!(positive_cap > 0)) fail("positive_cap must be > 0");
    if (!(relevance_margin >= 0) || !std::isfinite(relevance_margin))
      fail("relevance_margin must be finite and >= 0");
    if (!(out_of_class_ratio >= 0.0 && out_of_class_ratio <= 1.0))
      fail("out_of_class_ratio must be in [0,1]");
    if (max_failures < 1) fail("max_failures must be >= 1");
  }
};

struct BufferEntry {
  ImageId id = 0;
  double key = 0.0;
  double relevance = 0.0;  // total relevance r_j
};

enum class InsertKind { inserted, replaced, discarded, zero_relevance };

struct InsertOutcome {
  InsertKind kind = InsertKind::discarded;
  std::optional<ImageId> evicted;
};

inline double reservoir_key_for(double u, double weight) { return std::pow(u, 1.0 / weight); }

/// u^(1/w) with u drawn from the open interval (0,1).
inline double reservoir_key(double weight, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = 0.0;
  while (u <= 0.0) u = unit(rng);
  return reservoir_key_for(u, weight);
}

class ReservoirBuffer {
 public:
  ReservoirBuffer(CategoryId category, std::size_t capacity)
      : category_(category), capacity_(capacity) {
    if (capacity == 0) throw Error(ErrorCode::invalid_argument, "buffer capacity must be >= 1");
  }

  /// Offers an entry whose key is already computed.
  InsertOutcome offer(const BufferEntry& entry) {
    if (entries_.size() < capacity_) {
      entries_.push_back(entry);
      return {InsertKind::inserted, std::nullopt};
    }
    auto min_it = std::min_element(entries_.begin(), entries_.end(),
                                   [](const auto& a, const auto& b) { return a.key < b.key; });
    if (entry.key > min_it->key) {
      ImageId old = min_it->id;
      *min_it = entry;
      return {InsertKind::replaced, old};
    }
    return {InsertKind::discarded, std::nullopt};
  }

  CategoryId category() const { return category_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool full() const { return entries_.size() >= capacity_; }
  const std::vector<BufferEntry>& entries() const { return entries_; }

  const BufferEntry* find(ImageId id) const {
    for (const auto& e : entries_)
      if (e.id == id) return &e;
    return nullptr;
  }

 private:
  CategoryId category_;
  std::size_t capacity_;
  std::vector<BufferEntry> entries_;
};

/// Per-category buffers, created lazily on first insertion.
class BufferSet {
 public:
  explicit BufferSet(std::size_t capacity = 64) : capacity_(capacity) {}

  /// Streams one image with total relevance `r`. Under uniform weighting the
  /// key ignores r, but r is still recorded for positive acceptance.
  InsertOutcome insert(ImageId id, CategoryId category, double r, std::mt19937_64& rng,
                       SamplingMode weighting = SamplingMode::weighted) {
    if (!(r > 0.0) || !std::isfinite(r)) return {InsertKind::zero_relevance, std::nullopt};
    double weight = weighting == SamplingMode::weighted ? r : 1.0;
    return insert_with_key(category, {id, reservoir_key(weight, rng), r});
  }

  InsertOutcome insert_with_key(CategoryId category, const BufferEntry& entry) {
    auto it = buffers_.find(category);
    if (it == buffers_.end()) it = buffers_.emplace(category, ReservoirBuffer(category, capacity_)).first;
    auto outcome = it->second.offer(entry);
    if (outcome.kind != InsertKind::discarded) owner_[entry.id] = category;
    if (outcome.evicted) owner_.erase(*outcome.evicted);
    return outcome;
  }

  const ReservoirBuffer* buffer(CategoryId category) const {
    auto it = buffers_.find(category);
    return it == buffers_.end() ? nullptr : &it->second;
  }

  /// Category of the buffer currently holding `id`, if any.
  std::optional<CategoryId> category_of(ImageId id) const {
    auto it = owner_.find(id);
    if (it == owner_.end()) return std::nullopt;
    return it->second;
  }

  const std::map<CategoryId, ReservoirBuffer>& buffers() const { return buffers_; }
  std::size_t capacity() const { return capacity_; }

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& [c, b] : buffers_) n += b.size();
    return n;
  }

 private:
  std::size_t capacity_;
  std::map<CategoryId, ReservoirBuffer> buffers_;
  std::map<ImageId, CategoryId> owner_;
};

enum class DiscardReason { no_query, no_positive, no_negative };

struct SamplerStats {
  std::uint64_t triplets = 0;
  std::uint64_t out_of_class = 0;
  std::uint64_t positive_trials = 0;
  std::uint64_t positive_accepts = 0;
  std::uint64_t negative_trials = 0;
  std::uint64_t negative_accepts = 0;
  std::uint64_t discard_no_query = 0;
  std::uint64_t discard_no_positive = 0;
  std::uint64_t discard_no_negative = 0;

  std::uint64_t discards() const {
    return discard_no_query + discard_no_positive + discard_no_negative;
  }
  double out_of_class_fraction() const {
    return triplets ? static_cast<double>(out_of_class) / static_cast<double>(triplets) : 0.0;
  }

  void count_discard(DiscardReason r) {
    switch (r) {
      case DiscardReason::no_query: ++discard_no_query; break;
      case DiscardReason::no_positive: ++discard_no_positive; break;
      case DiscardReason::no_negative: ++discard_no_negative; break;
    }
  }

  nlohmann::json to_json() const {
    auto rate = [](std::uint64_t a, std::uint64_t t) {
      return t ? static_cast<double>(a) / static_cast<double>(t) : 0.0;
    };
    return {{"triplets", triplets},
            {"out_of_class_fraction", out_of_class_fraction()},
            {"positive_acceptance", rate(positive_accepts, positive_trials)},
            {"negative_acceptance", rate(negative_accepts, negative_trials)},
            {"discards",
             {{"no_query", discard_no_query},
              {"no_positive", discard_no_positive},
              {"no_negative", discard_no_negative}}}};
  }
};

inline nlohmann::json occupancy_json(const BufferSet& buffers) {
  nlohmann::json occ = nlohmann::json::object();
  for (const auto& [c, b] : buffers.buffers()) occ[std::to_string(c)] = b.size();
  return occ;
}

/// Draws queries, positives and negatives from a BufferSet. Holds references;
/// the buffers and relevance source must outlive the sampler.
class TripletSampler {
 public:
  TripletSampler(const BufferSet& buffers, const RelevanceSource& relevance,
                 SamplerConfig config)
      : buffers_(buffers), relevance_(relevance), config_(config) {
    config_.validate();
  }

  const SamplerConfig& config() const { return config_; }
  const SamplerStats& stats() const { return stats_; }
  void reset_stats() { stats_ = {}; }

  /// Picks a buffer among those holding at least `min_buffer_size` entries,
  /// then an entry uniformly within it.
  std::optional<ImageId> sample_query(std::mt19937_64& rng, std::size_t min_buffer_size = 1) const {
    const ReservoirBuffer* chosen = nullptr;
    if (config_.query_policy == QueryBufferPolicy::uniform) {
      std::vector<const ReservoirBuffer*> eligible;
      for (const auto& [c, b] : buffers_.buffers())
        if (!b.empty() && b.size() >= min_buffer_size) eligible.push_back(&b);
      if (eligible.empty()) return std::nullopt;
      chosen = eligible[uniform_index(eligible.size(), rng)];
    } else {
      std::size_t total = 0;
      for (const auto& [c, b] : buffers_.buffers())
        if (!b.empty() && b.size() >= min_buffer_size) total += b.size();
      if (total == 0) return std::nullopt;
      std::size_t pick = uniform_index(total, rng);
      for (const auto& [c, b] : buffers_.buffers()) {
        if (b.empty() || b.size() < min_buffer_size) continue;
        if (pick < b.size()) {
          chosen = &b;
          break;
        }
        pick -= b.size();
      }
    }
    return chosen->entries()[uniform_index(chosen->size(), rng)].id;
  }

  /// Accept-reject draw from the query's buffer with acceptance probability
  /// min(1, min(T_p, r(q,c)) / r_c). nullopt after max_failures rejections.
  std::optional<ImageId> sample_positive(ImageId query, std::mt19937_64& rng) {
    const ReservoirBuffer& buf = query_buffer(query);
    if (buf.size() < 2) return std::nullopt;
    for (int trial = 0; trial < config_.max_failures; ++trial) {
      const BufferEntry& cand = draw_excluding(buf, query, std::nullopt, rng);
      ++stats_.positive_trials;
      if (accept_by_relevance(query, cand, rng)) {
        ++stats_.positive_accepts;
        return cand.id;
      }
    }
    return std::nullopt;
  }

  /// Draws the negative kind by out_of_class_ratio, then a negative of that kind.
  std::optional<std::pair<ImageId, NegativeKind>> sample_negative(ImageId query,
                                                                  ImageId positive,
                                                                  std::mt19937_64& rng) {
    NegativeKind kind = draw_kind(rng);
    auto id = sample_negative_of_kind(query, positive, kind, rng);
    if (!id) return std::nullopt;
    return std::pair{*id, kind};
  }

  /// In-class candidates must satisfy the relevance margin and, in weighted
  /// mode, pass the same acceptance test as positives.
  std::optional<ImageId> sample_negative_of_kind(ImageId query, ImageId positive, NegativeKind kind,
                                                 std::mt19937_64& rng) {
    return draw_negative(query, positive, kind, config_.mode == SamplingMode::weighted, rng);
  }

  /// One attempt at a full triplet in the configured mode. The negative kind
  /// is held across discarded attempts until a triplet of that kind is
  /// emitted, so the emitted out-of-class fraction tracks the configured ratio
  /// even when in-class draws fail more often. A kind is redrawn after
  /// max_failures consecutive discards.
  std::optional<Triplet> sample_triplet(std::mt19937_64& rng) { return attempt(config_.mode, rng); }

  /// As sample_triplet, with query, positive and negative drawn uniformly.
  /// The positive needs nonzero relevance and the in-class margin still applies.
  std::optional<Triplet> uniform_sample_triplet(std::mt19937_64& rng) {
    return attempt(SamplingMode::uniform, rng);
  }

 private:
  static std::size_t uniform_index(std::size_t n, std::mt19937_64& rng) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  }

  const ReservoirBuffer& query_buffer(ImageId query) const {
    auto cat = buffers_.category_of(query);
    if (!cat)
      throw Error(ErrorCode::unknown_id, "image " + std::to_string(query) + " is not buffered");
    return *buffers_.buffer(*cat);
  }

  /// Uniform entry of `buf` other than `a` and `b`. Caller guarantees one exists.
  static const BufferEntry& draw_excluding(const ReservoirBuffer& buf, ImageId a,
                                           std::optional<ImageId> b, std::mt19937_64& rng) {
    const auto& es = buf.entries();
    std::size_t excluded = 0;
    for (const auto& e : es)
      if (e.id == a || (b && e.id == *b)) ++excluded;
    std::size_t pick = uniform_index(es.size() - excluded, rng);
    for (const auto& e : es) {
      if (e.id == a || (b && e.id == *b)) continue;
      if (pick-- == 0) return e;
    }
    return es.back();  // unreachable
  }

  bool accept_by_relevance(ImageId query, const BufferEntry& cand, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double numer = std::min(config_.positive_cap, relevance_.score(query, cand.id));
    double prob = cand.relevance > 0 ? std::min(1.0, numer / cand.relevance) : 0.0;
    return prob >= 1.0 || unit(rng) < prob;
  }

  std::optional<ImageId> draw_out_of_class(ImageId query, std::mt19937_64& rng) const {
    CategoryId qc = *buffers_.category_of(query);
    std::size_t total = 0;
    for (const auto& [c, b] : buffers_.buffers())
      if (c != qc) total += b.size();
    if (total == 0) return std::nullopt;
    std::size_t pick = uniform_index(total, rng);
    for (const auto& [c, b] : buffers_.buffers()) {
      if (c == qc) continue;
      if (pick < b.size()) return b.entries()[pick].id;
      pick -= b.size();
    }
    return std::nullopt;
  }

  std::optional<Triplet> attempt(SamplingMode mode, std::mt19937_64& rng) {
    if (!pending_kind_ || kind_failures_ >= config_.max_failures) {
      pending_kind_ = draw_kind(rng);
      kind_failures_ = 0;
    }
    auto t = mode == SamplingMode::uniform ? uniform_attempt(*pending_kind_, rng)
                                           : weighted_attempt(*pending_kind_, rng);
    if (t) {
      pending_kind_.reset();
      return emit(*t);
    }
    ++kind_failures_;
    return std::nullopt;
  }

  std::optional<ImageId> draw_negative(ImageId query, ImageId positive, NegativeKind kind, bool weighted,
                                       std::mt19937_64& rng) {
    if (kind == NegativeKind::out_of_class) return draw_out_of_class(query, rng);
    const ReservoirBuffer& buf = query_buffer(query);
    if (buf.size() < 3) return std::nullopt;
    const double r_pos = relevance_.score(query, positive);
    for (int trial = 0; trial < config_.max_failures; ++trial) {
      const BufferEntry& cand = draw_excluding(buf, query, positive, rng);
      ++stats_.negative_trials;
      if (r_pos - relevance_.score(query, cand.id) < config_.relevance_margin) continue;
      if (weighted && !accept_by_relevance(query, cand, rng)) continue;
      ++stats_.negative_accepts;
      return cand.id;
    }
    return std::nullopt;
  }

  NegativeKind draw_kind(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    return unit(rng) < config_.out_of_class_ratio ? NegativeKind::out_of_class : NegativeKind::in_class;
  }

  std::optional<Triplet> weighted_attempt(NegativeKind kind, std::mt19937_64& rng) {
    auto q = sample_query(rng, 2);
    if (!q) return discard(DiscardReason::no_query);
    auto p = sample_positive(*q, rng);
    if (!p) return discard(DiscardReason::no_positive);
    auto n = draw_negative(*q, *p, kind, true, rng);
    if (!n) return discard(DiscardReason::no_negative);
    return Triplet{*q, *p, *n, kind};
  }

  std::optional<Triplet> uniform_attempt(NegativeKind kind, std::mt19937_64& rng) {
    auto q = sample_query(rng, 2);
    if (!q) return discard(DiscardReason::no_query);
    const ReservoirBuffer& buf = query_buffer(*q);
    std::optional<ImageId> p;
    for (int trial = 0; trial < config_.max_failures && !p; ++trial) {
      const BufferEntry& cand = draw_excluding(buf, *q, std::nullopt, rng);
      ++stats_.positive_trials;
      if (relevance_.score(*q, cand.id) > 0.0) {
        ++stats_.positive_accepts;
        p = cand.id;
      }
    }
    if (!p) return discard(DiscardReason::no_positive);
    auto n = draw_negative(*q, *p, kind, false, rng);
    if (!n) return discard(DiscardReason::no_negative);
    return Triplet{*q, *p, *n, kind};
  }

  std::optional<Triplet> discard(DiscardReason r) {
    stats_.count_discard(r);
    return std::nullopt;
  }

  std::optional<Triplet> emit(const Triplet& t) {
    ++stats_.triplets;
    if (t.kind == NegativeKind::out_of_class) ++stats_.out_of_class;
    return t;
  }

  const BufferSet& buffers_;
  const RelevanceSource& relevance_;
  SamplerConfig config_;
  SamplerStats stats_;
  std::optional<NegativeKind> pending_kind_;
  int kind_failures_ = 0;
};

/// Streams every image of `dataset` (in `order`) into `buffers` using its
/// total relevance under `relevance`.
inline void stream_into_buffers(BufferSet& buffers, const Dataset& dataset,
                                const RelevanceSource& relevance,
                                const std::vector<ImageId>& order, std::mt19937_64& rng,
                                SamplingMode weighting = SamplingMode::weighted) {
  for (ImageId id : order) {
    const auto& rec = dataset.at(id);
    buffers.insert(id, rec.category, total_relevance(dataset, relevance, id), rng, weighting);
  }
}

}  // namespace deeprank
