#pragma once

// Triplet ranking metrics: similarity precision and score-at-top-K.

#include <algorithm>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "deeprank/core.hpp"
#include "deeprank/net.hpp"
#include "deeprank/rankloss.hpp"

namespace deeprank {

/// Embeddings indexed by image id.
class EmbeddingTable {
 public:
  void set(ImageId id, std::vector<double> v) {
    if (id < 0) throw Error(ErrorCode::invalid_argument, "negative image id");
    auto slot = static_cast<std::size_t>(id);
    if (slot >= rows_.size()) {
      rows_.resize(slot + 1);
      present_.resize(slot + 1, false);
    }
    rows_[slot] = std::move(v);
    present_[slot] = true;
  }

  bool contains(ImageId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < rows_.size() && present_[static_cast<std::size_t>(id)];
  }

  const std::vector<double>& at(ImageId id) const {
    if (!contains(id))
      throw Error(ErrorCode::unknown_id, "no embedding for image " + std::to_string(id));
    return rows_[static_cast<std::size_t>(id)];
  }

  /// Planted latents as embeddings.
  static EmbeddingTable from_latents(const Dataset& dataset, const std::vector<ImageId>& ids) {
    EmbeddingTable t;
    for (ImageId id : ids) {
      const auto& rec = dataset.at(id);
      if (!rec.latent) throw Error(ErrorCode::missing_latent, "image " + std::to_string(id) + " has no latent");
      t.set(id, *rec.latent);
    }
    return t;
  }

 private:
  std::vector<std::vector<double>> rows_;
  std::vector<bool> present_;
};

/// Embeds `ids` with the network in infer mode.
template <typename T>
EmbeddingTable embed_all(const EmbeddingNet<T>& net, std::span<const T> params, const Dataset& dataset,
                         const std::vector<ImageId>& ids) {
  EmbeddingTable table;
  ForwardCache<T> cache;
  for (ImageId id : ids) {
    auto input = dataset.at(id).tensor.template cast<T>();
    auto e = net.forward(params, input, Mode::infer, nullptr, cache);
    table.set(id, std::vector<double>(e.begin(), e.end()));
  }
  return table;
}

/// Strictly closer positive counts as correct; ties are incorrect.
inline bool correctly_ranked(const EmbeddingTable& model, const Triplet& t) {
  const auto& q = model.at(t.query);
  return squared_distance(q, model.at(t.positive)) < squared_distance(q, model.at(t.negative));
}

inline double similarity_precision(const EmbeddingTable& model, std::span<const Triplet> triplets) {
  if (triplets.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& t : triplets) correct += correctly_ranked(model, t) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(triplets.size());
}

/// Pool ordered by ascending squared distance to the query, ties by id.
inline std::vector<ImageId> rank_pool(const EmbeddingTable& model, ImageId query,
                                      std::span<const ImageId> pool) {
  if (pool.empty()) throw Error(ErrorCode::invalid_argument, "rank_pool: empty pool");
  const auto& q = model.at(query);
  std::vector<std::pair<double, ImageId>> keyed;
  keyed.reserve(pool.size());
  for (ImageId id : pool) keyed.emplace_back(squared_distance(q, model.at(id)), id);
  std::sort(keyed.begin(), keyed.end());
  std::vector<ImageId> out;
  out.reserve(keyed.size());
  for (const auto& [d, id] : keyed) out.push_back(id);
  return out;
}

struct EvalGroup {
  ImageId query = 0;
  std::vector<ImageId> pool;
  std::vector<Triplet> triplets;
};

struct ScoreAtTopK {
  long long score = 0;
  std::size_t eligible = 0;
  std::size_t correct = 0;
  std::size_t incorrect = 0;
};

/// For each group, ranks the pool (query excluded) and scores the triplets
/// whose positive or negative lands in the top K.
inline ScoreAtTopK score_at_top_k(const EmbeddingTable& model, std::span<const EvalGroup> groups,
                                  std::size_t k) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "score_at_top_k: K must be >= 1");
  ScoreAtTopK out;
  std::vector<char> in_top;
  for (const auto& g : groups) {
    std::vector<ImageId> others;
    others.reserve(g.pool.size());
    for (ImageId id : g.pool)
      if (id != g.query) others.push_back(id);
    std::vector<ImageId> ranked = others.empty() ? std::vector<ImageId>{} : rank_pool(model, g.query, others);
    auto top_end = ranked.begin() + static_cast<std::ptrdiff_t>(std::min(k, ranked.size()));
    auto in_top_k = [&](ImageId id) { return std::find(ranked.begin(), top_end, id) != top_end; };
    for (const auto& t : g.triplets) {
      if (t.query != g.query)
        throw Error(ErrorCode::invalid_argument, "score_at_top_k: triplet query differs from group query");
      for (ImageId id : {t.positive, t.negative})
        if (std::find(g.pool.begin(), g.pool.end(), id) == g.pool.end())
          throw Error(ErrorCode::invalid_argument,
                      "score_at_top_k: image " + std::to_string(id) + " is outside its group's pool");
      if (!in_top_k(t.positive) && !in_top_k(t.negative)) continue;
      ++out.eligible;
      if (correctly_ranked(model, t)) {
        ++out.correct;
        ++out.score;
      } else {
        ++out.incorrect;
        --out.score;
      }
    }
  }
  return out;
}

struct EvalReport {
  double precision = 0;
  long long score_at_top_k = 0;
  std::size_t k = 30;
  std::size_t n_triplets = 0;
  std::size_t n_eligible = 0;

  nlohmann::json to_json() const {
    return {{"precision", precision},
            {"score_at_top_k", score_at_top_k},
            {"K", k},
            {"n_triplets", n_triplets},
            {"n_eligible", n_eligible}};
  }
};

/// Builds evaluation groups: each query's pool holds its same-category images
/// plus random other-category images up to `pool_size`; triplets are drawn
/// from `triplets` whose query matches.
inline std::vector<EvalGroup> make_eval_groups(const Dataset& dataset, const std::vector<ImageId>& ids,
                                               std::span<const Triplet> triplets, std::size_t pool_size,
                                               std::mt19937_64& rng) {
  std::vector<EvalGroup> groups;
  std::vector<ImageId> queries;
  for (const auto& t : triplets)
    if (std::find(queries.begin(), queries.end(), t.query) == queries.end()) queries.push_back(t.query);
  for (ImageId q : queries) {
    EvalGroup g;
    g.query = q;
    const CategoryId qc = dataset.at(q).category;
    std::vector<ImageId> others;
    for (ImageId id : ids) (dataset.at(id).category == qc ? g.pool : others).push_back(id);
    for (const auto& t : triplets)
      if (t.query == q) {
        g.triplets.push_back(t);
        for (ImageId id : {t.positive, t.negative})
          if (std::find(g.pool.begin(), g.pool.end(), id) == g.pool.end()) g.pool.push_back(id);
      }
    std::shuffle(others.begin(), others.end(), rng);
    for (ImageId id : others) {
      if (g.pool.size() >= pool_size) break;
      if (std::find(g.pool.begin(), g.pool.end(), id) == g.pool.end()) g.pool.push_back(id);
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

inline EvalReport evaluate(const EmbeddingTable& model, std::span<const Triplet> triplets,
                           std::span<const EvalGroup> groups, std::size_t k) {
  EvalReport r;
  r.precision = similarity_precision(model, triplets);
  auto s = score_at_top_k(model, groups, k);
  r.score_at_top_k = s.score;
  r.k = k;
  r.n_triplets = triplets.size();
  r.n_eligible = s.eligible;
  return r;
}

}  // namespace deeprank
