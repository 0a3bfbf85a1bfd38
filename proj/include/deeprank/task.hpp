#pragma once

// Train/eval split of a generated dataset with a fixed evaluation set.

#include <random>

#include "deeprank/datagen.hpp"
#include "deeprank/eval.hpp"
#include "deeprank/net.hpp"

namespace deeprank {

struct EvalSetConfig {
  std::size_t triplets = 2000;
  double out_of_class_ratio = 0.2;
  double min_margin = 0.05;
  std::size_t pool_size = 100;
  std::size_t k = 30;
  std::uint64_t seed = 99;
};

struct SyntheticTask {
  GeneratedData data;
  Dataset train_set;
  RelevanceSource train_relevance;
  std::vector<Triplet> eval_triplets;
  std::vector<EvalGroup> eval_groups;
  std::size_t k = 30;

  SyntheticTask(GeneratedData generated, const EvalSetConfig& ec)
      : data(std::move(generated)),
        train_set(data.dataset.subset(data.train_ids)),
        train_relevance(data.relevance.restricted_to(train_set)),
        k(ec.k) {
    std::mt19937_64 rng(ec.seed);
    eval_triplets = make_eval_triplets(data.dataset, data.relevance, data.eval_ids, ec.triplets,
                                       ec.out_of_class_ratio, ec.min_margin, rng);
    eval_groups = make_eval_groups(data.dataset, data.eval_ids, eval_triplets, ec.pool_size, rng);
  }

  EvalReport evaluate_table(const EmbeddingTable& table) const {
    return evaluate(table, eval_triplets, eval_groups, k);
  }

  EvalReport evaluate_net(const EmbeddingNet<float>& net, std::span<const float> params) const {
    return evaluate_table(embed_all(net, params, data.dataset, data.eval_ids));
  }
};

}  // namespace deeprank
