// Generate a small dataset, train a two-path network on it and compare
// held-out precision before and after training.
//
//   pipeline [triplet_budget]

#include <cstdio>
#include <cstdlib>

#include "deeprank/deeprank.hpp"

using namespace deeprank;

int main(int argc, char** argv) {
  const std::uint64_t budget = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 20000;

  GenConfig gen;
  gen.num_categories = 6;
  gen.images_per_category = 40;
  gen.eval_per_category = 10;
  SyntheticTask task(generate(gen), EvalSetConfig{});

  EmbeddingNet<float> net(NetConfig::desk_scale());
  std::printf("%s", net.shape_trace().c_str());
  const auto init = net.init_params(7);
  const auto before = task.evaluate_net(net, init);

  TrainConfig cfg;
  cfg.triplet_budget = budget;
  cfg.log_interval = 1000;
  TrainCallbacks cb;
  cb.on_log = [](const LogRecord& r) {
    std::printf("step %6llu  triplets %7llu  loss %.4f  active %.2f\n", static_cast<unsigned long long>(r.step),
                static_cast<unsigned long long>(r.triplets), r.loss, r.active_fraction);
  };
  auto result = train(task.train_set, task.train_relevance, net, init, cfg, cb);
  const auto after = task.evaluate_net(net, result.params);

  std::printf("precision  %.4f -> %.4f\n", before.precision, after.precision);
  std::printf("score@%zu   %lld -> %lld (of %zu eligible)\n", after.k, before.score_at_top_k, after.score_at_top_k,
              after.n_eligible);
  std::printf("out-of-class fraction %.3f, %.1f s\n", result.sampler.out_of_class_fraction(), result.wall_ms / 1000);
  return 0;
}
