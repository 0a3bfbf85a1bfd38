#pragma once

// Triplet training with Nesterov momentum SGD. `train` is single-threaded and
// a pure function of the seed; `train_async` runs several workers against a
// shared parameter store fed by one sampler thread.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <thread>
#include <vector>

#include <json.hpp>

#include "deeprank/core.hpp"
#include "deeprank/net.hpp"
#include "deeprank/rankloss.hpp"
#include "deeprank/sampler.hpp"

namespace deeprank {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  int workers = 1;
  std::uint64_t triplet_budget = 200000;
  std::uint64_t seed = 1;
  int max_shift = 0;
  bool shared_dropout_mask = true;          // one mask per triplet across its three passes
  std::uint64_t log_interval = 500;         // steps between log records
  std::uint64_t checkpoint_interval = 0;    // steps; 0 disables
  LossConfig loss;
  SamplerConfig sampler;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::config, "TrainConfig: " + m); };
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0,1)");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (workers < 1) fail("workers must be >= 1");
    if (max_shift < 0) fail("max_shift must be >= 0");
    if (log_interval < 1) fail("log_interval must be >= 1");
    loss.validate();
    sampler.validate();
  }
};

/// Nesterov momentum update. The caller evaluates `gradients` at the
/// lookahead point params + momentum * velocity. Returns false, leaving both
/// arrays untouched, when a gradient is non-finite.
template <typename T>
bool momentum_step(std::span<T> params, std::span<T> velocity, std::span<const T> gradients,
                   double learning_rate, double momentum) {
  if (params.size() != velocity.size() || params.size() != gradients.size())
    throw Error(ErrorCode::shape_mismatch, "momentum_step: parameter, velocity and gradient sizes differ");
  for (T g : gradients)
    if (!std::isfinite(static_cast<double>(g))) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = static_cast<T>(momentum * velocity[i] - learning_rate * gradients[i]);
    params[i] += velocity[i];
  }
  return true;
}

template <typename T>
Tensor<T> pixel_shift(const Tensor<T>& in, int dx, int dy) {
  Tensor<T> out(in.shape, T(0));
  for (int c = 0; c < in.shape.channels; ++c)
    for (int y = 0; y < in.shape.height; ++y) {
      int sy = y - dy;
      if (sy < 0 || sy >= in.shape.height) continue;
      for (int x = 0; x < in.shape.width; ++x) {
        int sx = x - dx;
        if (sx >= 0 && sx < in.shape.width) out.at(c, y, x) = in.at(c, sy, sx);
      }
    }
  return out;
}

/// Translates by (dx, dy) uniform on [-s, s]^2, zero-filling vacated pixels.
template <typename T>
Tensor<T> random_pixel_shift(const Tensor<T>& in, int max_shift, std::mt19937_64& rng,
                             std::pair<int, int>* offset = nullptr) {
  if (max_shift < 0 || max_shift >= in.shape.height || max_shift >= in.shape.width)
    throw Error(ErrorCode::invalid_argument, "pixel shift " + std::to_string(max_shift) +
                                                 " must be in [0, spatial extent)");
  if (max_shift == 0) {
    if (offset) *offset = {0, 0};
    return in;
  }
  std::uniform_int_distribution<int> d(-max_shift, max_shift);
  int dx = d(rng);
  int dy = d(rng);
  if (offset) *offset = {dx, dy};
  return pixel_shift(in, dx, dy);
}

struct LogRecord {
  std::uint64_t step = 0;
  std::uint64_t triplets = 0;
  double loss = 0;  // mean hinge per triplet over the interval
  double active_fraction = 0;
  double wall_ms = 0;
  nlohmann::json sampler;
  std::string phase = "rank";

  nlohmann::json to_json() const {
    return {{"phase", phase},     {"step", step},       {"triplets", triplets},
            {"loss", loss},       {"active_fraction", active_fraction},
            {"wall_ms", wall_ms}, {"sampler", sampler}};
  }
};

struct TrainResult {
  std::vector<float> params;
  std::vector<LogRecord> log;
  std::uint64_t steps = 0;                      // committed updates
  std::uint64_t triplets = 0;                   // triplets consumed
  std::vector<std::uint64_t> worker_steps;      // per worker
  std::uint64_t skipped_steps = 0;              // non-finite gradients
  SamplerStats sampler;
  double wall_ms = 0;
};

struct TrainCallbacks {
  std::function<void(const LogRecord&)> on_log;
  std::function<void(std::uint64_t step, std::span<const float> params)> on_checkpoint;
};

/// Per-worker scratch for computing one batch gradient.
class TripletGradientWorker {
 public:
  TripletGradientWorker(const EmbeddingNet<float>& net, const Dataset& dataset, const TrainConfig& cfg)
      : net_(net), dataset_(dataset), cfg_(cfg), grads_(net.num_params(), 0.0f) {}

  struct BatchStats {
    double loss_sum = 0;
    std::size_t active = 0;
  };

  /// Adds the hinge gradient of one triplet at `params` into `grads`. The three
  /// forward passes read the same parameter span.
  double accumulate(std::span<const float> params, const Triplet& t, std::mt19937_64& rng,
                    std::span<float> grads, bool* active = nullptr) {
    const ImageId ids[3] = {t.query, t.positive, t.negative};
    const std::uint64_t mask_seed = rng();
    for (int k = 0; k < 3; ++k) {
      Tensor<float> img = random_pixel_shift(dataset_.at(ids[k]).tensor, cfg_.max_shift, rng);
      // Identical streams give the three passes the same dropout masks.
      std::mt19937_64 mask_rng(cfg_.shared_dropout_mask ? mask_seed : rng());
      net_.forward(params, img, Mode::train, &mask_rng, caches_[k]);
    }
    auto g = loss_grad<float>(caches_[0].embedding, caches_[1].embedding, caches_[2].embedding,
                              cfg_.loss.gap);
    if (active) *active = g.active;
    if (g.active) {
      net_.backward(params, caches_[0], g.query, grads);
      net_.backward(params, caches_[1], g.positive, grads);
      net_.backward(params, caches_[2], g.negative, grads);
    }
    return g.loss;
  }

  /// Mean hinge gradient over the batch plus the regularizer gradient
  /// 2*lambda*params, evaluated at `params`.
  std::span<const float> batch_gradient(std::span<const float> params, std::span<const Triplet> batch,
                                        std::mt19937_64& rng, BatchStats& stats) {
    std::fill(grads_.begin(), grads_.end(), 0.0f);
    for (const auto& t : batch) {
      bool active = false;
      stats.loss_sum += accumulate(params, t, rng, grads_, &active);
      stats.active += active ? 1 : 0;
    }
    const float inv = 1.0f / static_cast<float>(batch.size());
    const float decay = static_cast<float>(2.0 * cfg_.loss.lambda);
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] = grads_[i] * inv + decay * params[i];
    return grads_;
  }

 private:
  const EmbeddingNet<float>& net_;
  const Dataset& dataset_;
  const TrainConfig& cfg_;
  std::vector<float> grads_;
  ForwardCache<float> caches_[3];
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline std::uint64_t starvation_limit(std::size_t batch) { return 1000 + 100 * batch; }

/// Fills buffers from the dataset in a seeded random order.
inline BufferSet fill_buffers(const Dataset& dataset, const RelevanceSource& relevance,
                              const SamplerConfig& sc, std::mt19937_64& rng) {
  BufferSet buffers(sc.capacity);
  auto order = dataset.ids();
  std::shuffle(order.begin(), order.end(), rng);
  stream_into_buffers(buffers, dataset, relevance, order, rng, sc.mode);
  return buffers;
}

inline void check_divergence(double loss, std::uint64_t step) {
  if (!std::isfinite(loss))
    throw Error(ErrorCode::divergence, "training diverged: non-finite loss at step " + std::to_string(step));
}

}  // namespace detail

/// Single-threaded training; the parameter trajectory is a pure function of
/// (seed, data, config).
inline TrainResult train(const Dataset& dataset, const RelevanceSource& relevance,
                         const EmbeddingNet<float>& net, std::vector<float> params,
                         const TrainConfig& cfg, const TrainCallbacks& callbacks = {}) {
  cfg.validate();
  if (params.size() != net.num_params())
    throw Error(ErrorCode::shape_mismatch, "train: initial parameters do not match network");
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  BufferSet buffers = detail::fill_buffers(dataset, relevance, cfg.sampler, rng);
  TripletSampler sampler(buffers, relevance, cfg.sampler);
  TripletGradientWorker worker(net, dataset, cfg);

  TrainResult result;
  result.worker_steps.assign(1, 0);
  std::vector<float> velocity(params.size(), 0.0f), lookahead(params.size());
  std::vector<Triplet> batch;
  double interval_loss = 0;
  std::size_t interval_active = 0, interval_triplets = 0;

  while (result.triplets < cfg.triplet_budget) {
    const std::size_t want = static_cast<std::size_t>(
        std::min<std::uint64_t>(cfg.batch_size, cfg.triplet_budget - result.triplets));
    batch.clear();
    std::uint64_t misses = 0;
    while (batch.size() < want) {
      if (auto t = sampler.sample_triplet(rng)) {
        batch.push_back(*t);
        misses = 0;
      } else if (++misses > detail::starvation_limit(want)) {
        throw Error(ErrorCode::sampler_starvation,
                    "sampler could not form a triplet after " + std::to_string(misses) + " attempts");
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i)
      lookahead[i] = static_cast<float>(params[i] + cfg.momentum * velocity[i]);
    TripletGradientWorker::BatchStats bs;
    auto grads = worker.batch_gradient(lookahead, batch, rng, bs);
    detail::check_divergence(bs.loss_sum, result.steps);
    if (!momentum_step<float>(params, velocity, grads, cfg.learning_rate, cfg.momentum))
      ++result.skipped_steps;
    ++result.steps;
    ++result.worker_steps[0];
    result.triplets += batch.size();
    interval_loss += bs.loss_sum;
    interval_active += bs.active;
    interval_triplets += batch.size();

    const bool last = result.triplets >= cfg.triplet_budget;
    if (result.steps % cfg.log_interval == 0 || last) {
      LogRecord rec{result.steps,
                    result.triplets,
                    interval_loss / static_cast<double>(interval_triplets),
                    static_cast<double>(interval_active) / static_cast<double>(interval_triplets),
                    detail::elapsed_ms(t0),
                    sampler.stats().to_json()};
      result.log.push_back(rec);
      if (callbacks.on_log) callbacks.on_log(rec);
      interval_loss = 0;
      interval_active = interval_triplets = 0;
    }
    if (callbacks.on_checkpoint && cfg.checkpoint_interval && result.steps % cfg.checkpoint_interval == 0)
      callbacks.on_checkpoint(result.steps, params);
  }
  result.sampler = sampler.stats();
  result.params = std::move(params);
  result.wall_ms = detail::elapsed_ms(t0);
  return result;
}

// ---------------------------------------------------------------------------
// Asynchronous training
// ---------------------------------------------------------------------------

/// Parameters and velocity shared by all workers, split into the network's
/// parameter arrays. Each array is read and updated under its own lock, so a
/// snapshot may mix versions across arrays but never within one.
class SharedParameterStore {
 public:
  SharedParameterStore(const std::vector<ParamArray>& arrays, std::vector<float> params)
      : arrays_(arrays), params_(std::move(params)), velocity_(params_.size(), 0.0f),
        locks_(arrays.size()) {}

  /// Copies the lookahead point params + momentum * velocity into `out`.
  void read_lookahead(std::span<float> out, double momentum) const {
    for (std::size_t a = 0; a < arrays_.size(); ++a) {
      const auto& arr = arrays_[a];
      std::lock_guard lock(locks_[a]);
      for (std::size_t i = arr.offset; i < arr.offset + arr.size; ++i)
        out[i] = static_cast<float>(params_[i] + momentum * velocity_[i]);
    }
  }

  /// Applies one momentum step, array by array. Returns false when the
  /// gradient is non-finite (nothing is applied).
  bool commit(std::span<const float> grads, double learning_rate, double momentum) {
    for (float g : grads)
      if (!std::isfinite(g)) return false;
    for (std::size_t a = 0; a < arrays_.size(); ++a) {
      const auto& arr = arrays_[a];
      std::lock_guard lock(locks_[a]);
      momentum_step<float>(std::span<float>(params_).subspan(arr.offset, arr.size),
                           std::span<float>(velocity_).subspan(arr.offset, arr.size),
                           grads.subspan(arr.offset, arr.size), learning_rate, momentum);
    }
    commits_.fetch_add(1, std::memory_order_relaxed);
    return true;
  }

  std::uint64_t commits() const { return commits_.load(); }

  std::vector<float> params() const {
    std::vector<float> out(params_.size());
    for (std::size_t a = 0; a < arrays_.size(); ++a) {
      std::lock_guard lock(locks_[a]);
      const auto& arr = arrays_[a];
      std::copy_n(params_.begin() + static_cast<std::ptrdiff_t>(arr.offset), arr.size,
                  out.begin() + static_cast<std::ptrdiff_t>(arr.offset));
    }
    return out;
  }

 private:
  const std::vector<ParamArray>& arrays_;
  std::vector<float> params_;
  std::vector<float> velocity_;
  mutable std::vector<std::mutex> locks_;
  std::atomic<std::uint64_t> commits_{0};
};

/// Blocking bounded queue; producers wait when full.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(T v) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return;
    items_.push_back(std::move(v));
    not_empty_.notify_one();
  }

  /// nullopt once the queue is closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return v;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
};

inline TrainResult train_async(const Dataset& dataset, const RelevanceSource& relevance,
                               const EmbeddingNet<float>& net, std::vector<float> params,
                               const TrainConfig& cfg, const TrainCallbacks& callbacks = {}) {
  cfg.validate();
  if (params.size() != net.num_params())
    throw Error(ErrorCode::shape_mismatch, "train_async: initial parameters do not match network");
  const auto t0 = std::chrono::steady_clock::now();
  SharedParameterStore store(net.arrays(), std::move(params));
  BoundedQueue<std::vector<Triplet>> queue(static_cast<std::size_t>(cfg.workers) * 4);

  SamplerStats feeder_stats;
  std::exception_ptr feeder_error;
  std::thread feeder([&] {
    try {
      std::mt19937_64 rng(cfg.seed);
      BufferSet buffers = detail::fill_buffers(dataset, relevance, cfg.sampler, rng);
      TripletSampler sampler(buffers, relevance, cfg.sampler);
      std::uint64_t produced = 0;
      while (produced < cfg.triplet_budget) {
        const std::size_t want = static_cast<std::size_t>(
            std::min<std::uint64_t>(cfg.batch_size, cfg.triplet_budget - produced));
        std::vector<Triplet> batch;
        std::uint64_t misses = 0;
        while (batch.size() < want) {
          if (auto t = sampler.sample_triplet(rng)) {
            batch.push_back(*t);
            misses = 0;
          } else if (++misses > detail::starvation_limit(want)) {
            throw Error(ErrorCode::sampler_starvation, "sampler could not form a triplet");
          }
        }
        produced += batch.size();
        queue.push(std::move(batch));
      }
      feeder_stats = sampler.stats();
    } catch (...) {
      feeder_error = std::current_exception();
    }
    queue.close();
  });

  TrainResult result;
  result.worker_steps.assign(static_cast<std::size_t>(cfg.workers), 0);
  std::mutex log_mu;
  std::uint64_t consumed = 0, logged_steps = 0, skipped = 0;
  double interval_loss = 0;
  std::size_t interval_active = 0, interval_triplets = 0;
  std::exception_ptr worker_error;

  auto work = [&](int w) {
    try {
      std::mt19937_64 rng(cfg.seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(w + 1));
      TripletGradientWorker worker(net, dataset, cfg);
      std::vector<float> lookahead(net.num_params());
      while (auto batch = queue.pop()) {
        store.read_lookahead(lookahead, cfg.momentum);
        TripletGradientWorker::BatchStats bs;
        auto grads = worker.batch_gradient(lookahead, *batch, rng, bs);
        detail::check_divergence(bs.loss_sum, store.commits());
        const bool applied = store.commit(grads, cfg.learning_rate, cfg.momentum);
        ++result.worker_steps[static_cast<std::size_t>(w)];
        std::lock_guard lock(log_mu);
        if (!applied) ++skipped;
        consumed += batch->size();
        interval_loss += bs.loss_sum;
        interval_active += bs.active;
        interval_triplets += batch->size();
        ++logged_steps;
        if (logged_steps % cfg.log_interval == 0 || consumed >= cfg.triplet_budget) {
          LogRecord rec{logged_steps,
                        consumed,
                        interval_loss / static_cast<double>(interval_triplets),
                        static_cast<double>(interval_active) / static_cast<double>(interval_triplets),
                        detail::elapsed_ms(t0),
                        nlohmann::json::object()};
          result.log.push_back(rec);
          if (callbacks.on_log) callbacks.on_log(rec);
          interval_loss = 0;
          interval_active = interval_triplets = 0;
        }
        if (callbacks.on_checkpoint && cfg.checkpoint_interval && logged_steps % cfg.checkpoint_interval == 0)
          callbacks.on_checkpoint(logged_steps, store.params());
      }
    } catch (...) {
      std::lock_guard lock(log_mu);
      if (!worker_error) worker_error = std::current_exception();
      queue.close();
    }
  };

  std::vector<std::thread> threads;
  for (int w = 0; w < cfg.workers; ++w) threads.emplace_back(work, w);
  for (auto& t : threads) t.join();
  feeder.join();
  if (feeder_error) std::rethrow_exception(feeder_error);
  if (worker_error) std::rethrow_exception(worker_error);

  result.steps = store.commits() + skipped;
  result.skipped_steps = skipped;
  result.triplets = consumed;
  result.sampler = feeder_stats;
  if (!result.log.empty()) result.log.back().sampler = feeder_stats.to_json();
  result.params = store.params();
  result.wall_ms = detail::elapsed_ms(t0);
  return result;
}

// ---------------------------------------------------------------------------
// Softmax pretraining of one path
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 5;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::size_t path = 0;
};

struct PretrainResult {
  std::vector<float> params;
  std::vector<double> epoch_loss;      // mean cross-entropy, infer mode, after each epoch
  std::vector<double> epoch_accuracy;  // after each epoch
  double uniform_loss = 0;             // ln(C)
};

/// Tops path `cfg.path` with a temporary softmax classifier over categories
/// and trains both; returns the network parameters with only that path's
/// arrays changed. The classifier is discarded.
inline PretrainResult pretrain_softmax(const Dataset& dataset, const EmbeddingNet<float>& net,
                                       std::vector<float> params, const PretrainConfig& cfg,
                                       const std::function<void(const LogRecord&)>& on_log = {}) {
  const auto cats = dataset.categories();
  if (cats.size() < 2)
    throw Error(ErrorCode::invalid_argument, "pretrain_softmax needs at least two categories");
  if (cfg.path >= net.num_paths()) throw Error(ErrorCode::invalid_argument, "pretrain_softmax: no such path");
  if (params.size() != net.num_params())
    throw Error(ErrorCode::shape_mismatch, "pretrain_softmax: parameters do not match network");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t C = cats.size();
  const std::size_t D = net.path_output_dim(cfg.path);
  auto label_of = [&](CategoryId c) {
    return static_cast<std::size_t>(std::lower_bound(cats.begin(), cats.end(), c) - cats.begin());
  };

  std::mt19937_64 rng(cfg.seed);
  std::vector<float> head(C * D + C, 0.0f), head_v(head.size(), 0.0f), head_g(head.size());
  {
    std::normal_distribution<double> init(0.0, std::sqrt(1.0 / static_cast<double>(D)));
    for (std::size_t i = 0; i < C * D; ++i) head[i] = static_cast<float>(init(rng));
  }
  std::vector<float> velocity(params.size(), 0.0f), grads(params.size());
  PathCache<float> cache;
  std::vector<double> logits(C), prob(C);
  std::vector<float> gh(D);

  auto forward_head = [&](std::span<const float> h, std::span<const float> hd) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      double v = hd[C * D + c];
      for (std::size_t d = 0; d < D; ++d) v += static_cast<double>(hd[c * D + d]) * h[d];
      logits[c] = v;
      mx = std::max(mx, v);
    }
    double z = 0;
    for (std::size_t c = 0; c < C; ++c) z += (prob[c] = std::exp(logits[c] - mx));
    for (auto& p : prob) p /= z;
  };

  PretrainResult out;
  out.uniform_loss = std::log(static_cast<double>(C));
  auto ids = dataset.ids();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t start = 0; start < ids.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(ids.size(), start + cfg.batch_size);
      std::fill(grads.begin(), grads.end(), 0.0f);
      std::fill(head_g.begin(), head_g.end(), 0.0f);
      for (std::size_t k = start; k < end; ++k) {
        const auto& rec = dataset.at(ids[k]);
        auto h = net.forward_path(cfg.path, params, rec.tensor, Mode::train, &rng, cache);
        forward_head(h, head);
        const std::size_t y = label_of(rec.category);
        std::fill(gh.begin(), gh.end(), 0.0f);
        for (std::size_t c = 0; c < C; ++c) {
          const double delta = prob[c] - (c == y ? 1.0 : 0.0);
          head_g[C * D + c] += static_cast<float>(delta);
          for (std::size_t d = 0; d < D; ++d) {
            head_g[c * D + d] += static_cast<float>(delta * h[d]);
            gh[d] += static_cast<float>(delta * head[c * D + d]);
          }
        }
        net.backward_path(cfg.path, params, cache, gh, grads);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto& g : grads) g *= inv;
      for (auto& g : head_g) g *= inv;
      momentum_step<float>(params, velocity, grads, cfg.learning_rate, cfg.momentum);
      momentum_step<float>(head, head_v, head_g, cfg.learning_rate, cfg.momentum);
    }
    double loss = 0;
    std::size_t correct = 0;
    for (ImageId id : ids) {
      const auto& rec = dataset.at(id);
      auto h = net.forward_path(cfg.path, params, rec.tensor, Mode::infer, nullptr, cache);
      forward_head(h, head);
      const std::size_t y = label_of(rec.category);
      loss -= std::log(std::max(prob[y], 1e-300));
      correct += static_cast<std::size_t>(std::max_element(prob.begin(), prob.end()) - prob.begin()) == y;
    }
    out.epoch_loss.push_back(loss / static_cast<double>(ids.size()));
    out.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(ids.size()));
    detail::check_divergence(out.epoch_loss.back(), static_cast<std::uint64_t>(epoch));
    if (on_log) {
      LogRecord rec;
      rec.phase = "pretrain";
      rec.step = static_cast<std::uint64_t>(epoch + 1);
      rec.loss = out.epoch_loss.back();
      rec.active_fraction = out.epoch_accuracy.back();
      rec.wall_ms = detail::elapsed_ms(t0);
      rec.sampler = {{"accuracy", out.epoch_accuracy.back()}};
      on_log(rec);
    }
  }
  out.params = std::move(params);
  return out;
}

}  // namespace deeprank
