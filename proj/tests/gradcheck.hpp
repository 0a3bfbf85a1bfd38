#pragma once

// Central-difference gradient checks in double precision for every layer kind
// and for the full network composed with the triplet objective.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "deeprank/layers.hpp"
#include "deeprank/net.hpp"
#include "deeprank/rankloss.hpp"

namespace deeprank::testing {

struct FdResult {
  std::string name;
  double rel_error = 0;  // max |analytic - numeric| / max(max|analytic|, max|numeric|, floor)
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a kink
};

// Scalar function of a flat vector; fills `pattern` with the piecewise-linear
// branch taken (relu signs, max-pool winners) so kink crossings can be skipped.
using ScalarFn = std::function<double(const std::vector<double>&, std::vector<int>*)>;

// Gradients that are identically zero come out of the difference quotient as
// rounding noise, so the denominator is floored.
inline constexpr double kFdFloor = 1e-6;

inline FdResult fd_compare(const std::string& name, const ScalarFn& f, std::vector<double> x,
                           const std::vector<double>& analytic, const std::vector<std::size_t>& coords,
                           double h = 1e-5) {
  FdResult r{name};
  std::vector<int> base_pattern, plus_pattern, minus_pattern;
  f(x, &base_pattern);
  double max_a = 0, max_n = 0, max_diff = 0;
  for (std::size_t i : coords) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x, &plus_pattern);
    x[i] = keep - h;
    const double fm = f(x, &minus_pattern);
    x[i] = keep;
    if (plus_pattern != base_pattern || minus_pattern != base_pattern) {
      ++r.skipped;
      continue;
    }
    const double numeric = (fp - fm) / (2 * h);
    max_a = std::max(max_a, std::abs(analytic[i]));
    max_n = std::max(max_n, std::abs(numeric));
    max_diff = std::max(max_diff, std::abs(analytic[i] - numeric));
    ++r.checked;
  }
  r.rel_error = max_diff / std::max({max_a, max_n, kFdFloor});
  return r;
}

inline std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = i;
  return c;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void append_signs(const std::vector<double>& y, std::vector<int>* pattern) {
  if (!pattern) return;
  for (double v : y) pattern->push_back(v > 0 ? 1 : 0);
}

// Layer checks. Each packs [input, weights, bias] into one vector and uses the
// scalar L = <gy, y> for a random upstream gradient gy.

inline FdResult check_conv(const ConvSpec& s, Shape in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Shape out = layers::output_shape(s, in);
  auto [wn, bn] = layers::param_counts(s, in);
  const std::size_t xn = in.size();
  auto packed = random_vector(xn + wn + bn, rng);
  auto gy = random_vector(out.size(), rng);
  auto split = [&](const std::vector<double>& v) {
    std::span<const double> all(v);
    return std::tuple{all.subspan(0, xn), all.subspan(xn, wn), all.subspan(xn + wn, bn)};
  };
  ScalarFn f = [&](const std::vector<double>& v, std::vector<int>* pat) {
    auto [x, w, b] = split(v);
    std::vector<double> y(out.size());
    layers::conv_forward<double>(s, in, x, w, b, y);
    if (pat) pat->clear();
    if (s.activation == Activation::relu) append_signs(y, pat);
    return dot(gy, y);
  };
  auto [x, w, b] = split(packed);
  std::vector<double> y(out.size()), grad(packed.size(), 0.0);
  layers::conv_forward<double>(s, in, x, w, b, y);
  std::span<double> g(grad);
  layers::conv_backward<double>(s, in, x, w, y, gy, g.subspan(0, xn), g.subspan(xn, wn), g.subspan(xn + wn, bn));
  return fd_compare("conv", f, packed, grad, all_coords(packed.size()));
}

inline FdResult check_fc(const FullyConnectedSpec& s, std::size_t n_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t wn = n_in * static_cast<std::size_t>(s.outputs), bn = static_cast<std::size_t>(s.outputs);
  auto packed = random_vector(n_in + wn + bn, rng);
  auto gy = random_vector(bn, rng);
  auto split = [&](const std::vector<double>& v) {
    std::span<const double> all(v);
    return std::tuple{all.subspan(0, n_in), all.subspan(n_in, wn), all.subspan(n_in + wn, bn)};
  };
  ScalarFn f = [&](const std::vector<double>& v, std::vector<int>* pat) {
    auto [x, w, b] = split(v);
    std::vector<double> y(bn);
    layers::fc_forward<double>(s, x, w, b, y);
    if (pat) pat->clear();
    if (s.activation == Activation::relu) append_signs(y, pat);
    return dot(gy, y);
  };
  auto [x, w, b] = split(packed);
  std::vector<double> y(bn), grad(packed.size(), 0.0);
  layers::fc_forward<double>(s, x, w, b, y);
  std::span<double> g(grad);
  layers::fc_backward<double>(s, x, w, y, gy, g.subspan(0, n_in), g.subspan(n_in, wn), g.subspan(n_in + wn, bn));
  return fd_compare("fc", f, packed, grad, all_coords(packed.size()));
}

inline FdResult check_maxpool(const MaxPoolSpec& s, Shape in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Shape out = layers::output_shape(s, in);
  auto x0 = random_vector(in.size(), rng);
  auto gy = random_vector(out.size(), rng);
  ScalarFn f = [&](const std::vector<double>& x, std::vector<int>* pat) {
    std::vector<double> y(out.size());
    std::vector<int> argmax;
    layers::maxpool_forward<double>(s, in, x, y, argmax);
    if (pat) *pat = argmax;
    return dot(gy, y);
  };
  std::vector<double> y(out.size()), grad(in.size(), 0.0);
  std::vector<int> argmax;
  layers::maxpool_forward<double>(s, in, x0, y, argmax);
  layers::maxpool_backward<double>(argmax, gy, grad);
  return fd_compare("maxpool", f, x0, grad, all_coords(x0.size()));
}

inline FdResult check_local_norm(const LocalNormSpec& s, Shape in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x0 = random_vector(in.size(), rng);
  auto gy = random_vector(in.size(), rng);
  ScalarFn f = [&](const std::vector<double>& x, std::vector<int>* pat) {
    std::vector<double> y(in.size()), mean, norm;
    layers::local_norm_forward<double>(s, in, x, y, mean, norm);
    if (pat) pat->clear();
    return dot(gy, y);
  };
  std::vector<double> y(in.size()), mean, norm, grad(in.size(), 0.0);
  layers::local_norm_forward<double>(s, in, x0, y, mean, norm);
  layers::local_norm_backward<double>(s, in, x0, mean, norm, gy, grad);
  return fd_compare("localnorm", f, x0, grad, all_coords(x0.size()));
}

inline FdResult check_dropout(const DropoutSpec& s, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x0 = random_vector(n, rng);
  auto gy = random_vector(n, rng);
  const std::uint64_t mask_seed = rng();
  ScalarFn f = [&](const std::vector<double>& x, std::vector<int>* pat) {
    std::mt19937_64 mrng(mask_seed);  // same mask on every evaluation
    std::vector<double> y(n), mask;
    layers::dropout_forward<double>(s, x, y, mask, Mode::train, &mrng);
    if (pat) pat->clear();
    return dot(gy, y);
  };
  std::mt19937_64 mrng(mask_seed);
  std::vector<double> y(n), mask, grad(n, 0.0);
  layers::dropout_forward<double>(s, x0, y, mask, Mode::train, &mrng);
  layers::dropout_backward<double>(mask, gy, grad);
  return fd_compare("dropout", f, x0, grad, all_coords(n));
}

inline FdResult check_l2_normalize(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x0 = random_vector(n, rng);
  auto gy = random_vector(n, rng);
  ScalarFn f = [&](const std::vector<double>& x, std::vector<int>* pat) {
    std::vector<double> y(n);
    layers::l2_normalize_forward<double>(x, y);
    if (pat) pat->clear();
    return dot(gy, y);
  };
  std::vector<double> y(n), grad(n, 0.0);
  const double norm = layers::l2_normalize_forward<double>(x0, y);
  layers::l2_normalize_backward<double>(y, norm, gy, grad);
  return fd_compare("l2norm", f, x0, grad, all_coords(n));
}

inline std::vector<FdResult> check_all_layers(std::uint64_t seed) {
  std::vector<FdResult> out;
  auto named = [&](FdResult r, const std::string& name) {
    r.name = name;
    out.push_back(r);
  };
  named(check_conv({3, 5, 2, 2, Activation::relu}, {2, 9, 8}, seed), "conv k5 s2 p2 relu");
  named(check_conv({4, 3, 1, 1, Activation::none}, {3, 6, 6}, seed + 1), "conv k3 s1 p1 linear");
  named(check_conv({2, 3, 2, 0, Activation::relu}, {2, 7, 7}, seed + 2), "conv k3 s2 p0 relu");
  named(check_maxpool({2, 2}, {3, 6, 6}, seed + 3), "maxpool 2/2");
  named(check_maxpool({3, 2}, {2, 7, 7}, seed + 4), "maxpool 3/2 overlapping");
  named(check_local_norm({3, 1e-5}, {2, 5, 6}, seed + 5), "localnorm 3");
  named(check_local_norm({5, 1e-5}, {1, 6, 6}, seed + 6), "localnorm 5");
  named(check_fc({7, Activation::none}, 12, seed + 7), "fc linear");
  named(check_fc({6, Activation::relu}, 10, seed + 8), "fc relu");
  named(check_dropout({0.6}, 40, seed + 9), "dropout 0.6");
  named(check_l2_normalize(9, seed + 10), "l2norm");
  return out;
}

// Small two-path network exercising every layer kind, cheap enough for
// exhaustive finite differences.
inline NetConfig tiny_network_config() {
  NetConfig cfg;
  cfg.input = {2, 12, 12};
  cfg.embed_dim = 5;
  cfg.paths.push_back({"full", 1,
                       {ConvSpec{3, 3, 2, 1, Activation::relu}, MaxPoolSpec{2, 2}, LocalNormSpec{3, 1e-5},
                        FullyConnectedSpec{6, Activation::relu}, DropoutSpec{0.6}}});
  cfg.paths.push_back({"low", 2, {ConvSpec{2, 3, 1, 1, Activation::none}, FullyConnectedSpec{4, Activation::none}}});
  return cfg;
}

// Full network composed with the regularized triplet objective
//   L(W) = max(0, g + |f(q)-f(p)|^2 - |f(q)-f(n)|^2) + lambda |W|^2
// in train mode with dropout masks pinned per image. Checks
// `coords_per_array` coordinates of every parameter array.
inline std::vector<FdResult> check_network(const NetConfig& cfg, std::size_t coords_per_array, std::uint64_t seed,
                                           const LossConfig& loss = {10.0, 0.001}) {
  EmbeddingNet<double> net(cfg);
  std::mt19937_64 rng(seed);
  auto params = net.init_params(seed);
  // Nonzero biases so that arrays whose hinge gradient cancels still carry a
  // measurable regularizer gradient.
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (auto& w : params) w += jitter(rng);
  Tensor<double> imgs[3];
  for (auto& t : imgs) {
    t = Tensor<double>(cfg.input);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : t.data) v = u(rng);
  }
  const std::uint64_t mask_seeds[3] = {rng(), rng(), rng()};

  auto pattern_of = [](const ForwardCache<double>& c, std::vector<int>* pat) {
    for (const auto& pc : c.paths) {
      for (const auto& am : pc.argmax) pat->insert(pat->end(), am.begin(), am.end());
      for (std::size_t l = 1; l < pc.acts.size(); ++l) append_signs(pc.acts[l], pat);
    }
  };
  ForwardCache<double> caches[3];
  auto run = [&](const std::vector<double>& w, std::vector<int>* pat) {
    if (pat) pat->clear();
    for (int k = 0; k < 3; ++k) {
      std::mt19937_64 mrng(mask_seeds[k]);
      net.forward(w, imgs[k], Mode::train, &mrng, caches[k]);
      if (pat) pattern_of(caches[k], pat);
    }
    const double m = loss.gap + squared_distance<double>(caches[0].embedding, caches[1].embedding) -
                     squared_distance<double>(caches[0].embedding, caches[2].embedding);
    if (pat) pat->push_back(m > 0 ? 1 : 0);
    return std::max(0.0, m) + loss.lambda * EmbeddingNet<double>::squared_norm(w);
  };

  run(params, nullptr);
  std::vector<double> grad(params.size(), 0.0);
  auto g = loss_grad<double>(caches[0].embedding, caches[1].embedding, caches[2].embedding, loss.gap);
  if (g.active) {
    net.backward(params, caches[0], g.query, grad);
    net.backward(params, caches[1], g.positive, grad);
    net.backward(params, caches[2], g.negative, grad);
  }
  for (std::size_t i = 0; i < params.size(); ++i) grad[i] += 2 * loss.lambda * params[i];

  std::vector<FdResult> out;
  for (const auto& a : net.arrays()) {
    std::vector<std::size_t> coords;
    if (a.size <= coords_per_array) {
      for (std::size_t k = 0; k < a.size; ++k) coords.push_back(a.offset + k);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, a.size - 1);
      for (std::size_t k = 0; k < coords_per_array; ++k) coords.push_back(a.offset + pick(rng));
    }
    out.push_back(fd_compare(a.name, run, params, grad, coords));
  }
  return out;
}

}  // namespace deeprank::testing
