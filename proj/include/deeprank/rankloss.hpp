#pragma once

// Squared-distance similarity, the triplet hinge loss, the regularized
// objective and the hinge gradient with respect to the three embeddings.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "deeprank/core.hpp"

namespace deeprank {

struct LossConfig {
  double gap = 1.0;       // g
  double lambda = 0.001;  // weight on ||W||^2

  void validate() const {
    if (!std::isfinite(gap) || gap < 0)
      throw Error(ErrorCode::config, "LossConfig: gap must be finite and >= 0");
    if (!std::isfinite(lambda) || lambda < 0)
      throw Error(ErrorCode::config, "LossConfig: lambda must be finite and >= 0");
  }
};

template <typename T>
double squared_distance(std::span<const T> x, std::span<const T> y) {
  if (x.size() != y.size())
    throw Error(ErrorCode::shape_mismatch, "squared_distance: dimension mismatch (" +
                                               std::to_string(x.size()) + " vs " +
                                               std::to_string(y.size()) + ")");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    s += d * d;
  }
  return s;
}

inline double squared_distance(const std::vector<double>& x, const std::vector<double>& y) {
  return squared_distance<double>(std::span<const double>(x), std::span<const double>(y));
}

inline double triplet_hinge(double d_pos, double d_neg, double gap) {
  return std::max(0.0, gap + d_pos - d_neg);
}

template <typename T>
struct TripletEmbeddings {
  std::span<const T> query, positive, negative;
};

/// Sum of triplet hinge losses plus lambda * ||W||^2.
template <typename T, typename P>
double objective(std::span<const TripletEmbeddings<T>> batch, std::span<const P> params,
                 const LossConfig& cfg) {
  double loss = 0;
  for (const auto& t : batch) {
    if (t.query.size() != t.positive.size() || t.query.size() != t.negative.size())
      throw Error(ErrorCode::shape_mismatch, "objective: embedding dimensions differ");
    loss += triplet_hinge(squared_distance(t.query, t.positive),
                          squared_distance(t.query, t.negative), cfg.gap);
  }
  double reg = 0;
  for (P w : params) reg += static_cast<double>(w) * static_cast<double>(w);
  return loss + cfg.lambda * reg;
}

template <typename T>
struct TripletGrad {
  double loss = 0;
  bool active = false;
  std::vector<T> query, positive, negative;
};

/// Gradient of the hinge with respect to the three embeddings. Zero when the
/// hinge is inactive, including exactly at the kink.
template <typename T>
TripletGrad<T> loss_grad(std::span<const T> q, std::span<const T> p, std::span<const T> n,
                         double gap) {
  if (q.size() != p.size() || q.size() != n.size())
    throw Error(ErrorCode::shape_mismatch, "loss_grad: embedding dimensions differ");
  TripletGrad<T> g;
  g.query.assign(q.size(), T(0));
  g.positive.assign(q.size(), T(0));
  g.negative.assign(q.size(), T(0));
  const double margin = gap + squared_distance(q, p) - squared_distance(q, n);
  g.loss = std::max(0.0, margin);
  g.active = margin > 0;
  if (!g.active) return g;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double qi = q[i], pi = p[i], ni = n[i];
    g.query[i] = static_cast<T>(2.0 * (ni - pi));
    g.positive[i] = static_cast<T>(-2.0 * (qi - pi));
    g.negative[i] = static_cast<T>(2.0 * (qi - ni));
  }
  return g;
}

}  // namespace deeprank
