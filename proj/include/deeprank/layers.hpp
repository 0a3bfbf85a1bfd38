#pragma once

// Layer specifications and their forward/backward kernels. Kernels work on
// flat spans in channel-major layout and accumulate reductions in double.
// Backward kernels add into parameter and input gradients.

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "deeprank/core.hpp"

namespace deeprank {

enum class Activation { none, relu };
enum class Mode { train, infer };

struct ConvSpec {
  int filters = 8;
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  Activation activation = Activation::relu;
};

struct MaxPoolSpec {
  int window = 2;
  int stride = 2;
};

struct LocalNormSpec {
  int window = 3;
  double epsilon = 1e-5;
};

struct FullyConnectedSpec {
  int outputs = 32;
  Activation activation = Activation::none;
};

struct DropoutSpec {
  double keep = 0.6;
};

struct L2NormalizeSpec {};

using LayerSpec =
    std::variant<ConvSpec, MaxPoolSpec, LocalNormSpec, FullyConnectedSpec, DropoutSpec, L2NormalizeSpec>;

inline const char* layer_name(const LayerSpec& spec) {
  static constexpr const char* names[] = {"conv", "maxpool", "localnorm", "fc", "dropout", "l2norm"};
  return names[spec.index()];
}

namespace layers {

using Acc = double;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(ErrorCode::config, msg);
}

/// Output shape of `spec` applied to `in`; throws on an invalid combination.
inline Shape output_shape(const LayerSpec& spec, Shape in) {
  return std::visit(
      [&](const auto& s) -> Shape {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ConvSpec>) {
          require(s.filters >= 1 && s.kernel >= 1 && s.stride >= 1 && s.pad >= 0,
                  "conv: filters, kernel, stride must be >= 1 and pad >= 0");
          int oh = (in.height + 2 * s.pad - s.kernel) / s.stride + 1;
          int ow = (in.width + 2 * s.pad - s.kernel) / s.stride + 1;
          require(in.height + 2 * s.pad >= s.kernel && in.width + 2 * s.pad >= s.kernel,
                  "conv: kernel " + std::to_string(s.kernel) + " exceeds padded input " + in.str());
          return {s.filters, oh, ow};
        } else if constexpr (std::is_same_v<S, MaxPoolSpec>) {
          require(s.window >= 1 && s.stride >= 1, "maxpool: window and stride must be >= 1");
          require(s.window <= in.height && s.window <= in.width,
                  "maxpool: window exceeds input " + in.str());
          return {in.channels, (in.height - s.window) / s.stride + 1,
                  (in.width - s.window) / s.stride + 1};
        } else if constexpr (std::is_same_v<S, LocalNormSpec>) {
          require(s.window >= 1 && s.window % 2 == 1, "localnorm: window must be odd and >= 1");
          require(s.epsilon > 0, "localnorm: epsilon must be > 0");
          require(s.window <= in.height && s.window <= in.width,
                  "localnorm: window " + std::to_string(s.window) + " exceeds feature map " +
                      in.str());
          return in;
        } else if constexpr (std::is_same_v<S, FullyConnectedSpec>) {
          require(s.outputs >= 1, "fc: outputs must be >= 1");
          return {s.outputs, 1, 1};
        } else if constexpr (std::is_same_v<S, DropoutSpec>) {
          require(s.keep > 0.0 && s.keep <= 1.0, "dropout: keep probability must be in (0,1]");
          return in;
        } else {
          return in;
        }
      },
      spec);
}

/// {weight count, bias count} for a layer with input shape `in`.
inline std::pair<std::size_t, std::size_t> param_counts(const LayerSpec& spec, Shape in) {
  if (auto* c = std::get_if<ConvSpec>(&spec))
    return {static_cast<std::size_t>(c->filters) * in.channels * c->kernel * c->kernel,
            static_cast<std::size_t>(c->filters)};
  if (auto* f = std::get_if<FullyConnectedSpec>(&spec))
    return {static_cast<std::size_t>(f->outputs) * in.size(), static_cast<std::size_t>(f->outputs)};
  return {0, 0};
}

// --- convolution -------------------------------------------------------------

namespace detail {
// Range of output columns whose input column ox*stride - pad + k is in [0, W).
inline std::pair<int, int> valid_range(int out_extent, int in_extent, int stride, int pad, int k) {
  int lo = pad - k > 0 ? (pad - k + stride - 1) / stride : 0;
  int hi_num = in_extent - 1 + pad - k;
  int hi = hi_num < 0 ? -1 : std::min(out_extent - 1, hi_num / stride);
  return {lo, hi};
}
}  // namespace detail

/// Unrolls input patches into a (channels*K*K) x (out_h*out_w) matrix with
/// zeros for padded positions.
template <typename T>
void im2col(const ConvSpec& s, Shape in, Shape out, std::span<const T> x, std::vector<T>& col) {
  const int K = s.kernel;
  const std::size_t plane = static_cast<std::size_t>(out.height) * out.width;
  col.assign(static_cast<std::size_t>(in.channels) * K * K * plane, T(0));
  for (int c = 0; c < in.channels; ++c) {
    const T* xc = x.data() + static_cast<std::size_t>(c) * in.height * in.width;
    for (int ky = 0; ky < K; ++ky) {
      auto [oy_lo, oy_hi] = detail::valid_range(out.height, in.height, s.stride, s.pad, ky);
      for (int kx = 0; kx < K; ++kx) {
        auto [ox_lo, ox_hi] = detail::valid_range(out.width, in.width, s.stride, s.pad, kx);
        T* crow = col.data() + ((static_cast<std::size_t>(c) * K + ky) * K + kx) * plane;
        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
          const T* xrow = xc + static_cast<std::size_t>(oy * s.stride - s.pad + ky) * in.width - s.pad + kx;
          T* cr = crow + static_cast<std::size_t>(oy) * out.width;
          for (int ox = ox_lo; ox <= ox_hi; ++ox) cr[ox] = xrow[ox * s.stride];
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvSpec& s, Shape in, Shape out, const std::vector<Acc>& gcol, std::span<T> gx) {
  const int K = s.kernel;
  const std::size_t plane = static_cast<std::size_t>(out.height) * out.width;
  for (int c = 0; c < in.channels; ++c) {
    T* gxc = gx.data() + static_cast<std::size_t>(c) * in.height * in.width;
    for (int ky = 0; ky < K; ++ky) {
      auto [oy_lo, oy_hi] = detail::valid_range(out.height, in.height, s.stride, s.pad, ky);
      for (int kx = 0; kx < K; ++kx) {
        auto [ox_lo, ox_hi] = detail::valid_range(out.width, in.width, s.stride, s.pad, kx);
        const Acc* crow = gcol.data() + ((static_cast<std::size_t>(c) * K + ky) * K + kx) * plane;
        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
          T* gxrow = gxc + static_cast<std::size_t>(oy * s.stride - s.pad + ky) * in.width - s.pad + kx;
          const Acc* cr = crow + static_cast<std::size_t>(oy) * out.width;
          for (int ox = ox_lo; ox <= ox_hi; ++ox) gxrow[ox * s.stride] += static_cast<T>(cr[ox]);
        }
      }
    }
  }
}

template <typename T>
void conv_forward(const ConvSpec& s, Shape in, std::span<const T> x, std::span<const T> w,
                  std::span<const T> b, std::span<T> y) {
  Shape out = output_shape(s, in);
  const std::size_t plane = static_cast<std::size_t>(out.height) * out.width;
  const std::size_t rows = static_cast<std::size_t>(in.channels) * s.kernel * s.kernel;
  thread_local std::vector<T> col;
  im2col(s, in, out, x, col);
  std::vector<Acc> acc(plane);
  for (int f = 0; f < s.filters; ++f) {
    std::fill(acc.begin(), acc.end(), static_cast<Acc>(b[static_cast<std::size_t>(f)]));
    const T* wf = w.data() + static_cast<std::size_t>(f) * rows;
    for (std::size_t k = 0; k < rows; ++k) {
      const Acc wv = wf[k];
      const T* cr = col.data() + k * plane;
      for (std::size_t p = 0; p < plane; ++p) acc[p] += wv * static_cast<Acc>(cr[p]);
    }
    T* yf = y.data() + static_cast<std::size_t>(f) * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      Acc v = acc[p];
      if (s.activation == Activation::relu && v < 0) v = 0;
      yf[p] = static_cast<T>(v);
    }
  }
}

/// `gx` may be empty when the input gradient is not needed.
template <typename T>
void conv_backward(const ConvSpec& s, Shape in, std::span<const T> x, std::span<const T> w,
                   std::span<const T> y, std::span<const T> gy, std::span<T> gx, std::span<T> gw,
                   std::span<T> gb) {
  Shape out = output_shape(s, in);
  const std::size_t plane = static_cast<std::size_t>(out.height) * out.width;
  const std::size_t rows = static_cast<std::size_t>(in.channels) * s.kernel * s.kernel;
  thread_local std::vector<T> col;
  im2col(s, in, out, x, col);
  std::vector<Acc> gcol(gx.empty() ? 0 : rows * plane, 0.0);
  std::vector<Acc> g(plane);
  for (int f = 0; f < s.filters; ++f) {
    const T* yf = y.data() + static_cast<std::size_t>(f) * plane;
    const T* gyf = gy.data() + static_cast<std::size_t>(f) * plane;
    Acc bias_sum = 0;
    for (std::size_t p = 0; p < plane; ++p) {
      g[p] = (s.activation == Activation::relu && !(yf[p] > 0)) ? 0 : static_cast<Acc>(gyf[p]);
      bias_sum += g[p];
    }
    gb[static_cast<std::size_t>(f)] += static_cast<T>(bias_sum);
    const T* wf = w.data() + static_cast<std::size_t>(f) * rows;
    T* gwf = gw.data() + static_cast<std::size_t>(f) * rows;
    for (std::size_t k = 0; k < rows; ++k) {
      const T* cr = col.data() + k * plane;
      Acc dot = 0;
#pragma omp simd reduction(+ : dot)
      for (std::size_t p = 0; p < plane; ++p) dot += g[p] * static_cast<Acc>(cr[p]);
      gwf[k] += static_cast<T>(dot);
      if (!gcol.empty()) {
        const Acc wv = wf[k];
        Acc* gr = gcol.data() + k * plane;
        for (std::size_t p = 0; p < plane; ++p) gr[p] += wv * g[p];
      }
    }
  }
  if (!gcol.empty()) col2im_add(s, in, out, gcol, gx);
}

// --- max pooling ---------------------------------------------------------------

template <typename T>
void maxpool_forward(const MaxPoolSpec& s, Shape in, std::span<const T> x, std::span<T> y,
                     std::vector<int>& argmax) {
  Shape out = output_shape(s, in);
  argmax.resize(out.size());
  std::size_t o = 0;
  for (int c = 0; c < in.channels; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * in.height * in.width;
    for (int oy = 0; oy < out.height; ++oy)
      for (int ox = 0; ox < out.width; ++ox, ++o) {
        int best = -1;
        for (int dy = 0; dy < s.window; ++dy)
          for (int dx = 0; dx < s.window; ++dx) {
            int idx = static_cast<int>(base) + (oy * s.stride + dy) * in.width + ox * s.stride + dx;
            if (best < 0 || x[static_cast<std::size_t>(idx)] > x[static_cast<std::size_t>(best)]) best = idx;
          }
        argmax[o] = best;
        y[o] = x[static_cast<std::size_t>(best)];
      }
  }
}

template <typename T>
void maxpool_backward(const std::vector<int>& argmax, std::span<const T> gy, std::span<T> gx) {
  for (std::size_t o = 0; o < argmax.size(); ++o) gx[static_cast<std::size_t>(argmax[o])] += gy[o];
}

// --- local normalization ---------------------------------------------------------

/// Per channel, each location is centered by the mean of its spatial window
/// and divided by (centered window L2 norm + epsilon). Windows are clipped at
/// the borders.
template <typename T>
void local_norm_forward(const LocalNormSpec& s, Shape in, std::span<const T> x, std::span<T> y,
                        std::vector<double>& mean, std::vector<double>& norm) {
  output_shape(s, in);
  const int h = s.window / 2;
  mean.resize(in.size());
  norm.resize(in.size());
  for (int c = 0; c < in.channels; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * in.height * in.width;
    for (int py = 0; py < in.height; ++py)
      for (int px = 0; px < in.width; ++px) {
        int y0 = std::max(0, py - h), y1 = std::min(in.height - 1, py + h);
        int x0 = std::max(0, px - h), x1 = std::min(in.width - 1, px + h);
        Acc sum = 0, n = 0;
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx, ++n)
            sum += x[base + static_cast<std::size_t>(yy) * in.width + xx];
        const Acc m = sum / n;
        Acc ss = 0;
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) {
            Acc d = x[base + static_cast<std::size_t>(yy) * in.width + xx] - m;
            ss += d * d;
          }
        const std::size_t p = base + static_cast<std::size_t>(py) * in.width + px;
        mean[p] = m;
        norm[p] = std::sqrt(ss);
        y[p] = static_cast<T>((x[p] - m) / (norm[p] + s.epsilon));
      }
  }
}

template <typename T>
void local_norm_backward(const LocalNormSpec& s, Shape in, std::span<const T> x,
                         const std::vector<double>& mean, const std::vector<double>& norm,
                         std::span<const T> gy, std::span<T> gx) {
  const int h = s.window / 2;
  std::vector<Acc> acc(in.size(), 0.0);
  for (int c = 0; c < in.channels; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * in.height * in.width;
    for (int py = 0; py < in.height; ++py)
      for (int px = 0; px < in.width; ++px) {
        const std::size_t p = base + static_cast<std::size_t>(py) * in.width + px;
        int y0 = std::max(0, py - h), y1 = std::min(in.height - 1, py + h);
        int x0 = std::max(0, px - h), x1 = std::min(in.width - 1, px + h);
        const Acc n = static_cast<Acc>((y1 - y0 + 1) * (x1 - x0 + 1));
        const Acc denom = norm[p] + s.epsilon;
        const Acc a = gy[p] / denom;
        // d norm / d x_j = (x_j - m) / norm; zero subgradient for a flat window
        const Acc bcoef = norm[p] > 0 ? gy[p] * (x[p] - mean[p]) / (denom * denom * norm[p]) : 0.0;
        acc[p] += a;
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) {
            const std::size_t j = base + static_cast<std::size_t>(yy) * in.width + xx;
            acc[j] -= a / n + bcoef * (x[j] - mean[p]);
          }
      }
  }
  for (std::size_t k = 0; k < acc.size(); ++k) gx[k] += static_cast<T>(acc[k]);
}

// --- fully connected -----------------------------------------------------------

template <typename T>
void fc_forward(const FullyConnectedSpec& s, std::span<const T> x, std::span<const T> w,
                std::span<const T> b, std::span<T> y) {
  const std::size_t n_in = x.size();
  for (int o = 0; o < s.outputs; ++o) {
    const T* wr = w.data() + static_cast<std::size_t>(o) * n_in;
    Acc v = 0;
#pragma omp simd reduction(+ : v)
    for (std::size_t i = 0; i < n_in; ++i) v += static_cast<Acc>(wr[i]) * static_cast<Acc>(x[i]);
    v += b[static_cast<std::size_t>(o)];
    if (s.activation == Activation::relu && v < 0) v = 0;
    y[static_cast<std::size_t>(o)] = static_cast<T>(v);
  }
}

template <typename T>
void fc_backward(const FullyConnectedSpec& s, std::span<const T> x, std::span<const T> w,
                 std::span<const T> y, std::span<const T> gy, std::span<T> gx, std::span<T> gw,
                 std::span<T> gb) {
  const std::size_t n_in = x.size();
  std::vector<Acc> gxa(gx.empty() ? 0 : n_in, 0.0);
  for (int o = 0; o < s.outputs; ++o) {
    const auto oi = static_cast<std::size_t>(o);
    Acc g = (s.activation == Activation::relu && !(y[oi] > 0)) ? 0 : static_cast<Acc>(gy[oi]);
    if (g == 0) continue;
    gb[oi] += static_cast<T>(g);
    const T* wr = w.data() + oi * n_in;
    T* gwr = gw.data() + oi * n_in;
    for (std::size_t i = 0; i < n_in; ++i) gwr[i] += static_cast<T>(g * static_cast<Acc>(x[i]));
    if (!gxa.empty())
      for (std::size_t i = 0; i < n_in; ++i) gxa[i] += g * static_cast<Acc>(wr[i]);
  }
  for (std::size_t i = 0; i < gxa.size(); ++i) gx[i] += static_cast<T>(gxa[i]);
}

// --- dropout -----------------------------------------------------------------

/// Inverted dropout: kept units are scaled by 1/keep in train mode; infer mode
/// is a pass-through. `mask` holds the per-unit multiplier.
template <typename T>
void dropout_forward(const DropoutSpec& s, std::span<const T> x, std::span<T> y,
                     std::vector<T>& mask, Mode mode, std::mt19937_64* rng) {
  mask.assign(x.size(), T(1));
  if (mode == Mode::train && s.keep < 1.0) {
    if (!rng) throw Error(ErrorCode::invalid_argument, "dropout in train mode needs an rng");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const T scale = static_cast<T>(1.0 / s.keep);
    for (auto& m : mask) m = unit(*rng) < s.keep ? scale : T(0);
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i];
}

template <typename T>
void dropout_backward(const std::vector<T>& mask, std::span<const T> gy, std::span<T> gx) {
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mask[i];
}

// --- L2 normalization -----------------------------------------------------------

/// Returns the input norm. A zero input maps to zero.
template <typename T>
double l2_normalize_forward(std::span<const T> x, std::span<T> y) {
  Acc ss = 0;
  for (T v : x) ss += static_cast<Acc>(v) * v;
  const Acc n = std::sqrt(ss);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = n > 0 ? static_cast<T>(x[i] / n) : T(0);
  return n;
}

template <typename T>
void l2_normalize_backward(std::span<const T> y, double norm, std::span<const T> gy,
                           std::span<T> gx) {
  if (!(norm > 0)) return;
  Acc dot = 0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += static_cast<Acc>(y[i]) * gy[i];
  for (std::size_t i = 0; i < y.size(); ++i)
    gx[i] += static_cast<T>((gy[i] - y[i] * dot) / norm);
}

}  // namespace layers

/// Average-pools each channel by `factor`.
template <typename T>
Tensor<T> downsample(const Tensor<T>& in, int factor) {
  if (factor < 1 || in.shape.height % factor != 0 || in.shape.width % factor != 0)
    throw Error(ErrorCode::shape_mismatch, "downsample factor " + std::to_string(factor) +
                                               " does not divide " + in.shape.str());
  if (factor == 1) return in;
  Tensor<T> out(Shape{in.shape.channels, in.shape.height / factor, in.shape.width / factor});
  const double inv = 1.0 / (factor * factor);
  for (int c = 0; c < out.shape.channels; ++c)
    for (int y = 0; y < out.shape.height; ++y)
      for (int x = 0; x < out.shape.width; ++x) {
        double s = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) s += in.at(c, y * factor + dy, x * factor + dx);
        out.at(c, y, x) = static_cast<T>(s * inv);
      }
  return out;
}

/// Standalone local normalization of a feature map.
template <typename T>
Tensor<T> local_norm_forward(const Tensor<T>& in, int window, double epsilon) {
  LocalNormSpec spec{window, epsilon};
  if (window < 1 || window % 2 == 0 || window > in.shape.height || window > in.shape.width)
    throw Error(ErrorCode::shape_mismatch, "localnorm window " + std::to_string(window) +
                                               " invalid for feature map " + in.shape.str());
  if (!(epsilon > 0)) throw Error(ErrorCode::invalid_argument, "localnorm epsilon must be > 0");
  Tensor<T> out(in.shape);
  std::vector<double> mean, norm;
  layers::local_norm_forward<T>(spec, in.shape, in.data, out.data, mean, norm);
  return out;
}

}  // namespace deeprank
