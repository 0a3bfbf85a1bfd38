#pragma once

// Multiscale embedding network: several paths, each reading a downsampled
// copy of the input through its own layer stack, each L2-normalized, then
// combined by a linear embedding layer.
//
// Parameters live in one flat array; every learnable array is a named slice
// of it (see ParamArray). The network object itself is immutable and holds
// no parameters, so many workers can share it.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "deeprank/core.hpp"
#include "deeprank/kv.hpp"
#include "deeprank/layers.hpp"

namespace deeprank {

struct PathSpec {
  std::string name;
  int downsample = 1;
  std::vector<LayerSpec> layers;
};

struct NetConfig {
  Shape input{3, 32, 32};
  int embed_dim = 32;
  bool identity_combine = false;
  std::vector<PathSpec> paths;

  /// Full path: 2 conv + max-pool + local-norm + FC; two shallower paths on
  /// inputs downsampled by 2 and 4.
  static NetConfig desk_scale(double dropout_keep = 0.6) {
    NetConfig cfg;
    cfg.input = {3, 32, 32};
    cfg.embed_dim = 32;
    cfg.paths.push_back({"full", 1,
                         {ConvSpec{8, 5, 2, 2, Activation::relu},
                          ConvSpec{8, 3, 1, 1, Activation::relu},
                          MaxPoolSpec{2, 2},
                          LocalNormSpec{3, 1e-5},
                          FullyConnectedSpec{32, Activation::none},
                          DropoutSpec{dropout_keep}}});
    cfg.paths.push_back({"low2", 2,
                         {ConvSpec{8, 3, 1, 1, Activation::relu},
                          MaxPoolSpec{2, 2},
                          FullyConnectedSpec{32, Activation::none},
                          DropoutSpec{dropout_keep}}});
    cfg.paths.push_back({"low4", 4,
                         {ConvSpec{8, 3, 1, 1, Activation::relu},
                          MaxPoolSpec{2, 2},
                          FullyConnectedSpec{32, Activation::none},
                          DropoutSpec{dropout_keep}}});
    return cfg;
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    auto act = [](Activation a) { return a == Activation::relu ? "relu" : "none"; };
    os << "[net]\nchannels = " << input.channels << "\nheight = " << input.height
       << "\nwidth = " << input.width << "\nembed_dim = " << embed_dim
       << "\ncombine = " << (identity_combine ? "identity" : "linear") << "\n";
    for (const auto& p : paths) {
      os << "\n[path]\nname = " << p.name << "\ndownsample = " << p.downsample << "\n";
      for (const auto& l : p.layers) {
        os << "\n[layer]\ntype = " << layer_name(l) << "\n";
        std::visit(
            [&](const auto& s) {
              using S = std::decay_t<decltype(s)>;
              if constexpr (std::is_same_v<S, ConvSpec>)
                os << "filters = " << s.filters << "\nkernel = " << s.kernel
                   << "\nstride = " << s.stride << "\npad = " << s.pad
                   << "\nactivation = " << act(s.activation) << "\n";
              else if constexpr (std::is_same_v<S, MaxPoolSpec>)
                os << "window = " << s.window << "\nstride = " << s.stride << "\n";
              else if constexpr (std::is_same_v<S, LocalNormSpec>)
                os << "window = " << s.window << "\nepsilon = " << s.epsilon << "\n";
              else if constexpr (std::is_same_v<S, FullyConnectedSpec>)
                os << "outputs = " << s.outputs << "\nactivation = " << act(s.activation) << "\n";
              else if constexpr (std::is_same_v<S, DropoutSpec>)
                os << "keep = " << s.keep << "\n";
            },
            l);
      }
    }
    return os.str();
  }

  std::uint64_t hash() const { return kv::fnv1a(to_text()); }

  static NetConfig parse(std::string_view text) {
    NetConfig cfg;
    cfg.paths.clear();
    bool saw_net = false;
    for (const auto& sec : kv::parse(text)) {
      auto where = [&](const std::string& k) {
        return "[" + sec.name + "] at line " + std::to_string(sec.line) + ": " + k;
      };
      auto get = [&](const char* k, const char* fallback = nullptr) -> std::string {
        if (auto* v = sec.find(k)) return *v;
        if (fallback) return fallback;
        throw Error(ErrorCode::config, where(std::string("missing key '") + k + "'"));
      };
      auto geti = [&](const char* k, const char* fb = nullptr) {
        return static_cast<int>(kv::to_int(where(k), get(k, fb)));
      };
      auto getd = [&](const char* k, const char* fb = nullptr) {
        return kv::to_double(where(k), get(k, fb));
      };
      auto geta = [&](const char* k, const char* fb) {
        std::string v = get(k, fb);
        if (v == "relu") return Activation::relu;
        if (v == "none" || v == "linear") return Activation::none;
        throw Error(ErrorCode::config, where("unknown activation '" + v + "'"));
      };
      if (sec.name.empty()) {
        if (!sec.entries.empty())
          throw Error(ErrorCode::config, "net config: keys before the first section");
      } else if (sec.name == "net") {
        saw_net = true;
        cfg.input = {geti("channels"), geti("height"), geti("width")};
        cfg.embed_dim = geti("embed_dim");
        std::string comb = get("combine", "linear");
        if (comb != "linear" && comb != "identity")
          throw Error(ErrorCode::config, where("combine must be linear or identity"));
        cfg.identity_combine = comb == "identity";
      } else if (sec.name == "path") {
        cfg.paths.push_back({get("name"), geti("downsample", "1"), {}});
      } else if (sec.name == "layer") {
        if (cfg.paths.empty())
          throw Error(ErrorCode::config, where("[layer] before any [path]"));
        std::string type = get("type");
        LayerSpec spec;
        if (type == "conv")
          spec = ConvSpec{geti("filters"), geti("kernel"), geti("stride", "1"), geti("pad", "0"),
                          geta("activation", "relu")};
        else if (type == "maxpool")
          spec = MaxPoolSpec{geti("window"), geti("stride", "2")};
        else if (type == "localnorm")
          spec = LocalNormSpec{geti("window", "3"), getd("epsilon", "1e-5")};
        else if (type == "fc")
          spec = FullyConnectedSpec{geti("outputs"), geta("activation", "none")};
        else if (type == "dropout")
          spec = DropoutSpec{getd("keep", "0.6")};
        else if (type == "l2norm")
          spec = L2NormalizeSpec{};
        else
          throw Error(ErrorCode::config, where("unknown layer type '" + type + "'"));
        cfg.paths.back().layers.push_back(spec);
      } else {
        throw Error(ErrorCode::config, "net config: unknown section [" + sec.name + "]");
      }
    }
    if (!saw_net) throw Error(ErrorCode::config, "net config: missing [net] section");
    return cfg;
  }
};

/// A named slice of the flat parameter vector.
struct ParamArray {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  int path = -1;   // -1 for the combine layer
  int layer = -1;  // index within the path
  bool bias = false;
};

template <typename T>
struct PathCache {
  std::vector<std::vector<T>> acts;  // acts[0] = path input, acts[l+1] = output of layer l
  std::vector<std::vector<T>> dropout_masks;
  std::vector<std::vector<int>> argmax;
  std::vector<std::vector<double>> ln_mean, ln_norm;
  std::vector<T> normalized;
  double norm = 0.0;
};

template <typename T>
struct ForwardCache {
  std::vector<PathCache<T>> paths;
  std::vector<T> concat;
  std::vector<T> embedding;
  const void* owner = nullptr;
  const T* params = nullptr;
  Mode mode = Mode::infer;
  bool valid = false;
};

template <typename T>
class EmbeddingNet {
 public:
  explicit EmbeddingNet(NetConfig cfg) : cfg_(std::move(cfg)) { build(); }

  const NetConfig& config() const { return cfg_; }
  std::size_t num_params() const { return num_params_; }
  int embed_dim() const { return cfg_.embed_dim; }
  std::size_t num_paths() const { return plans_.size(); }
  const std::vector<ParamArray>& arrays() const { return arrays_; }
  Shape path_input_shape(std::size_t p) const { return plans_[p].input; }
  std::size_t path_output_dim(std::size_t p) const { return plans_[p].out_dim; }

  /// Layer-by-layer shape trace, one line per layer.
  std::string shape_trace() const {
    std::ostringstream os;
    for (const auto& pl : plans_) {
      os << pl.name << " (/" << pl.factor << ") " << pl.input.str();
      for (const auto& l : pl.layers) os << " -> " << layer_name(l.spec) << " " << l.out.str();
      os << " -> l2norm " << pl.out_dim << "\n";
    }
    os << "combine " << combine_in_ << " -> " << cfg_.embed_dim
       << (cfg_.identity_combine ? " (identity)" : "") << "\n";
    return os.str();
  }

  std::vector<T> init_params(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<T> params(num_params_, T(0));
    for (const auto& a : arrays_) {
      if (a.bias) continue;
      double fan_in = 0, gain = 1.0;
      if (a.path < 0) {
        fan_in = static_cast<double>(combine_in_);
      } else {
        const auto& lp = plans_[static_cast<std::size_t>(a.path)].layers[static_cast<std::size_t>(a.layer)];
        fan_in = static_cast<double>(a.size) / static_cast<double>(lp.b_size);
        bool relu = false;
        if (auto* c = std::get_if<ConvSpec>(&lp.spec)) relu = c->activation == Activation::relu;
        if (auto* f = std::get_if<FullyConnectedSpec>(&lp.spec)) relu = f->activation == Activation::relu;
        gain = relu ? 2.0 : 1.0;
      }
      std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
      for (std::size_t k = 0; k < a.size; ++k) params[a.offset + k] = static_cast<T>(dist(rng));
    }
    return params;
  }

  /// Runs every path and the combine layer. `rng` is required in train mode
  /// when the network contains dropout.
  std::span<const T> forward(std::span<const T> params, const Tensor<T>& input, Mode mode,
                             std::mt19937_64* rng, ForwardCache<T>& cache) const {
    check_params(params);
    if (input.shape != cfg_.input)
      throw Error(ErrorCode::shape_mismatch,
                  "input shape " + input.shape.str() + " != configured " + cfg_.input.str());
    cache.valid = false;
    cache.paths.resize(plans_.size());
    cache.concat.resize(combine_in_);
    std::size_t off = 0;
    for (std::size_t p = 0; p < plans_.size(); ++p) {
      Tensor<T> scaled = downsample(input, plans_[p].factor);
      run_path(p, params, std::move(scaled.data), mode, rng, cache.paths[p]);
      auto& pc = cache.paths[p];
      std::copy(pc.normalized.begin(), pc.normalized.end(), cache.concat.begin() + static_cast<std::ptrdiff_t>(off));
      off += pc.normalized.size();
    }
    cache.embedding.resize(static_cast<std::size_t>(cfg_.embed_dim));
    if (cfg_.identity_combine) {
      cache.embedding = cache.concat;
    } else {
      FullyConnectedSpec fc{cfg_.embed_dim, Activation::none};
      layers::fc_forward<T>(fc, cache.concat, params.subspan(combine_w_, combine_w_size_),
                            params.subspan(combine_b_, static_cast<std::size_t>(cfg_.embed_dim)),
                            cache.embedding);
    }
    check_finite(cache.embedding, "combine");
    cache.owner = this;
    cache.params = params.data();
    cache.mode = mode;
    cache.valid = true;
    return cache.embedding;
  }

  /// Adds d(embedding . grad_embedding)/dW into `grads`.
  void backward(std::span<const T> params, const ForwardCache<T>& cache,
                std::span<const T> grad_embedding, std::span<T> grads) const {
    check_cache(params, cache);
    if (grad_embedding.size() != static_cast<std::size_t>(cfg_.embed_dim) || grads.size() != num_params_)
      throw Error(ErrorCode::shape_mismatch, "backward: gradient buffer sizes do not match network");
    std::vector<T> gconcat(combine_in_, T(0));
    if (cfg_.identity_combine) {
      std::copy(grad_embedding.begin(), grad_embedding.end(), gconcat.begin());
    } else {
      FullyConnectedSpec fc{cfg_.embed_dim, Activation::none};
      layers::fc_backward<T>(fc, cache.concat, params.subspan(combine_w_, combine_w_size_),
                             cache.embedding, grad_embedding, gconcat,
                             grads.subspan(combine_w_, combine_w_size_),
                             grads.subspan(combine_b_, static_cast<std::size_t>(cfg_.embed_dim)));
    }
    std::size_t off = 0;
    for (std::size_t p = 0; p < plans_.size(); ++p) {
      const auto& pc = cache.paths[p];
      std::span<const T> g(gconcat.data() + off, pc.normalized.size());
      std::vector<T> graw(pc.normalized.size(), T(0));
      layers::l2_normalize_backward<T>(pc.normalized, pc.norm, g, graw);
      backprop_path(p, params, pc, graw, grads);
      off += pc.normalized.size();
    }
  }

  /// Raw (pre-normalization) output of path `p`.
  std::span<const T> forward_path(std::size_t p, std::span<const T> params, const Tensor<T>& input,
                                  Mode mode, std::mt19937_64* rng, PathCache<T>& cache) const {
    check_params(params);
    if (input.shape != cfg_.input)
      throw Error(ErrorCode::shape_mismatch, "input shape " + input.shape.str() + " != configured " +
                                                 cfg_.input.str());
    Tensor<T> scaled = downsample(input, plans_[p].factor);
    run_path(p, params, std::move(scaled.data), mode, rng, cache);
    return cache.acts.back();
  }

  void backward_path(std::size_t p, std::span<const T> params, const PathCache<T>& cache,
                     std::span<const T> grad_out, std::span<T> grads) const {
    check_params(params);
    if (cache.acts.size() != plans_[p].layers.size() + 1)
      throw Error(ErrorCode::stale_cache, "backward_path: cache does not belong to path " + std::to_string(p));
    backprop_path(p, params, cache, grad_out, grads);
  }

  /// Sum of squares of all parameters.
  static double squared_norm(std::span<const T> params) {
    double s = 0;
    for (T v : params) s += static_cast<double>(v) * static_cast<double>(v);
    return s;
  }

 private:
  struct LayerPlan {
    LayerSpec spec;
    Shape in, out;
    std::size_t w_offset = 0, w_size = 0, b_offset = 0, b_size = 0;
  };
  struct PathPlan {
    std::string name;
    int factor = 1;
    Shape input;
    std::vector<LayerPlan> layers;
    std::size_t out_dim = 0;
  };

  void build() {
    if (!cfg_.input.valid())
      throw Error(ErrorCode::config, "net: invalid input shape " + cfg_.input.str());
    if (cfg_.paths.empty()) throw Error(ErrorCode::config, "net: at least one path is required");
    if (cfg_.embed_dim < 1) throw Error(ErrorCode::config, "net: embed_dim must be >= 1");
    std::size_t offset = 0;
    for (std::size_t p = 0; p < cfg_.paths.size(); ++p) {
      const auto& ps = cfg_.paths[p];
      PathPlan plan;
      plan.name = ps.name;
      plan.factor = ps.downsample;
      if (ps.downsample < 1 || cfg_.input.height % ps.downsample || cfg_.input.width % ps.downsample)
        throw Error(ErrorCode::config, "path " + ps.name + ": downsample factor " +
                                           std::to_string(ps.downsample) + " does not divide input " +
                                           cfg_.input.str());
      plan.input = {cfg_.input.channels, cfg_.input.height / ps.downsample,
                    cfg_.input.width / ps.downsample};
      Shape cur = plan.input;
      for (std::size_t l = 0; l < ps.layers.size(); ++l) {
        LayerPlan lp;
        lp.spec = ps.layers[l];
        lp.in = cur;
        try {
          lp.out = layers::output_shape(lp.spec, cur);
        } catch (const Error& e) {
          throw Error(ErrorCode::config,
                      "path " + ps.name + " layer " + std::to_string(l) + ": " + e.what());
        }
        auto [wn, bn] = layers::param_counts(lp.spec, cur);
        if (wn) {
          std::string base = ps.name + "." + std::to_string(l) + "." + layer_name(lp.spec);
          lp.w_offset = offset;
          lp.w_size = wn;
          arrays_.push_back({base + ".weight", offset, wn, static_cast<int>(p), static_cast<int>(l), false});
          offset += wn;
          lp.b_offset = offset;
          lp.b_size = bn;
          arrays_.push_back({base + ".bias", offset, bn, static_cast<int>(p), static_cast<int>(l), true});
          offset += bn;
        }
        cur = lp.out;
        plan.layers.push_back(lp);
      }
      plan.out_dim = cur.size();
      combine_in_ += plan.out_dim;
      plans_.push_back(std::move(plan));
    }
    if (cfg_.identity_combine) {
      if (combine_in_ != static_cast<std::size_t>(cfg_.embed_dim))
        throw Error(ErrorCode::config, "net: identity combine needs embed_dim == " + std::to_string(combine_in_));
    } else {
      combine_w_ = offset;
      combine_w_size_ = combine_in_ * static_cast<std::size_t>(cfg_.embed_dim);
      arrays_.push_back({"combine.weight", offset, combine_w_size_, -1, -1, false});
      offset += combine_w_size_;
      combine_b_ = offset;
      arrays_.push_back({"combine.bias", offset, static_cast<std::size_t>(cfg_.embed_dim), -1, -1, true});
      offset += static_cast<std::size_t>(cfg_.embed_dim);
    }
    num_params_ = offset;
  }

  void check_params(std::span<const T> params) const {
    if (params.size() != num_params_)
      throw Error(ErrorCode::shape_mismatch, "parameter vector has " + std::to_string(params.size()) +
                                                 " values, network needs " + std::to_string(num_params_));
  }

  void check_cache(std::span<const T> params, const ForwardCache<T>& cache) const {
    check_params(params);
    if (!cache.valid || cache.owner != this)
      throw Error(ErrorCode::stale_cache, "backward: no forward cache from this network");
    if (cache.params != params.data())
      throw Error(ErrorCode::stale_cache, "backward: cache was produced with different parameters");
  }

  static void check_finite(std::span<const T> v, const std::string& where) {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x)))
        throw Error(ErrorCode::non_finite, "non-finite activation at " + where);
  }

  void run_path(std::size_t p, std::span<const T> params, std::vector<T> input, Mode mode,
                std::mt19937_64* rng, PathCache<T>& pc) const {
    const auto& plan = plans_[p];
    const std::size_t L = plan.layers.size();
    pc.acts.resize(L + 1);
    pc.dropout_masks.resize(L);
    pc.argmax.resize(L);
    pc.ln_mean.resize(L);
    pc.ln_norm.resize(L);
    pc.acts[0] = std::move(input);
    for (std::size_t l = 0; l < L; ++l) {
      const auto& lp = plan.layers[l];
      std::span<const T> x = pc.acts[l];
      auto& y = pc.acts[l + 1];
      y.assign(lp.out.size(), T(0));
      std::visit(
          [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, ConvSpec>)
              layers::conv_forward<T>(s, lp.in, x, params.subspan(lp.w_offset, lp.w_size),
                                      params.subspan(lp.b_offset, lp.b_size), y);
            else if constexpr (std::is_same_v<S, MaxPoolSpec>)
              layers::maxpool_forward<T>(s, lp.in, x, y, pc.argmax[l]);
            else if constexpr (std::is_same_v<S, LocalNormSpec>)
              layers::local_norm_forward<T>(s, lp.in, x, y, pc.ln_mean[l], pc.ln_norm[l]);
            else if constexpr (std::is_same_v<S, FullyConnectedSpec>)
              layers::fc_forward<T>(s, x, params.subspan(lp.w_offset, lp.w_size),
                                    params.subspan(lp.b_offset, lp.b_size), y);
            else if constexpr (std::is_same_v<S, DropoutSpec>)
              layers::dropout_forward<T>(s, x, y, pc.dropout_masks[l], mode, rng);
            else
              pc.ln_mean[l].assign(1, layers::l2_normalize_forward<T>(x, y));
          },
          lp.spec);
      check_finite(y, "path " + plan.name + " layer " + std::to_string(l) + " (" + layer_name(lp.spec) + ")");
    }
    pc.normalized.resize(plan.out_dim);
    pc.norm = layers::l2_normalize_forward<T>(pc.acts[L], pc.normalized);
  }

  void backprop_path(std::size_t p, std::span<const T> params, const PathCache<T>& pc,
                     std::span<const T> grad_out, std::span<T> grads) const {
    const auto& plan = plans_[p];
    std::vector<T> g(grad_out.begin(), grad_out.end());
    for (std::size_t l = plan.layers.size(); l-- > 0;) {
      const auto& lp = plan.layers[l];
      std::span<const T> x = pc.acts[l];
      std::span<const T> y = pc.acts[l + 1];
      const bool need_gx = l > 0;
      std::vector<T> gx(need_gx ? lp.in.size() : 0, T(0));
      std::visit(
          [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, ConvSpec>)
              layers::conv_backward<T>(s, lp.in, x, params.subspan(lp.w_offset, lp.w_size), y, g, gx,
                                       grads.subspan(lp.w_offset, lp.w_size),
                                       grads.subspan(lp.b_offset, lp.b_size));
            else if constexpr (std::is_same_v<S, FullyConnectedSpec>)
              layers::fc_backward<T>(s, x, params.subspan(lp.w_offset, lp.w_size), y, g, gx,
                                     grads.subspan(lp.w_offset, lp.w_size),
                                     grads.subspan(lp.b_offset, lp.b_size));
            else if (need_gx) {
              if constexpr (std::is_same_v<S, MaxPoolSpec>)
                layers::maxpool_backward<T>(pc.argmax[l], g, gx);
              else if constexpr (std::is_same_v<S, LocalNormSpec>)
                layers::local_norm_backward<T>(s, lp.in, x, pc.ln_mean[l], pc.ln_norm[l], g, gx);
              else if constexpr (std::is_same_v<S, DropoutSpec>)
                layers::dropout_backward<T>(pc.dropout_masks[l], g, gx);
              else
                layers::l2_normalize_backward<T>(y, pc.ln_mean[l][0], g, gx);
            }
          },
          lp.spec);
      if (!need_gx) break;
      g = std::move(gx);
    }
  }

  NetConfig cfg_;
  std::vector<PathPlan> plans_;
  std::vector<ParamArray> arrays_;
  std::size_t num_params_ = 0;
  std::size_t combine_in_ = 0;
  std::size_t combine_w_ = 0, combine_w_size_ = 0, combine_b_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "DRCK", u32 version, u64 config hash, u32 C/H/W, u32 embed_dim,
// u64 param count, u64 config text length, config text, float32 params (LE).
// ---------------------------------------------------------------------------

struct Checkpoint {
  NetConfig config;
  std::vector<float> params;
};

namespace detail {
template <typename U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}
template <typename U>
U get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    int c = is.get();
    if (c == EOF) throw Error(ErrorCode::format, "checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}
}  // namespace detail

/// Writes to a temporary file and renames it into place, so a reader never
/// observes a partial checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const NetConfig& cfg,
                            std::span<const float> params) {
  EmbeddingNet<float> net(cfg);
  if (params.size() != net.num_params())
    throw Error(ErrorCode::shape_mismatch, "checkpoint: parameter count does not match config");
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::io, "cannot write " + tmp.string());
    const std::string text = cfg.to_text();
    os.write("DRCK", 4);
    detail::put_le<std::uint32_t>(os, 1);
    detail::put_le<std::uint64_t>(os, kv::fnv1a(text));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.input.channels));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.input.height));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.input.width));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.embed_dim));
    detail::put_le<std::uint64_t>(os, params.size());
    detail::put_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    deeprank::detail::write_f32_le(os, params.data(), params.size());
    if (!os) throw Error(ErrorCode::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "DRCK")
    throw Error(ErrorCode::format, path.string() + " is not a checkpoint");
  auto version = detail::get_le<std::uint32_t>(is);
  if (version != 1) throw Error(ErrorCode::format, "unsupported checkpoint version " + std::to_string(version));
  auto hash = detail::get_le<std::uint64_t>(is);
  Shape dims{static_cast<int>(detail::get_le<std::uint32_t>(is)), static_cast<int>(detail::get_le<std::uint32_t>(is)),
             static_cast<int>(detail::get_le<std::uint32_t>(is))};
  auto embed = static_cast<int>(detail::get_le<std::uint32_t>(is));
  auto count = detail::get_le<std::uint64_t>(is);
  auto text_len = detail::get_le<std::uint64_t>(is);
  if (text_len > (1u << 24)) throw Error(ErrorCode::format, "checkpoint config text too large");
  std::string text(text_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(text_len));
  if (!is) throw Error(ErrorCode::format, "checkpoint truncated in config text");
  if (kv::fnv1a(text) != hash) throw Error(ErrorCode::format, "checkpoint config hash mismatch");
  Checkpoint ck{NetConfig::parse(text), {}};
  if (ck.config.input != dims || ck.config.embed_dim != embed)
    throw Error(ErrorCode::format, "checkpoint header dims disagree with embedded config");
  EmbeddingNet<float> net(ck.config);
  if (net.num_params() != count)
    throw Error(ErrorCode::format, "checkpoint parameter count disagrees with config");
  ck.params.resize(count);
  if (!deeprank::detail::read_f32_le(is, ck.params.data(), count))
    throw Error(ErrorCode::format, "checkpoint truncated in parameters");
  return ck;
}

}  // namespace deeprank
