#include <gtest/gtest.h>

#include <fstream>

#include "deeprank/net.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace deeprank;
using deeprank::testing::FdResult;
using deeprank::testing::TempDir;
using deeprank::testing::tiny_network_config;

namespace {

Tensor<float> random_image(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t(s);
  for (auto& v : t.data) v = u(rng);
  return t;
}

template <typename Fn>
ErrorCode code_of(Fn&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected deeprank::Error";
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST(GradCheck, EveryLayerKind) {
  for (const FdResult& r : deeprank::testing::check_all_layers(17)) {
    EXPECT_LE(r.rel_error, 1e-4) << r.name;
    EXPECT_GT(r.checked, 0u) << r.name;
    EXPECT_LE(r.skipped, r.checked / 50) << r.name;
  }
}

TEST(GradCheck, TinyNetworkThroughTripletLoss) {
  for (const FdResult& r : deeprank::testing::check_network(tiny_network_config(), 1000, 5)) {
    EXPECT_LE(r.rel_error, 1e-4) << r.name;
    EXPECT_GT(r.checked, 0u) << r.name;
  }
}

TEST(GradCheck, DeskScaleNetworkSampled) {
  for (const FdResult& r : deeprank::testing::check_network(NetConfig::desk_scale(), 12, 9)) {
    EXPECT_LE(r.rel_error, 1e-4) << r.name;
    EXPECT_GT(r.checked, 0u) << r.name;
  }
}

TEST(Net, DeskScaleShapesAndParamCount) {
  EmbeddingNet<float> net(NetConfig::desk_scale());
  // conv 3*25*8+8, conv 8*9*8+8, fc 512*32+32 / conv 3*9*8+8, fc 512*32+32 /
  // conv 3*9*8+8, fc 128*32+32 / combine 96*32+32
  const std::size_t expected = 608 + 584 + 16416 + 224 + 16416 + 224 + 4128 + 3104;
  EXPECT_EQ(net.num_params(), expected);
  EXPECT_EQ(net.num_paths(), 3u);
  EXPECT_EQ(net.path_input_shape(1), (Shape{3, 16, 16}));
  EXPECT_EQ(net.path_input_shape(2), (Shape{3, 8, 8}));
  std::size_t covered = 0;
  for (const auto& a : net.arrays()) {
    EXPECT_EQ(a.offset, covered) << a.name;
    covered += a.size;
  }
  EXPECT_EQ(covered, net.num_params());
  EXPECT_NE(net.shape_trace().find("localnorm 8x8x8"), std::string::npos);
}

TEST(Net, PathOutputsAreUnitNorm) {
  EmbeddingNet<float> net(NetConfig::desk_scale());
  auto params = net.init_params(3);
  ForwardCache<float> cache;
  net.forward(params, random_image({3, 32, 32}, 1), Mode::infer, nullptr, cache);
  for (const auto& pc : cache.paths) {
    double ss = 0;
    for (float v : pc.normalized) ss += double(v) * v;
    EXPECT_NEAR(ss, 1.0, 1e-5);
  }
  EXPECT_EQ(cache.embedding.size(), 32u);
}

TEST(Net, FloatAndDoubleAgree) {
  auto cfg = NetConfig::desk_scale();
  EmbeddingNet<float> nf(cfg);
  EmbeddingNet<double> nd(cfg);
  auto pf = nf.init_params(4);
  std::vector<double> pd(pf.begin(), pf.end());
  auto img = random_image(cfg.input, 2);
  ForwardCache<float> cf;
  ForwardCache<double> cd;
  auto ef = nf.forward(pf, img, Mode::infer, nullptr, cf);
  auto ed = nd.forward(pd, img.cast<double>(), Mode::infer, nullptr, cd);
  for (std::size_t i = 0; i < ef.size(); ++i) EXPECT_NEAR(ef[i], ed[i], 1e-4);
}

TEST(Net, InferIsDeterministicAndKeepOneMatchesTrain) {
  auto cfg = NetConfig::desk_scale(1.0);
  EmbeddingNet<float> net(cfg);
  auto params = net.init_params(8);
  auto img = random_image(cfg.input, 3);
  ForwardCache<float> a, b;
  std::mt19937_64 rng(1);
  auto ea = net.forward(params, img, Mode::infer, nullptr, a);
  auto eb = net.forward(params, img, Mode::train, &rng, b);
  for (std::size_t i = 0; i < ea.size(); ++i) EXPECT_EQ(ea[i], eb[i]);
}

TEST(Net, StaleCacheRejected) {
  EmbeddingNet<float> net(tiny_network_config());
  auto p1 = net.init_params(1), p2 = net.init_params(2);
  std::vector<float> grads(net.num_params(), 0.0f), g(5, 1.0f);
  ForwardCache<float> cache;
  EXPECT_EQ(code_of([&] { net.backward(p1, cache, g, grads); }), ErrorCode::stale_cache);
  std::mt19937_64 rng(1);
  net.forward(p1, random_image(tiny_network_config().input, 1), Mode::train, &rng, cache);
  EXPECT_EQ(code_of([&] { net.backward(p2, cache, g, grads); }), ErrorCode::stale_cache);
  EmbeddingNet<float> other(tiny_network_config());
  EXPECT_EQ(code_of([&] { other.backward(p1, cache, g, grads); }), ErrorCode::stale_cache);
  net.backward(p1, cache, g, grads);
}

TEST(Net, ShapeErrors) {
  EmbeddingNet<float> net(NetConfig::desk_scale());
  auto params = net.init_params(1);
  ForwardCache<float> cache;
  EXPECT_EQ(code_of([&] { net.forward(params, random_image({3, 16, 16}, 1), Mode::infer, nullptr, cache); }),
            ErrorCode::shape_mismatch);
  std::vector<float> short_params(10);
  EXPECT_EQ(code_of([&] { net.forward(short_params, random_image({3, 32, 32}, 1), Mode::infer, nullptr, cache); }),
            ErrorCode::shape_mismatch);

  NetConfig bad = NetConfig::desk_scale();
  bad.input = {3, 4, 4};  // conv/pool windows outgrow the feature maps
  EXPECT_EQ(code_of([&] { EmbeddingNet<float> n(bad); }), ErrorCode::config);
  bad = NetConfig::desk_scale();
  bad.paths[1].downsample = 3;
  EXPECT_EQ(code_of([&] { EmbeddingNet<float> n(bad); }), ErrorCode::config);
  bad = NetConfig::desk_scale();
  bad.identity_combine = true;  // 96 != 32
  EXPECT_EQ(code_of([&] { EmbeddingNet<float> n(bad); }), ErrorCode::config);
}

TEST(Net, TrainModeNeedsRng) {
  EmbeddingNet<float> net(NetConfig::desk_scale());
  auto params = net.init_params(1);
  ForwardCache<float> cache;
  EXPECT_EQ(code_of([&] { net.forward(params, random_image({3, 32, 32}, 1), Mode::train, nullptr, cache); }),
            ErrorCode::invalid_argument);
}

TEST(Net, NonFiniteActivationNamesLayer) {
  EmbeddingNet<float> net(tiny_network_config());
  auto params = net.init_params(1);
  params[0] = std::numeric_limits<float>::infinity();
  ForwardCache<float> cache;
  try {
    net.forward(params, random_image(tiny_network_config().input, 1), Mode::infer, nullptr, cache);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
    EXPECT_NE(std::string(e.what()).find("path full layer 0"), std::string::npos) << e.what();
  }
}

TEST(Dropout, KeptFractionAndScaling) {
  DropoutSpec s{0.6};
  const std::size_t n = 100000;
  std::vector<float> x(n, 1.0f), y(n), mask;
  std::mt19937_64 rng(42);
  layers::dropout_forward<float>(s, x, y, mask, Mode::train, &rng);
  std::size_t kept = 0;
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] != 0.0f) {
      ++kept;
      EXPECT_FLOAT_EQ(mask[i], 1.0f / 0.6f);
    }
    sum += y[i];
  }
  EXPECT_NEAR(kept / double(n), 0.6, 0.01);
  EXPECT_NEAR(sum / double(n), 1.0, 0.02);
  layers::dropout_forward<float>(s, x, y, mask, Mode::infer, nullptr);
  EXPECT_EQ(y, x);
}

TEST(LocalNorm, InvariancesAndConstantInput) {
  Tensor<double> x(Shape{2, 6, 7});
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : x.data) v = u(rng);
  auto y = local_norm_forward(x, 3, 1e-5);
  Tensor<double> shifted = x;
  for (auto& v : shifted.data) v += 5.0;
  auto ys = local_norm_forward(shifted, 3, 1e-5);
  for (std::size_t i = 0; i < y.data.size(); ++i) EXPECT_NEAR(y.data[i], ys.data[i], 1e-9);
  Tensor<double> scaled = x;
  for (auto& v : scaled.data) v *= 3.0;
  auto yk = local_norm_forward(scaled, 3, 1e-5);
  for (std::size_t i = 0; i < y.data.size(); ++i) EXPECT_NEAR(y.data[i], yk.data[i], 1e-4);
  auto yc = local_norm_forward(Tensor<double>(Shape{1, 4, 4}, 0.7), 3, 1e-5);
  for (double v : yc.data) EXPECT_NEAR(v, 0.0, 1e-9);
  EXPECT_EQ(code_of([&] { local_norm_forward(x, 9, 1e-5); }), ErrorCode::shape_mismatch);
  EXPECT_EQ(code_of([&] { local_norm_forward(x, 2, 1e-5); }), ErrorCode::shape_mismatch);
}

TEST(Downsample, AveragesBlocks) {
  Tensor<float> t(Shape{1, 4, 4});
  for (int i = 0; i < 16; ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(i);
  auto d = downsample(t, 2);
  EXPECT_EQ(d.shape, (Shape{1, 2, 2}));
  EXPECT_FLOAT_EQ(d.at(0, 0, 0), (0 + 1 + 4 + 5) / 4.0f);
  EXPECT_FLOAT_EQ(d.at(0, 1, 1), (10 + 11 + 14 + 15) / 4.0f);
  EXPECT_EQ(downsample(t, 1).data, t.data);
  EXPECT_EQ(code_of([&] { downsample(t, 3); }), ErrorCode::shape_mismatch);
}

TEST(Layers, ConvMatchesDirectSum) {
  // Direct seven-loop convolution as an independent reference.
  ConvSpec s{2, 3, 2, 1, Activation::none};
  Shape in{2, 5, 6};
  Shape out = layers::output_shape(s, in);
  std::mt19937_64 rng(1);
  auto x = deeprank::testing::random_vector(in.size(), rng);
  auto [wn, bn] = layers::param_counts(s, in);
  auto w = deeprank::testing::random_vector(wn, rng);
  auto b = deeprank::testing::random_vector(bn, rng);
  std::vector<double> y(out.size());
  layers::conv_forward<double>(s, in, x, w, b, y);
  for (int f = 0; f < s.filters; ++f)
    for (int oy = 0; oy < out.height; ++oy)
      for (int ox = 0; ox < out.width; ++ox) {
        double acc = b[static_cast<std::size_t>(f)];
        for (int c = 0; c < in.channels; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
              acc += w[static_cast<std::size_t>(((f * in.channels + c) * 3 + ky) * 3 + kx)] *
                     x[static_cast<std::size_t>((c * in.height + iy) * in.width + ix)];
            }
        EXPECT_NEAR(y[static_cast<std::size_t>((f * out.height + oy) * out.width + ox)], acc, 1e-12);
      }
}

TEST(NetConfig, TextRoundTripAndErrors) {
  auto cfg = NetConfig::desk_scale(0.6);
  auto back = NetConfig::parse(cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_EQ(back.hash(), cfg.hash());
  EXPECT_NE(NetConfig::desk_scale(0.5).hash(), cfg.hash());

  const char* text = R"(
# two paths
[net]
channels = 1
height = 8
width = 8
embed_dim = 4

[path]
name = a
[layer]
type = conv
filters = 2
kernel = 3
pad = 1
[layer]
type = fc
outputs = 3
)";
  auto parsed = NetConfig::parse(text);
  ASSERT_EQ(parsed.paths.size(), 1u);
  EXPECT_EQ(parsed.paths[0].layers.size(), 2u);
  EmbeddingNet<float> net(parsed);
  EXPECT_EQ(net.num_params(), (2u * 9 + 2) + (3u * 128 + 3) + (4u * 3 + 4));

  EXPECT_EQ(code_of([] { NetConfig::parse("[path]\nname = a\n"); }), ErrorCode::config);
  EXPECT_EQ(code_of([] { NetConfig::parse("[net]\nchannels = x\nheight=1\nwidth=1\nembed_dim=1\n"); }),
            ErrorCode::config);
  EXPECT_EQ(code_of([] { NetConfig::parse("[net]\nchannels=1\nheight=1\nwidth=1\nembed_dim=1\n[path]\nname=a\n[layer]\ntype=warp\n"); }),
            ErrorCode::config);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  TempDir dir("ckpt");
  auto cfg = NetConfig::desk_scale();
  EmbeddingNet<float> net(cfg);
  auto params = net.init_params(5);
  save_checkpoint(dir / "a.ckpt", cfg, params);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
  auto ck = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(ck.config.hash(), cfg.hash());
  EXPECT_EQ(ck.params, params);

  {
    std::ofstream os(dir / "bad.ckpt", std::ios::binary);
    os << "NOPE";
  }
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "bad.ckpt"); }), ErrorCode::format);

  auto size = std::filesystem::file_size(dir / "a.ckpt");
  std::filesystem::copy_file(dir / "a.ckpt", dir / "short.ckpt");
  std::filesystem::resize_file(dir / "short.ckpt", size - 100);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "short.ckpt"); }), ErrorCode::format);

  std::vector<float> wrong(params.size() - 1);
  EXPECT_EQ(code_of([&] { save_checkpoint(dir / "w.ckpt", cfg, wrong); }), ErrorCode::shape_mismatch);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "missing.ckpt"); }), ErrorCode::io);
}
