#pragma once

// Synthetic datasets with a planted latent embedding. Every image carries its
// latent so rankings can be labeled exactly.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "deeprank/core.hpp"

namespace deeprank {

struct GenConfig {
  int num_categories = 10;
  int images_per_category = 70;  // train + held-out
  int eval_per_category = 20;    // held-out images per category
  int latent_dim = 8;
  Shape shape{3, 32, 32};
  double centroid_spacing = 4.0;  // std-dev of centroid coordinates
  double spread = 1.0;            // within-category std-dev
  double decay = 0.25;            // relevance = exp(-decay * latent distance)
  double contrast = 0.5;          // gain applied before the logistic squashing
  double pixel_noise = 0.01;
  int basis_waves = 3;  // sinusoids summed per basis image
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::config, "GenConfig: " + m); };
    if (num_categories < 1) fail("num_categories must be >= 1");
    if (images_per_category < 1) fail("images_per_category must be >= 1");
    if (eval_per_category < 0 || eval_per_category >= images_per_category)
      fail("eval_per_category must be in [0, images_per_category)");
    if (latent_dim < 1) fail("latent_dim must be >= 1");
    if (!shape.valid()) fail("invalid shape " + shape.str());
    if (!(std::isfinite(spread) && spread > 0)) fail("spread must be finite and > 0");
    if (!(std::isfinite(decay) && decay > 0)) fail("decay must be finite and > 0");
    if (!(std::isfinite(centroid_spacing) && centroid_spacing > 0))
      fail("centroid_spacing must be finite and > 0");
    if (!(std::isfinite(contrast) && contrast > 0)) fail("contrast must be finite and > 0");
    if (!(std::isfinite(pixel_noise) && pixel_noise >= 0)) fail("pixel_noise must be >= 0");
    if (basis_waves < 1) fail("basis_waves must be >= 1");
  }
};

struct GeneratedData {
  Dataset dataset;
  RelevanceSource relevance;
  std::vector<ImageId> train_ids;
  std::vector<ImageId> eval_ids;
  std::vector<std::vector<double>> centroids;
};

inline double latent_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

inline double relevance_kernel(double distance, double decay) {
  return std::exp(-decay * distance);
}

/// Renders latents into smooth images: a fixed random basis of low-frequency
/// sinusoid mixtures, linearly combined by the latent and squashed to (0,1).
class LatentRenderer {
 public:
  LatentRenderer(const GenConfig& cfg, std::mt19937_64& rng)
      : shape_(cfg.shape), latent_dim_(cfg.latent_dim), contrast_(cfg.contrast) {
    std::uniform_real_distribution<double> freq(0.0, 3.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> amp(0.0, 1.0);
    basis_.assign(static_cast<std::size_t>(latent_dim_), std::vector<double>(shape_.size()));
    for (auto& img : basis_) {
      for (int c = 0; c < shape_.channels; ++c) {
        for (int w = 0; w < cfg.basis_waves; ++w) {
          double fy = freq(rng), fx = freq(rng), ph = phase(rng), a = amp(rng);
          for (int y = 0; y < shape_.height; ++y)
            for (int x = 0; x < shape_.width; ++x)
              img[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x] +=
                  a * std::sin(2.0 * std::numbers::pi *
                                   (fy * y / shape_.height + fx * x / shape_.width) +
                               ph);
        }
      }
      double ss = 0.0;
      for (double v : img) ss += v * v;
      double rms = std::sqrt(ss / static_cast<double>(img.size()));
      if (rms > 0)
        for (double& v : img) v /= rms;
    }
  }

  Tensor<float> render(const std::vector<double>& latent, double noise_std,
                       std::mt19937_64& rng) const {
    Tensor<float> t(shape_);
    std::normal_distribution<double> noise(0.0, noise_std > 0 ? noise_std : 1.0);
    const double gain = contrast_ / std::sqrt(static_cast<double>(latent_dim_));
    for (std::size_t p = 0; p < shape_.size(); ++p) {
      double v = 0.0;
      for (int k = 0; k < latent_dim_; ++k) v += latent[static_cast<std::size_t>(k)] * basis_[static_cast<std::size_t>(k)][p];
      v *= gain;
      if (noise_std > 0) v += noise(rng);
      t.data[p] = static_cast<float>(1.0 / (1.0 + std::exp(-v)));
    }
    return t;
  }

 private:
  Shape shape_;
  int latent_dim_;
  double contrast_;
  std::vector<std::vector<double>> basis_;
};

/// Deterministic in `cfg.seed`. Within each category the first
/// images_per_category - eval_per_category images form the training split.
inline GeneratedData generate(const GenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  LatentRenderer renderer(cfg, rng);

  GeneratedData out;
  out.dataset = Dataset(cfg.shape);
  std::normal_distribution<double> centroid_coord(0.0, cfg.centroid_spacing);
  std::normal_distribution<double> jitter(0.0, cfg.spread);

  const int train_per_category = cfg.images_per_category - cfg.eval_per_category;
  ImageId next_id = 0;
  for (int c = 0; c < cfg.num_categories; ++c) {
    std::vector<double> centroid(static_cast<std::size_t>(cfg.latent_dim));
    for (double& v : centroid) v = centroid_coord(rng);
    out.centroids.push_back(centroid);
    for (int n = 0; n < cfg.images_per_category; ++n) {
      ImageRecord rec;
      rec.id = next_id++;
      rec.category = c;
      std::vector<double> latent = centroid;
      for (double& v : latent) v += jitter(rng);
      rec.tensor = renderer.render(latent, cfg.pixel_noise, rng);
      rec.latent = std::move(latent);
      (n < train_per_category ? out.train_ids : out.eval_ids).push_back(rec.id);
      out.dataset.add(std::move(rec));
    }
  }

  out.relevance = RelevanceSource(out.dataset);
  const auto& recs = out.dataset.records();
  for (std::size_t a = 0; a < recs.size(); ++a)
    for (std::size_t b = a + 1; b < recs.size(); ++b)
      if (recs[a].category == recs[b].category)
        out.relevance.add(out.dataset, recs[a].id, recs[b].id,
                          relevance_kernel(latent_distance(*recs[a].latent, *recs[b].latent),
                                           cfg.decay));
  return out;
}

/// Ground-truth ordering from the planted latents: true iff the positive is
/// strictly closer to the query than the negative.
inline bool oracle_rank(const Dataset& dataset, const Triplet& t) {
  const auto& q = dataset.at(t.query);
  const auto& p = dataset.at(t.positive);
  const auto& n = dataset.at(t.negative);
  if (!q.latent || !p.latent || !n.latent)
    throw Error(ErrorCode::missing_latent, "oracle_rank needs latents for all three images");
  return latent_distance(*q.latent, *p.latent) < latent_distance(*q.latent, *n.latent);
}

/// Oracle-labeled evaluation triplets drawn from `ids`. In-class triplets
/// require a relevance gap of at least `min_margin` and are oriented so the
/// positive is the latent-closer image.
inline std::vector<Triplet> make_eval_triplets(const Dataset& dataset,
                                               const RelevanceSource& relevance,
                                               const std::vector<ImageId>& ids, std::size_t count,
                                               double out_of_class_ratio, double min_margin,
                                               std::mt19937_64& rng) {
  std::vector<std::vector<ImageId>> by_cat;
  std::vector<CategoryId> cat_ids;
  for (ImageId id : ids) {
    CategoryId c = dataset.at(id).category;
    auto it = std::find(cat_ids.begin(), cat_ids.end(), c);
    if (it == cat_ids.end()) {
      cat_ids.push_back(c);
      by_cat.emplace_back();
      it = cat_ids.end() - 1;
    }
    by_cat[static_cast<std::size_t>(it - cat_ids.begin())].push_back(id);
  }

  std::vector<Triplet> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t attempts = 0;
  const std::size_t max_attempts = count * 1000 + 1000;
  while (out.size() < count && attempts++ < max_attempts) {
    std::size_t ci = std::uniform_int_distribution<std::size_t>(0, by_cat.size() - 1)(rng);
    const auto& members = by_cat[ci];
    if (members.size() < 2) continue;
    auto pick = [&](const std::vector<ImageId>& v) {
      return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
    };
    ImageId q = pick(members);
    ImageId a = pick(members);
    if (a == q) continue;
    if (unit(rng) < out_of_class_ratio && by_cat.size() > 1) {
      std::size_t cj = std::uniform_int_distribution<std::size_t>(0, by_cat.size() - 2)(rng);
      if (cj >= ci) ++cj;
      ImageId n = pick(by_cat[cj]);
      Triplet t{q, a, n, NegativeKind::out_of_class};
      if (!oracle_rank(dataset, t)) continue;
      out.push_back(t);
    } else {
      if (members.size() < 3) continue;
      ImageId b = pick(members);
      if (b == q || b == a) continue;
      double ra = relevance.score(q, a), rb = relevance.score(q, b);
      if (std::abs(ra - rb) < min_margin) continue;
      Triplet t{q, a, b, NegativeKind::in_class};
      if (!oracle_rank(dataset, t)) std::swap(t.positive, t.negative);
      out.push_back(t);
    }
  }
  return out;
}

}  // namespace deeprank
