#pragma once

// Flat `section.key = value` settings for every CLI command. Each key records
// where its effective value came from: default < file < flag.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "deeprank/deeprank.hpp"

namespace deeprank::cli {

enum class Source { default_value, file, flag };

inline const char* to_string(Source s) {
  switch (s) {
    case Source::default_value: return "default";
    case Source::file: return "file";
    case Source::flag: return "flag";
  }
  return "?";
}

class RunConfig {
 public:
  struct Entry {
    std::string value;
    Source source = Source::default_value;
    std::string help;
  };

  RunConfig() {
    const GenConfig g;
    def("gen.num_categories", g.num_categories, "categories to generate");
    def("gen.images_per_category", g.images_per_category, "train + held-out images per category");
    def("gen.eval_per_category", g.eval_per_category, "held-out images per category");
    def("gen.latent_dim", g.latent_dim, "latent dimensionality");
    def("gen.channels", g.shape.channels, "image channels");
    def("gen.height", g.shape.height, "image height");
    def("gen.width", g.shape.width, "image width");
    def("gen.centroid_spacing", g.centroid_spacing, "std-dev of category centroids");
    def("gen.spread", g.spread, "within-category std-dev");
    def("gen.decay", g.decay, "relevance = exp(-decay * latent distance)");
    def("gen.contrast", g.contrast, "renderer gain");
    def("gen.pixel_noise", g.pixel_noise, "additive pixel noise std-dev");
    def("gen.basis_waves", g.basis_waves, "sinusoids per basis image");
    def("gen.seed", g.seed, "generator seed");

    def("net.config", std::string(""), "NetConfig text file; empty uses the desk-scale network");
    def("net.dropout_keep", 0.6, "dropout keep probability for the desk-scale network");
    def("net.init_seed", 7, "parameter initialization seed");

    const TrainConfig t;
    def("train.learning_rate", t.learning_rate, "step size");
    def("train.momentum", t.momentum, "Nesterov momentum");
    def("train.batch_size", t.batch_size, "triplets per step");
    def("train.workers", t.workers, "1 = synchronous, >1 = asynchronous workers");
    def("train.triplet_budget", t.triplet_budget, "triplets consumed by the ranking phase");
    def("train.seed", t.seed, "sampler, dropout and shift seed");
    def("train.max_shift", t.max_shift, "random pixel shift range");
    def("train.shared_dropout_mask", t.shared_dropout_mask, "one dropout mask per triplet");
    def("train.log_interval", t.log_interval, "steps between log records");
    def("train.checkpoint_interval", 2000, "steps between checkpoints; 0 disables");
    def("train.gap", t.loss.gap, "hinge gap g");
    def("train.lambda", t.loss.lambda, "weight on |W|^2");

    const SamplerConfig s;
    def("sampler.capacity", s.capacity, "reservoir capacity per category");
    def("sampler.positive_cap", s.positive_cap, "cap on r(q,p) in positive acceptance");
    def("sampler.relevance_margin", s.relevance_margin, "T_r for in-class negatives");
    def("sampler.out_of_class_ratio", s.out_of_class_ratio, "fraction of out-of-class negatives");
    def("sampler.max_failures", s.max_failures, "draws before a sampling step gives up");
    def("sampler.query_policy", std::string("uniform"), "uniform | proportional_to_occupancy");
    def("sampler.mode", std::string("weighted"), "weighted | uniform");
    def("sampler.stats_triplets", 100000, "triplets drawn by sampler-stats");

    const PretrainConfig p;
    def("pretrain.enabled", false, "softmax pretraining before ranking");
    def("pretrain.epochs", p.epochs, "pretraining epochs");
    def("pretrain.learning_rate", p.learning_rate, "pretraining step size");
    def("pretrain.momentum", p.momentum, "pretraining momentum");
    def("pretrain.batch_size", p.batch_size, "pretraining batch size");
    def("pretrain.path", p.path, "network path to pretrain");

    const EvalSetConfig e;
    def("eval.triplets", e.triplets, "held-out evaluation triplets");
    def("eval.out_of_class_ratio", e.out_of_class_ratio, "out-of-class share of evaluation triplets");
    def("eval.min_margin", e.min_margin, "relevance margin of in-class evaluation triplets");
    def("eval.pool_size", e.pool_size, "images ranked per query for score-at-top-K");
    def("eval.k", e.k, "K for score-at-top-K");
    def("eval.seed", e.seed, "evaluation set seed");

    def("sweep.ratios", std::string("0,0.2,0.5,0.8,1.0"), "out-of-class ratios for sampler-stats --sweep");
    def("sweep.triplet_budget", 20000, "training triplets per sweep point");
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  void set(const std::string& key, const std::string& value, Source source) {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw Error(ErrorCode::config, "unknown setting '" + key + "'");
    it->second.value = value;
    it->second.source = source;
  }

  /// `key=value` from the command line.
  void set_assignment(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::config, "--set expects key=value, got '" + assignment + "'");
    set(kv::trim(assignment.substr(0, eq)), kv::trim(assignment.substr(eq + 1)), Source::flag);
  }

  /// Keys either fully qualified at top level or unqualified under [section].
  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error(ErrorCode::io, "cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    for (const auto& sec : kv::parse(ss.str()))
      for (const auto& [k, v] : sec.entries) set(sec.name.empty() ? k : sec.name + "." + k, v, Source::file);
  }

  const std::string& str(const std::string& key) const { return at(key).value; }
  double num(const std::string& key) const { return kv::to_double(key, str(key)); }
  long long integer(const std::string& key) const { return kv::to_int(key, str(key)); }
  bool flag(const std::string& key) const { return kv::to_bool(key, str(key)); }
  std::uint64_t u64(const std::string& key) const {
    auto v = integer(key);
    if (v < 0) throw Error(ErrorCode::config, key + " must be >= 0");
    return static_cast<std::uint64_t>(v);
  }

  GenConfig gen() const {
    GenConfig g;
    g.num_categories = static_cast<int>(integer("gen.num_categories"));
    g.images_per_category = static_cast<int>(integer("gen.images_per_category"));
    g.eval_per_category = static_cast<int>(integer("gen.eval_per_category"));
    g.latent_dim = static_cast<int>(integer("gen.latent_dim"));
    g.shape = {static_cast<int>(integer("gen.channels")), static_cast<int>(integer("gen.height")),
               static_cast<int>(integer("gen.width"))};
    g.centroid_spacing = num("gen.centroid_spacing");
    g.spread = num("gen.spread");
    g.decay = num("gen.decay");
    g.contrast = num("gen.contrast");
    g.pixel_noise = num("gen.pixel_noise");
    g.basis_waves = static_cast<int>(integer("gen.basis_waves"));
    g.seed = u64("gen.seed");
    g.validate();
    return g;
  }

  SamplerConfig sampler() const {
    SamplerConfig s;
    s.capacity = u64("sampler.capacity");
    s.positive_cap = num("sampler.positive_cap");
    s.relevance_margin = num("sampler.relevance_margin");
    s.out_of_class_ratio = num("sampler.out_of_class_ratio");
    s.max_failures = static_cast<int>(integer("sampler.max_failures"));
    const auto& qp = str("sampler.query_policy");
    if (qp == "uniform") s.query_policy = QueryBufferPolicy::uniform;
    else if (qp == "proportional_to_occupancy") s.query_policy = QueryBufferPolicy::proportional_to_occupancy;
    else throw Error(ErrorCode::config, "sampler.query_policy: unknown policy '" + qp + "'");
    const auto& m = str("sampler.mode");
    if (m == "weighted") s.mode = SamplingMode::weighted;
    else if (m == "uniform") s.mode = SamplingMode::uniform;
    else throw Error(ErrorCode::config, "sampler.mode: expected weighted or uniform, got '" + m + "'");
    s.validate();
    return s;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.learning_rate = num("train.learning_rate");
    t.momentum = num("train.momentum");
    t.batch_size = u64("train.batch_size");
    t.workers = static_cast<int>(integer("train.workers"));
    t.triplet_budget = u64("train.triplet_budget");
    t.seed = u64("train.seed");
    t.max_shift = static_cast<int>(integer("train.max_shift"));
    t.shared_dropout_mask = flag("train.shared_dropout_mask");
    t.log_interval = u64("train.log_interval");
    t.checkpoint_interval = u64("train.checkpoint_interval");
    t.loss.gap = num("train.gap");
    t.loss.lambda = num("train.lambda");
    t.sampler = sampler();
    t.validate();
    return t;
  }

  PretrainConfig pretrain() const {
    PretrainConfig p;
    p.epochs = static_cast<int>(integer("pretrain.epochs"));
    p.learning_rate = num("pretrain.learning_rate");
    p.momentum = num("pretrain.momentum");
    p.batch_size = u64("pretrain.batch_size");
    p.path = u64("pretrain.path");
    p.seed = u64("train.seed");
    return p;
  }

  EvalSetConfig eval() const {
    EvalSetConfig e;
    e.triplets = u64("eval.triplets");
    e.out_of_class_ratio = num("eval.out_of_class_ratio");
    e.min_margin = num("eval.min_margin");
    e.pool_size = u64("eval.pool_size");
    e.k = u64("eval.k");
    e.seed = u64("eval.seed");
    if (e.k < 1) throw Error(ErrorCode::config, "eval.k must be >= 1");
    return e;
  }

  NetConfig net() const {
    const auto& path = str("net.config");
    if (path.empty()) return NetConfig::desk_scale(num("net.dropout_keep"));
    std::ifstream is(path);
    if (!is) throw Error(ErrorCode::io, "cannot open net config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return NetConfig::parse(ss.str());
  }

  /// Canonical `key = value` text of every setting, sorted by key.
  std::string canonical_text() const {
    std::string out;
    for (const auto& [k, e] : entries_) out += k + " = " + e.value + "\n";
    return out;
  }

  std::string describe() const {
    std::ostringstream os;
    std::string section;
    for (const auto& [k, e] : entries_) {
      auto dot = k.find('.');
      if (k.substr(0, dot) != section) {
        section = k.substr(0, dot);
        os << (os.tellp() > 0 ? "\n" : "") << "[" << section << "]\n";
      }
      os << k.substr(dot + 1) << " = " << e.value << "    # " << to_string(e.source) << "; " << e.help << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, e] : entries_) j[k] = {{"value", e.value}, {"source", to_string(e.source)}};
    return j;
  }

 private:
  template <typename V>
  void def(const std::string& key, const V& v, const std::string& help) {
    std::ostringstream os;
    if constexpr (std::is_same_v<V, bool>) {
      os << (v ? "true" : "false");
    } else if constexpr (std::is_floating_point_v<V>) {
      char buf[32];
      auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
      os << std::string(buf, r.ptr);
    } else {
      os << v;
    }
    entries_[key] = {os.str(), Source::default_value, help};
  }

  const Entry& at(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw Error(ErrorCode::config, "unknown setting '" + key + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace deeprank::cli
