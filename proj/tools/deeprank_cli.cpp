#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "deeprank/deeprank.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace deeprank;
using deeprank::cli::RunConfig;
using deeprank::cli::Source;

namespace {

constexpr const char* kVersion = "0.1.0";

// Dataset directory layout.
struct DataFiles {
  fs::path dir;
  fs::path manifest() const { return dir / "dataset.jsonl"; }
  fs::path blob() const { return dir / "dataset.bin"; }
  fs::path relevance() const { return dir / "relevance.csv"; }
  fs::path train_ids() const { return dir / "train_ids.txt"; }
  fs::path eval_ids() const { return dir / "eval_ids.txt"; }
};

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCode::io, "cannot write " + path.string());
  os << j.dump(2) << '\n';
}

class Manifest {
 public:
  Manifest(std::string command, const RunConfig& cfg, std::vector<std::string> argv)
      : command_(std::move(command)), cfg_(cfg), argv_(std::move(argv)), started_(now_iso()) {}

  void output(const fs::path& p) { outputs_.push_back(p.string()); }

  /// Records which generated dataset a run read, via its gen-data manifest.
  void data_source(const fs::path& dir) {
    data_ = {{"dir", dir.string()}};
    std::ifstream is(dir / "run_manifest.json");
    if (!is) return;
    try {
      auto j = nlohmann::json::parse(is);
      data_["config_hash"] = j.at("config_hash");
      data_["gen_seed"] = j.at("seeds").at("gen");
    } catch (const std::exception&) {
      data_["note"] = "unreadable gen-data manifest";
    }
  }

  void write(const fs::path& dir, const nlohmann::json& extra = {}) const {
    nlohmann::json j = {{"command", command_},
                        {"argv", argv_},
                        {"config_hash", hex64(kv::fnv1a(cfg_.canonical_text()))},
                        {"config", cfg_.to_json()},
                        {"seeds",
                         {{"gen", cfg_.u64("gen.seed")},
                          {"train", cfg_.u64("train.seed")},
                          {"init", cfg_.u64("net.init_seed")},
                          {"eval", cfg_.u64("eval.seed")}}},
                        {"versions", {{"deeprank", kVersion}, {"compiler", __VERSION__}, {"cplusplus", __cplusplus}}},
                        {"started", started_},
                        {"finished", now_iso()},
                        {"outputs", outputs_}};
    if (!data_.is_null()) j["data"] = data_;
    if (!extra.is_null()) j["result"] = extra;
    write_json(dir / "run_manifest.json", j);
  }

 private:
  std::string command_;
  const RunConfig& cfg_;
  std::vector<std::string> argv_;
  std::string started_;
  std::vector<std::string> outputs_;
  nlohmann::json data_;
};

struct LoadedData {
  Dataset dataset;
  RelevanceSource relevance;
  std::vector<ImageId> train_ids, eval_ids;
};

LoadedData load_data(const DataFiles& f) {
  LoadedData d;
  d.dataset = load_dataset(f.manifest());
  d.relevance = load_relevance(f.relevance(), d.dataset);
  d.train_ids = load_id_list(f.train_ids());
  d.eval_ids = load_id_list(f.eval_ids());
  return d;
}

// Rebuilds the SyntheticTask view of data loaded from disk.
SyntheticTask make_task(LoadedData d, const EvalSetConfig& ec) {
  GeneratedData g;
  g.dataset = std::move(d.dataset);
  g.relevance = std::move(d.relevance);
  g.train_ids = std::move(d.train_ids);
  g.eval_ids = std::move(d.eval_ids);
  return SyntheticTask(std::move(g), ec);
}

void check_input_shape(const NetConfig& net, const Dataset& ds) {
  if (net.input != ds.shape())
    throw Error(ErrorCode::shape_mismatch,
                "network input " + net.input.str() + " does not match dataset images " + ds.shape().str());
}

// --- gen-data ----------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, const DataFiles& files, Manifest& m) {
  const auto g = cfg.gen();
  auto data = generate(g);
  fs::create_directories(files.dir);
  save_dataset(data.dataset, files.manifest(), files.blob());
  save_relevance(data.relevance, files.relevance());
  save_id_list(data.train_ids, files.train_ids());
  save_id_list(data.eval_ids, files.eval_ids());
  for (const auto& p : {files.manifest(), files.blob(), files.relevance(), files.train_ids(), files.eval_ids()})
    m.output(p);
  nlohmann::json summary = {{"images", data.dataset.size()},
                            {"categories", g.num_categories},
                            {"train", data.train_ids.size()},
                            {"eval", data.eval_ids.size()},
                            {"relevance_pairs", data.relevance.pairs().size()}};
  m.write(files.dir, summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

// --- train -------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, const DataFiles& files, const fs::path& out, Manifest& m) {
  const auto tc = cfg.train();
  const auto netcfg = cfg.net();
  auto task = make_task(load_data(files), cfg.eval());
  check_input_shape(netcfg, task.data.dataset);
  fs::create_directories(out);
  EmbeddingNet<float> net(netcfg);
  auto params = net.init_params(cfg.u64("net.init_seed"));

  const fs::path log_path = out / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error(ErrorCode::io, "cannot write " + log_path.string());
  auto emit = [&](const LogRecord& r) {
    log << r.to_json().dump() << '\n';
    log.flush();
    std::fprintf(stderr, "[%s] step %llu loss %.4f\n", r.phase.c_str(), static_cast<unsigned long long>(r.step),
                 r.loss);
  };
  m.output(log_path);

  nlohmann::json result;
  if (cfg.flag("pretrain.enabled")) {
    auto pre = pretrain_softmax(task.train_set, net, std::move(params), cfg.pretrain(), emit);
    params = std::move(pre.params);
    result["pretrain"] = {{"epoch_loss", pre.epoch_loss},
                          {"epoch_accuracy", pre.epoch_accuracy},
                          {"uniform_loss", pre.uniform_loss}};
  }

  const fs::path latest = out / "checkpoint_latest.drck";
  TrainCallbacks cb;
  cb.on_log = emit;
  cb.on_checkpoint = [&](std::uint64_t, std::span<const float> p) { save_checkpoint(latest, netcfg, p); };
  auto res = tc.workers == 1 ? train(task.train_set, task.train_relevance, net, std::move(params), tc, cb)
                             : train_async(task.train_set, task.train_relevance, net, std::move(params), tc, cb);

  const fs::path model = out / "model.drck";
  save_checkpoint(model, netcfg, res.params);
  m.output(model);
  if (fs::exists(latest)) m.output(latest);

  const auto report = task.evaluate_net(net, res.params);
  const fs::path report_path = out / "eval_report.json";
  write_json(report_path, report.to_json());
  m.output(report_path);

  result["train"] = {{"steps", res.steps},
                     {"triplets", res.triplets},
                     {"skipped_steps", res.skipped_steps},
                     {"worker_steps", res.worker_steps},
                     {"wall_ms", res.wall_ms},
                     {"sampler", res.sampler.to_json()}};
  result["eval"] = report.to_json();
  m.write(out, result);
  std::cout << report.to_json().dump() << '\n';
  return 0;
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const RunConfig& cfg, const DataFiles& files, const fs::path& checkpoint, const fs::path& out,
             bool per_triplet, Manifest& m) {
  auto ck = load_checkpoint(checkpoint);
  auto task = make_task(load_data(files), cfg.eval());
  check_input_shape(ck.config, task.data.dataset);
  EmbeddingNet<float> net(ck.config);
  const auto table = embed_all(net, std::span<const float>(ck.params), task.data.dataset, task.data.eval_ids);
  const auto report = task.evaluate_table(table);
  fs::create_directories(out);
  const fs::path report_path = out / "eval_report.json";
  auto j = report.to_json();
  j["checkpoint"] = checkpoint.string();
  write_json(report_path, j);
  m.output(report_path);
  if (per_triplet) {
    const fs::path csv_path = out / "eval_triplets.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw Error(ErrorCode::io, "cannot write " + csv_path.string());
    csv << "query,positive,negative,kind,d_pos,d_neg,correct\n";
    csv.precision(9);
    for (const auto& t : task.eval_triplets) {
      const double dp = squared_distance(table.at(t.query), table.at(t.positive));
      const double dn = squared_distance(table.at(t.query), table.at(t.negative));
      csv << t.query << ',' << t.positive << ',' << t.negative << ',' << to_string(t.kind) << ',' << dp << ','
          << dn << ',' << (dp < dn ? 1 : 0) << '\n';
    }
    m.output(csv_path);
  }
  m.write(out, j);
  std::cout << j.dump() << '\n';
  return 0;
}

// --- sampler-stats -----------------------------------------------------------

int cmd_sampler_stats(const RunConfig& cfg, const DataFiles& files, const fs::path& out, bool sweep, Manifest& m) {
  const auto sc = cfg.sampler();
  auto task = make_task(load_data(files), cfg.eval());
  fs::create_directories(out);

  std::mt19937_64 rng(cfg.u64("train.seed"));
  BufferSet buffers(sc.capacity);
  auto order = task.train_set.ids();
  std::shuffle(order.begin(), order.end(), rng);
  stream_into_buffers(buffers, task.train_set, task.train_relevance, order, rng, sc.mode);
  TripletSampler sampler(buffers, task.train_relevance, sc);
  const auto want = cfg.u64("sampler.stats_triplets");
  std::uint64_t attempts = 0;
  const std::uint64_t max_attempts = 1000 * std::max<std::uint64_t>(want, 1);
  while (sampler.stats().triplets < want) {
    if (++attempts > max_attempts)
      throw Error(ErrorCode::sampler_starvation, "sampler-stats: too many failed attempts");
    sampler.sample_triplet(rng);
  }
  nlohmann::json report = {{"mode", to_string(sc.mode)},
                           {"configured_out_of_class_ratio", sc.out_of_class_ratio},
                           {"empirical_out_of_class_fraction", sampler.stats().out_of_class_fraction()},
                           {"stats", sampler.stats().to_json()},
                           {"occupancy", occupancy_json(buffers)}};
  const fs::path stats_path = out / "sampler_stats.json";
  write_json(stats_path, report);
  m.output(stats_path);

  if (sweep) {
    const fs::path csv_path = out / "sweep.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw Error(ErrorCode::io, "cannot write " + csv_path.string());
    csv << "mode,ratio,empirical_out_of_class,precision,score_at_top_k,k,triplets\n";
    const auto netcfg = cfg.net();
    check_input_shape(netcfg, task.data.dataset);
    EmbeddingNet<float> net(netcfg);
    const auto init = net.init_params(cfg.u64("net.init_seed"));
    std::stringstream ratios(cfg.str("sweep.ratios"));
    for (std::string tok; std::getline(ratios, tok, ',');) {
      auto tc = cfg.train();
      tc.workers = 1;
      tc.triplet_budget = cfg.u64("sweep.triplet_budget");
      tc.sampler.out_of_class_ratio = kv::to_double("sweep.ratios", kv::trim(tok));
      tc.validate();
      auto res = train(task.train_set, task.train_relevance, net, init, tc);
      const auto r = task.evaluate_net(net, res.params);
      csv << to_string(tc.sampler.mode) << ',' << tc.sampler.out_of_class_ratio << ','
          << res.sampler.out_of_class_fraction() << ',' << r.precision << ',' << r.score_at_top_k << ',' << r.k
          << ',' << res.triplets << '\n';
      csv.flush();
      std::fprintf(stderr, "sweep ratio %.2f: precision %.4f score@%zu %lld\n", tc.sampler.out_of_class_ratio,
                   r.precision, r.k, r.score_at_top_k);
    }
    m.output(csv_path);
  }
  m.write(out, report);
  std::cout << report.dump() << '\n';
  return 0;
}

// --- export-filters ----------------------------------------------------------

// One grid per path of the path's first convolution kernels, each kernel
// min-max normalized. Three-channel kernels are written as RGB (PPM); other
// channel counts as grayscale with channels side by side (PGM).
int cmd_export_filters(const fs::path& checkpoint, const fs::path& out, int scale, Manifest& m) {
  if (scale < 1) throw Error(ErrorCode::invalid_argument, "--scale must be >= 1");
  auto ck = load_checkpoint(checkpoint);
  EmbeddingNet<float> net(ck.config);
  fs::create_directories(out);
  nlohmann::json meta = nlohmann::json::array();
  for (std::size_t p = 0; p < ck.config.paths.size(); ++p) {
    const auto& path = ck.config.paths[p];
    const ConvSpec* conv = nullptr;
    int layer = -1;
    for (std::size_t l = 0; l < path.layers.size() && !conv; ++l)
      if ((conv = std::get_if<ConvSpec>(&path.layers[l]))) layer = static_cast<int>(l);
    if (!conv) continue;
    const ParamArray* w = nullptr;
    for (const auto& a : net.arrays())
      if (a.path == static_cast<int>(p) && a.layer == layer && !a.bias) w = &a;
    const int C = net.path_input_shape(p).channels, K = conv->kernel, F = conv->filters;
    const bool rgb = C == 3;
    const int tile_w = rgb ? K : K * C + (C - 1), tile_h = K;
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(F))));
    const int rows = (F + cols - 1) / cols;
    const int gw = cols * (tile_w + 1) + 1, gh = rows * (tile_h + 1) + 1;
    const int planes = rgb ? 3 : 1;
    std::vector<unsigned char> grid(static_cast<std::size_t>(gw) * gh * planes, 255);
    for (int f = 0; f < F; ++f) {
      const float* kf = ck.params.data() + w->offset + static_cast<std::size_t>(f) * C * K * K;
      const auto [lo, hi] = std::minmax_element(kf, kf + static_cast<std::ptrdiff_t>(C) * K * K);
      const float span = *hi - *lo > 0 ? *hi - *lo : 1.0f;
      const int ox = (f % cols) * (tile_w + 1) + 1, oy = (f / cols) * (tile_h + 1) + 1;
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < K; ++y)
          for (int x = 0; x < K; ++x) {
            const auto v = static_cast<unsigned char>(std::lround(255.0 * (kf[(c * K + y) * K + x] - *lo) / span));
            const int gx = rgb ? ox + x : ox + c * (K + 1) + x;
            const std::size_t pix = static_cast<std::size_t>(oy + y) * gw + gx;
            grid[pix * planes + (rgb ? c : 0)] = v;
          }
    }
    const fs::path img = out / ("filters_" + path.name + (rgb ? ".ppm" : ".pgm"));
    std::ofstream os(img, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::io, "cannot write " + img.string());
    os << (rgb ? "P6" : "P5") << '\n' << gw * scale << ' ' << gh * scale << "\n255\n";
    for (int y = 0; y < gh * scale; ++y)
      for (int x = 0; x < gw * scale; ++x)
        os.write(reinterpret_cast<const char*>(&grid[(static_cast<std::size_t>(y / scale) * gw + x / scale) * planes]),
                 planes);
    m.output(img);
    meta.push_back({{"path", path.name},
                    {"layer", layer},
                    {"kernels", F},
                    {"kernel_size", K},
                    {"channels", C},
                    {"grid", {rows, cols}},
                    {"image", img.filename().string()},
                    {"width", gw * scale},
                    {"height", gh * scale}});
  }
  const fs::path meta_path = out / "filters.json";
  write_json(meta_path, meta);
  m.output(meta_path);
  m.write(out, meta);
  std::cout << meta.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Triplet-ranking similarity embeddings on synthetic image data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_file, data_dir = "data", out_dir, checkpoint;
  std::vector<std::string> assignments;
  std::uint64_t seed = 0;
  int workers = 0, scale = 8;
  std::size_t k = 0;
  bool pretrain = false, uniform = false, sweep = false, per_triplet = false, as_json = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", assignments, "override one setting, key=value (repeatable)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen);
  gen->add_option("--data", data_dir, "output directory");
  gen->add_option("--seed", seed, "generator seed (gen.seed)");

  auto* tr = app.add_subcommand("train", "train an embedding network");
  common(tr);
  tr->add_option("--data", data_dir, "dataset directory from gen-data");
  tr->add_option("--out", out_dir, "run directory")->required();
  tr->add_option("--seed", seed, "training seed (train.seed)");
  tr->add_option("--workers", workers, "worker threads (train.workers)");
  tr->add_flag("--pretrain", pretrain, "softmax pretraining first (pretrain.enabled)");
  tr->add_flag("--uniform", uniform, "uniform triplet sampling (sampler.mode)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  common(ev);
  ev->add_option("--data", data_dir, "dataset directory from gen-data");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--out", out_dir, "report directory (default: the checkpoint's directory)");
  ev->add_option("--k", k, "K for score-at-top-K (eval.k, default 30)");
  ev->add_flag("--per-triplet", per_triplet, "also write per-triplet outcomes as CSV");

  auto* ss = app.add_subcommand("sampler-stats", "sampler diagnostics and out-of-class sweep");
  common(ss);
  ss->add_option("--data", data_dir, "dataset directory from gen-data");
  ss->add_option("--out", out_dir, "report directory")->required();
  ss->add_option("--seed", seed, "sampling seed (train.seed)");
  ss->add_flag("--uniform", uniform, "uniform triplet sampling (sampler.mode)");
  ss->add_flag("--sweep", sweep, "train and evaluate at each sweep.ratios value, write sweep.csv");

  auto* ef = app.add_subcommand("export-filters", "write first-layer kernels as image grids");
  common(ef);
  ef->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ef->add_option("--out", out_dir, "output directory")->required();
  ef->add_option("--scale", scale, "pixel upscaling factor");

  auto* sc = app.add_subcommand("show-config", "print every setting with its source");
  common(sc);
  sc->add_flag("--json", as_json, "print JSON instead of key = value text");

  CLI11_PARSE(app, argc, argv);
  auto* cmd = app.get_subcommands().front();

  try {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& a : assignments) cfg.set_assignment(a);
    auto given = [&](const char* name) {
      const auto* o = cmd->get_option_no_throw(name);
      return o && o->count() > 0;
    };
    const std::string seed_key = cmd == gen ? "gen.seed" : "train.seed";
    if (given("--seed")) cfg.set(seed_key, std::to_string(seed), Source::flag);
    if (given("--workers")) cfg.set("train.workers", std::to_string(workers), Source::flag);
    if (pretrain) cfg.set("pretrain.enabled", "true", Source::flag);
    if (uniform) cfg.set("sampler.mode", "uniform", Source::flag);
    if (given("--k")) cfg.set("eval.k", std::to_string(k), Source::flag);

    Manifest manifest(cmd->get_name(), cfg, std::vector<std::string>(argv, argv + argc));
    const DataFiles files{data_dir};
    if (cmd == tr || cmd == ev || cmd == ss) manifest.data_source(files.dir);
    if (cmd == gen) return cmd_gen_data(cfg, files, manifest);
    if (cmd == tr) return cmd_train(cfg, files, out_dir, manifest);
    if (cmd == ev) {
      const fs::path out = out_dir.empty() ? fs::absolute(checkpoint).parent_path() : fs::path(out_dir);
      return cmd_eval(cfg, files, checkpoint, out, per_triplet, manifest);
    }
    if (cmd == ss) return cmd_sampler_stats(cfg, files, out_dir, sweep, manifest);
    if (cmd == ef) return cmd_export_filters(checkpoint, out_dir, scale, manifest);
    if (cmd == sc) {
      // Validate everything so a bad value is reported here too.
      cfg.gen();
      cfg.train();
      cfg.eval();
      cfg.net();
      std::cout << (as_json ? cfg.to_json().dump(2) + "\n" : cfg.describe());
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
