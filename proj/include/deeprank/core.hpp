#pragma once

// Data model and persistence: image records, datasets, sparse relevance
// scores and triplets.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace deeprank {

enum class ErrorCode {
  invalid_argument,
  io,
  format,
  shape_mismatch,
  duplicate_id,
  unknown_id,
  missing_blob,
  relevance,
  missing_latent,
  non_finite,
  stale_cache,
  sampler_starvation,
  divergence,
  config,
};

inline const char* to_string(ErrorCode c) {
  static constexpr const char* names[] = {
      "invalid_argument", "io",       "format",      "shape_mismatch", "duplicate_id",
      "unknown_id",       "missing_blob", "relevance", "missing_latent", "non_finite",
      "stale_cache",      "sampler_starvation", "divergence", "config"};
  return names[static_cast<int>(c)];
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

using ImageId = std::int64_t;
using CategoryId = std::int32_t;

struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  bool valid() const { return channels > 0 && height > 0 && width > 0; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" +
           std::to_string(width);
  }
};

/// Dense channels x height x width array, row-major within a channel.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{}) : shape(s), data(s.size(), fill) {}

  T& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
  }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }
};

struct ImageRecord {
  ImageId id = 0;
  CategoryId category = 0;
  Tensor<float> tensor;
  std::optional<std::vector<double>> latent;
};

enum class NegativeKind { in_class, out_of_class };

inline const char* to_string(NegativeKind k) {
  return k == NegativeKind::in_class ? "in_class" : "out_of_class";
}

struct Triplet {
  ImageId query = 0;
  ImageId positive = 0;
  ImageId negative = 0;
  NegativeKind kind = NegativeKind::in_class;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

/// Immutable-after-load collection of images sharing one tensor shape.
/// Ids are nonnegative integers; lookup is array-indexed.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(Shape shape) : shape_(shape) {
    if (!shape.valid())
      throw Error(ErrorCode::invalid_argument, "invalid tensor shape " + shape.str());
  }

  void add(ImageRecord rec) {
    if (rec.id < 0)
      throw Error(ErrorCode::invalid_argument, "negative image id " + std::to_string(rec.id));
    if (rec.tensor.shape != shape_ || rec.tensor.data.size() != shape_.size())
      throw Error(ErrorCode::shape_mismatch,
                  "image " + std::to_string(rec.id) + ": tensor shape " +
                      rec.tensor.shape.str() + " does not match dataset shape " + shape_.str());
    for (float v : rec.tensor.data) {
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
        throw Error(ErrorCode::non_finite, "image " + std::to_string(rec.id) +
                                               ": tensor value outside [0,1]");
    }
    if (rec.latent) {
      for (double v : *rec.latent)
        if (!std::isfinite(v))
          throw Error(ErrorCode::non_finite,
                      "image " + std::to_string(rec.id) + ": non-finite latent");
    }
    auto slot = static_cast<std::size_t>(rec.id);
    if (slot < index_.size() && index_[slot] >= 0)
      throw Error(ErrorCode::duplicate_id, "duplicate image id " + std::to_string(rec.id));
    if (slot >= index_.size()) index_.resize(slot + 1, -1);
    index_[slot] = static_cast<std::int64_t>(records_.size());
    records_.push_back(std::move(rec));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<ImageRecord>& records() const { return records_; }

  bool contains(ImageId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < index_.size() &&
           index_[static_cast<std::size_t>(id)] >= 0;
  }

  const ImageRecord& at(ImageId id) const {
    if (!contains(id))
      throw Error(ErrorCode::unknown_id, "unknown image id " + std::to_string(id));
    return records_[static_cast<std::size_t>(index_[static_cast<std::size_t>(id)])];
  }

  /// One past the largest id; suitable for sizing id-indexed arrays.
  std::size_t id_bound() const { return index_.size(); }

  std::vector<ImageId> ids() const {
    std::vector<ImageId> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.id);
    return out;
  }

  std::vector<CategoryId> categories() const {
    std::vector<CategoryId> cats;
    for (const auto& r : records_) cats.push_back(r.category);
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
    return cats;
  }

  /// Copy of the records named by `ids`, in that order. Ids are preserved.
  Dataset subset(const std::vector<ImageId>& ids) const {
    Dataset out(shape_);
    for (ImageId id : ids) out.add(at(id));
    return out;
  }

 private:
  Shape shape_;
  std::vector<ImageRecord> records_;
  std::vector<std::int64_t> index_;
};

/// Sparse symmetric same-category relevance scores r(i,j) with cached
/// per-image totals. Absent pairs are zero.
class RelevanceSource {
 public:
  struct Pair {
    ImageId i;
    ImageId j;
    double score;
  };

  RelevanceSource() = default;
  explicit RelevanceSource(const Dataset& dataset) { bind(dataset); }

  void add(const Dataset& dataset, ImageId i, ImageId j, double score) {
    if (categories_.size() < dataset.id_bound()) bind(dataset);
    const auto& a = dataset.at(i);
    const auto& b = dataset.at(j);
    if (i == j)
      throw Error(ErrorCode::relevance, "self relevance for image " + std::to_string(i));
    if (!std::isfinite(score) || score < 0.0)
      throw Error(ErrorCode::relevance, "relevance (" + std::to_string(i) + "," +
                                            std::to_string(j) + ") must be finite and >= 0");
    if (a.category != b.category)
      throw Error(ErrorCode::relevance, "relevance (" + std::to_string(i) + "," +
                                            std::to_string(j) + ") crosses categories");
    if (has(i, j))
      throw Error(ErrorCode::duplicate_id, "duplicate relevance pair (" + std::to_string(i) +
                                               "," + std::to_string(j) + ")");
    insert_sorted(i, j, score);
    insert_sorted(j, i, score);
    totals_[static_cast<std::size_t>(i)] += score;
    totals_[static_cast<std::size_t>(j)] += score;
  }

  double score(ImageId i, ImageId j) const {
    if (!in_range(i)) return 0.0;
    const auto& row = rows_[static_cast<std::size_t>(i)];
    auto it = std::lower_bound(row.begin(), row.end(), j,
                               [](const auto& e, ImageId id) { return e.first < id; });
    return (it != row.end() && it->first == j) ? it->second : 0.0;
  }

  bool has(ImageId i, ImageId j) const {
    if (!in_range(i)) return false;
    const auto& row = rows_[static_cast<std::size_t>(i)];
    return std::binary_search(row.begin(), row.end(), std::pair<ImageId, double>{j, 0.0},
                              [](const auto& a, const auto& b) { return a.first < b.first; });
  }

  double total(ImageId i) const {
    return in_range(i) ? totals_[static_cast<std::size_t>(i)] : 0.0;
  }

  const std::vector<std::pair<ImageId, double>>& neighbors(ImageId i) const {
    static const std::vector<std::pair<ImageId, double>> none;
    return in_range(i) ? rows_[static_cast<std::size_t>(i)] : none;
  }

  /// All pairs in canonical i < j order, sorted.
  std::vector<Pair> pairs() const {
    std::vector<Pair> out;
    for (std::size_t i = 0; i < rows_.size(); ++i)
      for (const auto& [j, r] : rows_[i])
        if (static_cast<ImageId>(i) < j) out.push_back({static_cast<ImageId>(i), j, r});
    return out;
  }

  /// Pairs whose endpoints are both in `subset`; totals recomputed over them.
  RelevanceSource restricted_to(const Dataset& subset) const {
    RelevanceSource out(subset);
    for (const auto& p : pairs())
      if (subset.contains(p.i) && subset.contains(p.j)) out.add(subset, p.i, p.j, p.score);
    return out;
  }

 private:
  void bind(const Dataset& dataset) {
    std::size_t n = dataset.id_bound();
    categories_.resize(n, -1);
    rows_.resize(n);
    totals_.resize(n, 0.0);
    for (const auto& r : dataset.records())
      categories_[static_cast<std::size_t>(r.id)] = r.category;
  }

  bool in_range(ImageId i) const {
    return i >= 0 && static_cast<std::size_t>(i) < rows_.size();
  }

  void insert_sorted(ImageId i, ImageId j, double score) {
    auto& row = rows_[static_cast<std::size_t>(i)];
    auto it = std::lower_bound(row.begin(), row.end(), j,
                               [](const auto& e, ImageId id) { return e.first < id; });
    row.insert(it, {j, score});
  }

  std::vector<CategoryId> categories_;
  std::vector<std::vector<std::pair<ImageId, double>>> rows_;
  std::vector<double> totals_;
};

/// Total relevance of image `id`: sum of its same-category relevance scores.
inline double total_relevance(const Dataset& dataset, const RelevanceSource& relevance,
                              ImageId id) {
  dataset.at(id);  // throws on unknown id
  return relevance.total(id);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline void write_f32_le(std::ostream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = byteswap32(std::bit_cast<std::uint32_t>(data[k]));
      os.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
}

inline bool read_f32_le(std::istream& is, float* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4));
  if (!is) return false;
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t k = 0; k < n; ++k)
      data[k] = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(data[k])));
  }
  return true;
}

}  // namespace detail

/// Writes a JSON Lines manifest plus a little-endian float32 blob. The blob
/// path is recorded relative to the manifest directory when possible.
inline void save_dataset(const Dataset& dataset, const std::filesystem::path& manifest_path,
                         const std::filesystem::path& blob_path) {
  namespace fs = std::filesystem;
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw Error(ErrorCode::io, "cannot write " + blob_path.string());
  std::ofstream manifest(manifest_path, std::ios::trunc);
  if (!manifest) throw Error(ErrorCode::io, "cannot write " + manifest_path.string());

  fs::path blob_ref = blob_path;
  auto manifest_dir = fs::absolute(manifest_path).parent_path();
  if (fs::absolute(blob_path).parent_path() == manifest_dir) blob_ref = blob_path.filename();

  const Shape& s = dataset.shape();
  nlohmann::json header = {{"shape", {s.channels, s.height, s.width}},
                           {"blob", blob_ref.string()}};
  manifest << header.dump() << '\n';

  std::uint64_t offset = 0;
  for (const auto& rec : dataset.records()) {
    nlohmann::json line = {{"id", rec.id}, {"category", rec.category}, {"offset", offset}};
    if (rec.latent) line["latent"] = *rec.latent;
    manifest << line.dump() << '\n';
    detail::write_f32_le(blob, rec.tensor.data.data(), rec.tensor.data.size());
    offset += rec.tensor.data.size() * 4;
  }
  if (!blob || !manifest) throw Error(ErrorCode::io, "write failed for dataset files");
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream manifest(manifest_path);
  if (!manifest) throw Error(ErrorCode::io, "cannot open manifest " + manifest_path.string());

  std::string line;
  if (!std::getline(manifest, line))
    throw Error(ErrorCode::format, "manifest " + manifest_path.string() + " has no header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, std::string("manifest header: ") + e.what());
  }
  if (!header.contains("shape") || !header["shape"].is_array() || header["shape"].size() != 3 ||
      !header.contains("blob"))
    throw Error(ErrorCode::format, "manifest header must carry shape [C,H,W] and blob");
  Shape shape{header["shape"][0].get<int>(), header["shape"][1].get<int>(),
              header["shape"][2].get<int>()};
  Dataset dataset(shape);

  fs::path blob_path = header["blob"].get<std::string>();
  if (blob_path.is_relative()) blob_path = manifest_path.parent_path() / blob_path;
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw Error(ErrorCode::missing_blob, "missing tensor blob " + blob_path.string());
  blob.seekg(0, std::ios::end);
  const auto blob_size = static_cast<std::uint64_t>(blob.tellg());
  const std::uint64_t image_bytes = shape.size() * 4;

  std::size_t line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json e;
    try {
      e = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::format,
                  "manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
    if (!e.contains("id") || !e.contains("category") || !e.contains("offset"))
      throw Error(ErrorCode::format,
                  "manifest line " + std::to_string(line_no) + ": needs id, category, offset");
    ImageRecord rec;
    rec.id = e["id"].get<ImageId>();
    rec.category = e["category"].get<CategoryId>();
    const auto offset = e["offset"].get<std::uint64_t>();
    if (e.contains("shape")) {
      const auto& es = e["shape"];
      Shape entry_shape{es.at(0).get<int>(), es.at(1).get<int>(), es.at(2).get<int>()};
      if (entry_shape != shape)
        throw Error(ErrorCode::shape_mismatch, "image " + std::to_string(rec.id) + ": shape " +
                                                   entry_shape.str() + " != declared " +
                                                   shape.str());
    }
    if (offset + image_bytes > blob_size)
      throw Error(ErrorCode::missing_blob, "image " + std::to_string(rec.id) +
                                               ": blob range [" + std::to_string(offset) + ", " +
                                               std::to_string(offset + image_bytes) +
                                               ") exceeds blob size " + std::to_string(blob_size));
    rec.tensor = Tensor<float>(shape);
    blob.seekg(static_cast<std::streamoff>(offset));
    if (!detail::read_f32_le(blob, rec.tensor.data.data(), rec.tensor.data.size()))
      throw Error(ErrorCode::missing_blob, "image " + std::to_string(rec.id) + ": short read");
    if (e.contains("latent")) rec.latent = e["latent"].get<std::vector<double>>();
    dataset.add(std::move(rec));
  }
  return dataset;
}

/// CSV lines `i,j,r` with i < j.
inline void save_relevance(const RelevanceSource& relevance, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCode::io, "cannot write " + path.string());
  os.precision(17);
  for (const auto& p : relevance.pairs()) os << p.i << ',' << p.j << ',' << p.score << '\n';
  if (!os) throw Error(ErrorCode::io, "write failed for " + path.string());
}

inline RelevanceSource load_relevance(const std::filesystem::path& path, const Dataset& dataset) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::io, "cannot open relevance file " + path.string());
  RelevanceSource relevance(dataset);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    ImageId i = 0, j = 0;
    double r = 0.0;
    if (!(fields >> i >> j >> r))
      throw Error(ErrorCode::format, path.string() + ":" + std::to_string(line_no) +
                                         ": expected i,j,r");
    if (i >= j)
      throw Error(ErrorCode::format, path.string() + ":" + std::to_string(line_no) +
                                         ": pair must be in canonical i<j order");
    relevance.add(dataset, i, j, r);
  }
  return relevance;
}

inline void save_id_list(const std::vector<ImageId>& ids, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCode::io, "cannot write " + path.string());
  for (ImageId id : ids) os << id << '\n';
}

inline std::vector<ImageId> load_id_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::io, "cannot open id list " + path.string());
  std::vector<ImageId> ids;
  ImageId id = 0;
  while (is >> id) ids.push_back(id);
  return ids;
}

}  // namespace deeprank
