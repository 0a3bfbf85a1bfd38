#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "deeprank/core.hpp"

namespace deeprank::testing {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("deeprank_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ImageRecord make_record(ImageId id, CategoryId cat, Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageRecord r;
  r.id = id;
  r.category = cat;
  r.tensor = Tensor<float>(shape);
  for (auto& v : r.tensor.data) v = u(rng);
  return r;
}

// `per_cat` images in each of `cats` categories, ids contiguous from 0.
inline Dataset tiny_dataset(int cats, int per_cat, Shape shape = {1, 4, 4}) {
  Dataset ds(shape);
  ImageId id = 0;
  for (int c = 0; c < cats; ++c)
    for (int k = 0; k < per_cat; ++k, ++id) ds.add(make_record(id, c, shape, 1000 + static_cast<std::uint64_t>(id)));
  return ds;
}

}  // namespace deeprank::testing
