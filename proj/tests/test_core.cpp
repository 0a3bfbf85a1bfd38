#include <gtest/gtest.h>

#include <fstream>

#include "deeprank/core.hpp"
#include "test_util.hpp"

using namespace deeprank;
using deeprank::testing::TempDir;
using deeprank::testing::make_record;
using deeprank::testing::tiny_dataset;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected deeprank::Error";
  return ErrorCode::invalid_argument;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Dataset, RejectsBadRecords) {
  Shape s{1, 2, 2};
  Dataset ds(s);
  ds.add(make_record(0, 0, s, 1));
  EXPECT_EQ(code_of([&] { ds.add(make_record(0, 1, s, 2)); }), ErrorCode::duplicate_id);
  EXPECT_EQ(code_of([&] { ds.add(make_record(1, 0, {1, 3, 2}, 3)); }), ErrorCode::shape_mismatch);
  auto bad = make_record(2, 0, s, 4);
  bad.tensor.data[1] = 1.5f;
  EXPECT_EQ(code_of([&] { ds.add(bad); }), ErrorCode::non_finite);
  auto nan_latent = make_record(3, 0, s, 5);
  nan_latent.latent = std::vector<double>{0.0, std::nan("")};
  EXPECT_EQ(code_of([&] { ds.add(nan_latent); }), ErrorCode::non_finite);
  EXPECT_EQ(code_of([&] { ds.at(42); }), ErrorCode::unknown_id);
  EXPECT_EQ(ds.size(), 1u);
}

TEST(Dataset, SubsetKeepsRecords) {
  auto ds = tiny_dataset(2, 3);
  auto sub = ds.subset({1, 4});
  EXPECT_EQ(sub.size(), 2u);
  EXPECT_TRUE(sub.contains(4));
  EXPECT_FALSE(sub.contains(0));
  EXPECT_EQ(sub.at(4).tensor.data, ds.at(4).tensor.data);
}

TEST(Relevance, TotalIsDirectSum) {
  auto ds = tiny_dataset(1, 3);
  RelevanceSource rel(ds);
  rel.add(ds, 0, 1, 2.0);
  rel.add(ds, 0, 2, 3.0);
  EXPECT_DOUBLE_EQ(total_relevance(ds, rel, 0), 5.0);
  EXPECT_DOUBLE_EQ(total_relevance(ds, rel, 1), 2.0);
  EXPECT_DOUBLE_EQ(rel.score(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(rel.score(1, 2), 0.0);
}

TEST(Relevance, AloneInCategoryIsZero) {
  Shape s{1, 2, 2};
  Dataset ds(s);
  ds.add(make_record(0, 0, s, 1));
  ds.add(make_record(1, 1, s, 2));
  ds.add(make_record(2, 1, s, 3));
  RelevanceSource rel(ds);
  rel.add(ds, 1, 2, 0.5);
  EXPECT_EQ(total_relevance(ds, rel, 0), 0.0);
  EXPECT_EQ(code_of([&] { total_relevance(ds, rel, 9); }), ErrorCode::unknown_id);
}

TEST(Relevance, RejectsInvalidPairs) {
  auto ds = tiny_dataset(2, 2);
  RelevanceSource rel(ds);
  EXPECT_EQ(code_of([&] { rel.add(ds, 0, 2, 1.0); }), ErrorCode::relevance);  // crosses categories
  EXPECT_EQ(code_of([&] { rel.add(ds, 0, 0, 1.0); }), ErrorCode::relevance);
  EXPECT_EQ(code_of([&] { rel.add(ds, 0, 1, -1.0); }), ErrorCode::relevance);
  rel.add(ds, 0, 1, 1.0);
  EXPECT_EQ(code_of([&] { rel.add(ds, 1, 0, 1.0); }), ErrorCode::duplicate_id);
  EXPECT_DOUBLE_EQ(rel.total(0), 1.0);
}

TEST(Relevance, TotalBoundsAndPermutationInvariance) {
  auto ds = tiny_dataset(2, 5);
  std::vector<RelevanceSource::Pair> pairs;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (ImageId i = 0; i < 10; ++i)
    for (ImageId j = i + 1; j < 10; ++j)
      if (ds.at(i).category == ds.at(j).category && u(rng) < 0.7) pairs.push_back({i, j, u(rng)});

  RelevanceSource a(ds), b(ds);
  for (const auto& p : pairs) a.add(ds, p.i, p.j, p.score);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  for (const auto& p : pairs) b.add(ds, p.j, p.i, p.score);

  for (ImageId i = 0; i < 10; ++i) {
    EXPECT_NEAR(a.total(i), b.total(i), 1e-12);
    double mx = 0;
    for (const auto& [j, r] : a.neighbors(i)) mx = std::max(mx, r);
    EXPECT_GE(a.total(i), mx);
    EXPECT_EQ(a.total(i) == 0.0, a.neighbors(i).empty());
  }
}

TEST(Persistence, RoundTripIsBitExact) {
  TempDir dir("core_rt");
  auto ds = tiny_dataset(2, 3, {2, 3, 5});
  Dataset with_latent(ds.shape());
  for (auto rec : ds.records()) {
    rec.latent = std::vector<double>{0.1 * static_cast<double>(rec.id), -1.0 / 3.0};
    with_latent.add(rec);
  }
  save_dataset(with_latent, dir / "m.jsonl", dir / "m.bin");
  auto back = load_dataset(dir / "m.jsonl");
  ASSERT_EQ(back.size(), with_latent.size());
  for (const auto& rec : with_latent.records()) {
    const auto& r2 = back.at(rec.id);
    EXPECT_EQ(r2.category, rec.category);
    ASSERT_EQ(r2.tensor.data.size(), rec.tensor.data.size());
    EXPECT_EQ(std::memcmp(r2.tensor.data.data(), rec.tensor.data.data(), rec.tensor.data.size() * 4), 0);
    EXPECT_EQ(*r2.latent, *rec.latent);
  }

  RelevanceSource rel(with_latent);
  rel.add(with_latent, 0, 1, 1.0 / 7.0);
  rel.add(with_latent, 3, 5, 0.25);
  save_relevance(rel, dir / "r.csv");
  auto rel2 = load_relevance(dir / "r.csv", back);
  EXPECT_EQ(rel2.score(0, 1), 1.0 / 7.0);
  EXPECT_EQ(rel2.score(5, 3), 0.25);

  save_id_list({5, 2, 9}, dir / "ids.txt");
  EXPECT_EQ(load_id_list(dir / "ids.txt"), (std::vector<ImageId>{5, 2, 9}));
}

TEST(Persistence, EmptyManifestLoads) {
  TempDir dir("core_empty");
  save_dataset(Dataset({1, 2, 2}), dir / "m.jsonl", dir / "m.bin");
  auto ds = load_dataset(dir / "m.jsonl");
  EXPECT_TRUE(ds.empty());
  EXPECT_EQ(ds.shape(), (Shape{1, 2, 2}));
}

TEST(Persistence, LoadErrorsNameTheEntry) {
  TempDir dir("core_err");
  auto ds = tiny_dataset(1, 2, {1, 2, 2});
  save_dataset(ds, dir / "m.jsonl", dir / "m.bin");

  {
    std::ofstream os(dir / "shape.jsonl");
    os << R"({"shape":[1,2,2],"blob":"m.bin"})" << '\n'
       << R"({"id":0,"category":0,"offset":0})" << '\n'
       << R"({"id":7,"category":0,"offset":16,"shape":[1,3,2]})" << '\n';
  }
  EXPECT_EQ(code_of([&] { load_dataset(dir / "shape.jsonl"); }), ErrorCode::shape_mismatch);
  EXPECT_NE(message_of([&] { load_dataset(dir / "shape.jsonl"); }).find("image 7"), std::string::npos);

  {
    std::ofstream os(dir / "dup.jsonl");
    os << R"({"shape":[1,2,2],"blob":"m.bin"})" << '\n'
       << R"({"id":3,"category":0,"offset":0})" << '\n'
       << R"({"id":3,"category":0,"offset":16})" << '\n';
  }
  EXPECT_EQ(code_of([&] { load_dataset(dir / "dup.jsonl"); }), ErrorCode::duplicate_id);
  EXPECT_NE(message_of([&] { load_dataset(dir / "dup.jsonl"); }).find("3"), std::string::npos);

  {
    std::ofstream os(dir / "short.jsonl");
    os << R"({"shape":[1,2,2],"blob":"m.bin"})" << '\n' << R"({"id":5,"category":0,"offset":24})" << '\n';
  }
  EXPECT_EQ(code_of([&] { load_dataset(dir / "short.jsonl"); }), ErrorCode::missing_blob);
  EXPECT_NE(message_of([&] { load_dataset(dir / "short.jsonl"); }).find("image 5"), std::string::npos);

  {
    std::ofstream os(dir / "noblob.jsonl");
    os << R"({"shape":[1,2,2],"blob":"absent.bin"})" << '\n';
  }
  EXPECT_EQ(code_of([&] { load_dataset(dir / "noblob.jsonl"); }), ErrorCode::missing_blob);
  EXPECT_EQ(code_of([&] { load_dataset(dir / "nothing.jsonl"); }), ErrorCode::io);

  {
    std::ofstream os(dir / "cross.csv");
    os << "1,0,0.5\n";
  }
  EXPECT_EQ(code_of([&] { load_relevance(dir / "cross.csv", ds); }), ErrorCode::format);
}
