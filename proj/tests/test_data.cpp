#include <gtest/gtest.h>
#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "gradsigns/data.hpp"
#include "gradsigns/model.hpp"
#include "gradsigns/train.hpp"

using namespace gradsigns;
namespace fs = std::filesystem;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("gs_data_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& bytes, bool gz) {
  if (gz) {
    gzFile f = gzopen(p.string().c_str(), "wb");
    gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
  } else {
    std::ofstream(p, std::ios::binary) << bytes;
  }
}

std::string idx_images(std::uint32_t n, std::uint32_t r, std::uint32_t c) {
  std::string s = be32(0x803) + be32(n) + be32(r) + be32(c);
  for (std::uint32_t i = 0; i < n * r * c; ++i) s.push_back(static_cast<char>((i * 37) % 256));
  return s;
}

std::string idx_labels(std::uint32_t n) {
  std::string s = be32(0x801) + be32(n);
  for (std::uint32_t i = 0; i < n; ++i) s.push_back(static_cast<char>(i % 10));
  return s;
}

std::map<int, std::size_t> per_class(const Dataset& d) {
  std::map<int, std::size_t> m;
  for (const int l : d.labels) ++m[l];
  return m;
}

}  // namespace

TEST(Idx, PlainAndGzipLoadIdentically) {
  TempDir t;
  for (const bool gz : {false, true}) {
    const std::string sfx = gz ? ".gz" : "";
    write_file(t.path / ("img" + sfx), idx_images(20, 3, 4), gz);
    write_file(t.path / ("lab" + sfx), idx_labels(20), gz);
  }
  const Dataset a = load_idx(t.path / "img", t.path / "lab");
  const Dataset b = load_idx(t.path / "img.gz", t.path / "lab.gz");
  EXPECT_EQ(a.images.shape(), (Shape{20, 3, 4, 1}));
  EXPECT_EQ(a.images.storage(), b.images.storage());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_DOUBLE_EQ(a.images[1], 37.0 / 255.0);
  EXPECT_NO_THROW(a.validate());
}

TEST(Idx, BadMagicCountMismatchTruncation) {
  TempDir t;
  write_file(t.path / "img", idx_images(5, 2, 2), false);
  write_file(t.path / "lab", idx_labels(5), false);
  write_file(t.path / "lab6", idx_labels(6), false);
  std::string bad = idx_images(5, 2, 2);
  bad[3] = 0x01;
  write_file(t.path / "bad", bad, false);
  write_file(t.path / "short", idx_images(5, 2, 2).substr(0, 30), false);
  auto kind = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.kind();
    }
    return std::string("none");
  };
  EXPECT_EQ(kind([&] { load_idx(t.path / "bad", t.path / "lab"); }), "format");
  EXPECT_EQ(kind([&] { load_idx(t.path / "img", t.path / "lab6"); }), "count");
  EXPECT_EQ(kind([&] { load_idx(t.path / "short", t.path / "lab"); }), "truncated");
  EXPECT_EQ(kind([&] { load_idx(t.path / "missing", t.path / "lab"); }), "io");
}

TEST(Idx, DigitArchiveIfPresent) {
  if (!fs::exists(fs::path(GRADSIGNS_DATA_DIR))) GTEST_SKIP() << "digit archive not downloaded";
  const DigitArchive a = load_digit_archive(GRADSIGNS_DATA_DIR);
  EXPECT_EQ(a.test.images.shape(), (Shape{10000, 28, 28, 1}));
  EXPECT_EQ(a.train.size(), 60000u);
  EXPECT_NO_THROW(a.test.validate());
}

TEST(Synthetic, SizeDeterminismRange) {
  const Dataset a = make_synthetic(4, 100, {8, 8, 1}, 5);
  const Dataset b = make_synthetic(4, 100, {8, 8, 1}, 5);
  EXPECT_EQ(a.size(), 400u);
  EXPECT_EQ(a.images.storage(), b.images.storage());
  EXPECT_NO_THROW(a.validate());
  EXPECT_THROW(make_synthetic(1, 10, {8, 8, 1}, 5), Error);
}

TEST(Synthetic, LinearlySeparableByOneLayer) {
  const Dataset d = make_synthetic(4, 100, {8, 8, 1}, 6);
  ModelConfig c;
  c.height = 8;
  c.width = 8;
  c.channels = 1;
  c.num_classes = 4;
  c.seed = 1;
  c.layers = {LayerSpec::flatten(), LayerSpec::dense(4), LayerSpec::softmax()};
  TrainConfig tc;
  tc.epochs = 10;
  tc.seed = 2;
  const Model m = train(build_model(c), d, tc).model;
  EXPECT_GE(accuracy(m, d), 0.95);
}

TEST(Split, SeventyThirtyPerClass) {
  const Dataset d = make_synthetic(3, 100, {4, 4, 1}, 7);
  const auto parts = split(d, {0.7, 0.3}, 8);
  for (const auto& [cls, n] : per_class(parts[0])) EXPECT_EQ(n, 70u) << cls;
  for (const auto& [cls, n] : per_class(parts[1])) EXPECT_EQ(n, 30u) << cls;
}

TEST(Split, IdentityAndCovering) {
  const Dataset d = make_synthetic(3, 20, {4, 4, 1}, 9);
  const auto one = split(d, {1.0}, 1);
  EXPECT_EQ(one[0].images.storage(), d.images.storage());
  EXPECT_EQ(one[0].labels, d.labels);

  const auto parts = split(d, {0.5, 0.25, 0.25}, 2);
  std::multiset<std::vector<double>> want, got;
  const std::size_t w = d.sample_size();
  auto rows = [&](const Dataset& x, std::multiset<std::vector<double>>& into) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::vector<double> r(x.images.data().begin() + i * w, x.images.data().begin() + (i + 1) * w);
      r.push_back(x.labels[i]);
      into.insert(r);
    }
  };
  rows(d, want);
  for (const auto& p : parts) rows(p, got);
  EXPECT_EQ(want, got);
}

TEST(Split, Errors) {
  const Dataset d = make_synthetic(2, 2, {2, 2, 1}, 10);
  EXPECT_THROW(split(d, {0.5, 0.4}, 1), Error);
  EXPECT_THROW(split(d, {0.4, 0.3, 0.3}, 1), Error);
}

TEST(Subsample, ExactCountsAndDeterminism) {
  const Dataset d = make_synthetic(10, 300, {2, 2, 1}, 11);
  const Dataset s = subsample_per_class(d, 256, 3);
  EXPECT_EQ(s.size(), 2560u);
  for (const auto& [cls, n] : per_class(s)) EXPECT_EQ(n, 256u) << cls;
  EXPECT_EQ(subsample_indices(d, 256, 3), subsample_indices(d, 256, 3));
  EXPECT_NE(subsample_indices(d, 256, 3), subsample_indices(d, 256, 4));
  EXPECT_THROW(subsample_per_class(d, 301, 3), Error);
}

TEST(Subsample, FullClassSizeIsPermutation) {
  const Dataset d = make_synthetic(3, 15, {2, 2, 1}, 12);
  const auto idx = subsample_indices(d, 15, 1);
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(idx, all);
}
