#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "gradsigns/error.hpp"
#include "gradsigns/random.hpp"
#include "gradsigns/tensor.hpp"

namespace gradsigns {

// Images are (n, H, W, C) with every pixel in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::string name;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  std::size_t sample_size() const { return shape_size(sample_shape()); }

  // Throws if any invariant is violated.
  void validate() const {
    if (images.rank() != 4) throw shape_error("dataset images must be (n, H, W, C)");
    if (images.dim(0) != labels.size()) throw shape_error("image count does not match label count");
    for (const double v : images.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw value_error("dataset pixel outside [0, 1]");
    }
    for (const int l : labels) {
      if (l < 0 || l >= class_count) throw value_error("dataset label outside class range");
    }
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(class_count), 0);
    for (const int l : labels) ++counts[static_cast<std::size_t>(l)];
    return counts;
  }

  std::vector<std::size_t> indices_of_class(int cls) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) out.push_back(i);
    return out;
  }

  Dataset select(std::span<const std::size_t> indices) const {
    Dataset d;
    d.images = gather_rows(images, indices);
    d.labels.reserve(indices.size());
    for (const std::size_t i : indices) d.labels.push_back(labels.at(i));
    d.name = name;
    d.class_count = class_count;
    return d;
  }

  Dataset of_class(int cls) const {
    const auto idx = indices_of_class(cls);
    return select(idx);
  }

  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return select(idx);
  }
};

inline Tensor one_hot(std::span<const int> labels, int classes) {
  Tensor t(Shape{labels.size(), static_cast<std::size_t>(classes)});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i * static_cast<std::size_t>(classes) + static_cast<std::size_t>(labels[i])] = 1.0;
  return t;
}

namespace detail {

// Reads a whole file; transparently gunzips (zlib passes plain files through).
inline std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw Error("io", "cannot open " + path.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  for (;;) {
    const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (got < 0) {
      gzclose(f);
      throw Error("io", "read error in " + path.string());
    }
    if (got == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + got);
  }
  gzclose(f);
  return out;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at) {
  if (at + 4 > b.size()) throw Error("truncated", "IDX header truncated");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace detail

// Standard handwritten-digit archive format (optionally gzip-compressed).
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        int class_count = 10) {
  const auto img = detail::read_maybe_gzip(images_path);
  const auto lab = detail::read_maybe_gzip(labels_path);
  if (detail::read_be32(img, 0) != 0x00000803) throw Error("format", "bad image magic in " + images_path.string());
  if (detail::read_be32(lab, 0) != 0x00000801) throw Error("format", "bad label magic in " + labels_path.string());
  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t nl = detail::read_be32(lab, 4);
  if (n != nl) throw Error("count", "image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  if (img.size() < 16 + n * rows * cols) throw Error("truncated", "image payload truncated");
  if (lab.size() < 8 + n) throw Error("truncated", "label payload truncated");

  Dataset d;
  d.images = Tensor(Shape{n, rows, cols, 1});
  auto px = d.images.data();
  for (std::size_t i = 0; i < n * rows * cols; ++i) px[i] = static_cast<double>(img[16 + i]) / 255.0;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    if (d.labels[i] >= class_count) throw Error("format", "label out of range in " + labels_path.string());
  }
  d.name = images_path.filename().string();
  d.class_count = class_count;
  return d;
}

struct ImageDims {
  std::size_t height = 8, width = 8, channels = 1;
};

// Gaussian class blobs around random per-class prototypes, clipped to [0, 1].
inline Dataset make_synthetic(int classes, std::size_t n_per_class, ImageDims dims, std::uint64_t seed,
                              double noise = 0.1) {
  if (classes < 2) throw value_error("synthetic dataset needs at least 2 classes");
  if (n_per_class == 0) throw value_error("synthetic dataset needs samples");
  Rng rng(seed);
  const std::size_t d = dims.height * dims.width * dims.channels;
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(classes), std::vector<double>(d));
  for (auto& c : centers)
    for (auto& v : c) v = uniform(rng, 0.2, 0.8);

  const std::size_t n = n_per_class * static_cast<std::size_t>(classes);
  Dataset out;
  out.images = Tensor(Shape{n, dims.height, dims.width, dims.channels});
  out.labels.resize(n);
  out.name = "synthetic";
  out.class_count = classes;
  auto px = out.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % static_cast<std::size_t>(classes));
    out.labels[i] = cls;
    for (std::size_t j = 0; j < d; ++j) {
      px[i * d + j] = std::clamp(centers[static_cast<std::size_t>(cls)][j] + noise * standard_normal(rng), 0.0, 1.0);
    }
  }
  return out;
}

// Stratified split: each class is shuffled and cut at rounded cumulative
// fractions, so (0.7, 0.3) of 100 samples gives exactly 70 / 30.
inline std::vector<Dataset> split(const Dataset& data, std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.empty()) throw value_error("split needs at least one fraction");
  double total = 0.0;
  for (const double f : fractions) {
    if (f < 0.0) throw value_error("negative split fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw value_error("split fractions must sum to 1");

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> parts(fractions.size());
  for (int cls = 0; cls < data.class_count; ++cls) {
    auto idx = data.indices_of_class(cls);
    if (idx.empty()) continue;
    if (idx.size() < fractions.size()) {
      throw value_error("class " + std::to_string(cls) + " has fewer samples than split parts");
    }
    shuffle(rng, std::span<std::size_t>(idx));
    double cum = 0.0;
    std::size_t begin = 0;
    for (std::size_t p = 0; p < fractions.size(); ++p) {
      cum += fractions[p];
      const std::size_t end =
          p + 1 == fractions.size() ? idx.size() : static_cast<std::size_t>(std::llround(cum * static_cast<double>(idx.size())));
      parts[p].insert(parts[p].end(), idx.begin() + static_cast<std::ptrdiff_t>(begin), idx.begin() + static_cast<std::ptrdiff_t>(end));
      begin = end;
    }
  }
  std::vector<Dataset> out;
  for (auto& p : parts) {
    std::sort(p.begin(), p.end());
    out.push_back(data.select(p));
  }
  return out;
}

inline std::vector<Dataset> split(const Dataset& data, std::initializer_list<double> fractions, std::uint64_t seed) {
  return split(data, std::span<const double>(fractions.begin(), fractions.size()), seed);
}

// Exactly n_per_class samples of every class, chosen by seed.
inline std::vector<std::size_t> subsample_indices(const Dataset& data, std::size_t n_per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  for (int cls = 0; cls < data.class_count; ++cls) {
    const auto idx = data.indices_of_class(cls);
    if (idx.size() < n_per_class) {
      throw value_error("class " + std::to_string(cls) + " has " + std::to_string(idx.size()) + " samples, need " +
                        std::to_string(n_per_class));
    }
    for (const std::size_t k : sample_without_replacement(rng, idx.size(), n_per_class)) chosen.push_back(idx[k]);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline Dataset subsample_per_class(const Dataset& data, std::size_t n_per_class, std::uint64_t seed) {
  const auto idx = subsample_indices(data, n_per_class, seed);
  return data.select(idx);
}

// The two archives of the handwritten-digit benchmark found in `dir`
// (plain or .gz file names).
struct DigitArchive {
  Dataset train;
  Dataset test;
};

inline std::filesystem::path find_archive_file(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto& candidate : {dir / stem, dir / (stem + ".gz")}) {
    if (std::filesystem::exists(candidate)) return candidate;
  }
  throw Error("io", "missing " + stem + "[.gz] in " + dir.string());
}

inline DigitArchive load_digit_archive(const std::filesystem::path& dir) {
  DigitArchive a;
  a.train = load_idx(find_archive_file(dir, "train-images-idx3-ubyte"), find_archive_file(dir, "train-labels-idx1-ubyte"));
  a.test = load_idx(find_archive_file(dir, "t10k-images-idx3-ubyte"), find_archive_file(dir, "t10k-labels-idx1-ubyte"));
  a.train.name = "digits-train";
  a.test.name = "digits-test";
  return a;
}

}  // namespace gradsigns
