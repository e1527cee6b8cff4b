#pragma once

// Dataset ingestion: CSV, the CAFD1 binary image format and two seeded
// synthetic generators, plus the stratified train / val / test split.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cafewidth/errors.hpp"
#include "cafewidth/nnkernel.hpp"

namespace cafewidth {

/// CSV rows of features with an integer label in the last column. A header
/// row is skipped when its last field is not an integer. Loaded as C x 1 x 1.
inline Dataset load_csv(const std::string& path, int num_classes = 0) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  Dataset d;
  std::string line;
  int features = -1;
  std::size_t row = 0;
  int max_label = -1;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() < 2) throw DataError(path + ":" + std::to_string(row) + ": need at least one feature and a label");
    std::size_t used = 0;
    int label = 0;
    try {
      label = std::stoi(fields.back(), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0) {
      if (d.labels.empty() && features < 0) continue;  // header
      throw DataError(path + ":" + std::to_string(row) + ": label is not an integer");
    }
    const int nf = static_cast<int>(fields.size()) - 1;
    if (features < 0) features = nf;
    if (nf != features) throw DataError(path + ":" + std::to_string(row) + ": inconsistent column count");
    for (int k = 0; k < nf; ++k) {
      try {
        d.inputs.push_back(std::stod(fields[static_cast<std::size_t>(k)]));
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(row) + ": bad number '" + fields[static_cast<std::size_t>(k)] + "'");
      }
    }
    if (label < 0) throw DataError(path + ":" + std::to_string(row) + ": negative label");
    d.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  if (d.labels.empty()) throw DataError("'" + path + "' has no rows");
  d.channels = features;
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  d.validate();
  return d;
}

// CAFD1: magic, {u32 count, u16 H, u16 W, u16 C, u16 num_classes}, then per
// record {u16 label, float32 pixels[C*H*W]} (CHW order), little-endian.

namespace detail {

inline std::uint64_t read_le(std::istream& is, int bytes, const std::string& path) {
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) {
    const int c = is.get();
    if (c == EOF) throw DataError("'" + path + "' is truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return v;
}

inline void write_le(std::ostream& os, std::uint64_t v, int bytes) {
  for (int b = 0; b < bytes; ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xffu));
}

}  // namespace detail

inline Dataset load_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, "CAFD1", 5) != 0) throw DataError("'" + path + "': bad magic");
  const auto count = detail::read_le(is, 4, path);
  Dataset d;
  d.height = static_cast<int>(detail::read_le(is, 2, path));
  d.width = static_cast<int>(detail::read_le(is, 2, path));
  d.channels = static_cast<int>(detail::read_le(is, 2, path));
  d.num_classes = static_cast<int>(detail::read_le(is, 2, path));
  if (d.height < 1 || d.width < 1 || d.channels < 1 || d.num_classes < 1) {
    throw DataError("'" + path + "': zero dimension in header");
  }
  d.inputs.reserve(count * d.sample_size());
  d.labels.reserve(count);
  for (std::uint64_t n = 0; n < count; ++n) {
    const int label = static_cast<int>(detail::read_le(is, 2, path));
    if (label >= d.num_classes) {
      throw DataError("'" + path + "': record " + std::to_string(n) + " label " + std::to_string(label) +
                      " out of range");
    }
    d.labels.push_back(label);
    for (std::size_t k = 0; k < d.sample_size(); ++k) {
      d.inputs.push_back(static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(detail::read_le(is, 4, path)))));
    }
  }
  return d;
}

/// Pixels are stored as float32, so values round-trip only at that precision.
inline void save_binary(const std::string& path, const Dataset& d) {
  d.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path + "'");
  os.write("CAFD1", 5);
  detail::write_le(os, d.size(), 4);
  detail::write_le(os, static_cast<std::uint64_t>(d.height), 2);
  detail::write_le(os, static_cast<std::uint64_t>(d.width), 2);
  detail::write_le(os, static_cast<std::uint64_t>(d.channels), 2);
  detail::write_le(os, static_cast<std::uint64_t>(d.num_classes), 2);
  for (std::size_t n = 0; n < d.size(); ++n) {
    detail::write_le(os, static_cast<std::uint64_t>(d.labels[n]), 2);
    for (double v : d.sample(n)) detail::write_le(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  if (!os) throw DataError("failed writing '" + path + "'");
}

/// k isotropic gaussian clusters in d dimensions (C = d, H = W = 1).
inline Dataset gaussian_blobs(int classes, int dims, int samples, std::uint64_t seed, double spread = 1.0) {
  if (classes < 1 || dims < 1 || samples < 1) throw DataError("gaussian-blobs needs positive sizes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> centres(static_cast<std::size_t>(classes * dims));
  for (auto& c : centres) c = 3.0 * unit(rng);
  Dataset d{dims, 1, 1, classes, {}, {}};
  for (int n = 0; n < samples; ++n) {
    const int y = n % classes;
    d.labels.push_back(y);
    for (int k = 0; k < dims; ++k) d.inputs.push_back(centres[static_cast<std::size_t>(y * dims + k)] + spread * unit(rng));
  }
  return d;
}

/// 8x8 single-channel patches, 10 classes. Class y is a stripe pattern
/// (orientation from y % 2, period from y / 2) with a random phase, random
/// contrast and additive gaussian noise.
inline Dataset striped_patches(int samples, std::uint64_t seed, double noise = 0.6) {
  if (samples < 1) throw DataError("striped-patches needs samples >= 1");
  constexpr int kSide = 8;
  constexpr int kClasses = 10;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> contrast(0.6, 1.4);
  Dataset d{1, kSide, kSide, kClasses, {}, {}};
  for (int n = 0; n < samples; ++n) {
    const int y = n % kClasses;
    const bool vertical = y % 2 == 1;
    const double period = 2.0 + static_cast<double>(y / 2);  // 2..6 pixels
    const double ph = phase(rng);
    const double a = contrast(rng);
    d.labels.push_back(y);
    for (int r = 0; r < kSide; ++r) {
      for (int c = 0; c < kSide; ++c) {
        const double t = vertical ? c : r;
        d.inputs.push_back(a * std::sin(2.0 * std::numbers::pi * t / period + ph) + noise * unit(rng));
      }
    }
  }
  return d;
}

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Stratified seeded split: round(n * test_frac) samples to test,
/// round(n * val_frac) to val, the rest to train.
inline DataSplits split_dataset(const Dataset& data, std::uint64_t seed, double val_frac = 0.16,
                                double test_frac = 0.2) {
  data.validate();
  if (val_frac < 0 || test_frac < 0 || val_frac + test_frac >= 1.0) throw DataError("bad split fractions");
  const std::size_t n = data.size();
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_frac));
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_frac));
  // Shuffle each class, then interleave by within-class rank so any prefix is stratified.
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  std::vector<std::pair<double, std::size_t>> keyed;
  keyed.reserve(n);
  for (const auto& v : by_class) {
    for (std::size_t k = 0; k < v.size(); ++k) {
      keyed.emplace_back((static_cast<double>(k) + 0.5) / static_cast<double>(v.size()), v[k]);
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> test_idx, val_idx, train_idx;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = keyed[k].second;
    if (k < n_test) {
      test_idx.push_back(i);
    } else if (k < n_test + n_val) {
      val_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  if (train_idx.empty() || val_idx.empty() || test_idx.empty()) {
    throw DataError("dataset of " + std::to_string(n) + " samples is too small to split into train/val/test");
  }
  for (auto* v : {&train_idx, &val_idx, &test_idx}) std::sort(v->begin(), v->end());
  return {data.subset(train_idx), data.subset(val_idx), data.subset(test_idx)};
}

}  // namespace cafewidth
