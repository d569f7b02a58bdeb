#pragma once

// Dataset ingestion: CIFAR-10/100 binary parsing, preprocessing/augmentation,
// batching, and a synthetic class-separable dataset for fast tests.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mscvit/tensor.hpp"

namespace mscvit {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ImageRecord {
  int label = 0;   // fine label for CIFAR-100
  int coarse = -1; // CIFAR-100 coarse label; -1 when absent
  std::vector<uint8_t> pixels;  // 3072 bytes, R/G/B planes, row-major
};

// CIFAR-10 binary: records of 3073 bytes (1 label + 3072 pixels).
std::vector<ImageRecord> parse_cifar10_bin(const std::string& path);
// CIFAR-100 binary: records of 3074 bytes (coarse, fine, 3072 pixels).
std::vector<ImageRecord> parse_cifar100_bin(const std::string& path);

// Inverse of the parsers (used by the byte-roundtrip tests).
std::vector<uint8_t> serialize_cifar10(const std::vector<ImageRecord>& recs);
std::vector<uint8_t> serialize_cifar100(const std::vector<ImageRecord>& recs);

struct AugmentConfig {
  double flip_prob = 0.0;        // horizontal flip probability
  int pad_crop = 0;              // pad by this many pixels then random 32-crop (0 = off)
  std::array<double, 3> mean = {0.5, 0.5, 0.5};
  std::array<double, 3> stddev = {0.5, 0.5, 0.5};
  int resize_to = 32;            // bilinear resize target (32 = no resize)
};

// Class-conditional images (distinct base color per class + uniform noise).
std::vector<ImageRecord> synth_dataset(int num_classes, int n_per_class, uint64_t seed, int noise_amp = 24);

// Seeded per-epoch shuffle into batches of indices; the final partial batch
// is emitted. Empty input is an error.
std::vector<std::vector<int64_t>> epoch_batches(int64_t n_records, int batch_size, uint64_t seed, int epoch);

// bytes -> [0,1] floats -> per-channel normalize -> optional pad+random-crop
// -> optional flip -> optional bilinear resize. Output (3, target, target).
template <typename T>
Tensor<T> preprocess(const ImageRecord& rec, const AugmentConfig& aug, std::mt19937_64& rng) {
  if (rec.pixels.size() != 3072) throw DataError("preprocess: record has " + std::to_string(rec.pixels.size()) +
                                                 " pixel bytes, expected 3072");
  int S = 32;
  std::vector<T> img(3 * 32 * 32);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 1024; ++i)
      img[c * 1024 + i] =
          (T(rec.pixels[c * 1024 + i]) / T(255) - T(aug.mean[c])) / T(aug.stddev[c]);
  if (aug.pad_crop > 0) {
    const int p = aug.pad_crop, SP = 32 + 2 * p;
    std::vector<T> padded(3 * SP * SP, T(0));
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) padded[(c * SP + y + p) * SP + x + p] = img[(c * 32 + y) * 32 + x];
    std::uniform_int_distribution<int> off(0, 2 * p);
    const int oy = off(rng), ox = off(rng);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) img[(c * 32 + y) * 32 + x] = padded[(c * SP + y + oy) * SP + x + ox];
  }
  if (aug.flip_prob > 0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < aug.flip_prob) {
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 32; ++y)
          for (int x = 0; x < 16; ++x) std::swap(img[(c * 32 + y) * 32 + x], img[(c * 32 + y) * 32 + 31 - x]);
    }
  }
  if (aug.resize_to != 32) {
    const int Tgt = aug.resize_to;
    std::vector<T> resized(3 * Tgt * Tgt);
    const double scale = 32.0 / Tgt;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < Tgt; ++y)
        for (int x = 0; x < Tgt; ++x) {
          // align-corners=false bilinear sampling
          double sy = (y + 0.5) * scale - 0.5, sx = (x + 0.5) * scale - 0.5;
          sy = std::min(std::max(sy, 0.0), 31.0);
          sx = std::min(std::max(sx, 0.0), 31.0);
          const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
          const int y1 = std::min(y0 + 1, 31), x1 = std::min(x0 + 1, 31);
          const double fy = sy - y0, fx = sx - x0;
          const T* p = img.data() + c * 1024;
          const double v = (1 - fy) * ((1 - fx) * p[y0 * 32 + x0] + fx * p[y0 * 32 + x1]) +
                           fy * ((1 - fx) * p[y1 * 32 + x0] + fx * p[y1 * 32 + x1]);
          resized[(c * Tgt + y) * Tgt + x] = static_cast<T>(v);
        }
    S = Tgt;
    img = std::move(resized);
  }
  return Tensor<T>::from({3, S, S}, std::move(img));
}

template <typename T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const std::vector<ImageRecord>& recs,
                                                  const std::vector<int64_t>& idx, const AugmentConfig& aug,
                                                  std::mt19937_64& rng) {
  const int64_t B = static_cast<int64_t>(idx.size());
  const int S = aug.resize_to;
  Tensor<T> batch = Tensor<T>::zeros({B, 3, S, S});
  std::vector<int> labels(B);
  for (int64_t i = 0; i < B; ++i) {
    Tensor<T> one = preprocess<T>(recs[idx[i]], aug, rng);
    std::copy(one.data().begin(), one.data().end(), batch.data().begin() + i * one.numel());
    labels[i] = recs[idx[i]].label;
  }
  return {batch, labels};
}

}  // namespace mscvit
