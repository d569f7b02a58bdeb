#pragma once

// Central-difference gradient verification against the recorded tape.

#include <random>

#include "mscvit/tensor.hpp"

namespace mscvit {

// f: rebuilds the graph from scratch and returns a scalar loss.
// Checks d loss / d p for each tensor in params on up to max_coords sampled
// coordinates per tensor; returns the max relative error, with the
// denominator floored so near-zero gradients compare absolutely.
template <typename T, typename F>
T finite_diff_check(F&& f, std::vector<Tensor<T>> params, T eps = T(1e-5), int max_coords = 64,
                    uint64_t sample_seed = 1234, T denom_floor = T(1e-3)) {
  // Analytic gradients.
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tensor<T> loss = f();
    backward(loss);
  }
  std::vector<std::vector<T>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  std::mt19937_64 rng(sample_seed);
  T max_rel = 0;
  NoGradGuard ng;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (n <= max_coords) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::uniform_int_distribution<int64_t> dist(0, n - 1);
      for (int i = 0; i < max_coords; ++i) coords.push_back(dist(rng));
    }
    for (int64_t c : coords) {
      const T orig = p.data()[c];
      p.data()[c] = orig + eps;
      const T fp = f().item();
      p.data()[c] = orig - eps;
      const T fm = f().item();
      p.data()[c] = orig;
      const T numeric = (fp - fm) / (2 * eps);
      const T a = analytic[pi][c];
      const T denom = std::max(std::max(std::abs(numeric), std::abs(a)), denom_floor);
      max_rel = std::max(max_rel, std::abs(numeric - a) / denom);
    }
  }
  return max_rel;
}

}  // namespace mscvit
