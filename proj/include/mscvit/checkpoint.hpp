#pragma once

// Versioned little-endian binary checkpoint container: magic, format version,
// a config echo, a step counter, and a list of named shaped arrays (model
// parameters, running statistics, optimizer moments). Values are stored as
// f64 on disk, so f32 round-trips are bit-exact.

#include <cstdint>
#include <string>
#include <vector>

#include "mscvit/tensor.hpp"

namespace mscvit {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NamedArrayD {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct CheckpointContent {
  std::string config_echo;
  uint64_t step = 0;
  std::vector<NamedArrayD> arrays;
};

void write_checkpoint(const std::string& path, const CheckpointContent& content);
CheckpointContent read_checkpoint(const std::string& path);

template <typename T>
NamedArrayD to_named_array(const std::string& name, const Tensor<T>& t) {
  NamedArrayD a;
  a.name = name;
  a.shape = t.shape();
  a.data.assign(t.data().begin(), t.data().end());
  return a;
}

template <typename T>
NamedArrayD to_named_array(const std::string& name, const std::vector<T>& v) {
  NamedArrayD a;
  a.name = name;
  a.shape = {static_cast<int64_t>(v.size())};
  a.data.assign(v.begin(), v.end());
  return a;
}

template <typename T>
void from_named_array(const NamedArrayD& a, Tensor<T>& t) {
  if (a.shape != t.shape())
    throw CheckpointError("checkpoint array '" + a.name + "' has shape " + shape_str(a.shape) +
                          ", model expects " + shape_str(t.shape()));
  std::copy(a.data.begin(), a.data.end(), t.data().begin());
}

template <typename T>
void from_named_array(const NamedArrayD& a, std::vector<T>& v) {
  if (a.data.size() != v.size())
    throw CheckpointError("checkpoint array '" + a.name + "' has " + std::to_string(a.data.size()) +
                          " values, model expects " + std::to_string(v.size()));
  std::copy(a.data.begin(), a.data.end(), v.begin());
}

}  // namespace mscvit
