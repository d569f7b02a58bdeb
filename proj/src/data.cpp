#include "mscvit/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace mscvit {

namespace {

std::vector<uint8_t> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

std::vector<ImageRecord> parse_cifar10_bin(const std::string& path) {
  auto bytes = read_all(path);
  constexpr size_t REC = 3073;
  if (bytes.size() % REC != 0)
    throw DataError("'" + path + "': truncated file, " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of 3073 (offset of partial record: " +
                    std::to_string(bytes.size() - bytes.size() % REC) + ")");
  std::vector<ImageRecord> out;
  out.reserve(bytes.size() / REC);
  for (size_t off = 0; off < bytes.size(); off += REC) {
    ImageRecord r;
    r.label = bytes[off];
    if (r.label >= 10)
      throw DataError("'" + path + "': label " + std::to_string(r.label) + " out of range [0,10) at byte offset " +
                      std::to_string(off));
    r.pixels.assign(bytes.begin() + off + 1, bytes.begin() + off + REC);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ImageRecord> parse_cifar100_bin(const std::string& path) {
  auto bytes = read_all(path);
  constexpr size_t REC = 3074;
  if (bytes.size() % REC != 0)
    throw DataError("'" + path + "': truncated file, " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of 3074 (offset of partial record: " +
                    std::to_string(bytes.size() - bytes.size() % REC) + ")");
  std::vector<ImageRecord> out;
  out.reserve(bytes.size() / REC);
  for (size_t off = 0; off < bytes.size(); off += REC) {
    ImageRecord r;
    r.coarse = bytes[off];
    r.label = bytes[off + 1];
    if (r.label >= 100)
      throw DataError("'" + path + "': fine label " + std::to_string(r.label) +
                      " out of range [0,100) at byte offset " + std::to_string(off + 1));
    r.pixels.assign(bytes.begin() + off + 2, bytes.begin() + off + REC);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<uint8_t> serialize_cifar10(const std::vector<ImageRecord>& recs) {
  std::vector<uint8_t> out;
  out.reserve(recs.size() * 3073);
  for (const auto& r : recs) {
    out.push_back(static_cast<uint8_t>(r.label));
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

std::vector<uint8_t> serialize_cifar100(const std::vector<ImageRecord>& recs) {
  std::vector<uint8_t> out;
  out.reserve(recs.size() * 3074);
  for (const auto& r : recs) {
    out.push_back(static_cast<uint8_t>(r.coarse));
    out.push_back(static_cast<uint8_t>(r.label));
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

std::vector<ImageRecord> synth_dataset(int num_classes, int n_per_class, uint64_t seed, int noise_amp) {
  if (num_classes < 2) throw DataError("synth_dataset: num_classes must be >= 2");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(-noise_amp, noise_amp);
  std::vector<ImageRecord> out;
  out.reserve(static_cast<size_t>(num_classes) * n_per_class);
  for (int cls = 0; cls < num_classes; ++cls) {
    // Distinct base color per class: spread class ids over the RGB cube.
    const int base_r = 32 + (cls * 131) % 192;
    const int base_g = 32 + (cls * 73 + 64) % 192;
    const int base_b = 32 + (cls * 197 + 128) % 192;
    const int base[3] = {base_r, base_g, base_b};
    for (int i = 0; i < n_per_class; ++i) {
      ImageRecord r;
      r.label = cls;
      r.pixels.resize(3072);
      for (int c = 0; c < 3; ++c)
        for (int p = 0; p < 1024; ++p)
          r.pixels[c * 1024 + p] =
              static_cast<uint8_t>(std::clamp(base[c] + (noise_amp > 0 ? noise(rng) : 0), 0, 255));
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<std::vector<int64_t>> epoch_batches(int64_t n_records, int batch_size, uint64_t seed, int epoch) {
  if (n_records < 1) throw DataError("epoch_batches: empty dataset");
  if (batch_size < 1) throw DataError("epoch_batches: batch_size must be >= 1");
  std::vector<int64_t> idx(n_records);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed * 1000003ULL + static_cast<uint64_t>(epoch));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n_records; start += batch_size) {
    const int64_t end = std::min(start + batch_size, n_records);
    batches.emplace_back(idx.begin() + start, idx.begin() + end);
  }
  return batches;
}

}  // namespace mscvit
