#include "mscvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mscvit {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'C', 'V'};
constexpr uint32_t kVersion = 1;

// The container is little-endian by definition; this code targets
// little-endian hosts (asserted at build time below).
static_assert(std::endian::native == std::endian::little, "checkpoint format requires a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put<uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint truncated while reading " + what);
  return v;
}

std::string get_str(std::istream& is, const std::string& what) {
  const uint64_t n = get<uint64_t>(is, what + " length");
  if (n > (1ULL << 32)) throw CheckpointError("checkpoint corrupt: unreasonable " + what + " length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw CheckpointError("checkpoint truncated while reading " + what);
  return s;
}

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointContent& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put<uint32_t>(os, kVersion);
  put_str(os, content.config_echo);
  put<uint64_t>(os, content.step);
  put<uint64_t>(os, content.arrays.size());
  for (const auto& a : content.arrays) {
    put_str(os, a.name);
    put<uint32_t>(os, static_cast<uint32_t>(a.shape.size()));
    for (int64_t d : a.shape) put<int64_t>(os, d);
    put<uint64_t>(os, a.data.size());
    os.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * 8));
  }
  if (!os) throw CheckpointError("write failure on '" + path + "'");
}

CheckpointContent read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("'" + path + "': bad magic bytes (not a checkpoint, or corrupted)");
  const uint32_t version = get<uint32_t>(is, "version");
  if (version != kVersion)
    throw CheckpointError("'" + path + "': unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kVersion) + ")");
  CheckpointContent c;
  c.config_echo = get_str(is, "config echo");
  c.step = get<uint64_t>(is, "step counter");
  const uint64_t count = get<uint64_t>(is, "array count");
  for (uint64_t i = 0; i < count; ++i) {
    NamedArrayD a;
    a.name = get_str(is, "array name");
    const uint32_t rank = get<uint32_t>(is, "array rank");
    if (rank > 8) throw CheckpointError("checkpoint corrupt: rank " + std::to_string(rank) + " for '" + a.name + "'");
    int64_t numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      a.shape.push_back(get<int64_t>(is, "array dim"));
      numel *= a.shape.back();
    }
    const uint64_t n = get<uint64_t>(is, "array size");
    if (static_cast<int64_t>(n) != numel)
      throw CheckpointError("checkpoint corrupt: '" + a.name + "' size/shape disagree");
    a.data.resize(n);
    is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(n * 8));
    if (!is) throw CheckpointError("checkpoint truncated while reading data of '" + a.name + "'");
    c.arrays.push_back(std::move(a));
  }
  return c;
}

}  // namespace mscvit
