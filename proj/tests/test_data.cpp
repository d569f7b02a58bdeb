#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "mscvit/data.hpp"

using namespace mscvit;

namespace {

std::string write_tmp(const std::string& name, const std::vector<uint8_t>& bytes) {
  const std::string path = "/tmp/" + name;
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return path;
}

ImageRecord make_record(int label, int coarse, uint8_t fill) {
  ImageRecord r;
  r.label = label;
  r.coarse = coarse;
  r.pixels.assign(3072, fill);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// binary parsers

TEST_CASE("3073-byte records parse into labels and pixel planes") {
  std::vector<uint8_t> bytes;
  for (int rec = 0; rec < 3; ++rec) {
    bytes.push_back(static_cast<uint8_t>(rec == 1 ? 7 : rec));
    for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<uint8_t>(rec == 1 ? 128 : (i + rec) % 256));
  }
  auto path = write_tmp("mscvit_c10_test.bin", bytes);
  auto recs = parse_cifar10_bin(path);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].label == 0);
  CHECK(recs[1].label == 7);
  CHECK(recs[2].label == 2);
  CHECK(recs[1].coarse == -1);
  REQUIRE(recs[1].pixels.size() == 3072);
  for (uint8_t p : recs[1].pixels) CHECK(p == 128);
  CHECK(recs[0].pixels[0] == 0);
  CHECK(recs[2].pixels[5] == 7);
  std::remove(path.c_str());
}

TEST_CASE("3073-byte parser rejects truncated files and out-of-range labels") {
  auto path = write_tmp("mscvit_c10_trunc.bin", std::vector<uint8_t>(3072, 0));
  try {
    parse_cifar10_bin(path);
    CHECK(false);
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("3072") != std::string::npos);
    CHECK(std::string(e.what()).find("3073") != std::string::npos);
  }
  std::remove(path.c_str());

  std::vector<uint8_t> bad(2 * 3073, 0);
  bad[3073] = 11;  // second record's label byte
  path = write_tmp("mscvit_c10_badlabel.bin", bad);
  try {
    parse_cifar10_bin(path);
    CHECK(false);
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("11") != std::string::npos);
    CHECK(std::string(e.what()).find("3073") != std::string::npos);  // byte offset of the bad label
  }
  std::remove(path.c_str());
  CHECK_THROWS_AS(parse_cifar10_bin("/tmp/definitely_missing.bin"), DataError);
}

TEST_CASE("3074-byte records carry coarse and fine labels") {
  std::vector<uint8_t> bytes;
  bytes.push_back(3);   // coarse
  bytes.push_back(42);  // fine
  for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<uint8_t>(i % 251));
  auto path = write_tmp("mscvit_c100_test.bin", bytes);
  auto recs = parse_cifar100_bin(path);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].coarse == 3);
  CHECK(recs[0].label == 42);
  CHECK(recs[0].pixels[250] == 250);
  std::remove(path.c_str());
}

TEST_CASE("3074-byte parser: empty file gives zero records; truncation is an error") {
  auto path = write_tmp("mscvit_c100_empty.bin", {});
  CHECK(parse_cifar100_bin(path).empty());
  std::remove(path.c_str());

  path = write_tmp("mscvit_c100_trunc.bin", std::vector<uint8_t>(3074 + 100, 0));
  try {
    parse_cifar100_bin(path);
    CHECK(false);
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("3074") != std::string::npos);  // offset of the partial record
  }
  std::remove(path.c_str());
}

TEST_CASE("serialize/parse round-trips preserve every byte") {
  std::mt19937_64 rng(1);
  std::vector<ImageRecord> recs10, recs100;
  for (int i = 0; i < 4; ++i) {
    ImageRecord r = make_record(static_cast<int>(rng() % 10), static_cast<int>(rng() % 20), 0);
    for (auto& p : r.pixels) p = static_cast<uint8_t>(rng());
    recs10.push_back(r);
    r.label = static_cast<int>(rng() % 100);
    recs100.push_back(r);
  }
  auto p10 = write_tmp("mscvit_rt10.bin", serialize_cifar10(recs10));
  auto back10 = parse_cifar10_bin(p10);
  CHECK(serialize_cifar10(back10) == serialize_cifar10(recs10));
  std::remove(p10.c_str());

  auto p100 = write_tmp("mscvit_rt100.bin", serialize_cifar100(recs100));
  auto back100 = parse_cifar100_bin(p100);
  CHECK(serialize_cifar100(back100) == serialize_cifar100(recs100));
  REQUIRE(back100.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(back100[i].coarse == recs100[i].coarse);
    CHECK(back100[i].label == recs100[i].label);
  }
  std::remove(p100.c_str());
}

// ---------------------------------------------------------------------------
// preprocessing

TEST_CASE("normalization maps byte 255 to +1 and byte 0 to -1 under mean/std 0.5") {
  auto rec = make_record(0, -1, 255);
  for (int i = 0; i < 1024; ++i) rec.pixels[2048 + i] = 0;  // blue plane
  AugmentConfig aug;
  std::mt19937_64 rng(0);
  auto x = preprocess<double>(rec, aug, rng);
  CHECK(x.shape() == Shape{3, 32, 32});
  for (int i = 0; i < 1024; ++i) {
    CHECK(x.data()[i] == doctest::Approx(1.0));
    CHECK(x.data()[2048 + i] == doctest::Approx(-1.0));
  }
}

TEST_CASE("custom per-channel statistics are honored") {
  auto rec = make_record(0, -1, 51);  // 51/255 = 0.2
  AugmentConfig aug;
  aug.mean = {0.1, 0.2, 0.4};
  aug.stddev = {0.5, 0.25, 0.2};
  std::mt19937_64 rng(0);
  auto x = preprocess<double>(rec, aug, rng);
  CHECK(x.data()[0] == doctest::Approx(0.2));        // (0.2-0.1)/0.5
  CHECK(x.data()[1024] == doctest::Approx(0.0));     // (0.2-0.2)/0.25
  CHECK(x.data()[2048] == doctest::Approx(-1.0));    // (0.2-0.4)/0.2
}

TEST_CASE("flip probability 1 mirrors each row; flipping twice restores the image") {
  ImageRecord rec = make_record(0, -1, 0);
  for (int i = 0; i < 3072; ++i) rec.pixels[i] = static_cast<uint8_t>((i * 7) % 256);
  AugmentConfig plain, flip;
  flip.flip_prob = 1.0;
  std::mt19937_64 rng(0);
  auto a = preprocess<double>(rec, plain, rng);
  auto b = preprocess<double>(rec, flip, rng);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        CHECK(b.data()[(c * 32 + y) * 32 + x] == a.data()[(c * 32 + y) * 32 + 31 - x]);
}

TEST_CASE("pad-and-crop with a fixed generator is deterministic and keeps the shape") {
  ImageRecord rec = make_record(0, -1, 0);
  for (int i = 0; i < 3072; ++i) rec.pixels[i] = static_cast<uint8_t>(i % 256);
  AugmentConfig aug;
  aug.pad_crop = 4;
  std::mt19937_64 rng1(5), rng2(5), rng3(6);
  auto a = preprocess<double>(rec, aug, rng1);
  auto b = preprocess<double>(rec, aug, rng2);
  CHECK(a.shape() == Shape{3, 32, 32});
  CHECK(a.data() == b.data());
  // a different stream eventually yields a different crop
  bool differs = false;
  for (int trial = 0; trial < 8 && !differs; ++trial)
    differs = preprocess<double>(rec, aug, rng3).data() != a.data();
  CHECK(differs);
}

TEST_CASE("bilinear resize to 224 preserves constant images exactly") {
  auto rec = make_record(0, -1, 200);
  AugmentConfig aug;
  aug.resize_to = 224;
  std::mt19937_64 rng(0);
  auto x = preprocess<double>(rec, aug, rng);
  CHECK(x.shape() == Shape{3, 224, 224});
  const double expect = (200.0 / 255.0 - 0.5) / 0.5;
  for (auto v : x.data()) CHECK(v == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("resize interpolates between plane values and stays within their range") {
  ImageRecord rec = make_record(0, -1, 0);
  // left half 0, right half 250 in every plane
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 16; x < 32; ++x) rec.pixels[(c * 32 + y) * 32 + x] = 250;
  AugmentConfig aug;
  aug.resize_to = 224;
  std::mt19937_64 rng(0);
  auto x = preprocess<double>(rec, aug, rng);
  const double lo = -1.0, hi = (250.0 / 255.0 - 0.5) / 0.5;
  double minv = 1e9, maxv = -1e9;
  for (auto v : x.data()) {
    CHECK(v >= lo - 1e-12);
    CHECK(v <= hi + 1e-12);
    minv = std::min(minv, v);
    maxv = std::max(maxv, v);
  }
  CHECK(minv == doctest::Approx(lo));
  CHECK(maxv == doctest::Approx(hi));
}

TEST_CASE("preprocess rejects records with the wrong pixel count") {
  ImageRecord rec;
  rec.pixels.resize(100);
  AugmentConfig aug;
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(preprocess<double>(rec, aug, rng), DataError);
}

TEST_CASE("make_batch stacks records and carries their labels") {
  auto recs = synth_dataset(4, 3, 1, 0);
  AugmentConfig aug;
  std::mt19937_64 rng(0);
  auto [batch, labels] = make_batch<float>(recs, {0, 4, 11}, aug, rng);
  CHECK(batch.shape() == Shape{3, 3, 32, 32});
  CHECK(labels == std::vector<int>{0, 1, 3});
  // row 1 of the batch equals a standalone preprocess of record 4
  std::mt19937_64 rng2(0);
  auto one = preprocess<float>(recs[4], aug, rng2);
  for (int64_t i = 0; i < one.numel(); ++i) CHECK(batch.data()[one.numel() + i] == one.data()[i]);
}

// ---------------------------------------------------------------------------
// batching arithmetic

TEST_CASE("epoch batching: 50000 records at batch 128 give 391 batches, last of 80") {
  auto batches = epoch_batches(50000, 128, 42, 0);
  CHECK(batches.size() == 391);
  for (size_t i = 0; i + 1 < batches.size(); ++i) CHECK(batches[i].size() == 128);
  CHECK(batches.back().size() == 80);
  // every index appears exactly once
  std::set<int64_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 50000);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 49999);
}

TEST_CASE("epoch batching: batch size 1, determinism, and epoch dependence") {
  CHECK(epoch_batches(7, 1, 3, 0).size() == 7);
  auto a = epoch_batches(1000, 32, 5, 2);
  auto b = epoch_batches(1000, 32, 5, 2);
  CHECK(a == b);
  CHECK(epoch_batches(1000, 32, 5, 3) != a);  // new epoch, new order
  CHECK(epoch_batches(1000, 32, 6, 2) != a);  // new seed, new order
  CHECK_THROWS_AS(epoch_batches(0, 32, 1, 0), DataError);
  CHECK_THROWS_AS(epoch_batches(10, 0, 1, 0), DataError);
}

// ---------------------------------------------------------------------------
// synthetic dataset

TEST_CASE("synthetic data: class balance, label range, determinism") {
  auto recs = synth_dataset(10, 16, 99);
  REQUIRE(recs.size() == 160);
  std::vector<int> counts(10, 0);
  for (const auto& r : recs) {
    REQUIRE(r.label >= 0);
    REQUIRE(r.label < 10);
    ++counts[r.label];
  }
  for (int c : counts) CHECK(c == 16);
  auto again = synth_dataset(10, 16, 99);
  for (size_t i = 0; i < recs.size(); ++i) CHECK(recs[i].pixels == again[i].pixels);
  CHECK(synth_dataset(10, 16, 100)[0].pixels != recs[0].pixels);
  CHECK_THROWS_AS(synth_dataset(1, 4, 0), DataError);
}

TEST_CASE("noiseless synthetic images are flat per-class colors, classifiable by centroid") {
  const int K = 10;
  auto recs = synth_dataset(K, 2, 7, /*noise_amp=*/0);
  // flat planes
  for (const auto& r : recs)
    for (int c = 0; c < 3; ++c)
      for (int i = 1; i < 1024; ++i) CHECK(r.pixels[c * 1024 + i] == r.pixels[c * 1024]);
  // distinct colors across classes
  std::set<std::array<uint8_t, 3>> colors;
  for (const auto& r : recs) colors.insert({r.pixels[0], r.pixels[1024], r.pixels[2048]});
  CHECK(colors.size() == K);

  // nearest-centroid on the class colors classifies noisy samples well
  std::vector<std::array<double, 3>> centroid(K);
  for (int cls = 0; cls < K; ++cls)
    centroid[cls] = {static_cast<double>(recs[cls * 2].pixels[0]), static_cast<double>(recs[cls * 2].pixels[1024]),
                     static_cast<double>(recs[cls * 2].pixels[2048])};
  auto noisy = synth_dataset(K, 8, 8, /*noise_amp=*/24);
  int correct = 0;
  for (const auto& r : noisy) {
    std::array<double, 3> m = {0, 0, 0};
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 1024; ++i) m[c] += r.pixels[c * 1024 + i];
      m[c] /= 1024;
    }
    int best = 0;
    double bd = 1e18;
    for (int cls = 0; cls < K; ++cls) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d += (m[c] - centroid[cls][c]) * (m[c] - centroid[cls][c]);
      if (d < bd) {
        bd = d;
        best = cls;
      }
    }
    if (best == r.label) ++correct;
  }
  CHECK(correct == static_cast<int>(noisy.size()));
}
