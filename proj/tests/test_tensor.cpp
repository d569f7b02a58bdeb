#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mscvit/gradcheck.hpp"
#include "mscvit/tensor.hpp"

using namespace mscvit;

namespace {

template <typename T>
Tensor<T> randn(Shape shape, uint64_t seed, T std_dev = T(1)) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, static_cast<double>(std_dev));
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

TEST_CASE("matmul: identity and hand values") {
  auto I = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto B = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
  auto C = matmul(I, B);
  for (int i = 0; i < 4; ++i) CHECK(C.data()[i] == doctest::Approx(B.data()[i]));

  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul: shape mismatch error carries both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected exception");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("matmul: gradient of sum(A*B) w.r.t. A equals ones x B^T") {
  auto A = randn<double>({3, 4}, 1);
  auto B = randn<double>({4, 5}, 2);
  A.set_requires_grad(true);
  auto loss = sum_all(matmul(A, B));
  backward(loss);
  // d/dA sum(AB) = ones(3,5) x B^T -> row-independent: grad[i][k] = sum_j B[k][j]
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      double expect = 0;
      for (int j = 0; j < 5; ++j) expect += B.data()[k * 5 + j];
      CHECK(A.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-10));
    }
  // and against finite differences
  auto A2 = randn<double>({3, 4}, 3);
  double err = finite_diff_check<double>([&] { return sum_all(matmul(A2, B)); }, {A2});
  CHECK(err < 1e-6);
}

TEST_CASE("conv2d: identity 1x1 kernel, all-ones 3x3 interior, output-size law") {
  auto x = randn<double>({1, 1, 4, 4}, 4);
  auto w1 = Tensor<double>::from({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, w1, Tensor<double>(), 1, 0);
  for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  auto c = Tensor<double>::full({1, 1, 5, 5}, 2.0);
  auto w3 = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y3 = conv2d(c, w3, Tensor<double>(), 1, 0);
  CHECK(y3.dim(2) == 3);
  for (auto v : y3.data()) CHECK(v == doctest::Approx(18.0));  // 9 * 2

  // 224 -> 112 with k=3 s=2 p=1
  auto big = Tensor<double>::zeros({1, 1, 224, 224});
  auto yb = conv2d(big, w3, Tensor<double>(), 2, 1);
  CHECK(yb.dim(2) == 112);
  CHECK(yb.dim(3) == 112);
}

TEST_CASE("conv2d: output-size law across kernel/stride/pad grid") {
  for (int k = 1; k <= 4; ++k)
    for (int s = 1; s <= 3; ++s)
      for (int p = 0; p <= 2; ++p) {
        const int in = 11;
        const int expect = (in + 2 * p - k) / s + 1;
        if (expect <= 0) continue;
        auto x = Tensor<double>::zeros({1, 1, in, in});
        auto w = Tensor<double>::zeros({1, 1, k, k});
        auto y = conv2d(x, w, Tensor<double>(), s, p);
        CHECK(y.dim(2) == expect);
        CHECK(y.dim(3) == expect);
      }
}

TEST_CASE("conv2d: channel mismatch and non-positive output errors") {
  auto x = Tensor<double>::zeros({1, 2, 4, 4});
  auto w = Tensor<double>::zeros({1, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, Tensor<double>(), 1, 1), std::invalid_argument);
  auto w2 = Tensor<double>::zeros({1, 2, 8, 8});
  CHECK_THROWS_AS(conv2d(x, w2, Tensor<double>(), 1, 0), std::invalid_argument);
}

TEST_CASE("conv2d: gradcheck") {
  auto x = randn<double>({2, 2, 5, 5}, 5);
  auto w = randn<double>({3, 2, 3, 3}, 6, 0.5);
  auto b = randn<double>({3}, 7, 0.1);
  double err = finite_diff_check<double>([&] { return sum_all(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); },
                                         {x, w, b});
  CHECK(err < 1e-6);
}

TEST_CASE("depthwise_conv2d: shape preservation, 8x8 stride-8 reduction, per-channel independence") {
  auto x = randn<double>({1, 3, 6, 6}, 8);
  auto w = randn<double>({3, 1, 3, 3}, 9);
  auto y = depthwise_conv2d(x, w, Tensor<double>(), 1, 1);
  CHECK(y.shape() == Shape{1, 3, 6, 6});

  auto x56 = Tensor<double>::zeros({1, 4, 56, 56});
  auto w8 = Tensor<double>::zeros({4, 1, 8, 8});
  auto y8 = depthwise_conv2d(x56, w8, Tensor<double>(), 8, 0);
  CHECK(y8.dim(2) == 7);
  CHECK(y8.dim(3) == 7);

  // zeroing filter j zeroes only output channel j
  auto wz = randn<double>({3, 1, 3, 3}, 10);
  std::fill(wz.data().begin() + 9, wz.data().begin() + 18, 0.0);  // channel 1
  auto yz = depthwise_conv2d(x, wz, Tensor<double>(), 1, 1);
  for (int i = 0; i < 36; ++i) CHECK(yz.data()[36 + i] == 0.0);
  bool other_nonzero = false;
  for (int i = 0; i < 36; ++i) other_nonzero = other_nonzero || yz.data()[i] != 0.0;
  CHECK(other_nonzero);
}

TEST_CASE("depthwise_conv2d: gradcheck") {
  auto x = randn<double>({2, 3, 5, 5}, 11);
  auto w = randn<double>({3, 1, 3, 3}, 12, 0.5);
  auto b = randn<double>({3}, 13, 0.1);
  double err = finite_diff_check<double>(
      [&] {
        auto y = depthwise_conv2d(x, w, b, 1, 1);
        return sum_all(mul(y, y));
      },
      {x, w, b});
  CHECK(err < 1e-6);
}

TEST_CASE("batchnorm2d: normalization statistics and eval determinism") {
  auto x = randn<double>({4, 3, 5, 5}, 14, 2.0);
  auto gamma = Tensor<double>::from({3}, {1.5, 2.0, 0.5});
  auto beta = Tensor<double>::from({3}, {0.1, -0.2, 0.3});
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, true);
  // per-channel mean ~= beta, var ~= gamma^2
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) m += y.data()[(b * 3 + c) * 25 + i];
    m /= 100;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) {
        double d = y.data()[(b * 3 + c) * 25 + i] - m;
        v += d * d;
      }
    v /= 100;
    CHECK(m == doctest::Approx(beta.data()[c]).epsilon(1e-5));
    CHECK(v == doctest::Approx(gamma.data()[c] * gamma.data()[c]).epsilon(1e-3));
  }
  // eval mode is deterministic given running stats
  auto e1 = batchnorm2d(x, gamma, beta, rm, rv, false);
  auto e2 = batchnorm2d(x, gamma, beta, rm, rv, false);
  CHECK(e1.data() == e2.data());
}

TEST_CASE("batchnorm2d: identity on zero-mean unit-var batch, gradcheck in eval mode") {
  // construct an exactly zero-mean unit-var channel
  auto x = Tensor<double>::zeros({2, 1, 1, 2});
  x.data() = {1, -1, 1, -1};
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::zeros({1});
  std::vector<double> rm(1, 0.0), rv(1, 1.0);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, true);
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-4));

  auto xr = randn<double>({2, 3, 4, 4}, 15);
  auto g2 = randn<double>({3}, 16, 0.3);
  auto b2 = randn<double>({3}, 17, 0.3);
  std::vector<double> rm2 = {0.1, -0.2, 0.3}, rv2 = {1.1, 0.9, 1.3};
  double err = finite_diff_check<double>(
      [&] {
        std::vector<double> m = rm2, v = rv2;  // copies: keep f deterministic
        auto y2 = batchnorm2d(xr, g2, b2, m, v, false);
        return sum_all(mul(y2, y2));
      },
      {xr, g2, b2});
  CHECK(err < 1e-6);
}

TEST_CASE("batchnorm2d: training-mode gradcheck (batch statistics path)") {
  auto xr = randn<double>({2, 2, 3, 3}, 18);
  auto g = randn<double>({2}, 19, 0.3);
  auto b = randn<double>({2}, 20, 0.3);
  double err = finite_diff_check<double>(
      [&] {
        std::vector<double> m(2, 0.0), v(2, 1.0);
        auto y = batchnorm2d(xr, g, b, m, v, true);
        return sum_all(mul(y, y));
      },
      {xr, g, b});
  CHECK(err < 1e-4);
}

TEST_CASE("layernorm: constant vector, statistics, gradcheck") {
  auto x = Tensor<double>::full({1, 4}, 3.7);
  auto gamma = Tensor<double>::full({4}, 1.0);
  auto beta = Tensor<double>::zeros({4});
  auto y = layernorm_lastdim(x, gamma, beta);
  for (auto v : y.data()) CHECK(std::abs(v) < 1e-3);  // zeros before affine

  auto xr = randn<double>({5, 8}, 21);
  auto yr = layernorm_lastdim(xr, Tensor<double>::full({8}, 1.0), Tensor<double>::zeros({8}));
  for (int i = 0; i < 5; ++i) {
    double m = 0, v = 0;
    for (int j = 0; j < 8; ++j) m += yr.data()[i * 8 + j];
    m /= 8;
    for (int j = 0; j < 8; ++j) {
      double d = yr.data()[i * 8 + j] - m;
      v += d * d;
    }
    v /= 8;
    CHECK(std::abs(m) < 1e-5);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }

  auto g2 = randn<double>({8}, 22, 0.3);
  auto b2 = randn<double>({8}, 23, 0.3);
  double err = finite_diff_check<double>(
      [&] {
        auto y2 = layernorm_lastdim(xr, g2, b2);
        return sum_all(mul(y2, y2));
      },
      {xr, g2, b2});
  CHECK(err < 1e-4);
}

TEST_CASE("gelu: fixed points, asymptotes, derivative") {
  auto x = Tensor<double>::from({3}, {0.0, 1.0, -10.0});
  auto y = gelu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == doctest::Approx(0.841345).epsilon(1e-5));
  CHECK(std::abs(y.data()[2]) < 1e-6);

  auto xr = randn<double>({16}, 24);
  double err = finite_diff_check<double>(
      [&] {
        auto g = gelu(xr);
        return sum_all(mul(g, g));
      },
      {xr});
  CHECK(err < 1e-7);
}

TEST_CASE("softmax: symmetry, overflow stability, hand value, NaN rejection") {
  auto a = softmax_lastdim(Tensor<double>::from({1, 2}, {0.0, 0.0}));
  CHECK(a.data()[0] == doctest::Approx(0.5));
  CHECK(a.data()[1] == doctest::Approx(0.5));

  auto b = softmax_lastdim(Tensor<double>::from({1, 2}, {1000.0, 1000.0}));
  CHECK(b.data()[0] == doctest::Approx(0.5));

  auto c = softmax_lastdim(Tensor<double>::from({1, 2}, {std::log(2.0), 0.0}));
  CHECK(c.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
  CHECK(c.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-9));

  auto nan = Tensor<double>::from({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(softmax_lastdim(nan), std::invalid_argument);

  // rows sum to 1 and are non-negative on random input
  auto r = softmax_lastdim(randn<double>({7, 9}, 25, 3.0));
  for (int i = 0; i < 7; ++i) {
    double s = 0;
    for (int j = 0; j < 9; ++j) {
      CHECK(r.data()[i * 9 + j] >= 0.0);
      s += r.data()[i * 9 + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("softmax: gradcheck") {
  auto x = randn<double>({3, 5}, 26);
  auto w = randn<double>({3, 5}, 27);  // random weighting so the grad is nontrivial
  double err = finite_diff_check<double>([&] { return sum_all(mul(softmax_lastdim(x), w)); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("backward: basic identities and double-call error") {
  auto x = randn<double>({6}, 28);
  x.set_requires_grad(true);
  auto loss = sum_all(x);
  backward(loss);
  for (auto g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  auto loss2 = sum_all(mul(x, x));
  backward(loss2);
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]));

  CHECK_THROWS_AS(backward(loss2), std::runtime_error);  // no re-forward
  CHECK_THROWS_AS(backward(x), std::invalid_argument);   // non-scalar loss
}

TEST_CASE("linear: values, bias, gradcheck at 1e-7") {
  auto x = randn<double>({4, 3}, 29);
  auto w = randn<double>({3, 2}, 30);
  auto b = randn<double>({2}, 31);
  auto y = linear(x, w, b);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j) {
      double expect = b.data()[j];
      for (int k = 0; k < 3; ++k) expect += x.data()[i * 3 + k] * w.data()[k * 2 + j];
      CHECK(y.data()[i * 2 + j] == doctest::Approx(expect).epsilon(1e-12));
    }
  double err = finite_diff_check<double>([&] { return sum_all(linear(x, w, b)); }, {x, w, b});
  CHECK(err < 1e-7);
}

TEST_CASE("bmm, permute, reshape: roundtrip and gradcheck") {
  auto a = randn<double>({2, 3, 4}, 32);
  auto b = randn<double>({2, 4, 5}, 33);
  auto y = bmm(a, b);
  CHECK(y.shape() == Shape{2, 3, 5});
  // consistency with per-batch matmul
  for (int i = 0; i < 2; ++i) {
    auto ai = Tensor<double>::from({3, 4}, std::vector<double>(a.data().begin() + i * 12, a.data().begin() + (i + 1) * 12));
    auto bi = Tensor<double>::from({4, 5}, std::vector<double>(b.data().begin() + i * 20, b.data().begin() + (i + 1) * 20));
    auto yi = matmul(ai, bi);
    for (int k = 0; k < 15; ++k) CHECK(y.data()[i * 15 + k] == doctest::Approx(yi.data()[k]).epsilon(1e-12));
  }
  double err = finite_diff_check<double>(
      [&] {
        auto z = bmm(a, b);
        return sum_all(mul(z, z));
      },
      {a, b});
  CHECK(err < 1e-6);

  auto x = randn<double>({2, 3, 4, 5}, 34);
  auto p = permute(x, {0, 2, 3, 1});
  CHECK(p.shape() == Shape{2, 4, 5, 3});
  auto back = permute(p, {0, 3, 1, 2});
  CHECK(back.data() == x.data());
  double perr = finite_diff_check<double>(
      [&] {
        auto t = reshape(permute(x, {0, 2, 3, 1}), {2, 20, 3});
        return sum_all(mul(t, t));
      },
      {x});
  CHECK(perr < 1e-7);
}

TEST_CASE("token/nchw views roundtrip") {
  auto x = randn<double>({2, 3, 4, 4}, 35);
  auto tok = nchw_to_tokens(x);
  CHECK(tok.shape() == Shape{2, 16, 3});
  auto back = tokens_to_nchw(tok, 4, 4);
  CHECK(back.data() == x.data());
}

TEST_CASE("channel slice/concat: inverse pair and gradcheck") {
  auto x = randn<double>({2, 6, 3, 3}, 36);
  auto a = slice_channels(x, int64_t(0), int64_t(2));
  auto b = slice_channels(x, int64_t(2), int64_t(6));
  auto back = concat_channels(std::vector<Tensor<double>>{a, b});
  CHECK(back.data() == x.data());
  double err = finite_diff_check<double>(
      [&] {
        auto u = slice_channels(x, int64_t(1), int64_t(4));
        auto v = slice_channels(x, int64_t(4), int64_t(6));
        auto w = concat_channels(std::vector<Tensor<double>>{u, v});
        return sum_all(mul(w, w));
      },
      {x});
  CHECK(err < 1e-7);
}

TEST_CASE("reflect pad + crop: values and gradcheck") {
  auto x = Tensor<double>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto p = pad_reflect_br(x, 1, 1);
  CHECK(p.shape() == Shape{1, 1, 4, 4});
  CHECK(p.data()[3] == 2.0);          // row 0 col 3 reflects col 1
  CHECK(p.data()[12 + 0] == 4.0);     // row 3 reflects row 1
  CHECK(p.data()[12 + 3] == 5.0);     // corner reflects (1,1)
  auto c = crop_br(p, 3, 3);
  CHECK(c.data() == x.data());

  auto xr = randn<double>({1, 2, 3, 3}, 37);
  double err = finite_diff_check<double>(
      [&] {
        auto y = crop_br(pad_reflect_br(xr, 1, 1), 3, 3);
        return sum_all(mul(y, y));
      },
      {xr});
  CHECK(err < 1e-7);
}

TEST_CASE("global_avg_pool and cross_entropy") {
  auto c = Tensor<double>::full({2, 3, 4, 4}, 1.25);
  auto pooled = global_avg_pool(c);
  for (auto v : pooled.data()) CHECK(v == doctest::Approx(1.25));

  // uniform logits -> ln K
  auto logits = Tensor<double>::zeros({2, 10});
  auto loss = cross_entropy(logits, std::vector<int>{3, 7}, 0.0);
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-9));

  // huge correct margin -> loss ~ 0
  auto sharp = Tensor<double>::zeros({1, 4});
  sharp.data()[2] = 100.0;
  CHECK(cross_entropy(sharp, std::vector<int>{2}, 0.0).item() < 1e-6);

  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{3, 11}, 0.0), std::invalid_argument);

  auto lr = randn<double>({4, 6}, 38);
  double err = finite_diff_check<double>([&] { return cross_entropy(lr, std::vector<int>{0, 2, 4, 5}, 0.1); }, {lr});
  CHECK(err < 1e-5);
}

TEST_CASE("forward passes are bit-deterministic") {
  auto x = randn<double>({2, 3, 8, 8}, 39);
  auto w = randn<double>({4, 3, 3, 3}, 40);
  auto y1 = conv2d(x, w, Tensor<double>(), 1, 1);
  auto y2 = conv2d(x, w, Tensor<double>(), 1, 1);
  CHECK(y1.data() == y2.data());
  auto s1 = softmax_lastdim(nchw_to_tokens(y1));
  auto s2 = softmax_lastdim(nchw_to_tokens(y2));
  CHECK(s1.data() == s2.data());
}

TEST_CASE("no-grad mode records no tape") {
  auto x = randn<double>({4}, 41);
  x.set_requires_grad(true);
  NoGradGuard ng;
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("MAC counter: matmul and attention scope attribution") {
  auto& mc = MacCounter::get();
  mc.enabled = true;
  mc.reset();
  auto a = Tensor<double>::zeros({3, 4});
  auto b = Tensor<double>::zeros({4, 5});
  matmul(a, b);
  CHECK(mc.total == 60);
  CHECK(mc.attention == 0);
  {
    AttentionMacScope scope;
    matmul(a, b);
  }
  CHECK(mc.total == 120);
  CHECK(mc.attention == 60);
  mc.enabled = false;
}
