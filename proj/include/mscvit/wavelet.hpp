#pragma once

// Single-level 2D Haar wavelet transform (orthonormal scaling), its inverse,
// and the wavelet-domain depthwise convolution used by the feature-fusion
// block's convolution path.

#include "mscvit/tensor.hpp"

namespace mscvit {

template <typename T>
struct WaveletBands {
  Tensor<T> ll, lh, hl, hh;
};

// Per non-overlapping 2x2 block [[a,b],[c,d]]:
//   ll=(a+b+c+d)/2  lh=(a-b+c-d)/2  hl=(a+b-c-d)/2  hh=(a-b-c+d)/2
// Orthonormal: energy is preserved, and the backward pass of the forward
// transform is exactly the inverse transform applied to the band gradients.
template <typename T>
WaveletBands<T> haar_dwt2d(const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("haar_dwt2d: expected rank-4 input");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2 || H % 2 || W % 2)
    throw std::invalid_argument("haar_dwt2d: spatial size must be even and positive, got " + shape_str(x.shape()));
  const int64_t Hh = H / 2, Wh = W / 2;
  WaveletBands<T> out{Tensor<T>::zeros({B, C, Hh, Wh}), Tensor<T>::zeros({B, C, Hh, Wh}),
                      Tensor<T>::zeros({B, C, Hh, Wh}), Tensor<T>::zeros({B, C, Hh, Wh})};
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* xc = x.data().data() + bc * H * W;
    T* pll = out.ll.data().data() + bc * Hh * Wh;
    T* plh = out.lh.data().data() + bc * Hh * Wh;
    T* phl = out.hl.data().data() + bc * Hh * Wh;
    T* phh = out.hh.data().data() + bc * Hh * Wh;
    for (int64_t i = 0; i < Hh; ++i)
      for (int64_t j = 0; j < Wh; ++j) {
        const T a = xc[(2 * i) * W + 2 * j], b = xc[(2 * i) * W + 2 * j + 1];
        const T c = xc[(2 * i + 1) * W + 2 * j], d = xc[(2 * i + 1) * W + 2 * j + 1];
        pll[i * Wh + j] = (a + b + c + d) * T(0.5);
        plh[i * Wh + j] = (a - b + c - d) * T(0.5);
        phl[i * Wh + j] = (a + b - c - d) * T(0.5);
        phh[i * Wh + j] = (a - b - c + d) * T(0.5);
      }
  }
  auto attach_band = [&](Tensor<T>& band, int which) {
    detail::attach(band,
                   std::function<void(TensorImpl<T>&)>([xi = x.impl_, B, C, H, W, Hh, Wh, which](TensorImpl<T>& self) {
                     if (!xi->requires_grad) return;
                     xi->ensure_grad();
                     // Transposed transform: each band coefficient feeds its
                     // 2x2 source block with the matching signs.
                     static const T sgn[4][4] = {{1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1}, {1, -1, -1, 1}};
                     const T* s = sgn[which];
                     for (int64_t bc = 0; bc < B * C; ++bc) {
                       const T* g = self.grad.data() + bc * Hh * Wh;
                       T* dx = xi->grad.data() + bc * H * W;
                       for (int64_t i = 0; i < Hh; ++i)
                         for (int64_t j = 0; j < Wh; ++j) {
                           const T gv = g[i * Wh + j] * T(0.5);
                           dx[(2 * i) * W + 2 * j] += gv * s[0];
                           dx[(2 * i) * W + 2 * j + 1] += gv * s[1];
                           dx[(2 * i + 1) * W + 2 * j] += gv * s[2];
                           dx[(2 * i + 1) * W + 2 * j + 1] += gv * s[3];
                         }
                     }
                   }),
                   x);
  };
  attach_band(out.ll, 0);
  attach_band(out.lh, 1);
  attach_band(out.hl, 2);
  attach_band(out.hh, 3);
  return out;
}

template <typename T>
Tensor<T> haar_idwt2d(const WaveletBands<T>& bands) {
  const Tensor<T>& ll = bands.ll;
  if (bands.lh.shape() != ll.shape() || bands.hl.shape() != ll.shape() || bands.hh.shape() != ll.shape())
    throw std::invalid_argument("haar_idwt2d: band shape mismatch");
  const int64_t B = ll.dim(0), C = ll.dim(1), Hh = ll.dim(2), Wh = ll.dim(3);
  const int64_t H = Hh * 2, W = Wh * 2;
  Tensor<T> out = Tensor<T>::zeros({B, C, H, W});
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* pll = ll.data().data() + bc * Hh * Wh;
    const T* plh = bands.lh.data().data() + bc * Hh * Wh;
    const T* phl = bands.hl.data().data() + bc * Hh * Wh;
    const T* phh = bands.hh.data().data() + bc * Hh * Wh;
    T* o = out.data().data() + bc * H * W;
    for (int64_t i = 0; i < Hh; ++i)
      for (int64_t j = 0; j < Wh; ++j) {
        const T vll = pll[i * Wh + j], vlh = plh[i * Wh + j];
        const T vhl = phl[i * Wh + j], vhh = phh[i * Wh + j];
        o[(2 * i) * W + 2 * j] = (vll + vlh + vhl + vhh) * T(0.5);
        o[(2 * i) * W + 2 * j + 1] = (vll - vlh + vhl - vhh) * T(0.5);
        o[(2 * i + 1) * W + 2 * j] = (vll + vlh - vhl - vhh) * T(0.5);
        o[(2 * i + 1) * W + 2 * j + 1] = (vll - vlh - vhl + vhh) * T(0.5);
      }
  }
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([lli = ll.impl_, lhi = bands.lh.impl_, hli = bands.hl.impl_,
                                                      hhi = bands.hh.impl_, B, C, H, W, Hh, Wh](TensorImpl<T>& self) {
                   TensorImpl<T>* bs[4] = {lli.get(), lhi.get(), hli.get(), hhi.get()};
                   static const T sgn[4][4] = {{1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1}, {1, -1, -1, 1}};
                   for (int k = 0; k < 4; ++k) {
                     if (!bs[k]->requires_grad) continue;
                     bs[k]->ensure_grad();
                     const T* s = sgn[k];
                     for (int64_t bc = 0; bc < B * C; ++bc) {
                       const T* g = self.grad.data() + bc * H * W;
                       T* db = bs[k]->grad.data() + bc * Hh * Wh;
                       for (int64_t i = 0; i < Hh; ++i)
                         for (int64_t j = 0; j < Wh; ++j)
                           db[i * Wh + j] += T(0.5) * (g[(2 * i) * W + 2 * j] * s[0] + g[(2 * i) * W + 2 * j + 1] * s[1] +
                                                       g[(2 * i + 1) * W + 2 * j] * s[2] +
                                                       g[(2 * i + 1) * W + 2 * j + 1] * s[3]);
                     }
                   }
                 }),
                 ll, bands.lh, bands.hl, bands.hh);
  return out;
}

// Wavelet-domain depthwise convolution: one 3x3 depthwise filter on the
// low-frequency band, one shared 3x3 depthwise filter on the three
// high-frequency bands, inverse transform, residual add. Output shape equals
// input shape; odd inputs are reflect-padded and cropped back.
template <typename T>
struct WTConvParams {
  Tensor<T> w_ll;    // (C,1,3,3)
  Tensor<T> b_ll;    // (C)
  Tensor<T> w_high;  // (C,1,3,3), shared across lh/hl/hh
  Tensor<T> b_high;  // (C)
};

template <typename T>
Tensor<T> wtconv(const Tensor<T>& x, const WTConvParams<T>& p) {
  if (x.dim(1) != p.w_ll.dim(0))
    throw std::invalid_argument("wtconv: channel mismatch, input has " + std::to_string(x.dim(1)) +
                                " channels, params expect " + std::to_string(p.w_ll.dim(0)));
  const int64_t H = x.dim(2), W = x.dim(3);
  Tensor<T> xin = x;
  if (H % 2 || W % 2) xin = pad_reflect_br(x, H % 2, W % 2);
  auto bands = haar_dwt2d(xin);
  WaveletBands<T> conv{
      depthwise_conv2d(bands.ll, p.w_ll, p.b_ll, 1, 1),
      depthwise_conv2d(bands.lh, p.w_high, p.b_high, 1, 1),
      depthwise_conv2d(bands.hl, p.w_high, p.b_high, 1, 1),
      depthwise_conv2d(bands.hh, p.w_high, p.b_high, 1, 1),
  };
  Tensor<T> rec = haar_idwt2d(conv);
  if (H % 2 || W % 2) rec = crop_br(rec, H, W);
  return add(rec, x);
}

}  // namespace mscvit
