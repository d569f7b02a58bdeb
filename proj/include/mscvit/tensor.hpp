#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Tensors are shared handles onto an impl node; applying an op records the
// node's parents and a backward closure on the output. backward() on a scalar
// loss walks the tape in reverse topological order and accumulates gradients
// into every requires_grad leaf.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace mscvit {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
  os << ")";
  return os.str();
}

// Thread-local switch: with grad disabled no tape is recorded.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
};

// Multiply-accumulate counter, used by the FLOP-estimation oracle tests.
struct MacCounter {
  static MacCounter& get() {
    thread_local MacCounter c;
    return c;
  }
  bool enabled = false;
  bool in_attention = false;
  uint64_t total = 0;
  uint64_t attention = 0;
  static void add(uint64_t n) {
    auto& c = get();
    if (!c.enabled) return;
    c.total += n;
    if (c.in_attention) c.attention += n;
  }
  void reset() { total = attention = 0; }
};

struct AttentionMacScope {
  bool prev;
  AttentionMacScope() : prev(MacCounter::get().in_attention) { MacCounter::get().in_attention = true; }
  ~AttentionMacScope() { MacCounter::get().in_attention = prev; }
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until needed
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;
  Tensor() : impl_(nullptr) {}
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) {
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data.assign(shape_numel(impl->shape), T(0));
    return Tensor(impl);
  }
  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }
  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " needs " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(impl);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t rank() const { return impl_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  std::vector<T>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<T>& grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  T item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  std::shared_ptr<Impl> impl_;
};

namespace detail {

template <typename T>
inline bool any_requires(const Tensor<T>& t) {
  return t.requires_grad();
}
template <typename T, typename... Rest>
inline bool any_requires(const Tensor<T>& t, const Rest&... rest) {
  return t.requires_grad() || any_requires(rest...);
}

// Wire out as a graph node with the given parents and backward closure.
template <typename T, typename... Parents>
inline void attach(Tensor<T>& out, std::function<void(TensorImpl<T>&)> fn, const Parents&... parents) {
  if (!GradMode::enabled()) return;
  if (!any_requires(parents...)) return;
  out.impl_->requires_grad = true;
  out.impl_->is_leaf = false;
  (out.impl_->parents.push_back(parents.impl_), ...);
  out.impl_->backward_fn = std::move(fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto* root = loss.impl_.get();
  if (root->backward_done) throw std::runtime_error("backward: called twice on the same graph without re-running forward");
  root->backward_done = true;

  // Topological order (children before parents) via iterative DFS.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  struct Frame {
    TensorImpl<T>* node;
    size_t next;
  };
  std::vector<Frame> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      TensorImpl<T>* p = f.node->parents[f.next++].get();
      if (!p->is_leaf && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  // order is parents-first; traverse reversed so each node's grad is complete
  // before it pushes into its parents.
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([ai = a.impl_, bi = b.impl_](TensorImpl<T>& self) {
                   if (ai->requires_grad) {
                     ai->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
                   }
                   if (bi->requires_grad) {
                     bi->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
                   }
                 }),
                 a, b);
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([ai = a.impl_, bi = b.impl_](TensorImpl<T>& self) {
                   if (ai->requires_grad) {
                     ai->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->data[i];
                   }
                   if (bi->requires_grad) {
                     bi->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->data[i];
                   }
                 }),
                 a, b);
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([ai = a.impl_, s](TensorImpl<T>& self) {
                   if (!ai->requires_grad) return;
                   ai->ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * s;
                 }),
                 a);
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // Exact Gaussian-CDF form: x * Phi(x).
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (int64_t i = 0; i < n; ++i) {
    T v = x.data()[i];
    out.data()[i] = v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
  }
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   const T inv_sqrt2 = T(0.7071067811865475244);
                   const T inv_sqrt2pi = T(0.3989422804014326779);
                   for (size_t i = 0; i < self.grad.size(); ++i) {
                     T v = xi->data[i];
                     T phi = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                     T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                     xi->grad[i] += self.grad[i] * (phi + v * pdf);
                   }
                 }),
                 x);
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = 0;
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += self.grad[0];
                 }),
                 x);
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), x.data());
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
                 }),
                 x);
  return out;
}

namespace detail {
inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}
}  // namespace detail

// Permute of up to rank-5 tensors; perm maps output axis -> input axis.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) throw std::invalid_argument("permute: rank mismatch");
  Shape oshape(in.size());
  for (size_t i = 0; i < perm.size(); ++i) oshape[i] = in[perm[i]];
  Tensor<T> out = Tensor<T>::zeros(oshape);
  auto ist = detail::strides_of(in);
  auto ost = detail::strides_of(oshape);
  const int64_t n = x.numel();
  const int r = static_cast<int>(in.size());
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, ii = 0;
    for (int a = 0; a < r; ++a) {
      int64_t idx = rem / ost[a];
      rem %= ost[a];
      ii += idx * ist[perm[a]];
    }
    out.data()[o] = x.data()[ii];
  }
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_, perm, ist, ost, r](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   const int64_t n = static_cast<int64_t>(self.grad.size());
                   for (int64_t o = 0; o < n; ++o) {
                     int64_t rem = o, ii = 0;
                     for (int a = 0; a < r; ++a) {
                       int64_t idx = rem / ost[a];
                       rem %= ost[a];
                       ii += idx * ist[perm[a]];
                     }
                     xi->grad[ii] += self.grad[o];
                   }
                 }),
                 x);
  return out;
}

// (B,C,H,W) -> (B, H*W, C)
template <typename T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("nchw_to_tokens: expected rank-4, got " + shape_str(x.shape()));
  Tensor<T> p = permute(x, {0, 2, 3, 1});
  return reshape(p, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

// (B, H*W, C) -> (B,C,H,W)
template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& x, int64_t h, int64_t w) {
  if (x.rank() != 3 || x.dim(1) != h * w)
    throw std::invalid_argument("tokens_to_nchw: bad shape " + shape_str(x.shape()));
  Tensor<T> r = reshape(x, {x.dim(0), h, w, x.dim(2)});
  return permute(r, {0, 3, 1, 2});
}

// Channel slice of an NCHW map: channels [c0, c1).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1) {
  if (x.rank() != 4 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") for " + shape_str(x.shape()));
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), Cs = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({B, Cs, x.dim(2), x.dim(3)});
  for (int64_t b = 0; b < B; ++b)
    std::copy(x.data().begin() + (b * C + c0) * HW, x.data().begin() + (b * C + c1) * HW,
              out.data().begin() + b * Cs * HW);
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_, B, C, HW, c0, Cs](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   for (int64_t b = 0; b < B; ++b) {
                     T* dst = xi->grad.data() + (b * C + c0) * HW;
                     const T* src = self.grad.data() + b * Cs * HW;
                     for (int64_t i = 0; i < Cs * HW; ++i) dst[i] += src[i];
                   }
                 }),
                 x);
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input");
  const int64_t B = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int64_t C = 0;
  for (const auto& t : xs) {
    if (t.rank() != 4 || t.dim(0) != B || t.dim(2) != H || t.dim(3) != W)
      throw std::invalid_argument("concat_channels: incompatible shape " + shape_str(t.shape()));
    C += t.dim(1);
  }
  Tensor<T> out = Tensor<T>::zeros({B, C, H, W});
  const int64_t HW = H * W;
  int64_t off = 0;
  for (const auto& t : xs) {
    const int64_t Ct = t.dim(1);
    for (int64_t b = 0; b < B; ++b)
      std::copy(t.data().begin() + b * Ct * HW, t.data().begin() + (b + 1) * Ct * HW,
                out.data().begin() + (b * C + off) * HW);
    off += Ct;
  }
  bool need = false;
  for (const auto& t : xs) need = need || t.requires_grad();
  if (GradMode::enabled() && need) {
    out.impl_->requires_grad = true;
    out.impl_->is_leaf = false;
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    std::vector<int64_t> chans;
    for (const auto& t : xs) {
      out.impl_->parents.push_back(t.impl_);
      parents.push_back(t.impl_);
      chans.push_back(t.dim(1));
    }
    out.impl_->backward_fn = [parents, chans, B, C, HW](TensorImpl<T>& self) {
      int64_t off = 0;
      for (size_t k = 0; k < parents.size(); ++k) {
        const int64_t Ct = chans[k];
        if (parents[k]->requires_grad) {
          parents[k]->ensure_grad();
          for (int64_t b = 0; b < B; ++b) {
            const T* src = self.grad.data() + (b * C + off) * HW;
            T* dst = parents[k]->grad.data() + b * Ct * HW;
            for (int64_t i = 0; i < Ct * HW; ++i) dst[i] += src[i];
          }
        }
        off += Ct;
      }
    };
  }
  return out;
}

// Reflect padding on the bottom/right spatial edges of an NCHW map.
template <typename T>
Tensor<T> pad_reflect_br(const Tensor<T>& x, int64_t pb, int64_t pr) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (pb >= H || pr >= W) throw std::invalid_argument("pad_reflect_br: pad larger than input");
  const int64_t Ho = H + pb, Wo = W + pr;
  Tensor<T> out = Tensor<T>::zeros({B, C, Ho, Wo});
  auto src_h = [H](int64_t h) { return h < H ? h : 2 * H - 2 - h; };
  auto src_w = [W](int64_t w) { return w < W ? w : 2 * W - 2 - w; };
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t h = 0; h < Ho; ++h)
      for (int64_t w = 0; w < Wo; ++w)
        out.data()[(bc * Ho + h) * Wo + w] = x.data()[(bc * H + src_h(h)) * W + src_w(w)];
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_, B, C, H, W, Ho, Wo](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   auto src_h = [H](int64_t h) { return h < H ? h : 2 * H - 2 - h; };
                   auto src_w = [W](int64_t w) { return w < W ? w : 2 * W - 2 - w; };
                   for (int64_t bc = 0; bc < B * C; ++bc)
                     for (int64_t h = 0; h < Ho; ++h)
                       for (int64_t w = 0; w < Wo; ++w)
                         xi->grad[(bc * H + src_h(h)) * W + src_w(w)] += self.grad[(bc * Ho + h) * Wo + w];
                 }),
                 x);
  return out;
}

template <typename T>
Tensor<T> crop_br(const Tensor<T>& x, int64_t ho, int64_t wo) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (ho > H || wo > W) throw std::invalid_argument("crop_br: crop larger than input");
  Tensor<T> out = Tensor<T>::zeros({B, C, ho, wo});
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t h = 0; h < ho; ++h)
      std::copy(x.data().begin() + (bc * H + h) * W, x.data().begin() + (bc * H + h) * W + wo,
                out.data().begin() + (bc * ho + h) * wo);
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_, B, C, H, W, ho, wo](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   for (int64_t bc = 0; bc < B * C; ++bc)
                     for (int64_t h = 0; h < ho; ++h)
                       for (int64_t w = 0; w < wo; ++w)
                         xi->grad[(bc * H + h) * W + w] += self.grad[(bc * ho + h) * wo + w];
                 }),
                 x);
  return out;
}

// ---------------------------------------------------------------------------
// matmul / linear

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + p * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void mm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* b = B + j * k;
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void mm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < k; ++p) {
    T* c = C + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T av = A[i * k + p];
      const T* b = B + i * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::mm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  MacCounter::add(static_cast<uint64_t>(m) * k * n);
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([ai = a.impl_, bi = b.impl_, m, k, n](TensorImpl<T>& self) {
                   if (ai->requires_grad) {
                     ai->ensure_grad();
                     detail::mm_nt(self.grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
                   }
                   if (bi->requires_grad) {
                     bi->ensure_grad();
                     detail::mm_tn(ai->data.data(), self.grad.data(), bi->grad.data(), m, k, n);
                   }
                 }),
                 a, b);
  return out;
}

// Batched matmul on rank-3 tensors: (B,m,k) x (B,k,n) -> (B,m,n)
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out = Tensor<T>::zeros({B, m, n});
  for (int64_t i = 0; i < B; ++i)
    detail::mm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data().data() + i * m * n, m, k, n);
  MacCounter::add(static_cast<uint64_t>(B) * m * k * n);
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([ai = a.impl_, bi = b.impl_, B, m, k, n](TensorImpl<T>& self) {
                   if (ai->requires_grad) {
                     ai->ensure_grad();
                     for (int64_t i = 0; i < B; ++i)
                       detail::mm_nt(self.grad.data() + i * m * n, bi->data.data() + i * k * n,
                                     ai->grad.data() + i * m * k, m, n, k);
                   }
                   if (bi->requires_grad) {
                     bi->ensure_grad();
                     for (int64_t i = 0; i < B; ++i)
                       detail::mm_tn(ai->data.data() + i * m * k, self.grad.data() + i * m * n,
                                     bi->grad.data() + i * k * n, m, k, n);
                   }
                 }),
                 a, b);
  return out;
}

// x: (..., Cin) treated as (N, Cin); w: (Cin, Cout); bias: (Cout) optional.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0))
    throw std::invalid_argument("linear: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const int64_t cin = w.dim(0), cout = w.dim(1);
  const int64_t N = x.numel() / cin;
  Shape oshape = x.shape();
  oshape.back() = cout;
  Tensor<T> out = Tensor<T>::zeros(oshape);
  detail::mm_nn(x.data().data(), w.data().data(), out.data().data(), N, cin, cout);
  MacCounter::add(static_cast<uint64_t>(N) * cin * cout);
  if (bias.defined()) {
    if (bias.numel() != cout) throw std::invalid_argument("linear: bias size mismatch");
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < cout; ++j) out.data()[i * cout + j] += bias.data()[j];
  }
  auto fn = std::function<void(TensorImpl<T>&)>(
      [xi = x.impl_, wi = w.impl_, bi = bias.defined() ? bias.impl_ : nullptr, N, cin, cout](TensorImpl<T>& self) {
        if (xi->requires_grad) {
          xi->ensure_grad();
          detail::mm_nt(self.grad.data(), wi->data.data(), xi->grad.data(), N, cout, cin);
        }
        if (wi->requires_grad) {
          wi->ensure_grad();
          detail::mm_tn(xi->data.data(), self.grad.data(), wi->grad.data(), N, cin, cout);
        }
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          for (int64_t i = 0; i < N; ++i)
            for (int64_t j = 0; j < cout; ++j) bi->grad[j] += self.grad[i * cout + j];
        }
      });
  if (bias.defined())
    detail::attach(out, std::move(fn), x, w, bias);
  else
    detail::attach(out, std::move(fn), x, w);
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return linear(x, w, Tensor<T>());
}

// ---------------------------------------------------------------------------
// convolutions (NCHW, cross-correlation)

namespace detail {
inline int64_t conv_out(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}
}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride, int64_t pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expected rank-4 input and weight");
  const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin)
    throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(Cin) + ", weight expects " +
                                std::to_string(w.dim(1)));
  if (kh < 1 || kw < 1 || stride < 1) throw std::invalid_argument("conv2d: bad kernel/stride");
  const int64_t Ho = detail::conv_out(H, kh, stride, pad), Wo = detail::conv_out(W, kw, stride, pad);
  if (Ho <= 0 || Wo <= 0)
    throw std::invalid_argument("conv2d: non-positive output size for input " + shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros({B, Cout, Ho, Wo});
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  T* op = out.data().data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co) {
      T* o = op + (b * Cout + co) * Ho * Wo;
      const T bv = bias.defined() ? bias.data()[co] : T(0);
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          T acc = bv;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const T* xc = xp + (b * Cin + ci) * H * W;
            const T* wc = wp + (co * Cin + ci) * kh * kw;
            for (int64_t r = 0; r < kh; ++r) {
              const int64_t ih = oh * stride - pad + r;
              if (ih < 0 || ih >= H) continue;
              for (int64_t c = 0; c < kw; ++c) {
                const int64_t iw = ow * stride - pad + c;
                if (iw < 0 || iw >= W) continue;
                acc += xc[ih * W + iw] * wc[r * kw + c];
              }
            }
          }
          o[oh * Wo + ow] = acc;
        }
    }
  MacCounter::add(static_cast<uint64_t>(B) * Cout * Ho * Wo * Cin * kh * kw);
  auto fn = std::function<void(TensorImpl<T>&)>(
      [xi = x.impl_, wi = w.impl_, bi = bias.defined() ? bias.impl_ : nullptr, B, Cin, H, W, Cout, kh, kw, stride,
       pad, Ho, Wo](TensorImpl<T>& self) {
        const T* g = self.grad.data();
        if (xi->requires_grad) {
          xi->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
          for (int64_t b = 0; b < B; ++b)
            for (int64_t ci = 0; ci < Cin; ++ci) {
              T* dx = xi->grad.data() + (b * Cin + ci) * H * W;
              for (int64_t co = 0; co < Cout; ++co) {
                const T* gc = g + (b * Cout + co) * Ho * Wo;
                const T* wc = wi->data.data() + (co * Cin + ci) * kh * kw;
                for (int64_t oh = 0; oh < Ho; ++oh)
                  for (int64_t ow = 0; ow < Wo; ++ow) {
                    const T gv = gc[oh * Wo + ow];
                    if (gv == T(0)) continue;
                    for (int64_t r = 0; r < kh; ++r) {
                      const int64_t ih = oh * stride - pad + r;
                      if (ih < 0 || ih >= H) continue;
                      for (int64_t c = 0; c < kw; ++c) {
                        const int64_t iw = ow * stride - pad + c;
                        if (iw < 0 || iw >= W) continue;
                        dx[ih * W + iw] += gv * wc[r * kw + c];
                      }
                    }
                  }
              }
            }
        }
        if (wi->requires_grad) {
          wi->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
          for (int64_t co = 0; co < Cout; ++co)
            for (int64_t ci = 0; ci < Cin; ++ci) {
              T* dw = wi->grad.data() + (co * Cin + ci) * kh * kw;
              for (int64_t b = 0; b < B; ++b) {
                const T* gc = g + (b * Cout + co) * Ho * Wo;
                const T* xc = xi->data.data() + (b * Cin + ci) * H * W;
                for (int64_t oh = 0; oh < Ho; ++oh)
                  for (int64_t ow = 0; ow < Wo; ++ow) {
                    const T gv = gc[oh * Wo + ow];
                    if (gv == T(0)) continue;
                    for (int64_t r = 0; r < kh; ++r) {
                      const int64_t ih = oh * stride - pad + r;
                      if (ih < 0 || ih >= H) continue;
                      for (int64_t c = 0; c < kw; ++c) {
                        const int64_t iw = ow * stride - pad + c;
                        if (iw < 0 || iw >= W) continue;
                        dw[r * kw + c] += gv * xc[ih * W + iw];
                      }
                    }
                  }
              }
            }
        }
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          for (int64_t b = 0; b < B; ++b)
            for (int64_t co = 0; co < Cout; ++co) {
              const T* gc = g + (b * Cout + co) * Ho * Wo;
              T acc = 0;
              for (int64_t i = 0; i < Ho * Wo; ++i) acc += gc[i];
              bi->grad[co] += acc;
            }
        }
      });
  if (bias.defined())
    detail::attach(out, std::move(fn), x, w, bias);
  else
    detail::attach(out, std::move(fn), x, w);
  return out;
}

// Depthwise conv: w is (C,1,kh,kw); channel i sees only filter i.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride,
                           int64_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != 1)
    throw std::invalid_argument("depthwise_conv2d: weight must be (C,1,kh,kw)");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != C)
    throw std::invalid_argument("depthwise_conv2d: channel mismatch, input has " + std::to_string(C) +
                                " channels, weight has " + std::to_string(w.dim(0)));
  const int64_t Ho = detail::conv_out(H, kh, stride, pad), Wo = detail::conv_out(W, kw, stride, pad);
  if (Ho <= 0 || Wo <= 0)
    throw std::invalid_argument("depthwise_conv2d: non-positive output size for input " + shape_str(x.shape()));
  Tensor<T> out = Tensor<T>::zeros({B, C, Ho, Wo});
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ch = 0; ch < C; ++ch) {
      const T* xc = x.data().data() + (b * C + ch) * H * W;
      const T* wc = w.data().data() + ch * kh * kw;
      T* o = out.data().data() + (b * C + ch) * Ho * Wo;
      const T bv = bias.defined() ? bias.data()[ch] : T(0);
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          T acc = bv;
          for (int64_t r = 0; r < kh; ++r) {
            const int64_t ih = oh * stride - pad + r;
            if (ih < 0 || ih >= H) continue;
            for (int64_t c = 0; c < kw; ++c) {
              const int64_t iw = ow * stride - pad + c;
              if (iw < 0 || iw >= W) continue;
              acc += xc[ih * W + iw] * wc[r * kw + c];
            }
          }
          o[oh * Wo + ow] = acc;
        }
    }
  MacCounter::add(static_cast<uint64_t>(B) * C * Ho * Wo * kh * kw);
  auto fn = std::function<void(TensorImpl<T>&)>(
      [xi = x.impl_, wi = w.impl_, bi = bias.defined() ? bias.impl_ : nullptr, B, C, H, W, kh, kw, stride, pad, Ho,
       Wo](TensorImpl<T>& self) {
        const T* g = self.grad.data();
        if (xi->requires_grad) xi->ensure_grad();
        if (wi->requires_grad) wi->ensure_grad();
        if (bi && bi->requires_grad) bi->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int64_t ch = 0; ch < C; ++ch) {
          const T* wc = wi->data.data() + ch * kh * kw;
          for (int64_t b = 0; b < B; ++b) {
            const T* gc = g + (b * C + ch) * Ho * Wo;
            const T* xc = xi->data.data() + (b * C + ch) * H * W;
            T* dx = xi->requires_grad ? xi->grad.data() + (b * C + ch) * H * W : nullptr;
            T* dw = wi->requires_grad ? wi->grad.data() + ch * kh * kw : nullptr;
            T bacc = 0;
            for (int64_t oh = 0; oh < Ho; ++oh)
              for (int64_t ow = 0; ow < Wo; ++ow) {
                const T gv = gc[oh * Wo + ow];
                bacc += gv;
                if (gv == T(0)) continue;
                for (int64_t r = 0; r < kh; ++r) {
                  const int64_t ih = oh * stride - pad + r;
                  if (ih < 0 || ih >= H) continue;
                  for (int64_t c = 0; c < kw; ++c) {
                    const int64_t iw = ow * stride - pad + c;
                    if (iw < 0 || iw >= W) continue;
                    if (dx) dx[ih * W + iw] += gv * wc[r * kw + c];
                    if (dw) dw[r * kw + c] += gv * xc[ih * W + iw];
                  }
                }
              }
            if (bi && bi->requires_grad) bi->grad[ch] += bacc;
          }
        }
      });
  if (bias.defined())
    detail::attach(out, std::move(fn), x, w, bias);
  else
    detail::attach(out, std::move(fn), x, w);
  return out;
}

// ---------------------------------------------------------------------------
// normalization

// Batch norm over (B,H,W) per channel. Running stats live outside the graph.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var, bool training, T momentum = T(0.1),
                      T eps = T(1e-5)) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || static_cast<int64_t>(running_mean.size()) != C ||
      static_cast<int64_t>(running_var.size()) != C)
    throw std::invalid_argument("batchnorm2d: affine/stat size mismatch for C=" + std::to_string(C));
  const int64_t N = B * H * W;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> mean(C), invstd(C);
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      T m = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* xc = x.data().data() + (b * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) m += xc[i];
      }
      m /= T(N);
      T v = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* xc = x.data().data() + (b * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          T d = xc[i] - m;
          v += d * d;
        }
      }
      v /= T(N);
      mean[c] = m;
      invstd[c] = T(1) / std::sqrt(v + eps);
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
      const T unbiased = N > 1 ? v * T(N) / T(N - 1) : v;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T* xc = x.data().data() + (b * C + c) * H * W;
      T* oc = out.data().data() + (b * C + c) * H * W;
      const T g = gamma.data()[c], bt = beta.data()[c], m = mean[c], is = invstd[c];
      for (int64_t i = 0; i < H * W; ++i) oc[i] = (xc[i] - m) * is * g + bt;
    }
  detail::attach(
      out,
      std::function<void(TensorImpl<T>&)>([xi = x.impl_, gi = gamma.impl_, bi = beta.impl_, mean, invstd, B, C, H, W,
                                           N, training](TensorImpl<T>& self) {
        const T* g = self.grad.data();
        for (int64_t c = 0; c < C; ++c) {
          const T m = mean[c], is = invstd[c], gm = gi->data[c];
          T sum_g = 0, sum_gx = 0;
          for (int64_t b = 0; b < B; ++b) {
            const T* gc = g + (b * C + c) * H * W;
            const T* xc = xi->data.data() + (b * C + c) * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
              sum_g += gc[i];
              sum_gx += gc[i] * (xc[i] - m) * is;
            }
          }
          if (gi->requires_grad) {
            gi->ensure_grad();
            gi->grad[c] += sum_gx;
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            bi->grad[c] += sum_g;
          }
          if (xi->requires_grad) {
            xi->ensure_grad();
            for (int64_t b = 0; b < B; ++b) {
              const T* gc = g + (b * C + c) * H * W;
              const T* xc = xi->data.data() + (b * C + c) * H * W;
              T* dx = xi->grad.data() + (b * C + c) * H * W;
              if (training) {
                for (int64_t i = 0; i < H * W; ++i) {
                  const T xh = (xc[i] - m) * is;
                  dx[i] += gm * is * (gc[i] - sum_g / T(N) - xh * sum_gx / T(N));
                }
              } else {
                for (int64_t i = 0; i < H * W; ++i) dx[i] += gm * is * gc[i];
              }
            }
          }
        }
      }),
      x, gamma, beta);
  return out;
}

// Layer norm over the last axis; gamma/beta have that axis' extent.
template <typename T>
Tensor<T> layernorm_lastdim(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
  const int64_t C = x.dim(x.rank() - 1);
  if (gamma.numel() != C || beta.numel() != C)
    throw std::invalid_argument("layernorm: affine size mismatch for C=" + std::to_string(C));
  const int64_t N = x.numel() / C;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> means(N), invstds(N);
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < N; ++i) {
    const T* xr = x.data().data() + i * C;
    T m = 0;
    for (int64_t j = 0; j < C; ++j) m += xr[j];
    m /= T(C);
    T v = 0;
    for (int64_t j = 0; j < C; ++j) {
      T d = xr[j] - m;
      v += d * d;
    }
    v /= T(C);
    const T is = T(1) / std::sqrt(v + eps);
    means[i] = m;
    invstds[i] = is;
    T* orow = out.data().data() + i * C;
    for (int64_t j = 0; j < C; ++j) orow[j] = (xr[j] - m) * is * gamma.data()[j] + beta.data()[j];
  }
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_, gi = gamma.impl_, bi = beta.impl_, means, invstds,
                                                      N, C](TensorImpl<T>& self) {
                   if (gi->requires_grad) gi->ensure_grad();
                   if (bi->requires_grad) bi->ensure_grad();
                   if (xi->requires_grad) xi->ensure_grad();
                   for (int64_t i = 0; i < N; ++i) {
                     const T* gr = self.grad.data() + i * C;
                     const T* xr = xi->data.data() + i * C;
                     const T m = means[i], is = invstds[i];
                     T sum_g = 0, sum_gx = 0;
                     for (int64_t j = 0; j < C; ++j) {
                       const T xh = (xr[j] - m) * is;
                       const T gg = gr[j] * gi->data[j];
                       sum_g += gg;
                       sum_gx += gg * xh;
                       if (gi->requires_grad) gi->grad[j] += gr[j] * xh;
                       if (bi->requires_grad) bi->grad[j] += gr[j];
                     }
                     if (xi->requires_grad) {
                       T* dx = xi->grad.data() + i * C;
                       for (int64_t j = 0; j < C; ++j) {
                         const T xh = (xr[j] - m) * is;
                         const T gg = gr[j] * gi->data[j];
                         dx[j] += is * (gg - sum_g / T(C) - xh * sum_gx / T(C));
                       }
                     }
                   }
                 }),
                 x, gamma, beta);
  return out;
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const int64_t C = x.dim(x.rank() - 1);
  const int64_t N = x.numel() / C;
  for (T v : x.data())
    if (std::isnan(v)) throw std::invalid_argument("softmax: NaN input");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < N; ++i) {
    const T* xr = x.data().data() + i * C;
    T* orow = out.data().data() + i * C;
    T mx = xr[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, xr[j]);
    T s = 0;
    for (int64_t j = 0; j < C; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      s += orow[j];
    }
    const T inv = T(1) / s;
    for (int64_t j = 0; j < C; ++j) orow[j] *= inv;
  }
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_, N, C](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   for (int64_t i = 0; i < N; ++i) {
                     const T* y = self.data.data() + i * C;
                     const T* g = self.grad.data() + i * C;
                     T dot = 0;
                     for (int64_t j = 0; j < C; ++j) dot += g[j] * y[j];
                     T* dx = xi->grad.data() + i * C;
                     for (int64_t j = 0; j < C; ++j) dx[j] += y[j] * (g[j] - dot);
                   }
                 }),
                 x);
  return out;
}

// ---------------------------------------------------------------------------
// pooling / loss

// (B,C,H,W) -> (B,C) spatial mean
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({B, C});
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* xc = x.data().data() + bc * HW;
    T acc = 0;
    for (int64_t i = 0; i < HW; ++i) acc += xc[i];
    out.data()[bc] = acc / T(HW);
  }
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([xi = x.impl_, B, C, HW](TensorImpl<T>& self) {
                   if (!xi->requires_grad) return;
                   xi->ensure_grad();
                   for (int64_t bc = 0; bc < B * C; ++bc) {
                     const T g = self.grad[bc] / T(HW);
                     T* dx = xi->grad.data() + bc * HW;
                     for (int64_t i = 0; i < HW; ++i) dx[i] += g;
                   }
                 }),
                 x);
  return out;
}

// Mean cross entropy with optional label smoothing; logits (B,K).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, T smoothing = T(0)) {
  const int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B) throw std::invalid_argument("cross_entropy: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= K) throw std::invalid_argument("cross_entropy: invalid label " + std::to_string(l));
  Tensor<T> out = Tensor<T>::zeros({1});
  std::vector<T> logp(B * K);
  T loss = 0;
  for (int64_t b = 0; b < B; ++b) {
    const T* lr = logits.data().data() + b * K;
    T mx = lr[0];
    for (int64_t j = 1; j < K; ++j) mx = std::max(mx, lr[j]);
    T s = 0;
    for (int64_t j = 0; j < K; ++j) s += std::exp(lr[j] - mx);
    const T lse = mx + std::log(s);
    T row = 0;
    for (int64_t j = 0; j < K; ++j) {
      logp[b * K + j] = lr[j] - lse;
      const T target = (j == labels[b] ? T(1) - smoothing : T(0)) + smoothing / T(K);
      row -= target * logp[b * K + j];
    }
    loss += row;
  }
  out.data()[0] = loss / T(B);
  detail::attach(out,
                 std::function<void(TensorImpl<T>&)>([li = logits.impl_, labels, logp, B, K,
                                                      smoothing](TensorImpl<T>& self) {
                   if (!li->requires_grad) return;
                   li->ensure_grad();
                   const T g = self.grad[0] / T(B);
                   for (int64_t b = 0; b < B; ++b)
                     for (int64_t j = 0; j < K; ++j) {
                       const T p = std::exp(logp[b * K + j]);
                       const T target = (j == labels[b] ? T(1) - smoothing : T(0)) + smoothing / T(K);
                       li->grad[b * K + j] += g * (p - target);
                     }
                 }),
                 logits);
  return out;
}

}  // namespace mscvit
