#pragma once

// Network building blocks: local feature extraction, multi-scale reduced-K/V
// attention, the split conv/attention fusion block, FFN, the full transformer
// block, plus the convolutional stem and patch embeddings.

#include <optional>
#include <random>

#include "mscvit/tensor.hpp"
#include "mscvit/wavelet.hpp"

namespace mscvit {

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  bool no_decay;  // norm affines and biases are exempt from weight decay
};

template <typename T>
struct BufferRef {
  std::string name;
  std::vector<T>* data;  // non-trainable state (running statistics)
};

// Deterministic initializer: truncated normal (|z| <= 2 std), generated in
// double precision regardless of T so f32/f64 builds share the same stream.
struct Initializer {
  std::mt19937_64 rng;
  explicit Initializer(uint64_t seed) : rng(seed) {}

  template <typename T>
  void trunc_normal(Tensor<T>& t, double std_dev = 0.02) {
    std::normal_distribution<double> dist(0.0, std_dev);
    for (auto& v : t.data()) {
      double z;
      do {
        z = dist(rng);
      } while (std::abs(z) > 2.0 * std_dev);
      v = static_cast<T>(z);
    }
  }
};

// ---------------------------------------------------------------------------
// norms

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  std::vector<T> running_mean, running_var;

  void init(int64_t C) {
    gamma = Tensor<T>::full({C}, T(1));
    beta = Tensor<T>::zeros({C});
    running_mean.assign(C, T(0));
    running_var.assign(C, T(1));
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, training);
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".gamma", gamma, true});
    out.push_back({p + ".beta", beta, true});
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) {
    out.push_back({p + ".running_mean", &running_mean});
    out.push_back({p + ".running_var", &running_var});
  }
};

// Layer norm over the channel axis of token tensors (..., C).
template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  void init(int64_t C) {
    gamma = Tensor<T>::full({C}, T(1));
    beta = Tensor<T>::zeros({C});
  }
  Tensor<T> forward(const Tensor<T>& x) const { return layernorm_lastdim(x, gamma, beta); }
  // Channel norm of an NCHW map, via the token view.
  Tensor<T> forward_nchw(const Tensor<T>& x) const {
    return tokens_to_nchw(layernorm_lastdim(nchw_to_tokens(x), gamma, beta), x.dim(2), x.dim(3));
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".gamma", gamma, true});
    out.push_back({p + ".beta", beta, true});
  }
};

// ---------------------------------------------------------------------------
// local feature extraction: out = DWConv2(GELU(BN(DWConv1(x))) + x)

template <typename T>
struct LFE {
  Tensor<T> dw1_w, dw1_b;  // (C,1,3,3)
  BatchNorm2d<T> bn;
  Tensor<T> dw2_w, dw2_b;  // (C,1,1,1)

  void init(int64_t C, Initializer& ini) {
    dw1_w = Tensor<T>::zeros({C, 1, 3, 3});
    ini.trunc_normal(dw1_w);
    dw1_b = Tensor<T>::zeros({C});
    bn.init(C);
    dw2_w = Tensor<T>::zeros({C, 1, 1, 1});
    ini.trunc_normal(dw2_w);
    dw2_b = Tensor<T>::zeros({C});
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> inner = gelu(bn.forward(depthwise_conv2d(x, dw1_w, dw1_b, 1, 1), training));
    return depthwise_conv2d(add(inner, x), dw2_w, dw2_b, 1, 0);
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".dw1.w", dw1_w, false});
    out.push_back({p + ".dw1.b", dw1_b, true});
    bn.collect(p + ".bn", out);
    out.push_back({p + ".dw2.w", dw2_w, false});
    out.push_back({p + ".dw2.b", dw2_b, true});
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) { bn.collect_buffers(p + ".bn", out); }
};

// ---------------------------------------------------------------------------
// attention

// One head group: `dim` channels, `heads` heads, K/V token count reduced by
// the fusion coefficient R squared via a strided conv shared by K and V.
// The default (lightweight) reduction is depthwise; `normal` mode instead
// uses a full strided conv plus 1x1 channel-restoration convs on K and V.
template <typename T>
struct AttentionHeadGroup {
  int R = 1;
  int heads = 1;
  int64_t dim = 0;
  bool normal = false;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // (d,d) projections
  Tensor<T> red_w, red_b;                    // lightweight: (d,1,R,R); normal: (d,d,R,R)
  Tensor<T> rk_w, rk_b, rv_w, rv_b;          // normal mode 1x1 restorations

  void init(int R_, int heads_, int64_t d, bool normal_, Initializer& ini) {
    R = R_;
    heads = heads_;
    dim = d;
    normal = normal_;
    auto lin = [&](Tensor<T>& w, Tensor<T>& b) {
      w = Tensor<T>::zeros({d, d});
      ini.trunc_normal(w);
      b = Tensor<T>::zeros({d});
    };
    lin(wq, bq);
    lin(wk, bk);
    lin(wv, bv);
    lin(wo, bo);
    if (normal) {
      red_w = Tensor<T>::zeros({d, d, R, R});
      ini.trunc_normal(red_w);
      red_b = Tensor<T>::zeros({d});
      rk_w = Tensor<T>::zeros({d, d, 1, 1});
      ini.trunc_normal(rk_w);
      rk_b = Tensor<T>::zeros({d});
      rv_w = Tensor<T>::zeros({d, d, 1, 1});
      ini.trunc_normal(rv_w);
      rv_b = Tensor<T>::zeros({d});
    } else if (R > 1) {
      red_w = Tensor<T>::zeros({d, 1, R, R});
      ini.trunc_normal(red_w);
      red_b = Tensor<T>::zeros({d});
    }
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    auto lin = [&](const char* n, Tensor<T>& w, Tensor<T>& b) {
      out.push_back({p + "." + n + ".w", w, false});
      out.push_back({p + "." + n + ".b", b, true});
    };
    lin("q", wq, bq);
    lin("k", wk, bk);
    lin("v", wv, bv);
    lin("o", wo, bo);
    if (normal || R > 1) {
      out.push_back({p + ".reduce.w", red_w, false});
      out.push_back({p + ".reduce.b", red_b, true});
    }
    if (normal) {
      out.push_back({p + ".restore_k.w", rk_w, false});
      out.push_back({p + ".restore_k.b", rk_b, true});
      out.push_back({p + ".restore_v.w", rv_w, false});
      out.push_back({p + ".restore_v.b", rv_b, true});
    }
  }
};

// Strided fusion of a projected K or V map by factor R (identity for R=1).
template <typename T>
Tensor<T> spatial_reduce(const Tensor<T>& x, int R, const Tensor<T>& filter, const Tensor<T>& bias,
                         bool depthwise = true) {
  if (R < 1) throw std::invalid_argument("spatial_reduce: R must be >= 1");
  if (R == 1) return x;
  if (x.dim(2) < R || x.dim(3) < R)
    throw std::invalid_argument("spatial_reduce: R=" + std::to_string(R) + " exceeds spatial size of " +
                                shape_str(x.shape()));
  return depthwise ? depthwise_conv2d(x, filter, bias, R, 0) : conv2d(x, filter, bias, R, 0);
}

// Scaled-dot-product attention for one head: q (n,dk), k (m,dk), v (m,dv).
template <typename T>
Tensor<T> attention_head(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int64_t d_k) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
    throw std::invalid_argument("attention_head: incompatible shapes q" + shape_str(q.shape()) + " k" +
                                shape_str(k.shape()) + " v" + shape_str(v.shape()));
  Tensor<T> kt = permute(k, {1, 0});
  Tensor<T> scores = scale(matmul(q, kt), T(1) / std::sqrt(T(d_k)));
  return matmul(softmax_lastdim(scores), v);
}

template <typename T>
struct LMSSA {
  std::vector<AttentionHeadGroup<T>> groups;

  void init(const std::vector<int>& Rs, const std::vector<int64_t>& dims, const std::vector<int>& heads, bool normal,
            Initializer& ini) {
    groups.resize(Rs.size());
    for (size_t i = 0; i < Rs.size(); ++i) groups[i].init(Rs[i], heads[i], dims[i], normal, ini);
  }

  // x: NCHW attention-path feature map whose channels the groups partition.
  Tensor<T> forward(const Tensor<T>& x) {
    int64_t total = 0;
    for (auto& g : groups) total += g.dim;
    if (total != x.dim(1))
      throw std::invalid_argument("lmssa: head groups cover " + std::to_string(total) + " channels, input has " +
                                  std::to_string(x.dim(1)));
    AttentionMacScope mac_scope;
    const int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
    std::vector<Tensor<T>> outs;
    int64_t c0 = 0;
    for (auto& g : groups) {
      Tensor<T> xg = slice_channels(x, c0, c0 + g.dim);
      c0 += g.dim;
      Tensor<T> tok = nchw_to_tokens(xg);  // (B, n, d)
      Tensor<T> q = linear(tok, g.wq, g.bq);
      Tensor<T> kf = linear(tok, g.wk, g.bk);
      Tensor<T> vf = linear(tok, g.wv, g.bv);
      Tensor<T> ktok = kf, vtok = vf;
      int64_t hk = H, wk_ = W;
      if (g.R > 1 || g.normal) {
        Tensor<T> kmap = tokens_to_nchw(kf, H, W);
        Tensor<T> vmap = tokens_to_nchw(vf, H, W);
        Tensor<T> kr = g.normal ? conv2d(kmap, g.red_w, g.red_b, g.R, 0)
                                : spatial_reduce(kmap, g.R, g.red_w, g.red_b, true);
        Tensor<T> vr = g.normal ? conv2d(vmap, g.red_w, g.red_b, g.R, 0)
                                : spatial_reduce(vmap, g.R, g.red_w, g.red_b, true);
        if (g.normal) {
          kr = conv2d(kr, g.rk_w, g.rk_b, 1, 0);
          vr = conv2d(vr, g.rv_w, g.rv_b, 1, 0);
        }
        hk = kr.dim(2);
        wk_ = kr.dim(3);
        ktok = nchw_to_tokens(kr);
        vtok = nchw_to_tokens(vr);
      }
      const int64_t n = H * W, nk = hk * wk_, h = g.heads, dh = g.dim / h;
      auto split_heads = [&](const Tensor<T>& t, int64_t rows) {
        return reshape(permute(reshape(t, {B, rows, h, dh}), {0, 2, 1, 3}), {B * h, rows, dh});
      };
      Tensor<T> qh = split_heads(q, n);
      Tensor<T> kh = split_heads(ktok, nk);
      Tensor<T> vh = split_heads(vtok, nk);
      Tensor<T> scores = scale(bmm(qh, permute(kh, {0, 2, 1})), T(1) / std::sqrt(T(dh)));
      Tensor<T> att = bmm(softmax_lastdim(scores), vh);  // (B*h, n, dh)
      Tensor<T> merged = reshape(permute(reshape(att, {B, h, n, dh}), {0, 2, 1, 3}), {B, n, g.dim});
      Tensor<T> proj = linear(merged, g.wo, g.bo);
      outs.push_back(tokens_to_nchw(proj, H, W));
    }
    return concat_channels(outs);
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    for (size_t i = 0; i < groups.size(); ++i) groups[i].collect(p + ".g" + std::to_string(i), out);
  }
};

// ---------------------------------------------------------------------------
// conv/attention fusion block: first `conv_dim` channels go through
// GELU(Norm(Conv(WTConv(.)))), the rest through attention; concat conv-first.

template <typename T>
struct CFF {
  int64_t conv_dim = 0;  // 0 disables the conv path (all channels to attention)
  int64_t Ck = 3, pad = 1;
  WTConvParams<T> wt;
  Tensor<T> conv_w, conv_b;
  LayerNorm<T> norm;
  LMSSA<T> attn;

  void init(int64_t C, int64_t conv_dim_, int64_t Ck_, const std::vector<int>& Rs, const std::vector<int>& heads,
            bool normal, Initializer& ini) {
    conv_dim = conv_dim_;
    Ck = Ck_;
    pad = (Ck_ - 1) / 2;
    const int64_t Cc = conv_dim, Ca = C - conv_dim;
    if (Ca < 1) throw std::invalid_argument("cff: attention path would be empty");
    if (Cc > 0) {
      wt.w_ll = Tensor<T>::zeros({Cc, 1, 3, 3});
      ini.trunc_normal(wt.w_ll);
      wt.b_ll = Tensor<T>::zeros({Cc});
      wt.w_high = Tensor<T>::zeros({Cc, 1, 3, 3});
      ini.trunc_normal(wt.w_high);
      wt.b_high = Tensor<T>::zeros({Cc});
      conv_w = Tensor<T>::zeros({Cc, Cc, Ck, Ck});
      ini.trunc_normal(conv_w);
      conv_b = Tensor<T>::zeros({Cc});
      norm.init(Cc);
    }
    // Partition attention channels across groups: equal shares with the
    // remainder assigned to the last (R=1) group.
    std::vector<int64_t> dims(Rs.size(), Ca / static_cast<int64_t>(Rs.size()));
    dims.back() += Ca - dims[0] * static_cast<int64_t>(Rs.size());
    attn.init(Rs, dims, heads, normal, ini);
  }
  Tensor<T> forward(const Tensor<T>& x) {
    if (conv_dim == 0) return attn.forward(x);
    Tensor<T> xc = slice_channels(x, int64_t(0), conv_dim);
    Tensor<T> xa = slice_channels(x, conv_dim, x.dim(1));
    Tensor<T> conv_path = gelu(norm.forward_nchw(conv2d(wtconv(xc, wt), conv_w, conv_b, 1, pad)));
    Tensor<T> attn_path = attn.forward(xa);
    return concat_channels(std::vector<Tensor<T>>{conv_path, attn_path});
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    if (conv_dim > 0) {
      out.push_back({p + ".wt.ll.w", wt.w_ll, false});
      out.push_back({p + ".wt.ll.b", wt.b_ll, true});
      out.push_back({p + ".wt.high.w", wt.w_high, false});
      out.push_back({p + ".wt.high.b", wt.b_high, true});
      out.push_back({p + ".conv.w", conv_w, false});
      out.push_back({p + ".conv.b", conv_b, true});
      norm.collect(p + ".norm", out);
    }
    attn.collect(p + ".attn", out);
  }
};

// ---------------------------------------------------------------------------
// FFN: project(GELU(expand(x))) on tokens

template <typename T>
struct FFN {
  Tensor<T> w1, b1, w2, b2;
  void init(int64_t C, int64_t hidden, Initializer& ini) {
    w1 = Tensor<T>::zeros({C, hidden});
    ini.trunc_normal(w1);
    b1 = Tensor<T>::zeros({hidden});
    w2 = Tensor<T>::zeros({hidden, C});
    ini.trunc_normal(w2);
    b2 = Tensor<T>::zeros({C});
  }
  Tensor<T> forward(const Tensor<T>& x) const { return linear(gelu(linear(x, w1, b1)), w2, b2); }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".w1", w1, false});
    out.push_back({p + ".b1", b1, true});
    out.push_back({p + ".w2", w2, false});
    out.push_back({p + ".b2", b2, true});
  }
};

// ---------------------------------------------------------------------------
// full transformer block:
//   x1 = x + lfe(x); x2 = x1 + cff(norm1(x1)); x3 = x2 + ffn(norm2(x2))

template <typename T>
struct MSCBlock {
  bool use_lfe = true;
  LFE<T> lfe;
  LayerNorm<T> norm1, norm2;
  CFF<T> cff;
  FFN<T> ffn;

  void init(int64_t C, int64_t conv_dim, int64_t Ck, const std::vector<int>& Rs, const std::vector<int>& heads,
            int64_t ffn_hidden, bool normal, bool use_lfe_, Initializer& ini) {
    use_lfe = use_lfe_;
    if (use_lfe) lfe.init(C, ini);
    norm1.init(C);
    norm2.init(C);
    cff.init(C, conv_dim, Ck, Rs, heads, normal, ini);
    ffn.init(C, ffn_hidden, ini);
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> x1 = use_lfe ? add(x, lfe.forward(x, training)) : x;
    Tensor<T> x2 = add(x1, cff.forward(norm1.forward_nchw(x1)));
    const int64_t H = x.dim(2), W = x.dim(3);
    Tensor<T> tok = nchw_to_tokens(x2);
    Tensor<T> x3 = add(tok, ffn.forward(norm2.forward(tok)));
    return tokens_to_nchw(x3, H, W);
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    if (use_lfe) lfe.collect(p + ".lfe", out);
    norm1.collect(p + ".norm1", out);
    norm2.collect(p + ".norm2", out);
    cff.collect(p + ".cff", out);
    ffn.collect(p + ".ffn", out);
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) {
    if (use_lfe) lfe.collect_buffers(p + ".lfe", out);
  }
};

// ---------------------------------------------------------------------------
// stem and patch embedding

template <typename T>
struct ConvStem {
  Tensor<T> w0, b0, w1, b1, w2, b2;
  BatchNorm2d<T> bn0, bn1, bn2;

  void init(int64_t stem, Initializer& ini) {
    w0 = Tensor<T>::zeros({stem, 3, 3, 3});
    ini.trunc_normal(w0);
    b0 = Tensor<T>::zeros({stem});
    bn0.init(stem);
    w1 = Tensor<T>::zeros({stem, stem, 3, 3});
    ini.trunc_normal(w1);
    b1 = Tensor<T>::zeros({stem});
    bn1.init(stem);
    w2 = Tensor<T>::zeros({stem, stem, 3, 3});
    ini.trunc_normal(w2);
    b2 = Tensor<T>::zeros({stem});
    bn2.init(stem);
  }
  Tensor<T> forward(const Tensor<T>& img, bool training) {
    Tensor<T> y = gelu(bn0.forward(conv2d(img, w0, b0, 2, 1), training));
    y = gelu(bn1.forward(conv2d(y, w1, b1, 1, 1), training));
    return gelu(bn2.forward(conv2d(y, w2, b2, 1, 1), training));
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".c0.w", w0, false});
    out.push_back({p + ".c0.b", b0, true});
    bn0.collect(p + ".bn0", out);
    out.push_back({p + ".c1.w", w1, false});
    out.push_back({p + ".c1.b", b1, true});
    bn1.collect(p + ".bn1", out);
    out.push_back({p + ".c2.w", w2, false});
    out.push_back({p + ".c2.b", b2, true});
    bn2.collect(p + ".bn2", out);
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) {
    bn0.collect_buffers(p + ".bn0", out);
    bn1.collect_buffers(p + ".bn1", out);
    bn2.collect_buffers(p + ".bn2", out);
  }
};

template <typename T>
struct PatchEmbed {
  int64_t kernel = 2, stride = 2;
  Tensor<T> w, b;
  LayerNorm<T> norm;

  void init(int64_t cin, int64_t cout, int64_t kernel_, int64_t stride_, Initializer& ini) {
    kernel = kernel_;
    stride = stride_;
    w = Tensor<T>::zeros({cout, cin, kernel, kernel});
    ini.trunc_normal(w);
    b = Tensor<T>::zeros({cout});
    norm.init(cout);
  }
  Tensor<T> forward(const Tensor<T>& x) {
    if (stride > 1 && (x.dim(2) % stride || x.dim(3) % stride))
      throw std::invalid_argument("patch_embed: odd spatial extent " + shape_str(x.shape()));
    return norm.forward_nchw(conv2d(x, w, b, stride, 0));
  }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".w", w, false});
    out.push_back({p + ".b", b, true});
    norm.collect(p + ".norm", out);
  }
};

// Global average pool + linear classifier.
template <typename T>
struct ClassifierHead {
  Tensor<T> w, b;
  void init(int64_t C, int64_t num_classes, Initializer& ini) {
    w = Tensor<T>::zeros({C, num_classes});
    ini.trunc_normal(w);
    b = Tensor<T>::zeros({num_classes});
  }
  Tensor<T> forward(const Tensor<T>& x) const { return linear(global_avg_pool(x), w, b); }
  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    out.push_back({p + ".w", w, false});
    out.push_back({p + ".b", b, true});
  }
};

}  // namespace mscvit
