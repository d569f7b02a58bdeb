#pragma once

// The assembled four-stage pyramid network, parameter counting, and the
// analytic complexity model.

#include "mscvit/blocks.hpp"
#include "mscvit/config.hpp"

namespace mscvit {

// ---------------------------------------------------------------------------
// analytic cost model (multiply-accumulates; norms/activations excluded)

// Standard multi-head self-attention: 4nd^2 + 2n^2 d.
uint64_t complexity_mhsa(uint64_t n, uint64_t d);

// Two-layer FFN at expansion 4: 8nd^2.
uint64_t complexity_ffn(uint64_t n, uint64_t d);

// Reduced-K/V multi-scale attention. d is partitioned across head groups
// (equal shares, remainder to the last group), each contributing
// 4 n d_i^2 + 2 n^2 d_i / R_i^2; degenerates to complexity_mhsa for Rs={1}.
uint64_t complexity_lmssa(uint64_t n, uint64_t d, const std::vector<int>& Rs);

struct StageComplexity {
  int64_t n = 0;          // tokens per block
  int64_t d = 0;          // stage channel width
  int depth = 0;
  uint64_t macs_attention_analytic = 0;  // per-stage total of the closed form
  uint64_t macs_attention = 0;           // counted attention MACs
  uint64_t macs_total = 0;               // all counted MACs in the stage
};

struct ComplexityReport {
  StageComplexity stages[4];
  uint64_t macs_stem = 0;
  uint64_t macs_head = 0;
  uint64_t macs_total = 0;
  uint64_t macs_attention = 0;
  uint64_t macs_attention_analytic = 0;
  uint64_t param_total = 0;
  double gflops() const { return static_cast<double>(macs_total) * 1e-9; }
};

// Closed-form MAC and parameter accounting for a config (no model build
// needed); mirrors exactly what a counted forward pass executes.
ComplexityReport estimate_flops(const ModelConfig& cfg);

// Parameter count from the config alone (matches a built model exactly).
uint64_t count_params(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// model

template <typename T>
struct Model {
  ModelConfig cfg;
  ConvStem<T> stem;
  PatchEmbed<T> embeds[4];
  Tensor<T> pos[4];  // used only when cfg.use_pe
  std::vector<std::vector<MSCBlock<T>>> blocks;
  LayerNorm<T> final_norm;
  ClassifierHead<T> head;

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    stem.collect("stem", out);
    for (int s = 0; s < 4; ++s) {
      const std::string sp = "stage" + std::to_string(s + 1);
      embeds[s].collect(sp + ".embed", out);
      if (cfg.use_pe) out.push_back({sp + ".pos", pos[s], true});
      for (size_t b = 0; b < blocks[s].size(); ++b)
        blocks[s][b].collect(sp + ".block" + std::to_string(b), out);
    }
    final_norm.collect("final_norm", out);
    head.collect("head", out);
    return out;
  }
  std::vector<BufferRef<T>> buffers() {
    std::vector<BufferRef<T>> out;
    stem.collect_buffers("stem", out);
    for (int s = 0; s < 4; ++s)
      for (size_t b = 0; b < blocks[s].size(); ++b)
        blocks[s][b].collect_buffers("stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
    return out;
  }
  uint64_t num_params() {
    uint64_t n = 0;
    for (auto& p : parameters()) n += static_cast<uint64_t>(p.tensor.numel());
    return n;
  }

  Tensor<T> forward(const Tensor<T>& img, bool training) {
    if (img.rank() != 4 || img.dim(1) != 3 || img.dim(2) != cfg.resolution || img.dim(3) != cfg.resolution)
      throw std::invalid_argument("model: expected (B,3," + std::to_string(cfg.resolution) + "," +
                                  std::to_string(cfg.resolution) + ") input, got " + shape_str(img.shape()));
    Tensor<T> x = stem.forward(img, training);
    for (int s = 0; s < 4; ++s) {
      x = embeds[s].forward(x);
      if (cfg.use_pe) {
        // Broadcast the (C,H,W) positional table over the batch.
        const int64_t B = x.dim(0), chw = pos[s].numel();
        Tensor<T> rep = Tensor<T>::zeros(x.shape());
        for (int64_t b = 0; b < B; ++b)
          std::copy(pos[s].data().begin(), pos[s].data().end(), rep.data().begin() + b * chw);
        detail::attach(rep,
                       std::function<void(TensorImpl<T>&)>([pi = pos[s].impl_, B, chw](TensorImpl<T>& self) {
                         if (!pi->requires_grad) return;
                         pi->ensure_grad();
                         for (int64_t b = 0; b < B; ++b)
                           for (int64_t i = 0; i < chw; ++i) pi->grad[i] += self.grad[b * chw + i];
                       }),
                       pos[s]);
        x = add(x, rep);
      }
      for (auto& blk : blocks[s]) x = blk.forward(x, training);
    }
    Tensor<T> tok = final_norm.forward(nchw_to_tokens(x));
    return head.forward(tokens_to_nchw(tok, x.dim(2), x.dim(3)));
  }

  void set_requires_grad(bool v) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(v);
  }
  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  Initializer ini(seed);
  m.stem.init(cfg.stem, ini);
  auto res = cfg.stage_resolutions();
  int64_t cin = cfg.stem;
  m.blocks.resize(4);
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    const bool native_first = (cfg.resolution == 32 && s == 0);
    m.embeds[s].init(cin, st.dim, native_first ? 1 : 2, native_first ? 1 : 2, ini);
    if (cfg.use_pe) {
      m.pos[s] = Tensor<T>::zeros({st.dim, res[s], res[s]});
      ini.trunc_normal(m.pos[s]);
    }
    for (int b = 0; b < st.depth; ++b) {
      MSCBlock<T> blk;
      blk.init(st.dim, st.conv_dim(cfg.use_cff), st.Ck, st.Rs, st.group_heads(cfg.use_cff), st.ffn_hidden(),
               cfg.normal_attention, cfg.use_lfe, ini);
      m.blocks[s].push_back(std::move(blk));
    }
    cin = st.dim;
  }
  m.final_norm.init(cfg.stages[3].dim);
  m.head.init(cfg.stages[3].dim, cfg.num_classes, ini);
  return m;
}

}  // namespace mscvit
