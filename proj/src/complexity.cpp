#include "mscvit/model.hpp"

namespace mscvit {

uint64_t complexity_mhsa(uint64_t n, uint64_t d) { return 4 * n * d * d + 2 * n * n * d; }

uint64_t complexity_ffn(uint64_t n, uint64_t d) { return 8 * n * d * d; }

uint64_t complexity_lmssa(uint64_t n, uint64_t d, const std::vector<int>& Rs) {
  if (Rs.empty()) throw std::invalid_argument("complexity_lmssa: empty R list");
  const uint64_t G = Rs.size();
  uint64_t total = 0;
  for (uint64_t i = 0; i < G; ++i) {
    uint64_t di = d / G;
    if (i + 1 == G) di += d - (d / G) * G;
    const uint64_t R = static_cast<uint64_t>(Rs[i]);
    total += 4 * n * di * di + 2 * n * n * di / (R * R);
  }
  return total;
}

namespace {

struct BlockCost {
  uint64_t params = 0;
  uint64_t macs = 0;
  uint64_t macs_attention = 0;           // as counted by the instrumented forward
  uint64_t macs_attention_analytic = 0;  // closed form
};

BlockCost block_cost(const ModelConfig& cfg, const StageConfig& st, uint64_t n, uint64_t r) {
  BlockCost c;
  const uint64_t C = static_cast<uint64_t>(st.dim);
  const uint64_t Cc = static_cast<uint64_t>(st.conv_dim(cfg.use_cff));
  const uint64_t Ca = C - Cc;
  if (cfg.use_lfe) {
    c.params += 9 * C + C;  // dw 3x3
    c.params += 2 * C;      // BN affine
    c.params += C + C;      // dw 1x1
    c.macs += n * 9 * C + n * C;
  }
  c.params += 2 * C + 2 * C;  // the two pre-norms
  if (Cc > 0) {
    c.params += 2 * (9 * Cc + Cc);                                         // wavelet-domain depthwise filters
    c.params += static_cast<uint64_t>(st.Ck * st.Ck) * Cc * Cc + Cc;       // fusion conv
    c.params += 2 * Cc;                                                    // conv-path norm
    // odd maps are reflect-padded to even extents before the wavelet split,
    // so its depthwise filters run over the padded token count
    const uint64_t rpad = (r + 1) / 2 * 2;
    c.macs += rpad * rpad * 9 * Cc + n * static_cast<uint64_t>(st.Ck * st.Ck) * Cc * Cc;
  }
  const auto dims = st.group_dims(cfg.use_cff);
  for (size_t i = 0; i < st.Rs.size(); ++i) {
    const uint64_t d = static_cast<uint64_t>(dims[i]);
    const uint64_t R = static_cast<uint64_t>(st.Rs[i]);
    const uint64_t nk = n / (R * R);
    c.params += 4 * (d * d + d);  // q, k, v, out projections
    uint64_t am = 4 * n * d * d + 2 * n * nk * d;
    if (cfg.normal_attention) {
      c.params += R * R * d * d + d;  // full strided reduction conv (shared K/V)
      c.params += 2 * (d * d + d);    // 1x1 restorations on K and V
      am += 2 * n * d * d + 2 * nk * d * d;
    } else if (R > 1) {
      c.params += R * R * d + d;  // shared depthwise strided reduction
      am += 2 * n * d;
    }
    c.macs_attention += am;
  }
  c.macs_attention_analytic = complexity_lmssa(n, Ca, st.Rs);
  c.macs += c.macs_attention;
  const uint64_t F = static_cast<uint64_t>(st.ffn_hidden());
  c.params += C * F + F + F * C + C;
  c.macs += 2 * n * C * F;
  return c;
}

}  // namespace

ComplexityReport estimate_flops(const ModelConfig& cfg) {
  cfg.validate();
  ComplexityReport rep;
  const uint64_t stem = static_cast<uint64_t>(cfg.stem);
  uint64_t hw = static_cast<uint64_t>(cfg.resolution) / 2;
  rep.param_total = 27 * stem + stem + 2 * (9 * stem * stem + stem) + 3 * 2 * stem;
  rep.macs_stem = hw * hw * 27 * stem + 2 * hw * hw * 9 * stem * stem;
  rep.macs_total = rep.macs_stem;
  auto res = cfg.stage_resolutions();
  uint64_t cin = stem;
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    const uint64_t C = static_cast<uint64_t>(st.dim);
    const uint64_t n = static_cast<uint64_t>(res[s] * res[s]);
    const bool native_first = (cfg.resolution == 32 && s == 0);
    const uint64_t patch = native_first ? 1 : 4;
    rep.param_total += patch * cin * C + C + 2 * C;
    if (cfg.use_pe) rep.param_total += C * n;
    uint64_t stage_macs = n * patch * cin * C;
    StageComplexity& sc = rep.stages[s];
    sc.n = static_cast<int64_t>(n);
    sc.d = st.dim;
    sc.depth = st.depth;
    BlockCost bc = block_cost(cfg, st, n, static_cast<uint64_t>(res[s]));
    for (int b = 0; b < st.depth; ++b) {
      rep.param_total += bc.params;
      stage_macs += bc.macs;
      sc.macs_attention += bc.macs_attention;
      sc.macs_attention_analytic += bc.macs_attention_analytic;
    }
    sc.macs_total = stage_macs;
    rep.macs_total += stage_macs;
    rep.macs_attention += sc.macs_attention;
    rep.macs_attention_analytic += sc.macs_attention_analytic;
    cin = C;
  }
  const uint64_t d4 = static_cast<uint64_t>(cfg.stages[3].dim);
  const uint64_t K = static_cast<uint64_t>(cfg.num_classes);
  rep.param_total += 2 * d4;          // final norm
  rep.param_total += d4 * K + K;      // classifier
  rep.macs_head = d4 * K;
  rep.macs_total += rep.macs_head;
  return rep;
}

uint64_t count_params(const ModelConfig& cfg) { return estimate_flops(cfg).param_total; }

}  // namespace mscvit
