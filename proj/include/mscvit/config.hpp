#pragma once

// Declarative model/training configuration, variant presets, and the flat
// key=value config format with override support.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mscvit {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageConfig {
  int64_t dim = 0;
  int depth = 0;
  std::vector<int> Rs;     // fusion coefficients, one per head group
  int64_t Ck = 3;          // conv-path kernel size; padding = (Ck-1)/2
  double sigma = 0.25;     // fraction of channels routed to the conv path
  double ffn_ratio = 4.0;  // FFN hidden width = round(ffn_ratio * dim)

  int64_t pad() const { return (Ck - 1) / 2; }
  int64_t conv_dim(bool cff_enabled) const {
    return cff_enabled ? static_cast<int64_t>(sigma * static_cast<double>(dim) + 0.5) : 0;
  }
  int64_t attn_dim(bool cff_enabled) const { return dim - conv_dim(cff_enabled); }
  int64_t ffn_hidden() const { return static_cast<int64_t>(ffn_ratio * static_cast<double>(dim) + 0.5); }
  // Channel shares per head group: equal split, remainder to the last group.
  std::vector<int64_t> group_dims(bool cff_enabled) const {
    const int64_t Ca = attn_dim(cff_enabled);
    const int64_t G = static_cast<int64_t>(Rs.size());
    std::vector<int64_t> d(G, Ca / G);
    d.back() += Ca - (Ca / G) * G;
    return d;
  }
  // 32-wide heads where the share divides evenly, otherwise one head.
  std::vector<int> group_heads(bool cff_enabled) const {
    std::vector<int> h;
    for (int64_t d : group_dims(cff_enabled)) h.push_back(d % 32 == 0 && d >= 32 ? static_cast<int>(d / 32) : 1);
    return h;
  }
};

struct ModelConfig {
  std::string variant = "t";
  int64_t stem = 16;
  StageConfig stages[4];
  int resolution = 224;  // 224 or 32 (native CIFAR mode)
  int num_classes = 100;
  bool normal_attention = false;  // true: full reduction conv + 1x1 restorations
  bool use_lfe = true;
  bool use_cff = true;  // false: all channels through attention
  bool use_pe = false;  // explicit learnable positional embedding per stage

  // Spatial side length entering each stage.
  std::vector<int64_t> stage_resolutions() const;
  void validate() const;
};

struct TrainConfig {
  int epochs = 5;
  int batch_size = 128;
  double base_lr = 5e-4;
  double weight_decay = 0.05;
  int warmup_epochs = 5;
  double min_lr = 1e-5;
  double label_smoothing = 0.1;
  uint64_t seed = 42;

  void validate() const;
};

// Preset for one of the built-in variants ("t", "xs", "s") at the given
// input resolution. Throws ConfigError on unknown variant/resolution.
ModelConfig make_config(const std::string& variant, int resolution, int num_classes);

// Apply a "key=value" override (e.g. "stage2.Ck=5", "num_classes=10",
// "stage1.sigma=0.5"). Unknown keys throw ConfigError.
void apply_override(ModelConfig& cfg, const std::string& key_value);

// Flat key=value text: one pair per line, '#' comments, blank lines ignored.
std::map<std::string, std::string> parse_key_value_file(const std::string& path);

// Round-trippable echo of the effective config in the key=value format.
std::string config_echo(const ModelConfig& cfg);

}  // namespace mscvit
