#pragma once

// AdamW optimization, warmup + cosine learning-rate schedule, the training
// loop, evaluation, and model-level checkpoint glue.

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>

#include "mscvit/checkpoint.hpp"
#include "mscvit/data.hpp"
#include "mscvit/model.hpp"

namespace mscvit {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  uint64_t step = 0;
  std::vector<std::vector<T>> m, v;

  void init(std::vector<ParamRef<T>>& params) {
    m.clear();
    v.clear();
    for (auto& p : params) {
      m.emplace_back(p.tensor.numel(), T(0));
      v.emplace_back(p.tensor.numel(), T(0));
    }
    step = 0;
  }

  // Decoupled weight decay, then bias-corrected Adam. Norm affines and
  // biases (no_decay params) are exempt from decay.
  void update(std::vector<ParamRef<T>>& params, double lr, double wd) {
    if (m.size() != params.size()) throw TrainError("adamw: optimizer state does not match parameter list");
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].tensor;
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& mi = m[i];
      auto& vi = v[i];
      auto& w = p.data();
      const double decay = params[i].no_decay ? 0.0 : wd;
      for (size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        if (std::isnan(gj)) throw TrainError("adamw: NaN gradient in parameter '" + params[i].name + "'");
        if (decay != 0.0) w[j] = static_cast<T>(w[j] * (1.0 - lr * decay));
        mi[j] = static_cast<T>(beta1 * mi[j] + (1.0 - beta1) * gj);
        vi[j] = static_cast<T>(beta2 * vi[j] + (1.0 - beta2) * gj * gj);
        const double mhat = mi[j] / bc1;
        const double vhat = vi[j] / bc2;
        w[j] = static_cast<T>(w[j] - lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

// Linear ramp to base_lr over the warmup steps (exactly base_lr on the last
// warmup step), then cosine decay to min_lr (exactly min_lr on the last step).
inline double cosine_warmup_lr(int64_t step, int64_t steps_per_epoch, const TrainConfig& cfg) {
  const int64_t total = static_cast<int64_t>(cfg.epochs) * steps_per_epoch;
  const int64_t warmup = std::min<int64_t>(cfg.warmup_epochs, cfg.epochs) * steps_per_epoch;
  if (warmup > 0 && step < warmup) return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return cfg.base_lr;
  const double progress = static_cast<double>(step - warmup + 1) / static_cast<double>(total - warmup);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

// Recompute batch-norm running statistics with training-mode forward passes
// over (up to max_batches of) the given records, without touching weights.
// Short training runs leave the statistics lagging behind the weights, which
// depresses eval-mode accuracy; refreshing them before evaluation fixes that.
template <typename T>
void refresh_norm_stats(Model<T>& model, const std::vector<ImageRecord>& records, const AugmentConfig& aug,
                        int batch_size = 128, int max_batches = 25, uint64_t seed = 0) {
  NoGradGuard ng;
  std::mt19937_64 rng(seed);
  auto batches = epoch_batches(static_cast<int64_t>(records.size()), batch_size, seed, 0);
  int n = 0;
  for (const auto& idx : batches) {
    if (n++ >= max_batches) break;
    auto [batch, labels] = make_batch<T>(records, idx, aug, rng);
    model.forward(batch, /*training=*/true);
  }
}

template <typename T>
double evaluate_top1(Model<T>& model, const std::vector<ImageRecord>& records, const AugmentConfig& eval_aug,
                     int batch_size = 128) {
  if (records.empty()) throw TrainError("evaluate_top1: empty dataset");
  NoGradGuard ng;
  std::mt19937_64 rng(0);  // eval_aug must be deterministic (no random ops)
  int64_t correct = 0;
  std::vector<int64_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (size_t start = 0; start < idx.size(); start += batch_size) {
    std::vector<int64_t> chunk(idx.begin() + start,
                               idx.begin() + std::min(start + batch_size, idx.size()));
    auto [batch, labels] = make_batch<T>(records, chunk, eval_aug, rng);
    Tensor<T> logits = model.forward(batch, /*training=*/false);
    const int64_t K = logits.dim(1);
    for (size_t b = 0; b < chunk.size(); ++b) {
      const T* row = logits.data().data() + b * K;
      int64_t arg = 0;  // ties break toward the lowest class index
      for (int64_t k = 1; k < K; ++k)
        if (row[k] > row[arg]) arg = k;
      if (arg == labels[b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

template <typename T>
void save_model_checkpoint(Model<T>& model, const AdamW<T>* opt, const std::string& path) {
  CheckpointContent c;
  c.config_echo = config_echo(model.cfg);
  auto params = model.parameters();
  for (auto& p : params) c.arrays.push_back(to_named_array(p.name, p.tensor));
  for (auto& b : model.buffers()) c.arrays.push_back(to_named_array(b.name, *b.data));
  if (opt) {
    c.step = opt->step;
    for (size_t i = 0; i < params.size(); ++i) {
      c.arrays.push_back(to_named_array("opt.m." + params[i].name, opt->m[i]));
      c.arrays.push_back(to_named_array("opt.v." + params[i].name, opt->v[i]));
    }
  }
  write_checkpoint(path, c);
}

template <typename T>
void load_model_checkpoint(Model<T>& model, AdamW<T>* opt, const std::string& path) {
  CheckpointContent c = read_checkpoint(path);
  std::map<std::string, const NamedArrayD*> by_name;
  for (const auto& a : c.arrays) by_name[a.name] = &a;
  auto find = [&](const std::string& name) -> const NamedArrayD& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing array '" + name + "'");
    return *it->second;
  };
  auto params = model.parameters();
  for (auto& p : params) from_named_array(find(p.name), p.tensor);
  for (auto& b : model.buffers()) from_named_array(find(b.name), *b.data);
  if (opt) {
    opt->init(params);
    opt->step = c.step;
    for (size_t i = 0; i < params.size(); ++i) {
      from_named_array(find("opt.m." + params[i].name), opt->m[i]);
      from_named_array(find("opt.v." + params[i].name), opt->v[i]);
    }
  }
}

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_top1 = 0;
};

// Full training loop: seeded shuffles, warmup+cosine schedule, AdamW with
// label smoothing; per-epoch metrics, optional test evaluation, optional
// per-epoch checkpoints under out_dir. Deterministic given the seed.
template <typename T>
std::vector<EpochMetrics> train_epochs(Model<T>& model, const std::vector<ImageRecord>& train_records,
                                       const std::vector<ImageRecord>& test_records, const TrainConfig& cfg,
                                       const AugmentConfig& train_aug, const AugmentConfig& eval_aug,
                                       const std::string& out_dir = "", std::ostream* log = nullptr) {
  cfg.validate();
  if (train_records.empty()) throw TrainError("train_epochs: empty training set");
  model.set_requires_grad(true);
  auto params = model.parameters();
  AdamW<T> opt;
  opt.init(params);
  const int64_t steps_per_epoch =
      (static_cast<int64_t>(train_records.size()) + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<EpochMetrics> history;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 aug_rng(cfg.seed * 7919ULL + static_cast<uint64_t>(epoch));
    auto batches = epoch_batches(static_cast<int64_t>(train_records.size()), cfg.batch_size, cfg.seed, epoch);
    double loss_sum = 0;
    int64_t correct = 0;
    double lr = 0;
    for (const auto& idx : batches) {
      lr = cosine_warmup_lr(step, steps_per_epoch, cfg);
      auto [batch, labels] = make_batch<T>(train_records, idx, train_aug, aug_rng);
      model.zero_grad();
      Tensor<T> logits = model.forward(batch, /*training=*/true);
      Tensor<T> loss = cross_entropy(logits, labels, static_cast<T>(cfg.label_smoothing));
      backward(loss);
      opt.update(params, lr, cfg.weight_decay);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      const int64_t K = logits.dim(1);
      for (size_t b = 0; b < idx.size(); ++b) {
        const T* row = logits.data().data() + b * K;
        int64_t arg = 0;
        for (int64_t k = 1; k < K; ++k)
          if (row[k] > row[arg]) arg = k;
        if (arg == labels[b]) ++correct;
      }
      ++step;
    }
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = lr;
    em.train_loss = loss_sum / static_cast<double>(train_records.size());
    em.train_acc = static_cast<double>(correct) / static_cast<double>(train_records.size());
    if (!test_records.empty()) {
      refresh_norm_stats(model, train_records, eval_aug, cfg.batch_size, 25, cfg.seed);
      em.test_top1 = evaluate_top1(model, test_records, eval_aug, cfg.batch_size);
    }
    history.push_back(em);
    if (log)
      *log << "epoch=" << em.epoch << " lr=" << em.lr << " train_loss=" << em.train_loss
           << " train_acc=" << em.train_acc << " test_top1=" << em.test_top1 << "\n"
           << std::flush;
    if (!out_dir.empty())
      save_model_checkpoint(model, &opt, out_dir + "/epoch" + std::to_string(em.epoch) + ".ckpt");
  }
  return history;
}

}  // namespace mscvit
