// Command-line entry points: train, eval, inspect, gradcheck.
//
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>

#include "mscvit/gradcheck.hpp"
#include "mscvit/train.hpp"

namespace fs = std::filesystem;
using namespace mscvit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct CliArgs {
  std::string subcommand;
  std::string variant = "t";
  int res = 224;
  std::string dataset = "synth";
  std::string data_dir;
  std::string out_dir = "mscvit_out";
  std::string config_path;
  std::string ckpt_path;
  int epochs = 5;
  uint64_t seed = 42;
  int batch_size = 128;
  double lr = 5e-4;
  int synth_per_class = 500;
  std::vector<std::string> overrides;
  std::string attention;  // "", "lightweight", "normal"
  std::string use_pe, lfe, cff;  // "", "on", "off"
};

ModelConfig build_config(const CliArgs& a) {
  int num_classes = (a.dataset == "cifar100") ? 100 : 10;
  ModelConfig cfg = make_config(a.variant, a.res, num_classes);
  if (!a.config_path.empty())
    for (const auto& [k, v] : parse_key_value_file(a.config_path)) {
      if (k == "variant") continue;  // fixed by --variant / the file's other keys
      apply_override(cfg, k + "=" + v);
    }
  for (const auto& kv : a.overrides) apply_override(cfg, kv);
  if (!a.attention.empty()) apply_override(cfg, "attention=" + a.attention);
  if (!a.use_pe.empty()) apply_override(cfg, "use_pe=" + a.use_pe);
  if (!a.lfe.empty()) apply_override(cfg, "lfe=" + a.lfe);
  if (!a.cff.empty()) apply_override(cfg, "cff=" + a.cff);
  cfg.validate();
  return cfg;
}

void write_effective_config(const CliArgs& a, const ModelConfig& cfg) {
  fs::create_directories(a.out_dir);
  std::ofstream out(a.out_dir + "/effective_config.txt");
  out << "# effective configuration (" << a.subcommand << ")\n" << config_echo(cfg);
}

struct Splits {
  std::vector<ImageRecord> train, test;
};

Splits load_dataset(const CliArgs& a) {
  Splits s;
  if (a.dataset == "synth") {
    const int nc = (a.dataset == "cifar100") ? 100 : 10;
    s.train = synth_dataset(nc, a.synth_per_class, a.seed);
    s.test = synth_dataset(nc, std::max(1, a.synth_per_class / 5), a.seed + 1);
    return s;
  }
  if (a.data_dir.empty() || !fs::exists(a.data_dir))
    throw DataError("data directory '" + a.data_dir + "' does not exist (--data-dir)");
  if (a.dataset == "cifar10") {
    for (int i = 1; i <= 5; ++i) {
      auto part = parse_cifar10_bin(a.data_dir + "/data_batch_" + std::to_string(i) + ".bin");
      s.train.insert(s.train.end(), part.begin(), part.end());
    }
    s.test = parse_cifar10_bin(a.data_dir + "/test_batch.bin");
    return s;
  }
  if (a.dataset == "cifar100") {
    s.train = parse_cifar100_bin(a.data_dir + "/train.bin");
    s.test = parse_cifar100_bin(a.data_dir + "/test.bin");
    return s;
  }
  throw ConfigError("unknown dataset '" + a.dataset + "' (expected cifar10, cifar100, or synth)");
}

int cmd_train(const CliArgs& a) {
  ModelConfig cfg = build_config(a);
  write_effective_config(a, cfg);
  Splits data = load_dataset(a);
  for (const auto& r : data.train)
    if (r.label >= cfg.num_classes)
      throw ConfigError("dataset label " + std::to_string(r.label) + " exceeds num_classes=" +
                        std::to_string(cfg.num_classes));
  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.base_lr = a.lr;
  tc.seed = a.seed;
  AugmentConfig train_aug, eval_aug;
  train_aug.resize_to = eval_aug.resize_to = cfg.resolution;
  if (a.dataset != "synth") {
    train_aug.flip_prob = 0.5;
    train_aug.pad_crop = 4;
  }
  auto model = build_model<float>(cfg, a.seed);
  std::cout << "model: " << a.variant << " @ " << cfg.resolution << "  params " << model.num_params()
            << "  train " << data.train.size() << "  test " << data.test.size() << "\n";
  std::ofstream metrics(a.out_dir + "/metrics.log");
  std::vector<EpochMetrics> hist;
  {
    // mirror per-epoch lines to stdout and the metrics log
    struct Tee : std::streambuf {
      std::streambuf *a, *b;
      int overflow(int c) override {
        if (c != EOF) {
          a->sputc(static_cast<char>(c));
          b->sputc(static_cast<char>(c));
        }
        return c;
      }
    } tee;
    tee.a = std::cout.rdbuf();
    tee.b = metrics.rdbuf();
    std::ostream log(&tee);
    hist = train_epochs(model, data.train, data.test, tc, train_aug, eval_aug, a.out_dir, &log);
  }
  save_model_checkpoint<float>(model, nullptr, a.out_dir + "/final.ckpt");
  std::cout << "final train_acc=" << hist.back().train_acc << " test_top1=" << hist.back().test_top1 << "\n";
  return kExitOk;
}

int cmd_eval(const CliArgs& a) {
  ModelConfig cfg = build_config(a);
  write_effective_config(a, cfg);
  if (a.ckpt_path.empty() || !fs::exists(a.ckpt_path))
    throw DataError("checkpoint '" + a.ckpt_path + "' does not exist (--ckpt)");
  CheckpointContent content = read_checkpoint(a.ckpt_path);
  if (content.config_echo != config_echo(cfg))
    throw ConfigError("checkpoint was produced by a different configuration; stored echo:\n" + content.config_echo);
  auto model = build_model<float>(cfg, a.seed);
  load_model_checkpoint<float>(model, nullptr, a.ckpt_path);
  Splits data = load_dataset(a);
  AugmentConfig eval_aug;
  eval_aug.resize_to = cfg.resolution;
  const double top1 = evaluate_top1(model, data.test, eval_aug, a.batch_size);
  std::cout << "test_top1=" << std::setprecision(6) << top1 << "\n";
  return kExitOk;
}

int cmd_inspect(const CliArgs& a) {
  ModelConfig cfg = build_config(a);
  write_effective_config(a, cfg);
  ComplexityReport rep = estimate_flops(cfg);
  auto res = cfg.stage_resolutions();
  std::cout << "variant " << a.variant << " @ " << cfg.resolution << "x" << cfg.resolution << ", "
            << cfg.num_classes << " classes, " << (cfg.normal_attention ? "normal" : "lightweight")
            << " attention\n\n";
  std::cout << std::left << std::setw(7) << "stage" << std::setw(6) << "side" << std::setw(8) << "tokens"
            << std::setw(6) << "dim" << std::setw(7) << "depth" << std::setw(12) << "R" << std::setw(14)
            << "MACs" << "attention MACs\n";
  for (int s = 0; s < 4; ++s) {
    std::string rs;
    for (size_t i = 0; i < cfg.stages[s].Rs.size(); ++i)
      rs += (i ? "," : "") + std::to_string(cfg.stages[s].Rs[i]);
    std::cout << std::left << std::setw(7) << (s + 1) << std::setw(6) << res[s] << std::setw(8)
              << rep.stages[s].n << std::setw(6) << rep.stages[s].d << std::setw(7) << rep.stages[s].depth
              << std::setw(12) << ("{" + rs + "}") << std::setw(14) << rep.stages[s].macs_total
              << rep.stages[s].macs_attention << "\n";
  }
  std::cout << "stem MACs " << rep.macs_stem << ", head MACs " << rep.macs_head << "\n\n";
  std::cout << "depths [" << cfg.stages[0].depth << "," << cfg.stages[1].depth << "," << cfg.stages[2].depth
            << "," << cfg.stages[3].depth << "]\n";
  std::cout << std::fixed << std::setprecision(3);
  std::cout << "params " << rep.param_total << " (" << rep.param_total / 1e6 << "M)\n";
  std::cout << "MACs   " << rep.macs_total << " (" << rep.gflops() << " G, 1 multiply-accumulate = 1 FLOP)\n";
  std::cout << "attention MACs counted " << rep.macs_attention << " vs closed form "
            << rep.macs_attention_analytic << " ("
            << 100.0 * (static_cast<double>(rep.macs_attention) - static_cast<double>(rep.macs_attention_analytic)) /
                   static_cast<double>(rep.macs_attention_analytic)
            << "%)\n";
  ModelConfig other = cfg;
  other.normal_attention = !cfg.normal_attention;
  const uint64_t here = rep.param_total, there = count_params(other);
  const uint64_t light = cfg.normal_attention ? there : here;
  const uint64_t normal = cfg.normal_attention ? here : there;
  std::cout << "attention modes: lightweight " << light << ", normal " << normal << " (+"
            << 100.0 * (static_cast<double>(normal) - static_cast<double>(light)) / static_cast<double>(light)
            << "%)\n";
  return kExitOk;
}

template <typename F>
double check_composite(const std::string& name, F&& forward, std::vector<Tensor<double>> tensors, double eps) {
  double err = finite_diff_check<double>(
      [&] {
        auto y = forward();
        return sum_all(mul(y, y));
      },
      std::move(tensors), eps, 8);
  std::cout << std::left << std::setw(12) << name << " max rel err " << std::scientific << std::setprecision(3)
            << err << std::defaultfloat << "\n";
  return err;
}

int cmd_gradcheck(const CliArgs& a) {
  ModelConfig cfg = build_config(a);
  write_effective_config(a, cfg);
  std::mt19937_64 rng(a.seed);
  std::normal_distribution<double> dist(0.0, 0.5);
  auto randn = [&](Shape shape) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  auto collect = [](auto& module, std::vector<Tensor<double>> extra) {
    std::vector<ParamRef<double>> params;
    module.collect("m", params);
    for (auto& p : params) extra.push_back(p.tensor);
    return extra;
  };
  const int64_t C = 8, S = 8;
  Initializer ini(a.seed + 1);
  double worst = 0;

  {
    LFE<double> lfe;
    lfe.init(C, ini);
    auto x = randn({1, C, S, S});
    worst = std::max(worst, check_composite("lfe", [&] { return lfe.forward(x, false); }, collect(lfe, {x}), 1e-5));
  }
  {
    LMSSA<double> attn;
    attn.init({2, 1}, {C / 2, C / 2}, {1, 1}, false, ini);
    auto x = randn({1, C, S, S});
    worst = std::max(worst, check_composite("lmssa", [&] { return attn.forward(x); }, collect(attn, {x}), 1e-5));
  }
  {
    CFF<double> cff;
    cff.init(C, 2, 3, {2, 1}, {1, 1}, false, ini);
    auto x = randn({1, C, S, S});
    worst = std::max(worst, check_composite("cff", [&] { return cff.forward(x); }, collect(cff, {x}), 1e-5));
  }
  {
    FFN<double> ffn;
    ffn.init(C, 2 * C, ini);
    auto x = randn({1, S * S, C});
    worst = std::max(worst, check_composite("ffn", [&] { return ffn.forward(x); }, collect(ffn, {x}), 1e-5));
  }
  {
    MSCBlock<double> blk;
    blk.init(C, 2, 3, {2, 1}, {1, 1}, 2 * C, cfg.normal_attention, cfg.use_lfe, ini);
    auto x = randn({1, C, S, S});
    // the composite's larger third derivative needs a smaller step to keep
    // central-difference truncation below the tolerance
    worst = std::max(worst,
                     check_composite("block", [&] { return blk.forward(x, false); }, collect(blk, {x}), 3e-6));
  }
  std::cout << (worst < 1e-4 ? "gradcheck OK" : "gradcheck FAILED") << " (worst " << std::scientific
            << std::setprecision(3) << worst << ", tolerance 1e-04)\n";
  return worst < 1e-4 ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"four-stage pyramid vision transformer: training, evaluation, and analysis"};
  app.require_subcommand(1);
  CliArgs a;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--variant", a.variant, "model size: t, xs, or s")->check(CLI::IsMember({"t", "xs", "s"}));
    sub->add_option("--res", a.res, "input resolution: 224 or 32")->check(CLI::IsMember({224, 32}));
    sub->add_option("--dataset", a.dataset, "cifar10, cifar100, or synth")
        ->check(CLI::IsMember({"cifar10", "cifar100", "synth"}));
    sub->add_option("--data-dir", a.data_dir, "directory with the dataset's .bin files");
    sub->add_option("--out", a.out_dir, "output directory (config echo, checkpoints, metrics)");
    sub->add_option("--config", a.config_path, "key=value config file applied before --set");
    sub->add_option("--seed", a.seed, "seed for weights, shuffles, and augmentation");
    sub->add_option("--set", a.overrides, "config override key=value (repeatable)");
    sub->add_option("--attention", a.attention, "lightweight or normal")
        ->check(CLI::IsMember({"lightweight", "normal"}));
    sub->add_option("--use-pe", a.use_pe, "explicit positional tables: on/off")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--lfe", a.lfe, "local feature extraction: on/off")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--cff", a.cff, "conv/attention channel split: on/off")->check(CLI::IsMember({"on", "off"}));
  };

  CLI::App* train = app.add_subcommand("train", "train a model and write checkpoints + metrics");
  add_common(train);
  train->add_option("--epochs", a.epochs, "training epochs");
  train->add_option("--batch-size", a.batch_size, "minibatch size");
  train->add_option("--lr", a.lr, "peak learning rate");
  train->add_option("--synth-per-class", a.synth_per_class, "synthetic images per class");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint's test top-1");
  add_common(eval);
  eval->add_option("--ckpt", a.ckpt_path, "checkpoint to evaluate")->required();
  eval->add_option("--batch-size", a.batch_size, "minibatch size");

  CLI::App* inspect = app.add_subcommand("inspect", "per-stage parameter and MAC report");
  add_common(inspect);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks on every block at 8x8");
  add_common(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) {
      a.subcommand = "train";
      return cmd_train(a);
    }
    if (eval->parsed()) {
      a.subcommand = "eval";
      return cmd_eval(a);
    }
    if (inspect->parsed()) {
      a.subcommand = "inspect";
      return cmd_inspect(a);
    }
    a.subcommand = "gradcheck";
    return cmd_gradcheck(a);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}
