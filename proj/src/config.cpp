#include "mscvit/config.hpp"

#include <fstream>
#include <sstream>

namespace mscvit {

namespace {

const std::vector<std::vector<int>> kR224 = {{8, 4}, {4, 2, 1}, {2, 1}, {1}};
const std::vector<std::vector<int>> kR32 = {{4, 2}, {2, 1, 1}, {1, 1}, {1}};
const int64_t kCk[4] = {3, 3, 5, 5};
const double kFfnRatio[4] = {6.0, 4.0, 5.0, 7.5};

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<int64_t> ModelConfig::stage_resolutions() const {
  // Stem halves the input; at 224 every patch embed halves again
  // (56/28/14/7). In native-32 mode the stage-1 embed is stride 1 (16/8/4/2).
  std::vector<int64_t> r(4);
  int64_t hw = resolution / 2;
  for (int s = 0; s < 4; ++s) {
    if (resolution != 32 || s > 0) hw /= 2;
    r[s] = hw;
  }
  return r;
}

void ModelConfig::validate() const {
  if (resolution != 224 && resolution != 32)
    throw ConfigError("unsupported resolution " + std::to_string(resolution) + " (expected 224 or 32)");
  if (stem < 1) throw ConfigError("stem width must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  auto res = stage_resolutions();
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = stages[s];
    if (st.dim < 2 || st.depth < 1) throw ConfigError("stage " + std::to_string(s + 1) + ": bad dim/depth");
    if (st.Rs.empty()) throw ConfigError("stage " + std::to_string(s + 1) + ": empty R schedule");
    for (int R : st.Rs)
      if (R < 1 || R > res[s])
        throw ConfigError("stage " + std::to_string(s + 1) + ": R=" + std::to_string(R) +
                          " invalid for resolution " + std::to_string(res[s]));
    if (st.Ck != 3 && st.Ck != 5) throw ConfigError("stage " + std::to_string(s + 1) + ": Ck must be 3 or 5");
    if (st.sigma <= 0.0 || st.sigma >= 1.0)
      throw ConfigError("stage " + std::to_string(s + 1) + ": sigma must be in (0,1)");
    if (use_cff && st.conv_dim(true) < 1)
      throw ConfigError("stage " + std::to_string(s + 1) + ": conv path would be empty");
    if (st.attn_dim(use_cff) < static_cast<int64_t>(st.Rs.size()))
      throw ConfigError("stage " + std::to_string(s + 1) + ": attention channels cannot cover head groups");
    if (st.ffn_hidden() < 1) throw ConfigError("stage " + std::to_string(s + 1) + ": ffn hidden width < 1");
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (base_lr <= 0 || min_lr <= 0) throw ConfigError("learning rates must be positive");
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("label_smoothing must be in [0,1)");
}

ModelConfig make_config(const std::string& variant, int resolution, int num_classes) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.resolution = resolution;
  cfg.num_classes = num_classes;
  int64_t dims[4];
  int depths[4];
  if (variant == "t") {
    cfg.stem = 16;
    int64_t d[4] = {32, 64, 128, 256};
    int n[4] = {1, 2, 4, 1};
    std::copy(d, d + 4, dims);
    std::copy(n, n + 4, depths);
  } else if (variant == "xs") {
    cfg.stem = 24;
    int64_t d[4] = {48, 96, 192, 384};
    int n[4] = {1, 1, 3, 2};
    std::copy(d, d + 4, dims);
    std::copy(n, n + 4, depths);
  } else if (variant == "s") {
    cfg.stem = 32;
    int64_t d[4] = {64, 128, 256, 512};
    int n[4] = {2, 2, 4, 2};
    std::copy(d, d + 4, dims);
    std::copy(n, n + 4, depths);
  } else {
    throw ConfigError("unknown variant '" + variant + "' (expected t, xs, or s)");
  }
  const auto& rs = (resolution == 32) ? kR32 : kR224;
  for (int s = 0; s < 4; ++s) {
    cfg.stages[s].dim = dims[s];
    cfg.stages[s].depth = depths[s];
    cfg.stages[s].Rs = rs[s];
    cfg.stages[s].Ck = kCk[s];
    cfg.stages[s].sigma = 0.25;
    cfg.stages[s].ffn_ratio = kFfnRatio[s];
  }
  cfg.validate();
  return cfg;
}

void apply_override(ModelConfig& cfg, const std::string& key_value) {
  auto eq = key_value.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + key_value + "' is not key=value");
  std::string key = trim(key_value.substr(0, eq));
  std::string val = trim(key_value.substr(eq + 1));
  auto as_i = [&]() {
    try {
      return std::stoll(val);
    } catch (...) {
      throw ConfigError("override '" + key + "': '" + val + "' is not an integer");
    }
  };
  auto as_f = [&]() {
    try {
      return std::stod(val);
    } catch (...) {
      throw ConfigError("override '" + key + "': '" + val + "' is not a number");
    }
  };
  auto as_b = [&]() {
    if (val == "on" || val == "true" || val == "1") return true;
    if (val == "off" || val == "false" || val == "0") return false;
    throw ConfigError("override '" + key + "': '" + val + "' is not a boolean (on/off)");
  };
  if (key == "num_classes") {
    cfg.num_classes = static_cast<int>(as_i());
    return;
  }
  if (key == "resolution" || key == "res") {
    cfg.resolution = static_cast<int>(as_i());
    return;
  }
  if (key == "stem") {
    cfg.stem = as_i();
    return;
  }
  if (key == "attention") {
    if (val == "normal")
      cfg.normal_attention = true;
    else if (val == "lightweight")
      cfg.normal_attention = false;
    else
      throw ConfigError("override 'attention': expected lightweight or normal");
    return;
  }
  if (key == "use_pe") {
    cfg.use_pe = as_b();
    return;
  }
  if (key == "lfe") {
    cfg.use_lfe = as_b();
    return;
  }
  if (key == "cff") {
    cfg.use_cff = as_b();
    return;
  }
  if (key.rfind("stage", 0) == 0) {
    auto dot = key.find('.');
    if (dot == std::string::npos || dot < 6) throw ConfigError("unknown config key '" + key + "'");
    int s;
    try {
      s = std::stoi(key.substr(5, dot - 5));
    } catch (...) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    if (s < 1 || s > 4) throw ConfigError("override '" + key + "': stage index out of range 1..4");
    StageConfig& st = cfg.stages[s - 1];
    std::string field = key.substr(dot + 1);
    if (field == "Ck")
      st.Ck = as_i();
    else if (field == "sigma")
      st.sigma = as_f();
    else if (field == "ffn_ratio")
      st.ffn_ratio = as_f();
    else if (field == "dim")
      st.dim = as_i();
    else if (field == "depth")
      st.depth = static_cast<int>(as_i());
    else if (field == "Rs") {
      std::vector<int> rs;
      std::stringstream ss(val);
      std::string tok;
      while (std::getline(ss, tok, ',')) rs.push_back(std::stoi(trim(tok)));
      if (rs.empty()) throw ConfigError("override '" + key + "': empty R list");
      st.Rs = rs;
    } else
      throw ConfigError("unknown stage field '" + field + "'");
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::map<std::string, std::string> parse_key_value_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config file '" + path + "' line " + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string config_echo(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "variant=" << cfg.variant << "\n";
  os << "res=" << cfg.resolution << "\n";
  os << "num_classes=" << cfg.num_classes << "\n";
  os << "stem=" << cfg.stem << "\n";
  os << "attention=" << (cfg.normal_attention ? "normal" : "lightweight") << "\n";
  os << "use_pe=" << (cfg.use_pe ? "on" : "off") << "\n";
  os << "lfe=" << (cfg.use_lfe ? "on" : "off") << "\n";
  os << "cff=" << (cfg.use_cff ? "on" : "off") << "\n";
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    os << "stage" << (s + 1) << ".dim=" << st.dim << "\n";
    os << "stage" << (s + 1) << ".depth=" << st.depth << "\n";
    os << "stage" << (s + 1) << ".Rs=";
    for (size_t i = 0; i < st.Rs.size(); ++i) os << st.Rs[i] << (i + 1 < st.Rs.size() ? "," : "");
    os << "\n";
    os << "stage" << (s + 1) << ".Ck=" << st.Ck << "\n";
    os << "stage" << (s + 1) << ".sigma=" << st.sigma << "\n";
    os << "stage" << (s + 1) << ".ffn_ratio=" << st.ffn_ratio << "\n";
  }
  return os.str();
}

}  // namespace mscvit
