#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccvc {

struct WeakAugParams {
  double flip_p = 0.5;
  double scale_min = 0.5;
  double scale_max = 2.0;
  int crop_size = 64;
};

struct StrongAugParams {
  double jitter_p = 0.8;
  double gray_p = 0.2;
  double blur_p = 0.5;
  double cutout_p = 0.5;
  double jitter_lo = 0.5;   // brightness/contrast/saturation factor range
  double jitter_hi = 1.5;
  double sigma_lo = 0.3;    // gaussian blur
  double sigma_hi = 1.0;
  double cut_lo = 0.15;     // cutout side, fraction of the image side
  double cut_hi = 0.35;

  bool all_off() const {
    return jitter_p == 0.0 && gray_p == 0.0 && blur_p == 0.0 && cutout_p == 0.0;
  }
};

// Every hyper-parameter of a run, including the dataset descriptor. Flat on
// purpose: each field maps to one `key = value` line in a config file and one
// `--set key=value` override.
struct ExperimentConfig {
  // loss weights and thresholds
  double lambda1 = 5.0;
  double lambda2 = 1.0;
  double lambda3 = 2.0;
  double omega_c = 2.0;
  double gamma = 0.9;
  // optimizer
  double base_lr = 0.001;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 40;
  int batch_size = 8;
  std::uint64_t seed = 0;
  // ablation switches
  bool use_dis = true;
  bool use_map = true;
  bool use_cpl = true;
  bool use_strong_aug = true;
  bool teacher_confidence = false;
  // model
  int num_classes = 4;
  int base_width = 32;
  int feature_channels = 128;
  double map_dropout = 0.5;
  // dataset
  std::string data_source = "synthetic";  // "synthetic" or "folder"
  int synth_scenes = 440;
  double labelled_fraction = 40.0 / 440.0;
  int synth_size = 64;
  int val_scenes = 88;
  std::string images_dir;
  std::string labels_dir;
  // augmentation
  WeakAugParams weak;
  StrongAugParams strong;
  // bookkeeping
  int ckpt_every = 10;

  // CPL disabled means the cc weight acts as 1.
  double effective_omega() const { return use_cpl ? omega_c : 1.0; }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw std::invalid_argument("config: " + key + " " + why);
    };
    if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma", "must be in [0,1]");
    if (omega_c < 1.0) fail("omega_c", "must be >= 1");
    if (lambda1 < 0.0) fail("lambda1", "must be >= 0");
    if (lambda2 < 0.0) fail("lambda2", "must be >= 0");
    if (lambda3 < 0.0) fail("lambda3", "must be >= 0");
    if (batch_size <= 0 || batch_size % 2 != 0) fail("batch_size", "must be positive and even");
    if (epochs < 0) fail("epochs", "must be >= 0");
    if (base_lr <= 0.0) fail("base_lr", "must be > 0");
    if (poly_power < 0.0) fail("poly_power", "must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0,1)");
    if (weight_decay < 0.0) fail("weight_decay", "must be >= 0");
    if (num_classes < 2) fail("num_classes", "must be >= 2");
    if (base_width < 1) fail("base_width", "must be >= 1");
    if (feature_channels < 1) fail("feature_channels", "must be >= 1");
    if (map_dropout < 0.0 || map_dropout >= 1.0) fail("map_dropout", "must be in [0,1)");
    if (data_source != "synthetic" && data_source != "folder") {
      fail("data_source", "must be 'synthetic' or 'folder'");
    }
    if (synth_scenes < 2) fail("synth_scenes", "must be >= 2");
    if (!(labelled_fraction > 0.0 && labelled_fraction <= 1.0)) {
      fail("labelled_fraction", "must be in (0,1]");
    }
    if (synth_size < 16) fail("synth_size", "must be >= 16");
    if (val_scenes < 1) fail("val_scenes", "must be >= 1");
    if (weak.crop_size < 16) fail("crop_size", "must be >= 16");
    if (!(weak.scale_min > 0.0 && weak.scale_max >= weak.scale_min)) {
      fail("weak_scale", "range must satisfy 0 < min <= max");
    }
    if (ckpt_every < 1) fail("ckpt_every", "must be >= 1");
  }
};

namespace detail {

using ConfigSetter = std::function<void(ExperimentConfig&, const std::string&)>;

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  }
  if (used != v.size()) {
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
  if (used != v.size()) {
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

inline const std::map<std::string, ConfigSetter>& config_setters() {
  static const std::map<std::string, ConfigSetter> table = [] {
    std::map<std::string, ConfigSetter> m;
    auto dbl = [&m](const std::string& key, double ExperimentConfig::* field) {
      m[key] = [key, field](ExperimentConfig& c, const std::string& v) {
        c.*field = parse_double(key, v);
      };
    };
    auto intf = [&m](const std::string& key, int ExperimentConfig::* field) {
      m[key] = [key, field](ExperimentConfig& c, const std::string& v) {
        c.*field = static_cast<int>(parse_int(key, v));
      };
    };
    auto boolf = [&m](const std::string& key, bool ExperimentConfig::* field) {
      m[key] = [key, field](ExperimentConfig& c, const std::string& v) {
        c.*field = parse_bool(key, v);
      };
    };
    auto strf = [&m](const std::string& key, std::string ExperimentConfig::* field) {
      m[key] = [field](ExperimentConfig& c, const std::string& v) { c.*field = v; };
    };
    dbl("lambda1", &ExperimentConfig::lambda1);
    dbl("lambda2", &ExperimentConfig::lambda2);
    dbl("lambda3", &ExperimentConfig::lambda3);
    dbl("omega_c", &ExperimentConfig::omega_c);
    dbl("gamma", &ExperimentConfig::gamma);
    dbl("base_lr", &ExperimentConfig::base_lr);
    dbl("poly_power", &ExperimentConfig::poly_power);
    dbl("momentum", &ExperimentConfig::momentum);
    dbl("weight_decay", &ExperimentConfig::weight_decay);
    intf("epochs", &ExperimentConfig::epochs);
    intf("batch_size", &ExperimentConfig::batch_size);
    m["seed"] = [](ExperimentConfig& c, const std::string& v) {
      c.seed = static_cast<std::uint64_t>(parse_int("seed", v));
    };
    boolf("use_dis", &ExperimentConfig::use_dis);
    boolf("use_map", &ExperimentConfig::use_map);
    boolf("use_cpl", &ExperimentConfig::use_cpl);
    boolf("use_strong_aug", &ExperimentConfig::use_strong_aug);
    boolf("teacher_confidence", &ExperimentConfig::teacher_confidence);
    intf("num_classes", &ExperimentConfig::num_classes);
    intf("base_width", &ExperimentConfig::base_width);
    intf("feature_channels", &ExperimentConfig::feature_channels);
    dbl("map_dropout", &ExperimentConfig::map_dropout);
    strf("data_source", &ExperimentConfig::data_source);
    intf("synth_scenes", &ExperimentConfig::synth_scenes);
    dbl("labelled_fraction", &ExperimentConfig::labelled_fraction);
    intf("synth_size", &ExperimentConfig::synth_size);
    intf("val_scenes", &ExperimentConfig::val_scenes);
    strf("images_dir", &ExperimentConfig::images_dir);
    strf("labels_dir", &ExperimentConfig::labels_dir);
    intf("ckpt_every", &ExperimentConfig::ckpt_every);
    m["weak_flip_p"] = [](ExperimentConfig& c, const std::string& v) {
      c.weak.flip_p = parse_double("weak_flip_p", v);
    };
    m["weak_scale_min"] = [](ExperimentConfig& c, const std::string& v) {
      c.weak.scale_min = parse_double("weak_scale_min", v);
    };
    m["weak_scale_max"] = [](ExperimentConfig& c, const std::string& v) {
      c.weak.scale_max = parse_double("weak_scale_max", v);
    };
    m["crop_size"] = [](ExperimentConfig& c, const std::string& v) {
      c.weak.crop_size = static_cast<int>(parse_int("crop_size", v));
    };
    m["strong_jitter_p"] = [](ExperimentConfig& c, const std::string& v) {
      c.strong.jitter_p = parse_double("strong_jitter_p", v);
    };
    m["strong_gray_p"] = [](ExperimentConfig& c, const std::string& v) {
      c.strong.gray_p = parse_double("strong_gray_p", v);
    };
    m["strong_blur_p"] = [](ExperimentConfig& c, const std::string& v) {
      c.strong.blur_p = parse_double("strong_blur_p", v);
    };
    m["strong_cutout_p"] = [](ExperimentConfig& c, const std::string& v) {
      c.strong.cutout_p = parse_double("strong_cutout_p", v);
    };
    return m;
  }();
  return table;
}

inline void apply_key_value(ExperimentConfig& cfg, const std::string& key,
                            const std::string& value) {
  const auto& table = config_setters();
  const auto it = table.find(key);
  if (it == table.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  it->second(cfg, value);
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// Flat `key = value` document; '#' starts a comment. Overrides ("key=value"
// strings) are applied after the file, and the final config is validated.
// Precedence: defaults < file < overrides.
inline ExperimentConfig parse_config(const std::string& path,
                                     const std::vector<std::string>& overrides = {}) {
  ExperimentConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                    " is not 'key = value': '" + line + "'");
      }
      detail::apply_key_value(cfg, detail::trim(line.substr(0, eq)),
                              detail::trim(line.substr(eq + 1)));
    }
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: override '" + ov + "' is not key=value");
    }
    detail::apply_key_value(cfg, detail::trim(ov.substr(0, eq)), detail::trim(ov.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

// One `key = value` line per field, fixed order; parseable by parse_config.
inline std::string dump_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "lambda1 = " << c.lambda1 << "\nlambda2 = " << c.lambda2
     << "\nlambda3 = " << c.lambda3 << "\nomega_c = " << c.omega_c << "\ngamma = " << c.gamma
     << "\nbase_lr = " << c.base_lr << "\npoly_power = " << c.poly_power
     << "\nmomentum = " << c.momentum << "\nweight_decay = " << c.weight_decay
     << "\nepochs = " << c.epochs << "\nbatch_size = " << c.batch_size << "\nseed = " << c.seed
     << "\nuse_dis = " << (c.use_dis ? "true" : "false")
     << "\nuse_map = " << (c.use_map ? "true" : "false")
     << "\nuse_cpl = " << (c.use_cpl ? "true" : "false")
     << "\nuse_strong_aug = " << (c.use_strong_aug ? "true" : "false")
     << "\nteacher_confidence = " << (c.teacher_confidence ? "true" : "false")
     << "\nnum_classes = " << c.num_classes << "\nbase_width = " << c.base_width
     << "\nfeature_channels = " << c.feature_channels << "\nmap_dropout = " << c.map_dropout
     << "\ndata_source = " << c.data_source << "\nsynth_scenes = " << c.synth_scenes
     << "\nlabelled_fraction = " << c.labelled_fraction << "\nsynth_size = " << c.synth_size
     << "\nval_scenes = " << c.val_scenes;
  if (!c.images_dir.empty()) os << "\nimages_dir = " << c.images_dir;
  if (!c.labels_dir.empty()) os << "\nlabels_dir = " << c.labels_dir;
  os << "\nweak_flip_p = " << c.weak.flip_p << "\nweak_scale_min = " << c.weak.scale_min
     << "\nweak_scale_max = " << c.weak.scale_max << "\ncrop_size = " << c.weak.crop_size
     << "\nstrong_jitter_p = " << c.strong.jitter_p << "\nstrong_gray_p = " << c.strong.gray_p
     << "\nstrong_blur_p = " << c.strong.blur_p << "\nstrong_cutout_p = " << c.strong.cutout_p
     << "\nckpt_every = " << c.ckpt_every << "\n";
  return os.str();
}

}  // namespace ccvc
