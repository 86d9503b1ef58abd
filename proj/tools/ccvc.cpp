// ccvc: config-driven training, evaluation, ablation and reporting for the
// two-branch cross-view consistency toolkit.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "ccvc/checkpoint.hpp"
#include "ccvc/config.hpp"
#include "ccvc/datagen.hpp"
#include "ccvc/eval.hpp"
#include "ccvc/folder_io.hpp"
#include "ccvc/report.hpp"
#include "ccvc/trainer.hpp"
#include "ccvc/version.hpp"

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string out_root() {
  if (const char* env = std::getenv("CCVC_OUT_ROOT")) return env;
  return "runs";
}

struct DataBundle {
  ccvc::DatasetSplit split;
  std::vector<ccvc::Scene> val;
  std::string descriptor;
  std::string split_label;
};

DataBundle build_dataset(const ccvc::ExperimentConfig& cfg) {
  DataBundle out;
  if (cfg.data_source == "synthetic") {
    const auto scenes = ccvc::generate_corpus(cfg.seed, cfg.synth_scenes, cfg.num_classes,
                                              cfg.synth_size);
    out.split = ccvc::split_dataset(scenes, cfg.labelled_fraction, cfg.seed);
    out.val = ccvc::generate_corpus(cfg.seed, cfg.val_scenes, cfg.num_classes, cfg.synth_size,
                                    /*validation=*/true);
    out.descriptor = "synthetic classes=" + std::to_string(cfg.num_classes) +
                     " size=" + std::to_string(cfg.synth_size) +
                     " scenes=" + std::to_string(cfg.synth_scenes) +
                     " val=" + std::to_string(cfg.val_scenes);
  } else {
    if (cfg.images_dir.empty() || cfg.labels_dir.empty()) {
      throw UsageError("folder data source needs images_dir and labels_dir");
    }
    auto scenes = ccvc::load_folder_dataset(cfg.images_dir, cfg.labels_dir, cfg.num_classes);
    if (scenes.size() < 3) throw UsageError("folder dataset too small (need >= 3 scenes)");
    // Carve a validation set first (seeded shuffle), then split the rest.
    std::vector<int> order(scenes.size());
    std::iota(order.begin(), order.end(), 0);
    ccvc::Rng rng(ccvc::mix_seed(cfg.seed, ccvc::streams::kSceneVal));
    rng.shuffle(order);
    const int val_count = std::max(
        1, std::min(cfg.val_scenes, static_cast<int>(scenes.size()) / 5));
    std::vector<ccvc::Scene> train_scenes;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i < static_cast<std::size_t>(val_count)) {
        out.val.push_back(scenes[order[i]]);
      } else {
        train_scenes.push_back(scenes[order[i]]);
      }
    }
    out.split = ccvc::split_dataset(train_scenes, cfg.labelled_fraction, cfg.seed);
    out.descriptor = "folder images=" + cfg.images_dir + " labels=" + cfg.labels_dir +
                     " val=" + std::to_string(val_count);
  }
  out.split_label = std::to_string(out.split.labelled.size()) + "/" +
                    std::to_string(out.split.unlabelled.size());
  return out;
}

void check_run_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir / "manifest.json") && !force) {
    throw UsageError("output directory '" + dir.string() +
                     "' already contains a run manifest; pass --force to overwrite");
  }
}

void write_manifest(const fs::path& dir, const ccvc::ExperimentConfig& cfg,
                    const DataBundle& data, const std::string& started,
                    double wall_seconds) {
  nlohmann::ordered_json j;
  j["version"] = std::string("ccvc ") + ccvc::kVersion;
  j["split"] = data.split_label;
  j["dataset"] = data.descriptor;
  j["output_dir"] = dir.string();
  j["wall_clock_start"] = started;
  j["wall_clock_seconds"] = wall_seconds;
  nlohmann::ordered_json jc;
  std::istringstream cfg_lines(ccvc::dump_config(cfg));
  std::string line;
  while (std::getline(cfg_lines, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) jc[line.substr(0, eq)] = line.substr(eq + 3);
  }
  j["config"] = jc;
  std::ofstream(dir / "manifest.json") << j.dump(2) << "\n";
  std::ofstream(dir / "config.txt") << ccvc::dump_config(cfg);
}

ccvc::ExperimentConfig load_config(const std::string& config_path,
                                   const std::vector<std::string>& sets, bool seed_given,
                                   std::uint64_t seed) {
  auto overrides = sets;
  if (seed_given) overrides.push_back("seed=" + std::to_string(seed));
  try {
    return ccvc::parse_config(config_path, overrides);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

int run_train(const ccvc::ExperimentConfig& cfg, const fs::path& out_dir, bool force,
              bool quiet = false) {
  check_run_dir(out_dir, force);
  fs::create_directories(out_dir);
  const auto data = build_dataset(cfg);
  const std::string started = now_utc();
  const auto t0 = std::chrono::steady_clock::now();
  auto state = ccvc::train_loop(data.split, data.val, cfg, out_dir.string());
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(out_dir, cfg, data, started, wall);
  if (!quiet) {
    if (!state.epoch_history.empty()) {
      const auto& e = state.epoch_history.back();
      std::cout << "trained " << cfg.epochs << " epochs (" << data.split_label
                << " labelled/unlabelled): val_miou=" << e.val_miou
                << " feature_cosine=" << e.mean_feature_cosine << "\n";
    } else {
      std::cout << "trained 0 epochs; checkpoint written\n";
    }
    std::cout << "run directory: " << out_dir.string() << "\n";
  }
  return 0;
}

double eval_checkpoint(const std::string& ckpt_path, const ccvc::ExperimentConfig& cfg,
                       const std::string& on, bool print) {
  if (!fs::exists(ckpt_path)) throw UsageError("checkpoint '" + ckpt_path + "' not found");
  auto state = ccvc::load_checkpoint(ckpt_path);
  const auto data = build_dataset(cfg);
  const std::vector<ccvc::Scene>* scenes = nullptr;
  if (on == "val") {
    scenes = &data.val;
  } else if (on == "train") {
    scenes = &data.split.labelled;
  } else {
    throw UsageError("--on must be 'val' or 'train'");
  }
  if (scenes->empty()) throw UsageError("no scenes to evaluate on");
  std::vector<ccvc::LabelMap> preds, gts;
  for (const auto& scene : *scenes) {
    auto maps = ccvc::predict(state.model, scene.image);
    preds.push_back(std::move(maps[0]));
    gts.push_back(scene.label);
  }
  const auto result = ccvc::miou(preds, gts, state.model.config.num_classes);
  if (print) {
    std::cout << "miou " << result.miou << " over " << scenes->size() << " scenes (" << on
              << ")\nper-class iou:";
    for (int c = 0; c < state.model.config.num_classes; ++c) {
      if (result.included[c]) {
        std::cout << " " << c << ":" << result.per_class[c];
      } else {
        std::cout << " " << c << ":-";
      }
    }
    std::cout << "\n";
  }
  return result.miou;
}

struct AblationRow {
  const char* name;
  bool dis, map, cpl, aug;
  bool supervised_only;
};

// Component ladder: supervised; + cross consistency; + discrepancy loss;
// + mapping head; + conflict weighting; + strong augmentation.
constexpr AblationRow kAblationLadder[] = {
    {"sup_only", false, false, false, false, true},
    {"ccr", false, false, false, false, false},
    {"cvc_nomap", true, false, false, false, false},
    {"cvc", true, true, false, false, false},
    {"ccvc", true, true, true, false, false},
    {"ccvc_aug", true, true, true, true, false},
};

int run_ablate(const ccvc::ExperimentConfig& base, const fs::path& out_dir, bool force) {
  check_run_dir(out_dir / "sup_only", force);
  fs::create_directories(out_dir);
  std::vector<std::pair<std::string, double>> results;
  for (const auto& row : kAblationLadder) {
    ccvc::ExperimentConfig cfg = base;
    cfg.use_dis = row.dis;
    cfg.use_map = row.map;
    cfg.use_cpl = row.cpl;
    cfg.use_strong_aug = row.aug;
    if (row.supervised_only) {
      cfg.lambda2 = 0.0;
      cfg.lambda3 = 0.0;
    }
    const fs::path row_dir = out_dir / row.name;
    check_run_dir(row_dir, force);
    fs::create_directories(row_dir);
    const auto data = build_dataset(cfg);
    const std::string started = now_utc();
    const auto t0 = std::chrono::steady_clock::now();
    auto state = ccvc::train_loop(data.split, data.val, cfg, row_dir.string());
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(row_dir, cfg, data, started, wall);
    const double miou_val =
        state.epoch_history.empty() ? 0.0 : state.epoch_history.back().val_miou;
    results.emplace_back(row.name, miou_val);
    std::cout << row.name << " done: val_miou=" << miou_val << "\n" << std::flush;
  }

  std::ostringstream table;
  table << "row         sup con dis map cpl aug   val_miou\n";
  for (std::size_t i = 0; i < std::size(kAblationLadder); ++i) {
    const auto& row = kAblationLadder[i];
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-11s  x   %s   %s   %s   %s   %s   %.4f\n", row.name,
                  row.supervised_only ? " " : "x", row.dis ? "x" : " ", row.map ? "x" : " ",
                  row.cpl ? "x" : " ", row.aug ? "x" : " ", results[i].second);
    table << buf;
  }
  std::ofstream(out_dir / "ablation.txt") << table.str();
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conflict-based cross-view consistency training toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("ccvc ") + ccvc::kVersion);

  std::string config_path, out_dir, ckpt_path, log_path, eval_on = "val";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool force = false;

  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", config_path, "flat key=value config file");
    sub->add_option("--set", sets, "override, key=value (repeatable)");
    sub->add_option("--seed", seed, "random seed override");
    if (with_out) {
      sub->add_option("--out", out_dir, "output directory");
      sub->add_flag("--force", force, "overwrite an existing run directory");
    }
  };

  CLI::App* train = app.add_subcommand("train", "train a model and write a run directory");
  add_common(train, true);
  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint's mIoU on a dataset");
  add_common(evalc, false);
  evalc->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  evalc->add_option("--on", eval_on, "val or train");
  CLI::App* ablate =
      app.add_subcommand("ablate", "run the component ablation ladder with a shared seed");
  add_common(ablate, true);
  CLI::App* reportc = app.add_subcommand("report", "render curves and summary from a metrics log");
  reportc->add_option("--log", log_path, "metrics.jsonl path")->required();
  reportc->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    const bool seed_given = (train->count("--seed") + evalc->count("--seed") +
                             ablate->count("--seed")) > 0;
    if (train->parsed()) {
      const auto cfg = load_config(config_path, sets, seed_given, seed);
      const fs::path dir = out_dir.empty() ? fs::path(out_root()) / "train" : fs::path(out_dir);
      return run_train(cfg, dir, force);
    }
    if (evalc->parsed()) {
      const auto cfg = load_config(config_path, sets, seed_given, seed);
      eval_checkpoint(ckpt_path, cfg, eval_on, /*print=*/true);
      return 0;
    }
    if (ablate->parsed()) {
      const auto cfg = load_config(config_path, sets, seed_given, seed);
      const fs::path dir = out_dir.empty() ? fs::path(out_root()) / "ablate" : fs::path(out_dir);
      return run_ablate(cfg, dir, force);
    }
    if (reportc->parsed()) {
      if (!fs::exists(log_path)) throw UsageError("metrics log '" + log_path + "' not found");
      const fs::path dir = out_dir.empty() ? fs::path(out_root()) / "report" : fs::path(out_dir);
      fs::create_directories(dir);
      ccvc::report(log_path, dir.string());
      std::cout << "report written to " << dir.string() << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
