#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccvc/checkpoint.hpp"
#include "ccvc/config.hpp"
#include "ccvc/datagen.hpp"
#include "ccvc/eval.hpp"
#include "ccvc/losses.hpp"
#include "ccvc/model.hpp"
#include "ccvc/trainer_types.hpp"

// SGD training loop for the two-branch setup: equal labelled/unlabelled
// halves per step, the Eq.-5 objective assembled from the loss module, poly
// learning-rate schedule, per-epoch validation metrics, checkpoints.

namespace ccvc {

inline constexpr double kConfidenceThreshold = 0.9;

inline double poly_lr(double base_lr, int step, int total_steps, double power) {
  if (total_steps <= 0) throw std::invalid_argument("poly_lr: total_steps must be > 0");
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("poly_lr: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + "]");
  }
  return base_lr * std::pow(1.0 - static_cast<double>(step) / total_steps, power);
}

inline ArchConfig arch_from_config(const ExperimentConfig& c) {
  ArchConfig a;
  a.in_channels = 3;
  a.num_classes = c.num_classes;
  a.base_width = c.base_width;
  a.feature_channels = c.feature_channels;
  a.map_dropout_p = c.map_dropout;
  return a;
}

template <typename T = float>
TrainState<T> init_train_state(const ExperimentConfig& config) {
  TrainState<T> state;
  state.model = init_model<T>(arch_from_config(config), config.seed);
  state.master_seed = config.seed;
  for (auto* p : state.model.params()) {
    state.moments.emplace_back(p->n(), p->c(), p->h(), p->w());
  }
  return state;
}

namespace trainer_detail {

template <typename T>
Tensor<T> cast_image(const Tensor<float>& x) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    return x.template cast<T>();
  }
}

template <typename T>
void scale_inplace(Tensor<T>& t, T s) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] *= s;
}

}  // namespace trainer_detail

// One optimization step over one batch. Both branches see the identical
// unlabelled view; pseudo-label targets carry no gradient; disabled switches
// contribute exactly zero to the objective and the gradients.
template <typename T>
StepStats train_step(TrainState<T>& state, const Batch& batch, const ExperimentConfig& config,
                     int total_steps) {
  using trainer_detail::cast_image;
  using trainer_detail::scale_inplace;
  auto& model = state.model;

  const double lr = poly_lr(config.base_lr, state.step, total_steps, config.poly_power);
  const T l1 = static_cast<T>(config.lambda1);
  const T l2 = static_cast<T>(config.lambda2);
  const T l3 = static_cast<T>(config.lambda3);
  const bool dis_on = config.use_dis && config.lambda3 > 0.0;
  const bool con_on = config.lambda2 > 0.0;
  // Supervised-only configurations never touch the unlabelled half, so a
  // lambda2 = lambda3 = 0 step is exactly a supervised step on the labelled
  // half (batch statistics included).
  const bool need_unlabelled = con_on || dis_on;

  const Tensor<T> lab_images = cast_image<T>(batch.labelled_images);
  typename BranchNet<T>::Trace t1L, t2L, t1U, t2U;
  auto out1L = model.branch[0].forward(lab_images, true, &t1L);
  auto out2L = model.branch[1].forward(lab_images, true, &t2L);
  BranchOutput<T> out1U, out2U;
  Tensor<T> unlab_images;
  if (need_unlabelled) {
    unlab_images = cast_image<T>(batch.unlabelled_images);
    out1U = model.branch[0].forward(unlab_images, true, &t1U);
    out2U = model.branch[1].forward(unlab_images, true, &t2U);
  }

  Tensor<T> dp1L, dp2L;
  const auto sup = supervised_loss(out1L.probs, out2L.probs, batch.labelled_labels, &dp1L, &dp2L);

  ConsistencyLoss<T> con;
  Tensor<T> dp1U, dp2U;
  if (con_on) {
    const auto part = conflict_partition(out1U.probs, out2U.probs, static_cast<T>(config.gamma),
                                         config.teacher_confidence);
    con = consistency_loss_cpl(out1U.probs, out2U.probs, part,
                               static_cast<T>(config.effective_omega()), &dp1U, &dp2U);
  }

  T dis_l = T(0), dis_u = T(0);
  Tensor<T> df1L_dis, df2L_dis, df1U_dis, df2U_dis;  // w.r.t. f1 and (mapped) f2
  typename MapHead<T>::Trace mapL, mapU;
  if (dis_on) {
    Rng rng_l(mix_seed(state.master_seed, streams::kDropout, static_cast<std::uint64_t>(state.step), 0));
    Rng rng_u(mix_seed(state.master_seed, streams::kDropout, static_cast<std::uint64_t>(state.step), 1));
    const Tensor<T> f2L =
        config.use_map ? model.map_head.forward(out2L.features, true, &rng_l, &mapL)
                       : out2L.features;
    dis_l = cosine_discrepancy_loss(out1L.features, f2L, &df1L_dis, &df2L_dis);
    const Tensor<T> f2U =
        config.use_map ? model.map_head.forward(out2U.features, true, &rng_u, &mapU)
                       : out2U.features;
    dis_u = cosine_discrepancy_loss(out1U.features, f2U, &df1U_dis, &df2U_dis);
  }

  LossBreakdown<T> breakdown;
  try {
    breakdown = total_loss(sup.value, con, dis_l, dis_u, l1, l2, l3);
  } catch (const std::domain_error& e) {
    throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(state.step) +
                             " (epoch " + std::to_string(state.epoch) + ")");
  }

  // Backward. Loss gradients are w.r.t. probabilities / features; chain them
  // through the softmax and the branch bodies.
  typename TwoBranchModel<T>::Grads grads(model);

  scale_inplace(dp1L, l1);
  scale_inplace(dp2L, l1);
  Tensor<T> dlogits1L = softmax_backward(out1L.probs, dp1L);
  Tensor<T> dlogits2L = softmax_backward(out2L.probs, dp2L);

  const T dis_w = l3 * T(0.5);  // d total / d dis_alpha
  Tensor<T> df2L_raw, df2U_raw;  // gradient reaching branch 2's raw features
  if (dis_on) {
    scale_inplace(df1L_dis, dis_w);
    scale_inplace(df1U_dis, dis_w);
    scale_inplace(df2L_dis, dis_w);
    scale_inplace(df2U_dis, dis_w);
    if (config.use_map) {
      df2L_raw = model.map_head.backward(mapL, df2L_dis, grads.map);
      df2U_raw = model.map_head.backward(mapU, df2U_dis, grads.map);
    } else {
      df2L_raw = std::move(df2L_dis);
      df2U_raw = std::move(df2U_dis);
    }
  }

  model.branch[0].backward(t1L, dlogits1L, dis_on ? &df1L_dis : nullptr, grads.branch[0]);
  model.branch[1].backward(t2L, dlogits2L, dis_on ? &df2L_raw : nullptr, grads.branch[1]);
  if (need_unlabelled) {
    Tensor<T> dlogits1U, dlogits2U;
    if (con_on) {
      scale_inplace(dp1U, l2);
      scale_inplace(dp2U, l2);
      dlogits1U = softmax_backward(out1U.probs, dp1U);
      dlogits2U = softmax_backward(out2U.probs, dp2U);
    } else {
      dlogits1U = Tensor<T>(out1U.logits.n(), out1U.logits.c(), out1U.logits.h(), out1U.logits.w());
      dlogits2U = dlogits1U;
    }
    model.branch[0].backward(t1U, dlogits1U, dis_on ? &df1U_dis : nullptr, grads.branch[0]);
    model.branch[1].backward(t2U, dlogits2U, dis_on ? &df2U_raw : nullptr, grads.branch[1]);
  }

  // SGD with momentum and weight decay: v = mu v + g + wd p;  p -= lr v.
  const T mu = static_cast<T>(config.momentum);
  const T wd = static_cast<T>(config.weight_decay);
  auto params = model.params();
  auto gptrs = grads.ptrs();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    Tensor<T>& g = *gptrs[i];
    Tensor<T>& v = state.moments[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mu * v[j] + g[j] + wd * p[j];
      p[j] -= static_cast<T>(lr) * v[j];
    }
  }

  StepStats stats;
  stats.step = state.step;
  stats.epoch = state.epoch;
  stats.lr = lr;
  stats.sup = static_cast<double>(breakdown.sup);
  stats.con = static_cast<double>(breakdown.con);
  stats.con_cc0 = static_cast<double>(breakdown.con_cc[0]);
  stats.con_cc1 = static_cast<double>(breakdown.con_cc[1]);
  stats.con_e0 = static_cast<double>(breakdown.con_e[0]);
  stats.con_e1 = static_cast<double>(breakdown.con_e[1]);
  stats.con_cc_frac = static_cast<double>(con.cc_frac);
  stats.dis = static_cast<double>(breakdown.dis);
  stats.dis_l = static_cast<double>(breakdown.dis_l);
  stats.dis_u = static_cast<double>(breakdown.dis_u);
  stats.total = static_cast<double>(breakdown.total);
  ++state.step;
  return stats;
}

// Validation metrics on a parameter snapshot: branch-1 mIoU, Fig.-3 style
// confidence statistics, and the Fig.-1 style inter-branch feature cosine
// (raw features; the mapped variant is logged for diagnosis).
template <typename T>
EpochStats evaluate_model(TrainState<T>& state, const std::vector<Scene>& val_scenes,
                          double threshold = kConfidenceThreshold) {
  if (val_scenes.empty()) throw std::invalid_argument("evaluate_model: no validation scenes");
  std::vector<LabelMap> preds, gts;
  std::vector<Tensor<T>> probs_list;
  double cos_sum = 0.0, mapped_sum = 0.0;
  for (const auto& scene : val_scenes) {
    const Tensor<T> img = trainer_detail::cast_image<T>(scene.image);
    auto out1 = forward_branch(state.model, 1, img, false);
    auto out2 = forward_branch(state.model, 2, img, false);
    const auto pl = make_pseudo_labels(out1.probs);
    LabelMap pred(img.h(), img.w());
    std::copy(pl.labels.data(), pl.labels.data() + pred.ids.size(), pred.ids.begin());
    preds.push_back(std::move(pred));
    gts.push_back(scene.label);
    cos_sum += mean_feature_cosine(out1.features, out2.features);
    const auto mapped = map_features(state.model, out2.features, false);
    mapped_sum += mean_feature_cosine(out1.features, mapped);
    probs_list.push_back(std::move(out1.probs));
  }
  EpochStats es;
  es.epoch = state.epoch;
  es.val_miou = miou(preds, gts, state.model.config.num_classes).miou;
  const auto cs = confidence_stats(probs_list, gts, threshold);
  es.confident_frac = cs.confident_frac;
  es.confident_acc = cs.confident_acc;
  es.confident_miou = cs.confident_miou;
  es.mean_feature_cosine = cos_sum / static_cast<double>(val_scenes.size());
  es.mean_mapped_cosine = mapped_sum / static_cast<double>(val_scenes.size());
  return es;
}

inline std::string step_json(const StepStats& s) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["lr"] = s.lr;
  j["sup"] = s.sup;
  j["con"] = s.con;
  j["con_cc_frac"] = s.con_cc_frac;
  j["dis"] = s.dis;
  j["total"] = s.total;
  return j.dump();
}

inline std::string epoch_json(const EpochStats& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["val_miou"] = e.val_miou;
  j["mean_feature_cosine"] = e.mean_feature_cosine;
  if (std::isnan(e.confident_frac)) {
    j["confident_frac"] = nullptr;
  } else {
    j["confident_frac"] = e.confident_frac;
  }
  if (std::isnan(e.confident_acc)) {
    j["confident_acc"] = nullptr;
  } else {
    j["confident_acc"] = e.confident_acc;
  }
  j["mean_mapped_cosine"] = e.mean_mapped_cosine;
  if (std::isnan(e.confident_miou)) {
    j["confident_miou"] = nullptr;
  } else {
    j["confident_miou"] = e.confident_miou;
  }
  return j.dump();
}

inline int steps_per_epoch_for(const DatasetSplit& split, const ExperimentConfig& config) {
  const int half = config.batch_size / 2;
  return static_cast<int>((split.unlabelled.size() + half - 1) / half);
}

// Runs epochs x steps_per_epoch steps, validates once per epoch, writes
// metrics.jsonl and periodic checkpoints under out_dir (when given), and
// returns the final state. Passing a resume state continues an interrupted
// run; with identical seeds the result is bit-exact with an uninterrupted one.
template <typename T = float>
TrainState<T> train_loop(const DatasetSplit& split, const std::vector<Scene>& val_scenes,
                         const ExperimentConfig& config, const std::string& out_dir = "",
                         const TrainState<T>* resume = nullptr) {
  config.validate();
  if (split.labelled.empty() || split.unlabelled.empty()) {
    throw std::invalid_argument("train_loop: both split pools must be non-empty");
  }
  const int steps_per_epoch = steps_per_epoch_for(split, config);
  const int total_steps = std::max(1, config.epochs * steps_per_epoch);

  TrainState<T> state = resume ? *resume : init_train_state<T>(config);

  std::ofstream metrics;
  namespace fs = std::filesystem;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    metrics.open(fs::path(out_dir) / "metrics.jsonl",
                 resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("train_loop: cannot write metrics in " + out_dir);
  }

  auto save_ckpt = [&](int epoch) {
    if (out_dir.empty()) return;
    char name[32];
    std::snprintf(name, sizeof(name), "ckpt-%04d.bin", epoch);
    if constexpr (std::is_same_v<T, float>) {
      save_checkpoint(state, (fs::path(out_dir) / name).string());
    }
  };

  while (state.epoch < config.epochs) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      const Batch batch = make_batch(split, config.batch_size, state.step, config);
      const StepStats stats = train_step(state, batch, config, total_steps);
      state.history.push_back(stats);
      if (metrics.is_open()) metrics << step_json(stats) << "\n";
    }
    if (!val_scenes.empty()) {
      const EpochStats es = evaluate_model(state, val_scenes);
      state.epoch_history.push_back(es);
      if (metrics.is_open()) metrics << epoch_json(es) << "\n" << std::flush;
    }
    ++state.epoch;
    if (state.epoch % config.ckpt_every == 0 && state.epoch != config.epochs) {
      save_ckpt(state.epoch);
    }
  }
  save_ckpt(state.epoch);
  return state;
}

}  // namespace ccvc
