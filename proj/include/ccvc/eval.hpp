#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "ccvc/losses.hpp"
#include "ccvc/model.hpp"
#include "ccvc/tensor.hpp"

// Metrics and analysis probes. Ignore pixels are excluded everywhere.

namespace ccvc {

struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;  // rows = ground truth, cols = prediction

  explicit ConfusionMatrix(int classes)
      : num_classes(classes),
        counts(static_cast<std::size_t>(classes) * classes, 0) {}

  std::int64_t& at(int gt, int pred) {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::int64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }

  void add(const LabelMap& prediction, const LabelMap& truth) {
    if (prediction.height != truth.height || prediction.width != truth.width) {
      throw std::invalid_argument("ConfusionMatrix: prediction/label size mismatch");
    }
    for (std::size_t i = 0; i < truth.ids.size(); ++i) {
      const std::uint8_t gt = truth.ids[i];
      if (gt == kIgnoreLabel) continue;
      const std::uint8_t pred = prediction.ids[i];
      if (gt >= num_classes || pred >= num_classes) {
        throw std::invalid_argument("ConfusionMatrix: id out of range");
      }
      ++at(gt, pred);
    }
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }
};

struct MiouResult {
  double miou = 0.0;
  std::vector<double> per_class;   // NaN for classes absent from both sides
  std::vector<bool> included;
};

// IoU_c = TP / (TP + FP + FN); classes absent from both prediction and truth
// are excluded from the mean.
inline MiouResult miou(const std::vector<LabelMap>& predictions,
                       const std::vector<LabelMap>& labels, int num_classes) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("miou: prediction/label count mismatch");
  }
  if (num_classes < 1) throw std::invalid_argument("miou: num_classes must be >= 1");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(predictions[i], labels[i]);
  if (cm.total() == 0) throw std::runtime_error("miou: empty-evaluation (no evaluable pixels)");

  MiouResult out;
  out.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  out.included.assign(num_classes, false);
  double sum = 0.0;
  int included = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < num_classes; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    if (tp + fp + fn == 0) continue;
    out.per_class[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    out.included[c] = true;
    sum += out.per_class[c];
    ++included;
  }
  out.miou = sum / included;
  return out;
}

struct ConfidenceStats {
  double confident_frac = 0.0;
  double confident_acc = std::numeric_limits<double>::quiet_NaN();   // null when no pixel passes
  double confident_miou = std::numeric_limits<double>::quiet_NaN();  // mIoU over confident pixels
};

// Fraction of non-ignore pixels whose max probability exceeds the threshold
// (strictly), plus accuracy and mIoU restricted to those pixels.
template <typename T>
ConfidenceStats confidence_stats(const std::vector<Tensor<T>>& probs,
                                 const std::vector<LabelMap>& labels, double threshold) {
  if (probs.size() != labels.size()) {
    throw std::invalid_argument("confidence_stats: probs/label count mismatch");
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("confidence_stats: threshold must be in [0,1]");
  }
  std::int64_t evaluated = 0, confident = 0, correct = 0;
  int num_classes = 0;
  std::vector<LabelMap> conf_preds, conf_labels;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto pl = make_pseudo_labels(probs[i]);
    num_classes = probs[i].c();
    if (probs[i].h() != labels[i].height || probs[i].w() != labels[i].width ||
        probs[i].n() != 1) {
      throw std::invalid_argument("confidence_stats: probs/label shape mismatch");
    }
    LabelMap cp(labels[i].height, labels[i].width, kIgnoreLabel);
    LabelMap cl(labels[i].height, labels[i].width, kIgnoreLabel);
    for (std::size_t px = 0; px < labels[i].ids.size(); ++px) {
      const std::uint8_t gt = labels[i].ids[px];
      if (gt == kIgnoreLabel) continue;
      ++evaluated;
      if (static_cast<double>(pl.confidence[px]) > threshold) {
        ++confident;
        if (pl.labels[px] == gt) ++correct;
        cp.ids[px] = pl.labels[px];
        cl.ids[px] = gt;
      }
    }
    conf_preds.push_back(std::move(cp));
    conf_labels.push_back(std::move(cl));
  }
  ConfidenceStats out;
  if (evaluated == 0) return out;
  out.confident_frac = static_cast<double>(confident) / static_cast<double>(evaluated);
  if (confident > 0) {
    out.confident_acc = static_cast<double>(correct) / static_cast<double>(confident);
    out.confident_miou = miou(conf_preds, conf_labels, num_classes).miou;
  }
  return out;
}

// Mean per-pixel cosine between the raw features of the two branches in eval
// mode (no mapping head: the probe measures branch divergence itself).
template <typename T>
double feature_cosine_probe(TwoBranchModel<T>& model, const Tensor<T>& images) {
  const auto out1 = forward_branch(model, 1, images, /*train_mode=*/false);
  const auto out2 = forward_branch(model, 2, images, /*train_mode=*/false);
  return mean_feature_cosine(out1.features, out2.features);
}

template <typename T>
double mean_feature_cosine(const Tensor<T>& f1, const Tensor<T>& f2) {
  if (!f1.same_shape(f2)) throw std::invalid_argument("mean_feature_cosine: shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(f1.h()) * f1.w();
  const std::size_t pixels = static_cast<std::size_t>(f1.n()) * plane;
  double acc = 0.0;
  for (int n = 0; n < f1.n(); ++n) {
    const T* a = f1.image(n);
    const T* b = f2.image(n);
    for (std::size_t i = 0; i < plane; ++i) {
      double na = 0.0, nb = 0.0, d = 0.0;
      for (int c = 0; c < f1.c(); ++c) {
        const double x = a[c * plane + i];
        const double y = b[c * plane + i];
        na += x * x;
        nb += y * y;
        d += x * y;
      }
      acc += d / ((std::sqrt(na) + kCosineEps) * (std::sqrt(nb) + kCosineEps));
    }
  }
  return acc / static_cast<double>(pixels);
}

}  // namespace ccvc
