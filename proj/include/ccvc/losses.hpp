#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccvc/tensor.hpp"

// Objective terms for the two-branch co-training setup. Every function is a
// pure computation over its inputs and, when gradient outputs are requested,
// fills d(loss)/d(input) analytically. Pseudo-label targets are argmax
// results and are treated as constants: no gradient ever flows through the
// target side of a consistency term.

namespace ccvc {

namespace detail {

template <typename T>
inline T clamped_log_prob(T p) {
  // Below the smallest normal the CE plateaus; its derivative is defined 0.
  const T tiny = std::numeric_limits<T>::min();
  return -std::log(p > tiny ? p : tiny);
}

template <typename T>
inline T clamped_log_prob_grad(T p) {
  const T tiny = std::numeric_limits<T>::min();
  return p > tiny ? -T(1) / p : T(0);
}

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  }
}

}  // namespace detail

inline constexpr double kCosineEps = 1e-8;

// Discrepancy loss: per pixel, channel vectors of both feature maps are
// L2-normalized, their dot product is shifted by +1, and the result is
// averaged over batch and pixels. Range [0, 2]. Differentiable through both
// inputs; gradients are accumulated into df1/df2 when non-null.
template <typename T>
T cosine_discrepancy_loss(const Tensor<T>& f1, const Tensor<T>& f2,
                          Tensor<T>* df1 = nullptr, Tensor<T>* df2 = nullptr) {
  detail::check_same_shape(f1, f2, "cosine_discrepancy_loss");
  const int C = f1.c();
  const std::size_t plane = static_cast<std::size_t>(f1.h()) * f1.w();
  const std::size_t pixels = static_cast<std::size_t>(f1.n()) * plane;
  if (pixels == 0 || C == 0) throw std::invalid_argument("cosine_discrepancy_loss: empty input");
  if (df1 && !df1->same_shape(f1)) *df1 = Tensor<T>(f1.n(), f1.c(), f1.h(), f1.w());
  if (df2 && !df2->same_shape(f2)) *df2 = Tensor<T>(f2.n(), f2.c(), f2.h(), f2.w());

  const T eps = static_cast<T>(kCosineEps);
  const T pix_w = T(1) / static_cast<T>(pixels);
  double acc = 0.0;
  for (int n = 0; n < f1.n(); ++n) {
    const T* a0 = f1.image(n);
    const T* b0 = f2.image(n);
    for (std::size_t i = 0; i < plane; ++i) {
      double na2 = 0.0, nb2 = 0.0, d = 0.0;
      for (int c = 0; c < C; ++c) {
        const double a = a0[c * plane + i];
        const double b = b0[c * plane + i];
        na2 += a * a;
        nb2 += b * b;
        d += a * b;
      }
      const double na = std::sqrt(na2);
      const double nb = std::sqrt(nb2);
      const double A = na + eps;
      const double B = nb + eps;
      const double s = d / (A * B);
      acc += 1.0 + s;
      if (df1) {
        T* g = df1->image(n);
        for (int c = 0; c < C; ++c) {
          const double a = a0[c * plane + i];
          const double b = b0[c * plane + i];
          const double radial = na > 0.0 ? s * a / na : 0.0;
          g[c * plane + i] += static_cast<T>(pix_w * (b / B - radial) / A);
        }
      }
      if (df2) {
        T* g = df2->image(n);
        for (int c = 0; c < C; ++c) {
          const double a = a0[c * plane + i];
          const double b = b0[c * plane + i];
          const double radial = nb > 0.0 ? s * b / nb : 0.0;
          g[c * plane + i] += static_cast<T>(pix_w * (a / A - radial) / B);
        }
      }
    }
  }
  return static_cast<T>(acc / static_cast<double>(pixels));
}

template <typename T>
struct SupervisedLoss {
  T value = T(0);                  // 0.5 * (branch1 + branch2)
  std::array<T, 2> branch{};       // per-branch means
  int empty_images = 0;            // all-ignore images seen (each contributed 0)
  bool empty_supervision = false;  // no supervised pixel anywhere in the batch
};

// Ground-truth cross-entropy, Y-way, per image averaged over its non-ignore
// pixels, then averaged over images and the two branches. Gradients (w.r.t.
// the probability fields) are accumulated when requested.
template <typename T>
SupervisedLoss<T> supervised_loss(const Tensor<T>& probs1, const Tensor<T>& probs2,
                                  const std::vector<LabelMap>& labels,
                                  Tensor<T>* dprobs1 = nullptr, Tensor<T>* dprobs2 = nullptr) {
  detail::check_same_shape(probs1, probs2, "supervised_loss");
  if (static_cast<int>(labels.size()) != probs1.n()) {
    throw std::invalid_argument("supervised_loss: batch size mismatch");
  }
  const int Y = probs1.c();
  const std::size_t plane = static_cast<std::size_t>(probs1.h()) * probs1.w();
  SupervisedLoss<T> out;
  if (dprobs1 && !dprobs1->same_shape(probs1)) *dprobs1 = Tensor<T>(probs1.n(), Y, probs1.h(), probs1.w());
  if (dprobs2 && !dprobs2->same_shape(probs2)) *dprobs2 = Tensor<T>(probs2.n(), Y, probs2.h(), probs2.w());

  const Tensor<T>* probs[2] = {&probs1, &probs2};
  Tensor<T>* dprobs[2] = {dprobs1, dprobs2};
  std::size_t supervised_pixels = 0;

  for (int br = 0; br < 2; ++br) {
    double branch_acc = 0.0;
    int empty = 0;
    for (int n = 0; n < probs1.n(); ++n) {
      const LabelMap& lm = labels[n];
      if (lm.height != probs1.h() || lm.width != probs1.w()) {
        throw std::invalid_argument("supervised_loss: label/prob spatial mismatch");
      }
      std::size_t count = 0;
      double img_acc = 0.0;
      const T* p = probs[br]->image(n);
      for (std::size_t i = 0; i < plane; ++i) {
        const std::uint8_t y = lm.ids[i];
        if (y == kIgnoreLabel) continue;
        if (y >= Y) {
          throw std::invalid_argument("supervised_loss: label id " + std::to_string(y) +
                                      " out of range for " + std::to_string(Y) + " classes");
        }
        ++count;
        img_acc += detail::clamped_log_prob(p[static_cast<std::size_t>(y) * plane + i]);
      }
      if (count == 0) {
        ++empty;
        continue;
      }
      if (br == 0) supervised_pixels += count;
      branch_acc += img_acc / static_cast<double>(count);
      if (dprobs[br]) {
        const T w = T(0.5) / (static_cast<T>(probs1.n()) * static_cast<T>(count));
        T* g = dprobs[br]->image(n);
        for (std::size_t i = 0; i < plane; ++i) {
          const std::uint8_t y = lm.ids[i];
          if (y == kIgnoreLabel) continue;
          const std::size_t idx = static_cast<std::size_t>(y) * plane + i;
          g[idx] += w * detail::clamped_log_prob_grad(p[idx]);
        }
      }
    }
    out.branch[br] = static_cast<T>(branch_acc / static_cast<double>(probs1.n()));
    if (br == 0) out.empty_images = empty;
  }
  out.value = T(0.5) * (out.branch[0] + out.branch[1]);
  out.empty_supervision = (supervised_pixels == 0);
  return out;
}

template <typename T>
struct PseudoLabels {
  Tensor<std::uint8_t> labels;  // (N,1,H,W) argmax ids, ties to the smaller id
  Tensor<T> confidence;         // (N,1,H,W) max class probability
};

// Argmax pseudo-labels plus their confidence. The result carries no gradient
// by construction.
template <typename T>
PseudoLabels<T> make_pseudo_labels(const Tensor<T>& probs) {
  const int Y = probs.c();
  if (Y < 1) throw std::invalid_argument("make_pseudo_labels: no classes");
  PseudoLabels<T> out;
  out.labels = Tensor<std::uint8_t>(probs.n(), 1, probs.h(), probs.w());
  out.confidence = Tensor<T>(probs.n(), 1, probs.h(), probs.w());
  const std::size_t plane = static_cast<std::size_t>(probs.h()) * probs.w();
  for (int n = 0; n < probs.n(); ++n) {
    const T* p = probs.image(n);
    std::uint8_t* ids = out.labels.image(n);
    T* conf = out.confidence.image(n);
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      T bestp = p[i];
      for (int c = 1; c < Y; ++c) {
        const T v = p[c * plane + i];
        if (v > bestp) {
          bestp = v;
          best = c;
        }
      }
      ids[i] = static_cast<std::uint8_t>(best);
      conf[i] = bestp;
    }
  }
  return out;
}

// Per-pixel masks for the conflict-based weighting. Per branch i:
//   cc = conflict AND confidence_i > gamma        (conflicting and confident)
//   e  = 1 - cc                                   (everything else, incl. CU)
// Confidence comes from the branch's own prediction; teacher_confidence
// switches it to the other branch's confidence instead.
template <typename T>
struct ConflictPartition {
  Tensor<std::uint8_t> conflict;            // shared disagreement mask
  std::array<Tensor<std::uint8_t>, 2> cc;   // per branch
  std::array<Tensor<std::uint8_t>, 2> e;    // complement of cc per branch
  std::array<Tensor<T>, 2> confidence;      // per branch max probability
};

template <typename T>
ConflictPartition<T> conflict_partition(const Tensor<T>& probs1, const Tensor<T>& probs2,
                                        T gamma, bool teacher_confidence = false) {
  detail::check_same_shape(probs1, probs2, "conflict_partition");
  if (!(gamma >= T(0) && gamma <= T(1))) {
    throw std::invalid_argument("conflict_partition: gamma must be in [0,1]");
  }
  const auto pl1 = make_pseudo_labels(probs1);
  const auto pl2 = make_pseudo_labels(probs2);
  ConflictPartition<T> out;
  out.conflict = Tensor<std::uint8_t>(probs1.n(), 1, probs1.h(), probs1.w());
  for (int br = 0; br < 2; ++br) {
    out.cc[br] = Tensor<std::uint8_t>(probs1.n(), 1, probs1.h(), probs1.w());
    out.e[br] = Tensor<std::uint8_t>(probs1.n(), 1, probs1.h(), probs1.w());
  }
  out.confidence[0] = pl1.confidence;
  out.confidence[1] = pl2.confidence;
  for (std::size_t i = 0; i < out.conflict.size(); ++i) {
    const bool conflict = pl1.labels[i] != pl2.labels[i];
    out.conflict[i] = conflict ? 1 : 0;
    for (int br = 0; br < 2; ++br) {
      const T conf = teacher_confidence ? out.confidence[1 - br][i] : out.confidence[br][i];
      const bool cc = conflict && conf > gamma;
      out.cc[br][i] = cc ? 1 : 0;
      out.e[br][i] = cc ? 0 : 1;
    }
  }
  return out;
}

template <typename T>
struct ConsistencyLoss {
  T value = T(0);              // 0.5 * (branch1 + branch2)
  std::array<T, 2> branch{};   // omega_c * cc_term + e_term
  std::array<T, 2> cc_term{};  // conflict-confident part, full-pixel-count mean
  std::array<T, 2> e_term{};   // remainder part, full-pixel-count mean
  T cc_frac = T(0);            // fraction of (pixel, branch) pairs marked cc
};

// Cross pseudo-label consistency with conflict weighting. Branch i's
// prediction is supervised by branch (3-i)'s argmax; the cc-masked and
// e-masked sums are each normalized by the full pixel count, and the branch
// loss is omega_c * cc + e. Gradients flow only into the supervised branch's
// probabilities.
template <typename T>
ConsistencyLoss<T> consistency_loss_cpl(const Tensor<T>& probs1, const Tensor<T>& probs2,
                                        const ConflictPartition<T>& part, T omega_c,
                                        Tensor<T>* dprobs1 = nullptr,
                                        Tensor<T>* dprobs2 = nullptr) {
  detail::check_same_shape(probs1, probs2, "consistency_loss_cpl");
  if (!part.conflict.same_shape(Tensor<std::uint8_t>(probs1.n(), 1, probs1.h(), probs1.w()))) {
    throw std::invalid_argument("consistency_loss_cpl: partition shape mismatch");
  }
  const int Y = probs1.c();
  const std::size_t plane = static_cast<std::size_t>(probs1.h()) * probs1.w();
  const std::size_t pixels = static_cast<std::size_t>(probs1.n()) * plane;
  if (dprobs1 && !dprobs1->same_shape(probs1)) *dprobs1 = Tensor<T>(probs1.n(), Y, probs1.h(), probs1.w());
  if (dprobs2 && !dprobs2->same_shape(probs2)) *dprobs2 = Tensor<T>(probs2.n(), Y, probs2.h(), probs2.w());

  const auto targets1 = make_pseudo_labels(probs2).labels;  // supervises branch 1
  const auto targets2 = make_pseudo_labels(probs1).labels;  // supervises branch 2
  const Tensor<T>* probs[2] = {&probs1, &probs2};
  Tensor<T>* dprobs[2] = {dprobs1, dprobs2};
  const Tensor<std::uint8_t>* targets[2] = {&targets1, &targets2};

  ConsistencyLoss<T> out;
  std::size_t cc_count = 0;
  for (int br = 0; br < 2; ++br) {
    double cc_acc = 0.0, e_acc = 0.0;
    for (int n = 0; n < probs1.n(); ++n) {
      const T* p = probs[br]->image(n);
      const std::uint8_t* tgt = targets[br]->image(n);
      const std::uint8_t* cc = part.cc[br].image(n);
      T* g = dprobs[br] ? dprobs[br]->image(n) : nullptr;
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = static_cast<std::size_t>(tgt[i]) * plane + i;
        const T ce = detail::clamped_log_prob(p[idx]);
        if (cc[i]) {
          cc_acc += ce;
          ++cc_count;
        } else {
          e_acc += ce;
        }
        if (g) {
          const T w = (cc[i] ? omega_c : T(1)) * T(0.5) / static_cast<T>(pixels);
          g[idx] += w * detail::clamped_log_prob_grad(p[idx]);
        }
      }
    }
    out.cc_term[br] = static_cast<T>(cc_acc / static_cast<double>(pixels));
    out.e_term[br] = static_cast<T>(e_acc / static_cast<double>(pixels));
    out.branch[br] = omega_c * out.cc_term[br] + out.e_term[br];
  }
  out.value = T(0.5) * (out.branch[0] + out.branch[1]);
  out.cc_frac = static_cast<T>(static_cast<double>(cc_count) / (2.0 * pixels));
  return out;
}

template <typename T>
struct LossBreakdown {
  T sup = T(0);
  T con = T(0);
  std::array<T, 2> con_cc{};
  std::array<T, 2> con_e{};
  T dis = T(0);
  T dis_l = T(0);
  T dis_u = T(0);
  T total = T(0);
};

// Weighted sum of Eq.-style components:
//   total = lambda1 * sup + lambda2 * con + lambda3 * dis,
//   dis   = 0.5 * (dis_l + dis_u).
template <typename T>
LossBreakdown<T> total_loss(T sup, const ConsistencyLoss<T>& con, T dis_l, T dis_u,
                            T lambda1, T lambda2, T lambda3) {
  const auto check = [](T v, const char* name) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::domain_error(std::string("total_loss: non-finite component '") + name + "'");
    }
  };
  check(sup, "sup");
  check(con.value, "con");
  check(dis_l, "dis_l");
  check(dis_u, "dis_u");
  LossBreakdown<T> out;
  out.sup = sup;
  out.con = con.value;
  out.con_cc = con.cc_term;
  out.con_e = con.e_term;
  out.dis_l = dis_l;
  out.dis_u = dis_u;
  out.dis = T(0.5) * (dis_l + dis_u);
  out.total = lambda1 * sup + lambda2 * con.value + lambda3 * out.dis;
  return out;
}

}  // namespace ccvc
