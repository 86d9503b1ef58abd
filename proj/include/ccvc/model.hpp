#pragma once

#include <array>
#include <stdexcept>
#include <vector>

#include "ccvc/layers.hpp"
#include "ccvc/losses.hpp"
#include "ccvc/rng.hpp"
#include "ccvc/tensor.hpp"

// Two-branch segmentation network. Both branches share one architecture but
// never share parameter storage; the mapping head projects branch 2's
// features for the discrepancy loss and feeds nothing else.
//
// Branch layout (4 downsampling stages, widths base..4*base):
//   stem   conv3x3/s2  in   -> base       @ 1/2
//   enc2   conv3x3/s2  base -> 2*base     @ 1/4
//   enc3   conv3x3/s2  2b   -> 3*base     @ 1/8
//   enc4   conv3x3/s2  3b   -> feat       @ 1/16
//   mid    conv3x3/s1  feat -> feat       @ 1/16
//   up x2, dec1 conv3x3  feat -> 3b       @ 1/8
//   up x2, dec2 conv3x3  3b   -> 2b       @ 1/4
//   proj   conv1x1      2b   -> feat      @ 1/4   <- features (post BN+ReLU)
//   cls    conv1x1      feat -> classes   @ 1/4, logits upsampled to input res

namespace ccvc {

struct ArchConfig {
  int in_channels = 3;
  int num_classes = 2;
  int base_width = 32;
  int feature_channels = 128;
  double map_dropout_p = 0.5;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("ArchConfig: num_classes must be >= 2");
    if (in_channels < 1) throw std::invalid_argument("ArchConfig: in_channels must be >= 1");
    if (base_width < 1) throw std::invalid_argument("ArchConfig: base_width must be >= 1");
    if (feature_channels < 1) {
      throw std::invalid_argument("ArchConfig: feature_channels must be >= 1");
    }
    if (map_dropout_p < 0.0 || map_dropout_p >= 1.0) {
      throw std::invalid_argument("ArchConfig: map_dropout_p must be in [0,1)");
    }
  }

  bool operator==(const ArchConfig&) const = default;
};

template <typename T>
struct BranchOutput {
  Tensor<T> features;  // (N, feature_channels, H/8, W/8), pre-normalization
  Tensor<T> logits;    // (N, Y, H, W)
  Tensor<T> probs;     // softmax of logits
};

template <typename T>
class BranchNet {
 public:
  BranchNet() = default;

  explicit BranchNet(const ArchConfig& cfg)
      : stem_(cfg.in_channels, cfg.base_width, 3, 2, 1, false),
        enc2_(cfg.base_width, 2 * cfg.base_width, 3, 2, 1, false),
        enc3_(2 * cfg.base_width, 3 * cfg.base_width, 3, 2, 1, false),
        enc4_(3 * cfg.base_width, cfg.feature_channels, 3, 2, 1, false),
        mid_(cfg.feature_channels, cfg.feature_channels, 3, 1, 1, false),
        dec1_(cfg.feature_channels, 3 * cfg.base_width, 3, 1, 1, false),
        dec2_(3 * cfg.base_width, 2 * cfg.base_width, 3, 1, 1, false),
        proj_(2 * cfg.base_width, cfg.feature_channels, 1, 1, 0, false),
        cls_(cfg.feature_channels, cfg.num_classes, 1, 1, 0, true),
        bn_stem_(cfg.base_width), bn2_(2 * cfg.base_width), bn3_(3 * cfg.base_width),
        bn4_(cfg.feature_channels), bn_mid_(cfg.feature_channels),
        bn_d1_(3 * cfg.base_width), bn_d2_(2 * cfg.base_width),
        bn_proj_(cfg.feature_channels) {}

  void init(Rng& rng) {
    stem_.init_he(rng);
    enc2_.init_he(rng);
    enc3_.init_he(rng);
    enc4_.init_he(rng);
    mid_.init_he(rng);
    dec1_.init_he(rng);
    dec2_.init_he(rng);
    proj_.init_he(rng);
    cls_.init_he(rng);
  }

  struct Trace {
    typename Conv2d<T>::Cache stem_c, enc2_c, enc3_c, enc4_c, mid_c, dec1_c, dec2_c, proj_c,
        cls_c;
    typename BatchNorm2d<T>::Cache bn_stem_c, bn2_c, bn3_c, bn4_c, bn_mid_c, bn_d1_c, bn_d2_c,
        bn_proj_c;
    Tensor<T> a1, a2, a3, a4, a5, d1, d2;  // post-ReLU stage outputs
    Tensor<T> features;
    int in_h = 0, in_w = 0;
  };

  BranchOutput<T> forward(const Tensor<T>& x, bool train, Trace* tr) {
    auto act = [&](Conv2d<T>& conv, BatchNorm2d<T>& bn, const Tensor<T>& in,
                   typename Conv2d<T>::Cache* cc, typename BatchNorm2d<T>::Cache* bc) {
      return relu(bn.forward(conv.forward(in, cc), train, bc));
    };
    Tensor<T> a1 = act(stem_, bn_stem_, x, tr ? &tr->stem_c : nullptr, tr ? &tr->bn_stem_c : nullptr);
    Tensor<T> a2 = act(enc2_, bn2_, a1, tr ? &tr->enc2_c : nullptr, tr ? &tr->bn2_c : nullptr);
    Tensor<T> a3 = act(enc3_, bn3_, a2, tr ? &tr->enc3_c : nullptr, tr ? &tr->bn3_c : nullptr);
    Tensor<T> a4 = act(enc4_, bn4_, a3, tr ? &tr->enc4_c : nullptr, tr ? &tr->bn4_c : nullptr);
    Tensor<T> a5 = act(mid_, bn_mid_, a4, tr ? &tr->mid_c : nullptr, tr ? &tr->bn_mid_c : nullptr);
    Tensor<T> u1 = resize_bilinear(a5, a3.h(), a3.w());
    Tensor<T> d1 = act(dec1_, bn_d1_, u1, tr ? &tr->dec1_c : nullptr, tr ? &tr->bn_d1_c : nullptr);
    Tensor<T> u2 = resize_bilinear(d1, a2.h(), a2.w());
    Tensor<T> d2 = act(dec2_, bn_d2_, u2, tr ? &tr->dec2_c : nullptr, tr ? &tr->bn_d2_c : nullptr);
    Tensor<T> features =
        act(proj_, bn_proj_, d2, tr ? &tr->proj_c : nullptr, tr ? &tr->bn_proj_c : nullptr);

    BranchOutput<T> out;
    out.features = features;
    Tensor<T> logits4 = cls_.forward(features, tr ? &tr->cls_c : nullptr);
    out.logits = resize_bilinear(logits4, x.h(), x.w());
    out.probs = softmax_channels(out.logits);
    if (tr) {
      tr->a1 = std::move(a1);
      tr->a2 = std::move(a2);
      tr->a3 = std::move(a3);
      tr->a4 = std::move(a4);
      tr->a5 = std::move(a5);
      tr->d1 = std::move(d1);
      tr->d2 = std::move(d2);
      tr->features = features;
      tr->in_h = x.h();
      tr->in_w = x.w();
    }
    return out;
  }

  struct Grads {
    Tensor<T> stem_w, enc2_w, enc3_w, enc4_w, mid_w, dec1_w, dec2_w, proj_w, cls_w, cls_b;
    Tensor<T> bn_stem_g, bn_stem_b, bn2_g, bn2_b, bn3_g, bn3_b, bn4_g, bn4_b,
        bn_mid_g, bn_mid_b, bn_d1_g, bn_d1_b, bn_d2_g, bn_d2_b, bn_proj_g, bn_proj_b;

    explicit Grads(const BranchNet& net)
        : stem_w(like(net.stem_.weight)), enc2_w(like(net.enc2_.weight)),
          enc3_w(like(net.enc3_.weight)), enc4_w(like(net.enc4_.weight)),
          mid_w(like(net.mid_.weight)), dec1_w(like(net.dec1_.weight)),
          dec2_w(like(net.dec2_.weight)), proj_w(like(net.proj_.weight)),
          cls_w(like(net.cls_.weight)), cls_b(like(net.cls_.bias)),
          bn_stem_g(like(net.bn_stem_.gamma)), bn_stem_b(like(net.bn_stem_.beta)),
          bn2_g(like(net.bn2_.gamma)), bn2_b(like(net.bn2_.beta)),
          bn3_g(like(net.bn3_.gamma)), bn3_b(like(net.bn3_.beta)),
          bn4_g(like(net.bn4_.gamma)), bn4_b(like(net.bn4_.beta)),
          bn_mid_g(like(net.bn_mid_.gamma)), bn_mid_b(like(net.bn_mid_.beta)),
          bn_d1_g(like(net.bn_d1_.gamma)), bn_d1_b(like(net.bn_d1_.beta)),
          bn_d2_g(like(net.bn_d2_.gamma)), bn_d2_b(like(net.bn_d2_.beta)),
          bn_proj_g(like(net.bn_proj_.gamma)), bn_proj_b(like(net.bn_proj_.beta)) {}

    std::vector<Tensor<T>*> ptrs() {
      return {&stem_w, &bn_stem_g, &bn_stem_b, &enc2_w,  &bn2_g,     &bn2_b,
              &enc3_w, &bn3_g,     &bn3_b,     &enc4_w,  &bn4_g,     &bn4_b,
              &mid_w,  &bn_mid_g,  &bn_mid_b,  &dec1_w,  &bn_d1_g,   &bn_d1_b,
              &dec2_w, &bn_d2_g,   &bn_d2_b,   &proj_w,  &bn_proj_g, &bn_proj_b,
              &cls_w,  &cls_b};
    }

   private:
    static Tensor<T> like(const Tensor<T>& t) { return Tensor<T>(t.n(), t.c(), t.h(), t.w()); }
  };

  // dlogits is at input resolution; dfeat_extra (optional) is an additional
  // gradient on the feature map, e.g. from the discrepancy loss.
  void backward(const Trace& tr, const Tensor<T>& dlogits, const Tensor<T>* dfeat_extra,
                Grads& g) {
    Tensor<T> dlogits4 = resize_bilinear_backward(dlogits, tr.features.h(), tr.features.w());
    Tensor<T> dfeat = cls_.backward(tr.cls_c, dlogits4, g.cls_w, &g.cls_b);
    if (dfeat_extra) {
      for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat[i] += (*dfeat_extra)[i];
    }
    Tensor<T> d = relu_backward(tr.features, dfeat);
    d = bn_proj_.backward(tr.bn_proj_c, d, g.bn_proj_g, g.bn_proj_b);
    d = proj_.backward(tr.proj_c, d, g.proj_w, nullptr);
    d = relu_backward(tr.d2, d);
    d = bn_d2_.backward(tr.bn_d2_c, d, g.bn_d2_g, g.bn_d2_b);
    d = dec2_.backward(tr.dec2_c, d, g.dec2_w, nullptr);
    d = resize_bilinear_backward(d, tr.d1.h(), tr.d1.w());
    d = relu_backward(tr.d1, d);
    d = bn_d1_.backward(tr.bn_d1_c, d, g.bn_d1_g, g.bn_d1_b);
    d = dec1_.backward(tr.dec1_c, d, g.dec1_w, nullptr);
    d = resize_bilinear_backward(d, tr.a5.h(), tr.a5.w());
    d = relu_backward(tr.a5, d);
    d = bn_mid_.backward(tr.bn_mid_c, d, g.bn_mid_g, g.bn_mid_b);
    d = mid_.backward(tr.mid_c, d, g.mid_w, nullptr);
    d = relu_backward(tr.a4, d);
    d = bn4_.backward(tr.bn4_c, d, g.bn4_g, g.bn4_b);
    d = enc4_.backward(tr.enc4_c, d, g.enc4_w, nullptr);
    d = relu_backward(tr.a3, d);
    d = bn3_.backward(tr.bn3_c, d, g.bn3_g, g.bn3_b);
    d = enc3_.backward(tr.enc3_c, d, g.enc3_w, nullptr);
    d = relu_backward(tr.a2, d);
    d = bn2_.backward(tr.bn2_c, d, g.bn2_g, g.bn2_b);
    d = enc2_.backward(tr.enc2_c, d, g.enc2_w, nullptr);
    d = relu_backward(tr.a1, d);
    d = bn_stem_.backward(tr.bn_stem_c, d, g.bn_stem_g, g.bn_stem_b);
    stem_.backward(tr.stem_c, d, g.stem_w, nullptr);
  }

  std::vector<Tensor<T>*> params() {
    return {&stem_.weight,  &bn_stem_.gamma, &bn_stem_.beta, &enc2_.weight,  &bn2_.gamma,
            &bn2_.beta,     &enc3_.weight,   &bn3_.gamma,    &bn3_.beta,     &enc4_.weight,
            &bn4_.gamma,    &bn4_.beta,      &mid_.weight,   &bn_mid_.gamma, &bn_mid_.beta,
            &dec1_.weight,  &bn_d1_.gamma,   &bn_d1_.beta,   &dec2_.weight,  &bn_d2_.gamma,
            &bn_d2_.beta,   &proj_.weight,   &bn_proj_.gamma, &bn_proj_.beta,
            &cls_.weight,   &cls_.bias};
  }

  std::vector<Tensor<T>*> buffers() {
    return {&bn_stem_.running_mean, &bn_stem_.running_var,  &bn2_.running_mean,
            &bn2_.running_var,      &bn3_.running_mean,     &bn3_.running_var,
            &bn4_.running_mean,     &bn4_.running_var,      &bn_mid_.running_mean,
            &bn_mid_.running_var,   &bn_d1_.running_mean,   &bn_d1_.running_var,
            &bn_d2_.running_mean,   &bn_d2_.running_var,    &bn_proj_.running_mean,
            &bn_proj_.running_var};
  }

  BatchNorm2d<T>& final_norm() { return bn_proj_; }

 private:
  Conv2d<T> stem_, enc2_, enc3_, enc4_, mid_, dec1_, dec2_, proj_, cls_;
  BatchNorm2d<T> bn_stem_, bn2_, bn3_, bn4_, bn_mid_, bn_d1_, bn_d2_, bn_proj_;
};

// One 1x1 mixing conv, batch normalization, ReLU, then channel dropout in
// train mode. Output dimension equals input dimension.
template <typename T>
class MapHead {
 public:
  MapHead() = default;
  explicit MapHead(const ArchConfig& cfg)
      : conv_(cfg.feature_channels, cfg.feature_channels, 1, 1, 0, false),
        bn_(cfg.feature_channels), dropout_p_(cfg.map_dropout_p) {}

  void init(Rng& rng) { conv_.init_he(rng); }

  struct Trace {
    typename Conv2d<T>::Cache conv_c;
    typename BatchNorm2d<T>::Cache bn_c;
    Tensor<T> relu_out;
    std::vector<std::uint8_t> keep;
    bool dropped = false;
  };

  Tensor<T> forward(const Tensor<T>& f, bool train, Rng* rng, Trace* tr) {
    if (f.c() != conv_.in_ch) {
      throw std::invalid_argument("MapHead: expected " + std::to_string(conv_.in_ch) +
                                  " channels, got " + std::to_string(f.c()));
    }
    Tensor<T> y = relu(bn_.forward(conv_.forward(f, tr ? &tr->conv_c : nullptr), train,
                                   tr ? &tr->bn_c : nullptr));
    if (tr) tr->relu_out = y;
    if (train && dropout_p_ > 0.0) {
      if (!rng) throw std::invalid_argument("MapHead: train-mode dropout needs an rng");
      std::vector<std::uint8_t> local_keep;
      std::vector<std::uint8_t>& keep = tr ? tr->keep : local_keep;
      y = channel_dropout(y, dropout_p_, *rng, keep);
      if (tr) tr->dropped = true;
    }
    return y;
  }

  struct Grads {
    Tensor<T> conv_w, bn_g, bn_b;
    explicit Grads(const MapHead& m)
        : conv_w(m.conv_.weight.n(), m.conv_.weight.c(), m.conv_.weight.h(), m.conv_.weight.w()),
          bn_g(1, m.bn_.channels, 1, 1), bn_b(1, m.bn_.channels, 1, 1) {}
    std::vector<Tensor<T>*> ptrs() { return {&conv_w, &bn_g, &bn_b}; }
  };

  Tensor<T> backward(const Trace& tr, const Tensor<T>& dy, Grads& g) {
    Tensor<T> d = tr.dropped ? channel_dropout_backward(dy, dropout_p_, tr.keep) : dy;
    d = relu_backward(tr.relu_out, d);
    d = bn_.backward(tr.bn_c, d, g.bn_g, g.bn_b);
    return conv_.backward(tr.conv_c, d, g.conv_w, nullptr);
  }

  std::vector<Tensor<T>*> params() { return {&conv_.weight, &bn_.gamma, &bn_.beta}; }
  std::vector<Tensor<T>*> buffers() { return {&bn_.running_mean, &bn_.running_var}; }

  double dropout_p() const { return dropout_p_; }
  void set_dropout_p(double p) { dropout_p_ = p; }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  double dropout_p_ = 0.5;
};

template <typename T>
struct TwoBranchModel {
  ArchConfig config;
  std::array<BranchNet<T>, 2> branch;
  MapHead<T> map_head;

  std::vector<Tensor<T>*> params() {
    auto out = branch[0].params();
    for (auto* p : branch[1].params()) out.push_back(p);
    for (auto* p : map_head.params()) out.push_back(p);
    return out;
  }

  std::vector<Tensor<T>*> buffers() {
    auto out = branch[0].buffers();
    for (auto* p : branch[1].buffers()) out.push_back(p);
    for (auto* p : map_head.buffers()) out.push_back(p);
    return out;
  }

  struct Grads {
    std::array<typename BranchNet<T>::Grads, 2> branch;
    typename MapHead<T>::Grads map;
    explicit Grads(TwoBranchModel& m)
        : branch{typename BranchNet<T>::Grads(m.branch[0]),
                 typename BranchNet<T>::Grads(m.branch[1])},
          map(m.map_head) {}
    std::vector<Tensor<T>*> ptrs() {
      auto out = branch[0].ptrs();
      for (auto* p : branch[1].ptrs()) out.push_back(p);
      for (auto* p : map.ptrs()) out.push_back(p);
      return out;
    }
    void zero() {
      for (auto* t : ptrs()) t->fill(T(0));
    }
  };
};

// Branches draw from independent streams derived from the seed, so they are
// differently initialized by construction.
template <typename T>
TwoBranchModel<T> init_model(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TwoBranchModel<T> model;
  model.config = cfg;
  model.branch[0] = BranchNet<T>(cfg);
  model.branch[1] = BranchNet<T>(cfg);
  model.map_head = MapHead<T>(cfg);
  Rng r1(mix_seed(seed, streams::kInitBranch1));
  Rng r2(mix_seed(seed, streams::kInitBranch2));
  Rng rm(mix_seed(seed, streams::kInitMapHead));
  model.branch[0].init(r1);
  model.branch[1].init(r2);
  model.map_head.init(rm);
  return model;
}

// branch_index follows the paper's 1-based numbering.
template <typename T>
BranchOutput<T> forward_branch(TwoBranchModel<T>& model, int branch_index,
                               const Tensor<T>& images, bool train_mode,
                               typename BranchNet<T>::Trace* trace = nullptr) {
  if (branch_index != 1 && branch_index != 2) {
    throw std::invalid_argument("forward_branch: branch_index must be 1 or 2");
  }
  if (images.c() != model.config.in_channels) {
    throw std::invalid_argument("forward_branch: expected " +
                                std::to_string(model.config.in_channels) + " input channels");
  }
  return model.branch[branch_index - 1].forward(images, train_mode, trace);
}

template <typename T>
Tensor<T> map_features(TwoBranchModel<T>& model, const Tensor<T>& features_branch2,
                       bool train_mode, Rng* rng = nullptr,
                       typename MapHead<T>::Trace* trace = nullptr) {
  return model.map_head.forward(features_branch2, train_mode, rng, trace);
}

// Inference uses branch 1 only, eval mode, argmax with ties to the smaller id.
template <typename T>
std::vector<LabelMap> predict(TwoBranchModel<T>& model, const Tensor<T>& images) {
  const auto out = forward_branch(model, 1, images, /*train_mode=*/false);
  const auto pl = make_pseudo_labels(out.probs);
  std::vector<LabelMap> maps;
  maps.reserve(images.n());
  for (int n = 0; n < images.n(); ++n) {
    LabelMap lm(images.h(), images.w());
    const std::uint8_t* src = pl.labels.image(n);
    std::copy(src, src + lm.ids.size(), lm.ids.begin());
    maps.push_back(std::move(lm));
  }
  return maps;
}

template <typename T>
std::size_t parameter_count(std::vector<Tensor<T>*> params) {
  std::size_t total = 0;
  for (const auto* p : params) total += p->size();
  return total;
}

}  // namespace ccvc
