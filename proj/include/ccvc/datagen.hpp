#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "ccvc/config.hpp"
#include "ccvc/layers.hpp"
#include "ccvc/rng.hpp"
#include "ccvc/tensor.hpp"

// Deterministic synthetic segmentation scenes plus the split / augmentation /
// batching pipeline. Every function here is a pure function of its inputs and
// seeds; batch assembly for one step never depends on another step.

namespace ccvc {

struct Scene {
  Tensor<float> image;   // (1, C, H, W), values in [0,1]
  LabelMap label;        // empty when the label is withheld
  std::uint64_t id = 0;  // scene identity, stable across augmentation
};

struct DatasetSplit {
  std::vector<Scene> labelled;
  std::vector<Scene> unlabelled;
  std::uint64_t seed = 0;
};

struct WeakAugRecord {
  bool flip = false;
  double scale = 1.0;
  int src_y = 0, src_x = 0;  // crop window origin in the scaled image
  int dst_y = 0, dst_x = 0;  // paste origin when padding was needed
};

struct CutoutRect {
  int y = 0, x = 0, h = 0, w = 0;
};

struct StrongAugRecord {
  bool jitter = false, gray = false, blur = false, cutout = false;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0, sigma = 0.0;
  CutoutRect cut;
};

struct Batch {
  Tensor<float> labelled_images;
  std::vector<LabelMap> labelled_labels;
  Tensor<float> unlabelled_images;
  std::vector<std::uint64_t> labelled_ids;
  std::vector<std::uint64_t> unlabelled_ids;
  std::vector<WeakAugRecord> weak_labelled;
  std::vector<WeakAugRecord> weak_unlabelled;
  std::vector<StrongAugRecord> strong_unlabelled;
};

// Tuning knobs for the scene generator. The per-scene jitter and the noise
// levels set how far a 40-scene labelled sample undersamples the appearance
// distribution, which is what makes the unlabelled pool worth learning from.
struct SceneGenParams {
  double class_jitter = 0.26;   // per-scene, per-class color shift (uniform +-)
  double bg_texture_amp = 0.12;
  double fg_texture_amp = 0.06;
  double pixel_noise = 0.07;    // gaussian sigma, per pixel per channel
  double gradient_amp = 0.08;
  double illum_jitter = 0.25;   // per-scene global brightness factor, 1 +- this
  int max_objects = 3;
};

namespace detail {

inline void base_color(int cls, float* rgb) {
  static const float table[8][3] = {
      {0.45f, 0.45f, 0.42f},  // background
      {0.75f, 0.25f, 0.25f}, {0.25f, 0.65f, 0.30f}, {0.25f, 0.35f, 0.75f},
      {0.75f, 0.65f, 0.25f}, {0.60f, 0.30f, 0.65f}, {0.25f, 0.65f, 0.65f},
      {0.70f, 0.45f, 0.25f}};
  if (cls < 8) {
    rgb[0] = table[cls][0];
    rgb[1] = table[cls][1];
    rgb[2] = table[cls][2];
  } else {
    Rng r(mix_seed(0xC01Au, static_cast<std::uint64_t>(cls)));
    for (int k = 0; k < 3; ++k) rgb[k] = static_cast<float>(0.2 + 0.6 * r.uniform());
  }
}

// Smooth value-noise field in [-1, 1]: a coarse random grid, bilinearly
// interpolated to the full resolution.
inline std::vector<float> noise_field(Rng& rng, int size, int cell) {
  const int g = size / cell + 2;
  std::vector<float> grid(static_cast<std::size_t>(g) * g);
  for (auto& v : grid) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const int y0 = static_cast<int>(fy);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const int x0 = static_cast<int>(fx);
      const double wx = fx - x0;
      const double top = grid[y0 * g + x0] * (1 - wx) + grid[y0 * g + x0 + 1] * wx;
      const double bot = grid[(y0 + 1) * g + x0] * (1 - wx) + grid[(y0 + 1) * g + x0 + 1] * wx;
      out[static_cast<std::size_t>(y) * size + x] = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

struct Shape {
  int kind = 0;  // 0 disk, 1 rectangle, 2 triangle
  double cx = 0, cy = 0, r = 0, hw = 0, hh = 0;
  double vx[3] = {0, 0, 0}, vy[3] = {0, 0, 0};

  bool contains(double x, double y) const {
    switch (kind) {
      case 0: {
        const double dx = x - cx, dy = y - cy;
        return dx * dx + dy * dy <= r * r;
      }
      case 1:
        return std::abs(x - cx) <= hw && std::abs(y - cy) <= hh;
      default: {
        auto side = [&](int i, int j) {
          return (vx[j] - vx[i]) * (y - vy[i]) - (vy[j] - vy[i]) * (x - vx[i]);
        };
        const double d0 = side(0, 1), d1 = side(1, 2), d2 = side(2, 0);
        const bool has_neg = (d0 < 0) || (d1 < 0) || (d2 < 0);
        const bool has_pos = (d0 > 0) || (d1 > 0) || (d2 > 0);
        return !(has_neg && has_pos);
      }
    }
  }
};

}  // namespace detail

// A textured background (class 0) plus 1..3 geometric objects, each with a
// distinct foreground class whose color distribution identifies it. Fully
// deterministic in the seed.
inline Scene generate_scene(std::uint64_t seed, int num_classes, int size,
                            const SceneGenParams& params = {}) {
  if (num_classes < 2) throw std::invalid_argument("generate_scene: num_classes must be >= 2");
  if (size < 16) throw std::invalid_argument("generate_scene: size must be >= 16");
  Rng rng(mix_seed(seed, 0x5CE7Eu));

  // Per-scene color of every class (drawn for all classes to keep the random
  // stream layout independent of the object count).
  std::vector<float> colors(static_cast<std::size_t>(num_classes) * 3);
  for (int c = 0; c < num_classes; ++c) {
    float base[3];
    detail::base_color(c, base);
    for (int k = 0; k < 3; ++k) {
      colors[c * 3 + k] = base[k] + static_cast<float>(rng.uniform(-params.class_jitter,
                                                                   params.class_jitter));
    }
  }

  const auto texture = detail::noise_field(rng, size, 8);
  const double gx = rng.uniform(-params.gradient_amp, params.gradient_amp);
  const double gy = rng.uniform(-params.gradient_amp, params.gradient_amp);
  const double illum = rng.uniform(1.0 - params.illum_jitter, 1.0 + params.illum_jitter);

  const int max_fg = std::min(params.max_objects, num_classes - 1);
  const int count = 1 + rng.below_int(max_fg);
  std::vector<int> fg_classes(num_classes - 1);
  std::iota(fg_classes.begin(), fg_classes.end(), 1);
  rng.shuffle(fg_classes);
  fg_classes.resize(count);

  std::vector<detail::Shape> shapes(count);
  for (int i = 0; i < count; ++i) {
    detail::Shape& s = shapes[i];
    s.kind = rng.below_int(3);
    s.cx = rng.uniform(0.2, 0.8) * size;
    s.cy = rng.uniform(0.2, 0.8) * size;
    if (s.kind == 0) {
      s.r = rng.uniform(0.10, 0.26) * size;
    } else if (s.kind == 1) {
      s.hw = rng.uniform(0.08, 0.22) * size;
      s.hh = rng.uniform(0.08, 0.22) * size;
    } else {
      for (int attempt = 0; attempt < 20; ++attempt) {
        for (int v = 0; v < 3; ++v) {
          s.vx[v] = s.cx + rng.uniform(-0.28, 0.28) * size;
          s.vy[v] = s.cy + rng.uniform(-0.28, 0.28) * size;
        }
        const double area = 0.5 * std::abs((s.vx[1] - s.vx[0]) * (s.vy[2] - s.vy[0]) -
                                           (s.vx[2] - s.vx[0]) * (s.vy[1] - s.vy[0]));
        if (area >= 0.015 * size * size) break;
      }
    }
  }

  Scene scene;
  scene.id = seed;
  scene.image = Tensor<float>(1, 3, size, size);
  scene.label = LabelMap(size, size, 0);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int cls = 0;
      for (int i = count - 1; i >= 0; --i) {  // later objects painted on top
        if (shapes[i].contains(x + 0.5, y + 0.5)) {
          cls = fg_classes[i];
          break;
        }
      }
      scene.label.at(y, x) = static_cast<std::uint8_t>(cls);
      const double amp = cls == 0 ? params.bg_texture_amp : params.fg_texture_amp;
      const double tex = texture[static_cast<std::size_t>(y) * size + x] * amp;
      const double grad = gx * (static_cast<double>(x) / size - 0.5) +
                          gy * (static_cast<double>(y) / size - 0.5);
      for (int k = 0; k < 3; ++k) {
        double v = (colors[cls * 3 + k] + tex + grad) * illum + rng.gaussian() * params.pixel_noise;
        scene.image[static_cast<std::size_t>(k) * plane + y * size + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return scene;
}

// floor(fraction * total) scenes keep their labels; the rest are withheld.
inline DatasetSplit split_dataset(const std::vector<Scene>& scenes, double labelled_fraction,
                                  std::uint64_t seed) {
  if (scenes.empty()) throw std::invalid_argument("split_dataset: empty scene list");
  if (!(labelled_fraction > 0.0 && labelled_fraction <= 1.0)) {
    throw std::invalid_argument("split_dataset: labelled_fraction must be in (0,1]");
  }
  const int total = static_cast<int>(scenes.size());
  int count = static_cast<int>(std::floor(labelled_fraction * total + 1e-9));
  count = std::clamp(count, 0, total);

  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, streams::kSplit));
  rng.shuffle(order);

  DatasetSplit split;
  split.seed = seed;
  for (int i = 0; i < total; ++i) {
    Scene s = scenes[order[i]];
    if (i < count) {
      split.labelled.push_back(std::move(s));
    } else {
      s.label = LabelMap();  // withhold
      split.unlabelled.push_back(std::move(s));
    }
  }
  return split;
}

namespace detail {

inline LabelMap resize_nearest(const LabelMap& in, int oh, int ow) {
  LabelMap out(oh, ow);
  for (int y = 0; y < oh; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * in.height / oh), in.height - 1);
    for (int x = 0; x < ow; ++x) {
      const int sx = std::min(static_cast<int>((x + 0.5) * in.width / ow), in.width - 1);
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

}  // namespace detail

// Mirrors image and label left-right. Applying it twice restores the scene.
inline Scene hflip_scene(const Scene& scene) {
  Scene out;
  out.id = scene.id;
  const int h = scene.image.h(), w = scene.image.w();
  out.image = Tensor<float>(1, scene.image.c(), h, w);
  for (int c = 0; c < scene.image.c(); ++c) {
    const float* src = scene.image.data() + static_cast<std::size_t>(c) * h * w;
    float* dst = out.image.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) dst[y * w + x] = src[y * w + (w - 1 - x)];
  }
  if (!scene.label.empty()) {
    out.label = LabelMap(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.label.at(y, x) = scene.label.at(y, w - 1 - x);
  }
  return out;
}

// Random horizontal flip, random scale, fixed-size crop. Image and label get
// the identical geometric map; the label is resampled nearest-neighbor and
// crop padding uses the ignore value (image padding is 0).
inline Scene weak_augment(const Scene& scene, std::uint64_t seed,
                          const WeakAugParams& params = {}, WeakAugRecord* record = nullptr) {
  if (scene.image.empty()) throw std::invalid_argument("weak_augment: empty scene");
  Rng rng(mix_seed(seed, 0x3EAFu));
  WeakAugRecord rec;

  Scene cur = scene;
  rec.flip = rng.bernoulli(params.flip_p);
  if (rec.flip) cur = hflip_scene(cur);

  rec.scale = rng.uniform(params.scale_min, params.scale_max);
  const int sh = std::max(1, static_cast<int>(std::lround(cur.image.h() * rec.scale)));
  const int sw = std::max(1, static_cast<int>(std::lround(cur.image.w() * rec.scale)));
  if (sh != cur.image.h() || sw != cur.image.w()) {
    cur.image = resize_bilinear(cur.image, sh, sw);
    if (!cur.label.empty()) cur.label = detail::resize_nearest(cur.label, sh, sw);
  }

  const int th = params.crop_size, tw = params.crop_size;
  rec.src_y = sh > th ? rng.below_int(sh - th + 1) : 0;
  rec.dst_y = sh < th ? rng.below_int(th - sh + 1) : 0;
  rec.src_x = sw > tw ? rng.below_int(sw - tw + 1) : 0;
  rec.dst_x = sw < tw ? rng.below_int(tw - sw + 1) : 0;

  Scene out;
  out.id = scene.id;
  out.image = Tensor<float>(1, cur.image.c(), th, tw, 0.0f);
  const int copy_h = std::min(th - rec.dst_y, sh - rec.src_y);
  const int copy_w = std::min(tw - rec.dst_x, sw - rec.src_x);
  for (int c = 0; c < cur.image.c(); ++c) {
    const float* src = cur.image.data() + static_cast<std::size_t>(c) * sh * sw;
    float* dst = out.image.data() + static_cast<std::size_t>(c) * th * tw;
    for (int y = 0; y < copy_h; ++y) {
      std::copy(src + (rec.src_y + y) * sw + rec.src_x,
                src + (rec.src_y + y) * sw + rec.src_x + copy_w,
                dst + (rec.dst_y + y) * tw + rec.dst_x);
    }
  }
  if (!cur.label.empty()) {
    out.label = LabelMap(th, tw, kIgnoreLabel);
    for (int y = 0; y < copy_h; ++y)
      for (int x = 0; x < copy_w; ++x) {
        out.label.at(rec.dst_y + y, rec.dst_x + x) = cur.label.at(rec.src_y + y, rec.src_x + x);
      }
  }
  if (record) *record = rec;
  return out;
}

// Photometric transforms plus cutout; no geometry, so both branches can share
// one augmented view without touching labels. Output stays in [0,1] and the
// cutout rectangle is reported for the batch augmentation record.
inline Tensor<float> strong_augment(const Tensor<float>& image, std::uint64_t seed,
                                    const StrongAugParams& params = {},
                                    StrongAugRecord* record = nullptr) {
  if (image.empty()) throw std::invalid_argument("strong_augment: empty image");
  Rng rng(mix_seed(seed, 0x57A0u));
  StrongAugRecord rec;
  Tensor<float> out = image;
  const int C = out.c(), H = out.h(), W = out.w();
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  auto luma = [&](std::size_t px) {
    if (C == 3) {
      return 0.299f * out[px] + 0.587f * out[plane + px] + 0.114f * out[2 * plane + px];
    }
    float s = 0.f;
    for (int c = 0; c < C; ++c) s += out[c * plane + px];
    return s / C;
  };

  rec.jitter = rng.bernoulli(params.jitter_p);
  if (rec.jitter) {
    rec.brightness = rng.uniform(params.jitter_lo, params.jitter_hi);
    rec.contrast = rng.uniform(params.jitter_lo, params.jitter_hi);
    rec.saturation = rng.uniform(params.jitter_lo, params.jitter_hi);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= static_cast<float>(rec.brightness);
    double mean = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) mean += out[i];
    mean /= static_cast<double>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<float>(mean + (out[i] - mean) * rec.contrast);
    }
    for (std::size_t px = 0; px < plane; ++px) {
      const float g = luma(px);
      for (int c = 0; c < C; ++c) {
        out[c * plane + px] =
            static_cast<float>(g + (out[c * plane + px] - g) * rec.saturation);
      }
    }
  }

  rec.gray = rng.bernoulli(params.gray_p);
  if (rec.gray) {
    for (std::size_t px = 0; px < plane; ++px) {
      const float g = luma(px);
      for (int c = 0; c < C; ++c) out[c * plane + px] = g;
    }
  }

  rec.blur = rng.bernoulli(params.blur_p);
  if (rec.blur) {
    rec.sigma = rng.uniform(params.sigma_lo, params.sigma_hi);
    float k[5];
    float ksum = 0.f;
    for (int i = -2; i <= 2; ++i) {
      k[i + 2] = static_cast<float>(std::exp(-0.5 * i * i / (rec.sigma * rec.sigma)));
      ksum += k[i + 2];
    }
    for (float& v : k) v /= ksum;
    Tensor<float> tmp = out;
    for (int c = 0; c < C; ++c) {
      float* dst = tmp.data() + static_cast<std::size_t>(c) * plane;
      const float* src = out.data() + static_cast<std::size_t>(c) * plane;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          float acc = 0.f;
          for (int i = -2; i <= 2; ++i) {
            acc += k[i + 2] * src[y * W + std::clamp(x + i, 0, W - 1)];
          }
          dst[y * W + x] = acc;
        }
    }
    for (int c = 0; c < C; ++c) {
      float* dst = out.data() + static_cast<std::size_t>(c) * plane;
      const float* src = tmp.data() + static_cast<std::size_t>(c) * plane;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          float acc = 0.f;
          for (int i = -2; i <= 2; ++i) {
            acc += k[i + 2] * src[std::clamp(y + i, 0, H - 1) * W + x];
          }
          dst[y * W + x] = acc;
        }
    }
  }

  rec.cutout = rng.bernoulli(params.cutout_p);
  if (rec.cutout) {
    rec.cut.h = std::max(1, static_cast<int>(rng.uniform(params.cut_lo, params.cut_hi) * H));
    rec.cut.w = std::max(1, static_cast<int>(rng.uniform(params.cut_lo, params.cut_hi) * W));
    rec.cut.y = rng.below_int(std::max(1, H - rec.cut.h + 1));
    rec.cut.x = rng.below_int(std::max(1, W - rec.cut.w + 1));
    for (int c = 0; c < C; ++c)
      for (int y = rec.cut.y; y < rec.cut.y + rec.cut.h; ++y)
        for (int x = rec.cut.x; x < rec.cut.x + rec.cut.w; ++x) {
          out[c * plane + static_cast<std::size_t>(y) * W + x] = 0.5f;
        }
  }

  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], 0.f, 1.f);
  if (record) *record = rec;
  return out;
}

namespace detail {

// Cycling sampler: draw g = step*half + j walks pool-sized windows, each
// window visited in a freshly shuffled order.
inline int cycle_index(std::uint64_t seed, std::uint64_t pool_tag, int pool_size,
                       std::uint64_t g) {
  const std::uint64_t cycle = g / pool_size;
  const int offset = static_cast<int>(g % pool_size);
  std::vector<int> perm(pool_size);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(seed, pool_tag, cycle));
  rng.shuffle(perm);
  return perm[offset];
}

}  // namespace detail

// Equal labelled/unlabelled halves; weak augmentation always, strong only on
// the unlabelled stream when enabled. Deterministic in (split, step, config).
inline Batch make_batch(const DatasetSplit& split, int batch_size, int step,
                        const ExperimentConfig& config) {
  if (batch_size <= 0 || batch_size % 2 != 0) {
    throw std::invalid_argument("make_batch: batch_size must be positive and even");
  }
  if (split.labelled.empty() || split.unlabelled.empty()) {
    throw std::invalid_argument("make_batch: both pools must be non-empty");
  }
  const int half = batch_size / 2;
  Batch batch;
  batch.weak_labelled.resize(half);
  batch.weak_unlabelled.resize(half);
  if (config.use_strong_aug) batch.strong_unlabelled.resize(half);

  for (int j = 0; j < half; ++j) {
    const std::uint64_t g = static_cast<std::uint64_t>(step) * half + j;
    {
      const int idx = detail::cycle_index(config.seed, streams::kSamplerLabelled,
                                          static_cast<int>(split.labelled.size()), g);
      Scene aug = weak_augment(split.labelled[idx],
                               mix_seed(config.seed, streams::kWeakLabelled, g), config.weak,
                               &batch.weak_labelled[j]);
      if (batch.labelled_images.empty()) {
        batch.labelled_images =
            Tensor<float>(half, aug.image.c(), aug.image.h(), aug.image.w());
      }
      std::copy(aug.image.data(), aug.image.data() + aug.image.size(),
                batch.labelled_images.image(j));
      batch.labelled_labels.push_back(std::move(aug.label));
      batch.labelled_ids.push_back(aug.id);
    }
    {
      const int idx = detail::cycle_index(config.seed, streams::kSamplerUnlabelled,
                                          static_cast<int>(split.unlabelled.size()), g);
      Scene aug = weak_augment(split.unlabelled[idx],
                               mix_seed(config.seed, streams::kWeakUnlabelled, g), config.weak,
                               &batch.weak_unlabelled[j]);
      Tensor<float> img = std::move(aug.image);
      if (config.use_strong_aug) {
        img = strong_augment(img, mix_seed(config.seed, streams::kStrong, g), config.strong,
                             &batch.strong_unlabelled[j]);
      }
      if (batch.unlabelled_images.empty()) {
        batch.unlabelled_images = Tensor<float>(half, img.c(), img.h(), img.w());
      }
      std::copy(img.data(), img.data() + img.size(), batch.unlabelled_images.image(j));
      batch.unlabelled_ids.push_back(aug.id);
    }
  }
  return batch;
}

// Train and validation corpora draw scene seeds from disjoint streams of the
// corpus seed.
inline std::vector<Scene> generate_corpus(std::uint64_t seed, int count, int num_classes,
                                          int size, bool validation = false,
                                          const SceneGenParams& params = {}) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  const std::uint64_t tag = validation ? streams::kSceneVal : streams::kSceneTrain;
  for (int i = 0; i < count; ++i) {
    scenes.push_back(
        generate_scene(mix_seed(seed, tag, static_cast<std::uint64_t>(i)), num_classes, size,
                       params));
  }
  return scenes;
}

}  // namespace ccvc
