#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccvc/model.hpp"
#include "ccvc/trainer_types.hpp"

// Binary checkpoint, versioned with a magic string. Exact round trip of every
// TrainState field on the same platform.

namespace ccvc {

inline constexpr char kCheckpointMagic[] = "ccvc-ckpt-v1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

struct Writer {
  std::ofstream out;
  explicit Writer(const std::string& path) : out(path, std::ios::binary) {
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  }
  void raw(const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof(T));
  }
  void tensor(const Tensor<float>& t) {
    const std::int32_t dims[4] = {t.n(), t.c(), t.h(), t.w()};
    raw(dims, sizeof(dims));
    raw(t.data(), t.size() * sizeof(float));
  }
};

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;
  explicit Reader(const std::string& path) : in(path, std::ios::binary) {
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  }
  void raw(void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw std::runtime_error("checkpoint: truncated file at offset " + std::to_string(offset));
    }
    offset += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  Tensor<float> tensor() {
    std::int32_t dims[4];
    raw(dims, sizeof(dims));
    if (dims[0] < 0 || dims[1] < 0 || dims[2] < 0 || dims[3] < 0) {
      throw std::runtime_error("checkpoint: corrupt tensor header at offset " +
                               std::to_string(offset));
    }
    Tensor<float> t(dims[0], dims[1], dims[2], dims[3]);
    raw(t.data(), t.size() * sizeof(float));
    return t;
  }
};

}  // namespace ckpt_detail

inline void save_checkpoint(TrainState<float>& state, const std::string& path) {
  ckpt_detail::Writer w(path);
  w.raw(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  w.pod<std::uint32_t>(kCheckpointVersion);

  const ArchConfig& a = state.model.config;
  w.pod<std::int32_t>(a.in_channels);
  w.pod<std::int32_t>(a.num_classes);
  w.pod<std::int32_t>(a.base_width);
  w.pod<std::int32_t>(a.feature_channels);
  w.pod<double>(a.map_dropout_p);

  w.pod<std::int64_t>(state.step);
  w.pod<std::int64_t>(state.epoch);
  w.pod<std::uint64_t>(state.master_seed);

  auto params = state.model.params();
  auto buffers = state.model.buffers();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (auto* t : params) w.tensor(*t);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(buffers.size()));
  for (auto* t : buffers) w.tensor(*t);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(state.moments.size()));
  for (auto& t : state.moments) w.tensor(t);

  w.pod<std::uint64_t>(state.history.size());
  for (const auto& h : state.history) w.raw(&h, sizeof(StepStats));
  w.pod<std::uint64_t>(state.epoch_history.size());
  for (const auto& h : state.epoch_history) w.raw(&h, sizeof(EpochStats));
  if (!w.out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline TrainState<float> load_checkpoint(const std::string& path) {
  ckpt_detail::Reader r(path);
  char magic[sizeof(kCheckpointMagic) - 1];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic, '" + path + "' is not a ccvc checkpoint");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported-version " + std::to_string(version) +
                             " (expected " + std::to_string(kCheckpointVersion) + ")");
  }

  ArchConfig a;
  a.in_channels = r.pod<std::int32_t>();
  a.num_classes = r.pod<std::int32_t>();
  a.base_width = r.pod<std::int32_t>();
  a.feature_channels = r.pod<std::int32_t>();
  a.map_dropout_p = r.pod<double>();
  a.validate();

  TrainState<float> state;
  state.model = init_model<float>(a, 0);  // shapes only; values overwritten below
  state.step = static_cast<int>(r.pod<std::int64_t>());
  state.epoch = static_cast<int>(r.pod<std::int64_t>());
  state.master_seed = r.pod<std::uint64_t>();

  auto params = state.model.params();
  const auto n_params = r.pod<std::uint32_t>();
  if (n_params != params.size()) {
    throw std::runtime_error("checkpoint: parameter count mismatch at offset " +
                             std::to_string(r.offset));
  }
  for (auto* t : params) {
    Tensor<float> loaded = r.tensor();
    if (!loaded.same_shape(*t)) {
      throw std::runtime_error("checkpoint: parameter shape mismatch at offset " +
                               std::to_string(r.offset));
    }
    *t = std::move(loaded);
  }
  auto buffers = state.model.buffers();
  const auto n_buffers = r.pod<std::uint32_t>();
  if (n_buffers != buffers.size()) {
    throw std::runtime_error("checkpoint: buffer count mismatch at offset " +
                             std::to_string(r.offset));
  }
  for (auto* t : buffers) *t = r.tensor();
  const auto n_moments = r.pod<std::uint32_t>();
  state.moments.clear();
  for (std::uint32_t i = 0; i < n_moments; ++i) state.moments.push_back(r.tensor());

  const auto n_hist = r.pod<std::uint64_t>();
  state.history.resize(n_hist);
  for (auto& h : state.history) r.raw(&h, sizeof(StepStats));
  const auto n_ehist = r.pod<std::uint64_t>();
  state.epoch_history.resize(n_ehist);
  for (auto& h : state.epoch_history) r.raw(&h, sizeof(EpochStats));
  return state;
}

}  // namespace ccvc
