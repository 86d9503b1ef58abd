#pragma once

#include <cstdint>
#include <vector>

#include "ccvc/model.hpp"

namespace ccvc {

// Per-step loss summary kept in TrainState history and logged as one JSONL
// line. Plain-old-data so checkpoints can copy it byte for byte.
struct StepStats {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  double sup = 0.0;
  double con = 0.0;
  double con_cc0 = 0.0, con_cc1 = 0.0;
  double con_e0 = 0.0, con_e1 = 0.0;
  double con_cc_frac = 0.0;
  double dis = 0.0, dis_l = 0.0, dis_u = 0.0;
  double total = 0.0;
};

struct EpochStats {
  std::int64_t epoch = 0;
  double val_miou = 0.0;
  double mean_feature_cosine = 0.0;
  double mean_mapped_cosine = 0.0;
  double confident_frac = 0.0;
  double confident_acc = 0.0;   // NaN when no pixel is confident
  double confident_miou = 0.0;  // NaN likewise
};

template <typename T>
struct TrainState {
  TwoBranchModel<T> model;
  int step = 0;
  int epoch = 0;
  std::vector<Tensor<T>> moments;  // SGD momentum, aligned with model.params()
  std::uint64_t master_seed = 0;   // root of every derived random stream
  std::vector<StepStats> history;
  std::vector<EpochStats> epoch_history;
};

}  // namespace ccvc
