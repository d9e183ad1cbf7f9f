#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitae/autoencoder.hpp"
#include "vitae/image.hpp"
#include "vitae/losses.hpp"
#include "vitae/params.hpp"

namespace vitae {

// Optimization settings shared by the autoencoder and flow loops.
struct TrainConfig {
  int64_t total_steps = 2000;
  int64_t batch_size = 8;
  double peak_lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.01;
  double stage_split = 0.9;  // fraction of steps spent at the small budget
  int64_t budget_lo = 256;
  int64_t budget_hi = 1024;
  uint64_t seed = 0;
};

// Throws std::invalid_argument on out-of-range fields.
void validate_train_config(const TrainConfig& cfg);

// Linear warmup from zero to peak over warmup_fraction of total_steps, then
// cosine from peak to zero. Steps count from 0; total_steps maps to 0.
double lr_at(int64_t step, const TrainConfig& cfg);

// budget_lo while step/total < stage_split, budget_hi from the boundary on
// (the boundary step itself already runs at the large budget).
int64_t budget_at(int64_t step, const TrainConfig& cfg);

// First and second moment estimates, parallel to the store's entries.
template <typename T>
struct AdamMoments {
  std::vector<Tensor<T>> m, v;
  int64_t step = 0;
};

template <typename T>
AdamMoments<T> make_moments(const ParamStore<T>& ps);

// Clips the store's gradients to clip_norm by global rescale, then applies
// AdamW with bias-corrected moments and decoupled weight decay (the decay
// multiplies the parameter directly, outside the adaptive update). Returns
// the pre-clip global gradient norm; throws on a non-finite gradient, naming
// the parameter.
template <typename T>
double adamw_step(ParamStore<T>& ps, AdamMoments<T>& moments, double lr,
                  const TrainConfig& cfg);

struct StepLog {
  int64_t step = 0;  // 1-based in logs
  double lr = 0;
  int64_t budget = 0;
  double loss_total = 0;
  double loss_char = 0;
  double loss_ssim = 0;
  double loss_perc = 0;
  double loss_reg = 0;
  double grad_norm = 0;
};

// One JSON object per step, keys in schema order.
std::string log_line(const StepLog& s);

struct TrainIO {
  std::string checkpoint_path;   // empty = never saved
  std::string log_path;          // JSONL; empty = in-memory log only
  int64_t checkpoint_every = 0;  // extra periodic saves when > 0
};

struct TrainResult {
  std::vector<StepLog> log;
  bool aborted = false;  // a loss or gradient went non-finite
  std::string abort_reason;
  int64_t steps_run = 0;
};

// Full autoencoder optimization: per-epoch seeded shuffle, one graph per step
// covering the whole batch (mean loss over images), token-budget schedule,
// AdamW, JSONL log, checkpoint at the end and every checkpoint_every steps.
// A failing step aborts and saves the parameters from before that step, so
// the checkpoint on disk is always a healthy state.
TrainResult train_autoencoder(ParamStore<float>& ps, const ModelConfig& mcfg,
                              const std::vector<LabeledImage>& dataset,
                              const TrainConfig& tcfg, const LossWeights& weights,
                              const TrainIO& io);

}  // namespace vitae
