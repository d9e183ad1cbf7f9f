#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitae/autoencoder.hpp"
#include "vitae/backbone.hpp"
#include "vitae/image.hpp"
#include "vitae/params.hpp"
#include "vitae/trainer.hpp"

namespace vitae {

// Velocity-prediction transformer over latent token grids: latent projection
// plus learned absolute positions, then blocks of self-attention on an
// affinely modulated pre-norm, cross-attention to the conditioning token and
// a SwiGLU MLP, each residual gated by LayerScale. Timestep conditioning is a
// sinusoidal embedding through an MLP; the class embedding is summed into it
// and also serves as the cross-attention token. The modulation heads and the
// output head start at zero, so a fresh model predicts a zero velocity field.
struct FlowConfig {
  int64_t depth = 4;
  int64_t width = 128;
  int64_t heads = 4;
  int64_t latent_channels = 16;
  int64_t class_count = 4;     // labels 0..class_count-1; index class_count
                               // is the learned unconditional token
  int64_t max_grid_side = 16;  // learned position tables cover up to this
  double cfg_dropout = 0.1;
  double ema_decay = 0.999;
  double mlp_expansion = 8.0 / 3.0;
  double layerscale_init = 1e-4;
  double rope_base = 10000.0;
  double eps = 1e-6;

  BlockConfig block() const;
};

// Throws std::invalid_argument on violations (width/head divisibility,
// dropout or decay out of range, non-positive sizes).
void validate_flow_config(const FlowConfig& cfg);

template <typename T>
void init_flow_params(ParamStore<T>& ps, const FlowConfig& cfg, uint64_t seed);

// Live and averaged weights plus the optimizer step count. The averaged set
// mirrors the live names and shapes exactly and never receives gradients.
struct FlowState {
  ParamStore<float> params;
  ParamStore<float> ema_params;
  int64_t step = 0;
};

FlowState make_flow_state(const FlowConfig& cfg, uint64_t seed);

// ema <- decay*ema + (1-decay)*live for every parameter.
void ema_update(FlowState& state, double decay);

// Velocity field for latent tokens z_t at time t in [0,1]. z_t is
// [grid_h*grid_w, latent_channels]; the result has the same shape. label may
// be any class or the unconditional index.
template <typename T>
typename Graph<T>::Id velocity(Graph<T>& g, typename Graph<T>::Id z_t, double t,
                               int64_t label, const Bound<T>& p,
                               const FlowConfig& cfg, int64_t grid_h,
                               int64_t grid_w);

// One linear-path training example: t ~ U(0,1), z0 standard normal,
// z_t = (1-t)*z0 + t*z1, target z1 - z0. The label collapses to the
// unconditional token with probability cfg_dropout. Draw order per sample:
// t, then z0 entries, then the dropout coin.
struct FlowSample {
  double t = 0;
  Tensor<float> z_t;
  Tensor<float> target;
  int64_t label = 0;
};

FlowSample make_flow_sample(const Tensor<float>& z1, int64_t label,
                            const FlowConfig& cfg, Rng& rng);

// Mean squared error between the predicted velocity and z1 - z0 for a single
// latent, built and evaluated without gradients.
double fm_loss(const Tensor<float>& z1, int64_t grid_h, int64_t grid_w,
               int64_t label, const ParamStore<float>& ps, const FlowConfig& cfg,
               Rng& rng);

// Euler integration from pure noise over `steps` equal intervals with
// classifier-free guidance v_u + s*(v_c - v_u). Guidance scale exactly 1
// skips the unconditional pass entirely, which is the same field by algebra.
Tensor<float> euler_sample(const ParamStore<float>& ps, const FlowConfig& cfg,
                           int64_t label, int64_t steps, double cfg_scale,
                           int64_t grid_h, int64_t grid_w, Rng& rng);

// Samples one latent per label with the averaged weights, decodes each
// through the autoencoder and clamps to [0,1]. The flow and autoencoder must
// agree on latent_channels.
std::vector<Image> generate_images(const ParamStore<float>& ae_ps,
                                   const ModelConfig& ae_cfg, const FlowState& st,
                                   const FlowConfig& cfg,
                                   const std::vector<int64_t>& labels,
                                   int64_t steps, double cfg_scale,
                                   int64_t grid_h, int64_t grid_w, uint64_t seed);

// Latents of a labeled image set under the trained autoencoder, ready to
// train the flow on.
struct LatentExample {
  Tensor<float> z;
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  int64_t label = 0;
};

std::vector<LatentExample> make_latent_dataset(const std::vector<LabeledImage>& data,
                                               const ParamStore<float>& ae_ps,
                                               const ModelConfig& ae_cfg,
                                               int64_t budget);

struct FlowStepLog {
  int64_t step = 0;
  double lr = 0;
  double loss_fm = 0;
  double grad_norm = 0;
  int64_t flops = 0;  // cumulative, forward+backward convention
};

// One JSON object per step; flops carries a "fwd+bwd" convention label.
std::string flow_log_line(const FlowStepLog& s);

struct FlowTrainResult {
  std::vector<FlowStepLog> log;
  bool aborted = false;
  std::string abort_reason;
  int64_t steps_run = 0;
};

// Flow-matching optimization over a latent dataset: per-epoch seeded shuffle,
// one graph per step over the batch, AdamW with the shared schedule, EMA
// update after every step, JSONL log, live+averaged checkpointing. The token
// budget schedule does not apply; latents keep their own grids.
FlowTrainResult train_flow(FlowState& st, const FlowConfig& fcfg,
                           const std::vector<LatentExample>& dataset,
                           const TrainConfig& tcfg, const TrainIO& io);

std::string flow_config_json(const FlowConfig& cfg);
FlowConfig flow_config_from_json(const std::string& json_text);

// Flow checkpoints hold both weight sets: live names as-is, averaged names
// under an "ema." prefix.
void save_flow_checkpoint(const std::string& path, const FlowConfig& cfg,
                          const FlowState& st);
FlowState load_flow_checkpoint(const std::string& path, FlowConfig& cfg_out);

}  // namespace vitae
