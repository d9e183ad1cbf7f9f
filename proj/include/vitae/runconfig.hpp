#pragma once

#include <cstdint>
#include <string>

#include "vitae/autoencoder.hpp"
#include "vitae/flowgen.hpp"
#include "vitae/image.hpp"
#include "vitae/losses.hpp"
#include "vitae/trainer.hpp"

namespace vitae {

struct EvalConfig {
  int64_t budget = 256;
  int64_t window_radius = -1;
  int64_t stat_side = 64;
};

// Everything a run needs, grouped into the sections a config file uses:
// model, train, loss, flow, eval, data. Defaults are the desk-scale values
// of the individual modules.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string loss_preset_name = "pixel+ssim+perc500";
  LossWeights loss;
  FlowConfig flow;
  EvalConfig eval;
  DatasetSpec data;
};

// Parse a whole config file. Sections and keys outside the schema throw
// std::invalid_argument naming the offender; missing ones keep defaults. In
// the loss section the preset resolves first, explicit weight keys then
// override it regardless of their order in the file.
RunConfig run_config_from_json(const std::string& text);

// One "section.key=value" override. The value parses as JSON when it can
// (numbers, booleans) and falls back to a bare string, so
// model.regularizer=kl works unquoted. Assigning loss.preset resets every
// loss weight to the preset before later overrides apply.
void apply_override(RunConfig& rc, const std::string& spec);

// Canonical serialization: fixed section and key order, independent of how
// the config was assembled. Input to the hash.
std::string run_config_json(const RunConfig& rc);

// FNV-1a 64 over the canonical serialization, as 16 hex digits. Recorded in
// every output file so results trace back to their exact configuration.
std::string config_hash(const RunConfig& rc);

}  // namespace vitae
