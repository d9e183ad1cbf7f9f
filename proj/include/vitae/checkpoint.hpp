#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vitae/autoencoder.hpp"
#include "vitae/params.hpp"
#include "vitae/tensor.hpp"

namespace vitae {

// Binary tensor container: "VTKF" magic, a u32 format version, a
// length-prefixed UTF-8 JSON config blob, then one record per tensor
// (name length + bytes, rank, dims, little-endian float32 payload).
// Round trips are bit-exact for float32 data.

struct Checkpoint {
  std::string config_json;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors);

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const ParamStore<float>& ps);

Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into matching store entries. Every store entry
// must be present with the same shape; checkpoint tensors the store lacks are
// ignored, so one file can carry live and averaged weights side by side.
void load_into(ParamStore<float>& ps, const Checkpoint& ck,
               const std::string& prefix = "");

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace vitae
