#include "vitae/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace vitae {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'V', 'T', 'K', 'F'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("checkpoint truncated");
  return v;
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("checkpoint truncated");
  return v;
}

void write_record(std::ostream& os, const std::string& name,
                  const Tensor<float>& t) {
  write_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape) write_u64(os, static_cast<uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u64(os, config_json.size());
  os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  for (const auto& [name, t] : tensors) write_record(os, name, *t);
  os.flush();
  if (!os) throw std::runtime_error("write failed for " + path);
}

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const ParamStore<float>& ps) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  tensors.reserve(ps.entries().size());
  for (const auto& e : ps.entries()) tensors.emplace_back(e.name, &e.value);
  save_checkpoint(path, config_json, tensors);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);

  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path + " is not a VTKF checkpoint");
  uint32_t version = read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));

  Checkpoint ck;
  uint64_t cfg_len = read_u64(is);
  ck.config_json.resize(cfg_len);
  if (cfg_len > 0 &&
      !is.read(ck.config_json.data(), static_cast<std::streamsize>(cfg_len)))
    throw std::runtime_error("checkpoint truncated");

  while (true) {
    uint32_t name_len = 0;
    if (!is.read(reinterpret_cast<char*>(&name_len), sizeof name_len)) break;
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw std::runtime_error("checkpoint truncated");
    uint32_t rank = read_u32(is);
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i)
      shape[i] = static_cast<int64_t>(read_u64(is));
    Tensor<float> t(shape);
    if (t.numel() > 0 &&
        !is.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float))))
      throw std::runtime_error("checkpoint truncated");
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

void load_into(ParamStore<float>& ps, const Checkpoint& ck,
               const std::string& prefix) {
  for (auto& e : ps.entries()) {
    const std::string want = prefix + e.name;
    const Tensor<float>* found = nullptr;
    for (const auto& [name, t] : ck.tensors) {
      if (name == want) {
        found = &t;
        break;
      }
    }
    if (!found) throw std::runtime_error("checkpoint is missing tensor " + want);
    if (found->shape != e.value.shape)
      throw std::runtime_error("shape mismatch for tensor " + want);
    e.value.data = found->data;
  }
}

std::string model_config_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["enc_depth"] = cfg.enc_depth;
  j["dec_depth"] = cfg.dec_depth;
  j["width"] = cfg.width;
  j["heads"] = cfg.heads;
  j["patch"] = cfg.patch;
  j["latent_channels"] = cfg.latent_channels;
  j["regularizer"] = regularizer_name(cfg.reg);
  j["reg_param"] = cfg.reg_param;
  j["mlp_expansion"] = cfg.mlp_expansion;
  j["layerscale_init"] = cfg.layerscale_init;
  j["rope_base"] = cfg.rope_base;
  j["eps"] = cfg.eps;
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  ModelConfig cfg;
  cfg.name = j.at("name").get<std::string>();
  cfg.enc_depth = j.at("enc_depth").get<int64_t>();
  cfg.dec_depth = j.at("dec_depth").get<int64_t>();
  cfg.width = j.at("width").get<int64_t>();
  cfg.heads = j.at("heads").get<int>();
  cfg.patch = j.at("patch").get<int64_t>();
  cfg.latent_channels = j.at("latent_channels").get<int64_t>();
  cfg.reg = parse_regularizer(j.at("regularizer").get<std::string>());
  cfg.reg_param = j.at("reg_param").get<double>();
  cfg.mlp_expansion = j.at("mlp_expansion").get<double>();
  cfg.layerscale_init = j.at("layerscale_init").get<double>();
  cfg.rope_base = j.at("rope_base").get<double>();
  cfg.eps = j.at("eps").get<double>();
  validate_config(cfg);
  return cfg;
}

}  // namespace vitae
