#include "vitae/runconfig.hpp"

#include <cinttypes>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

namespace vitae {

namespace {

using nlohmann::json;

[[noreturn]] void unknown(const std::string& section, const std::string& key) {
  throw std::invalid_argument("unknown config key " + section + "." + key);
}

void set_model(ModelConfig& m, const std::string& key, const json& v) {
  if (key == "name")
    m.name = v.get<std::string>();
  else if (key == "enc_depth")
    m.enc_depth = v.get<int64_t>();
  else if (key == "dec_depth")
    m.dec_depth = v.get<int64_t>();
  else if (key == "width")
    m.width = v.get<int64_t>();
  else if (key == "heads")
    m.heads = v.get<int>();
  else if (key == "patch")
    m.patch = v.get<int64_t>();
  else if (key == "latent_channels")
    m.latent_channels = v.get<int64_t>();
  else if (key == "regularizer")
    m.reg = parse_regularizer(v.get<std::string>());
  else if (key == "reg_param")
    m.reg_param = v.get<double>();
  else if (key == "mlp_expansion")
    m.mlp_expansion = v.get<double>();
  else if (key == "layerscale_init")
    m.layerscale_init = v.get<double>();
  else if (key == "rope_base")
    m.rope_base = v.get<double>();
  else if (key == "eps")
    m.eps = v.get<double>();
  else
    unknown("model", key);
}

void set_train(TrainConfig& t, const std::string& key, const json& v) {
  if (key == "total_steps")
    t.total_steps = v.get<int64_t>();
  else if (key == "batch_size")
    t.batch_size = v.get<int64_t>();
  else if (key == "peak_lr")
    t.peak_lr = v.get<double>();
  else if (key == "beta1")
    t.beta1 = v.get<double>();
  else if (key == "beta2")
    t.beta2 = v.get<double>();
  else if (key == "weight_decay")
    t.weight_decay = v.get<double>();
  else if (key == "clip_norm")
    t.clip_norm = v.get<double>();
  else if (key == "adam_eps")
    t.adam_eps = v.get<double>();
  else if (key == "warmup_fraction")
    t.warmup_fraction = v.get<double>();
  else if (key == "stage_split")
    t.stage_split = v.get<double>();
  else if (key == "budget_lo")
    t.budget_lo = v.get<int64_t>();
  else if (key == "budget_hi")
    t.budget_hi = v.get<int64_t>();
  else if (key == "seed")
    t.seed = v.get<uint64_t>();
  else
    unknown("train", key);
}

void set_loss(RunConfig& rc, const std::string& key, const json& v) {
  if (key == "preset") {
    rc.loss_preset_name = v.get<std::string>();
    rc.loss = loss_preset(rc.loss_preset_name);
  } else if (key == "w_char")
    rc.loss.w_char = v.get<double>();
  else if (key == "w_ssim")
    rc.loss.w_ssim = v.get<double>();
  else if (key == "w_perc")
    rc.loss.w_perc = v.get<double>();
  else if (key == "tile")
    rc.loss.tile = v.get<int64_t>();
  else if (key == "tiles_per_image")
    rc.loss.tiles_per_image = v.get<int>();
  else
    unknown("loss", key);
}

void set_flow(FlowConfig& f, const std::string& key, const json& v) {
  if (key == "depth")
    f.depth = v.get<int64_t>();
  else if (key == "width")
    f.width = v.get<int64_t>();
  else if (key == "heads")
    f.heads = v.get<int64_t>();
  else if (key == "latent_channels")
    f.latent_channels = v.get<int64_t>();
  else if (key == "class_count")
    f.class_count = v.get<int64_t>();
  else if (key == "max_grid_side")
    f.max_grid_side = v.get<int64_t>();
  else if (key == "cfg_dropout")
    f.cfg_dropout = v.get<double>();
  else if (key == "ema_decay")
    f.ema_decay = v.get<double>();
  else if (key == "mlp_expansion")
    f.mlp_expansion = v.get<double>();
  else if (key == "layerscale_init")
    f.layerscale_init = v.get<double>();
  else if (key == "rope_base")
    f.rope_base = v.get<double>();
  else if (key == "eps")
    f.eps = v.get<double>();
  else
    unknown("flow", key);
}

void set_eval(EvalConfig& e, const std::string& key, const json& v) {
  if (key == "budget")
    e.budget = v.get<int64_t>();
  else if (key == "window_radius")
    e.window_radius = v.get<int64_t>();
  else if (key == "stat_side")
    e.stat_side = v.get<int64_t>();
  else
    unknown("eval", key);
}

void set_data(DatasetSpec& d, const std::string& key, const json& v) {
  if (key == "count")
    d.count = v.get<int64_t>();
  else if (key == "seed")
    d.seed = v.get<uint64_t>();
  else if (key == "min_px")
    d.min_px = v.get<int64_t>();
  else if (key == "max_px")
    d.max_px = v.get<int64_t>();
  else if (key == "min_aspect")
    d.min_aspect = v.get<double>();
  else if (key == "max_aspect")
    d.max_aspect = v.get<double>();
  else if (key == "class_count")
    d.class_count = v.get<int64_t>();
  else
    unknown("data", key);
}

void set_key(RunConfig& rc, const std::string& section, const std::string& key,
             const json& v) {
  if (section == "model")
    set_model(rc.model, key, v);
  else if (section == "train")
    set_train(rc.train, key, v);
  else if (section == "loss")
    set_loss(rc, key, v);
  else if (section == "flow")
    set_flow(rc.flow, key, v);
  else if (section == "eval")
    set_eval(rc.eval, key, v);
  else if (section == "data")
    set_data(rc.data, key, v);
  else
    throw std::invalid_argument("unknown config section " + section);
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config root must be an object");

  RunConfig rc;
  for (const auto& [section, body] : j.items()) {
    if (section != "model" && section != "train" && section != "loss" &&
        section != "flow" && section != "eval" && section != "data")
      throw std::invalid_argument("unknown config section " + section);
    if (!body.is_object())
      throw std::invalid_argument("config section " + section + " must be an object");
    // resolve the preset before the weight keys no matter the file order
    if (section == "loss" && body.contains("preset"))
      set_key(rc, section, "preset", body.at("preset"));
    for (const auto& [key, value] : body.items()) {
      if (section == "loss" && key == "preset") continue;
      set_key(rc, section, key, value);
    }
  }
  return rc;
}

void apply_override(RunConfig& rc, const std::string& spec) {
  size_t dot = spec.find('.');
  size_t eq = spec.find('=');
  if (dot == std::string::npos || eq == std::string::npos || dot > eq ||
      dot == 0 || eq == dot + 1 || eq + 1 > spec.size())
    throw std::invalid_argument("override must look like section.key=value: " + spec);

  std::string section = spec.substr(0, dot);
  std::string key = spec.substr(dot + 1, eq - dot - 1);
  std::string raw = spec.substr(eq + 1);

  json v = json::parse(raw, nullptr, false);
  if (v.is_discarded() || v.is_object() || v.is_array()) v = raw;
  set_key(rc, section, key, v);
}

std::string run_config_json(const RunConfig& rc) {
  nlohmann::ordered_json j;
  j["model"]["name"] = rc.model.name;
  j["model"]["enc_depth"] = rc.model.enc_depth;
  j["model"]["dec_depth"] = rc.model.dec_depth;
  j["model"]["width"] = rc.model.width;
  j["model"]["heads"] = rc.model.heads;
  j["model"]["patch"] = rc.model.patch;
  j["model"]["latent_channels"] = rc.model.latent_channels;
  j["model"]["regularizer"] = regularizer_name(rc.model.reg);
  j["model"]["reg_param"] = rc.model.reg_param;
  j["model"]["mlp_expansion"] = rc.model.mlp_expansion;
  j["model"]["layerscale_init"] = rc.model.layerscale_init;
  j["model"]["rope_base"] = rc.model.rope_base;
  j["model"]["eps"] = rc.model.eps;

  j["train"]["total_steps"] = rc.train.total_steps;
  j["train"]["batch_size"] = rc.train.batch_size;
  j["train"]["peak_lr"] = rc.train.peak_lr;
  j["train"]["beta1"] = rc.train.beta1;
  j["train"]["beta2"] = rc.train.beta2;
  j["train"]["weight_decay"] = rc.train.weight_decay;
  j["train"]["clip_norm"] = rc.train.clip_norm;
  j["train"]["adam_eps"] = rc.train.adam_eps;
  j["train"]["warmup_fraction"] = rc.train.warmup_fraction;
  j["train"]["stage_split"] = rc.train.stage_split;
  j["train"]["budget_lo"] = rc.train.budget_lo;
  j["train"]["budget_hi"] = rc.train.budget_hi;
  j["train"]["seed"] = rc.train.seed;

  j["loss"]["preset"] = rc.loss_preset_name;
  j["loss"]["w_char"] = rc.loss.w_char;
  j["loss"]["w_ssim"] = rc.loss.w_ssim;
  j["loss"]["w_perc"] = rc.loss.w_perc;
  j["loss"]["tile"] = rc.loss.tile;
  j["loss"]["tiles_per_image"] = rc.loss.tiles_per_image;

  j["flow"]["depth"] = rc.flow.depth;
  j["flow"]["width"] = rc.flow.width;
  j["flow"]["heads"] = rc.flow.heads;
  j["flow"]["latent_channels"] = rc.flow.latent_channels;
  j["flow"]["class_count"] = rc.flow.class_count;
  j["flow"]["max_grid_side"] = rc.flow.max_grid_side;
  j["flow"]["cfg_dropout"] = rc.flow.cfg_dropout;
  j["flow"]["ema_decay"] = rc.flow.ema_decay;
  j["flow"]["mlp_expansion"] = rc.flow.mlp_expansion;
  j["flow"]["layerscale_init"] = rc.flow.layerscale_init;
  j["flow"]["rope_base"] = rc.flow.rope_base;
  j["flow"]["eps"] = rc.flow.eps;

  j["eval"]["budget"] = rc.eval.budget;
  j["eval"]["window_radius"] = rc.eval.window_radius;
  j["eval"]["stat_side"] = rc.eval.stat_side;

  j["data"]["count"] = rc.data.count;
  j["data"]["seed"] = rc.data.seed;
  j["data"]["min_px"] = rc.data.min_px;
  j["data"]["max_px"] = rc.data.max_px;
  j["data"]["min_aspect"] = rc.data.min_aspect;
  j["data"]["max_aspect"] = rc.data.max_aspect;
  j["data"]["class_count"] = rc.data.class_count;

  return j.dump(2);
}

std::string config_hash(const RunConfig& rc) {
  std::string text = run_config_json(rc);
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
  return std::string(buf);
}

}  // namespace vitae
