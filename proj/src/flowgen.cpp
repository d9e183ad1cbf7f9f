#include "vitae/flowgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "vitae/checkpoint.hpp"
#include "vitae/naflex.hpp"

namespace vitae {

BlockConfig FlowConfig::block() const {
  BlockConfig b;
  b.width = width;
  b.heads = static_cast<int>(heads);
  b.mlp_expansion = mlp_expansion;
  b.layerscale_init = layerscale_init;
  b.rope_base = rope_base;
  b.eps = eps;
  return b;
}

void validate_flow_config(const FlowConfig& cfg) {
  if (cfg.depth < 1) throw std::invalid_argument("depth must be >= 1");
  if (cfg.width < 1) throw std::invalid_argument("width must be >= 1");
  if (cfg.heads < 1) throw std::invalid_argument("heads must be >= 1");
  if (cfg.width % cfg.heads != 0)
    throw std::invalid_argument("width must be divisible by heads");
  if ((cfg.width / cfg.heads) % 4 != 0)
    throw std::invalid_argument("head dim must be divisible by 4 for axial rotary");
  if (cfg.latent_channels < 1)
    throw std::invalid_argument("latent_channels must be >= 1");
  if (cfg.class_count < 1) throw std::invalid_argument("class_count must be >= 1");
  if (cfg.max_grid_side < 1)
    throw std::invalid_argument("max_grid_side must be >= 1");
  if (cfg.cfg_dropout < 0 || cfg.cfg_dropout >= 1)
    throw std::invalid_argument("cfg_dropout must lie in [0, 1)");
  if (cfg.ema_decay < 0 || cfg.ema_decay > 1)
    throw std::invalid_argument("ema_decay must lie in [0, 1]");
  if (!(cfg.mlp_expansion > 0))
    throw std::invalid_argument("mlp_expansion must be positive");
  if (!(cfg.eps > 0)) throw std::invalid_argument("eps must be positive");
}

namespace {

// Sine/cosine bands over t in [0,1], spread across the frequency range by the
// same factor-of-1000 stretch diffusion timestep embeddings use.
template <typename T>
Tensor<T> timestep_embedding(double t, int64_t dim, double base) {
  Tensor<T> e({1, dim});
  int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::pow(base, -static_cast<double>(i) / static_cast<double>(half));
    double angle = 1000.0 * t * freq;
    e[i] = static_cast<T>(std::sin(angle));
    e[half + i] = static_cast<T>(std::cos(angle));
  }
  return e;
}

}  // namespace

template <typename T>
void init_flow_params(ParamStore<T>& ps, const FlowConfig& cfg, uint64_t seed) {
  validate_flow_config(cfg);
  Rng rng = derive_rng(seed, {0xF1ull});
  const int64_t D = cfg.width;
  const int64_t c = cfg.latent_channels;
  const int64_t h = mlp_hidden(D, cfg.mlp_expansion);

  ps.add("in.w", normal_init<T>({D, c}, rng, 0.02));
  ps.add("in.b", const_init<T>({D}, 0.0));
  ps.add("pos.row", normal_init<T>({cfg.max_grid_side, D}, rng, 0.02));
  ps.add("pos.col", normal_init<T>({cfg.max_grid_side, D}, rng, 0.02));
  ps.add("time.w1", normal_init<T>({D, D}, rng, 0.02));
  ps.add("time.b1", const_init<T>({D}, 0.0));
  ps.add("time.w2", normal_init<T>({D, D}, rng, 0.02));
  ps.add("time.b2", const_init<T>({D}, 0.0));
  ps.add("cls.emb", normal_init<T>({cfg.class_count + 1, D}, rng, 0.02));

  for (int64_t i = 0; i < cfg.depth; ++i) {
    std::string pre = "block" + std::to_string(i) + ".";
    ps.add(pre + "ada.w", const_init<T>({4 * D, D}, 0.0));
    ps.add(pre + "ada.b", const_init<T>({4 * D}, 0.0));
    ps.add(pre + "attn.wqkv", normal_init<T>({3 * D, D}, rng, 0.02));
    ps.add(pre + "attn.bqkv", const_init<T>({3 * D}, 0.0));
    ps.add(pre + "attn.qgain", const_init<T>({D}, 1.0));
    ps.add(pre + "attn.kgain", const_init<T>({D}, 1.0));
    ps.add(pre + "attn.wo", normal_init<T>({D, D}, rng, 0.02));
    ps.add(pre + "attn.bo", const_init<T>({D}, 0.0));
    ps.add(pre + "ls_sa", const_init<T>({D}, cfg.layerscale_init));
    ps.add(pre + "ln_ca.g", const_init<T>({D}, 1.0));
    ps.add(pre + "ln_ca.b", const_init<T>({D}, 0.0));
    ps.add(pre + "xattn.wq", normal_init<T>({D, D}, rng, 0.02));
    ps.add(pre + "xattn.bq", const_init<T>({D}, 0.0));
    ps.add(pre + "xattn.wk", normal_init<T>({D, D}, rng, 0.02));
    ps.add(pre + "xattn.bk", const_init<T>({D}, 0.0));
    ps.add(pre + "xattn.wv", normal_init<T>({D, D}, rng, 0.02));
    ps.add(pre + "xattn.bv", const_init<T>({D}, 0.0));
    ps.add(pre + "xattn.wo", normal_init<T>({D, D}, rng, 0.02));
    ps.add(pre + "xattn.bo", const_init<T>({D}, 0.0));
    ps.add(pre + "ls_ca", const_init<T>({D}, cfg.layerscale_init));
    ps.add(pre + "mlp.wgate", normal_init<T>({h, D}, rng, 0.02));
    ps.add(pre + "mlp.bgate", const_init<T>({h}, 0.0));
    ps.add(pre + "mlp.wup", normal_init<T>({h, D}, rng, 0.02));
    ps.add(pre + "mlp.bup", const_init<T>({h}, 0.0));
    ps.add(pre + "mlp.wdown", normal_init<T>({D, h}, rng, 0.02));
    ps.add(pre + "mlp.bdown", const_init<T>({D}, 0.0));
    ps.add(pre + "ls_mlp", const_init<T>({D}, cfg.layerscale_init));
  }

  ps.add("out_ln.g", const_init<T>({D}, 1.0));
  ps.add("out_ln.b", const_init<T>({D}, 0.0));
  // zero head: a fresh model predicts the zero velocity field exactly
  ps.add("head.w", const_init<T>({c, D}, 0.0));
  ps.add("head.b", const_init<T>({c}, 0.0));
}

FlowState make_flow_state(const FlowConfig& cfg, uint64_t seed) {
  FlowState st;
  init_flow_params(st.params, cfg, seed);
  st.ema_params = st.params;
  return st;
}

void ema_update(FlowState& state, double decay) {
  if (decay < 0 || decay > 1) throw std::invalid_argument("decay must lie in [0, 1]");
  auto& live = state.params.entries();
  auto& ema = state.ema_params.entries();
  if (live.size() != ema.size())
    throw std::invalid_argument("averaged store drifted from the live one");
  for (size_t i = 0; i < live.size(); ++i) {
    if (ema[i].name != live[i].name || ema[i].value.shape != live[i].value.shape)
      throw std::invalid_argument("averaged store drifted from the live one");
    for (int64_t j = 0; j < live[i].value.numel(); ++j)
      ema[i].value[j] = static_cast<float>(
          decay * static_cast<double>(ema[i].value[j]) +
          (1.0 - decay) * static_cast<double>(live[i].value[j]));
  }
}

template <typename T>
typename Graph<T>::Id velocity(Graph<T>& g, typename Graph<T>::Id z_t, double t,
                               int64_t label, const Bound<T>& p,
                               const FlowConfig& cfg, int64_t grid_h,
                               int64_t grid_w) {
  validate_flow_config(cfg);
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("t must lie in [0, 1]");
  if (label < 0 || label > cfg.class_count)
    throw std::invalid_argument("class label out of range");
  if (grid_h < 1 || grid_w < 1 || grid_h > cfg.max_grid_side ||
      grid_w > cfg.max_grid_side)
    throw std::invalid_argument("latent grid exceeds the position tables");
  const Tensor<T>& zv = g.value(z_t);
  if (zv.rank() != 2 || zv.rows() != grid_h * grid_w ||
      zv.cols() != cfg.latent_channels)
    throw std::invalid_argument("latent shape mismatch");

  const int64_t L = grid_h * grid_w;
  const int64_t D = cfg.width;
  const T eps = static_cast<T>(cfg.eps);
  const BlockConfig bcfg = cfg.block();

  // projection plus learned absolute positions; one-hot selection keeps the
  // tables differentiable through plain matmuls
  auto x = g.linear(z_t, p["in.w"], p["in.b"]);
  Tensor<T> sel_row({L, cfg.max_grid_side});
  Tensor<T> sel_col({L, cfg.max_grid_side});
  for (int64_t r = 0; r < grid_h; ++r)
    for (int64_t c = 0; c < grid_w; ++c) {
      sel_row.at(r * grid_w + c, r) = T(1);
      sel_col.at(r * grid_w + c, c) = T(1);
    }
  x = g.add(x, g.matmul(g.leaf(std::move(sel_row)), p["pos.row"]));
  x = g.add(x, g.matmul(g.leaf(std::move(sel_col)), p["pos.col"]));

  // conditioning token: timestep bands through an MLP plus the class row
  auto th = g.silu(g.linear(g.leaf(timestep_embedding<T>(t, D, cfg.rope_base)),
                            p["time.w1"], p["time.b1"]));
  auto cond = g.linear(th, p["time.w2"], p["time.b2"]);
  cond = g.add(cond, g.embed_row(p["cls.emb"], label));

  auto ctx = make_attn_context<T>(bcfg, grid_h, grid_w, -1, g.grad_enabled());

  for (int64_t i = 0; i < cfg.depth; ++i) {
    std::string pre = "block" + std::to_string(i) + ".";
    auto mod = g.linear(cond, p[pre + "ada.w"], p[pre + "ada.b"]);
    auto shift_sa = g.slice_cols(mod, 0, D);
    auto scale_sa = g.slice_cols(mod, D, 2 * D);
    auto shift_mlp = g.slice_cols(mod, 2 * D, 3 * D);
    auto scale_mlp = g.slice_cols(mod, 3 * D, 4 * D);

    auto n1 = g.layernorm(x, Graph<T>::npos, Graph<T>::npos, eps);
    n1 = g.add_rowvec(g.mul_rowvec(n1, g.add_const(scale_sa, T(1))), shift_sa);
    auto sa = attention_layer(g, n1, p, pre, bcfg, ctx);
    x = g.add(x, g.mul_rowvec(sa, p[pre + "ls_sa"]));

    auto nca = g.layernorm(x, p[pre + "ln_ca.g"], p[pre + "ln_ca.b"], eps);
    auto q = g.linear(nca, p[pre + "xattn.wq"], p[pre + "xattn.bq"]);
    auto k = g.linear(cond, p[pre + "xattn.wk"], p[pre + "xattn.bk"]);
    auto v = g.linear(cond, p[pre + "xattn.wv"], p[pre + "xattn.bv"]);
    auto ca = g.attention(q, k, v, static_cast<int>(cfg.heads));
    ca = g.linear(ca, p[pre + "xattn.wo"], p[pre + "xattn.bo"]);
    x = g.add(x, g.mul_rowvec(ca, p[pre + "ls_ca"]));

    auto n2 = g.layernorm(x, Graph<T>::npos, Graph<T>::npos, eps);
    n2 = g.add_rowvec(g.mul_rowvec(n2, g.add_const(scale_mlp, T(1))), shift_mlp);
    auto m = swiglu_mlp(g, n2, p, pre, bcfg);
    x = g.add(x, g.mul_rowvec(m, p[pre + "ls_mlp"]));
  }

  x = g.layernorm(x, p["out_ln.g"], p["out_ln.b"], eps);
  return g.linear(x, p["head.w"], p["head.b"]);
}

FlowSample make_flow_sample(const Tensor<float>& z1, int64_t label,
                            const FlowConfig& cfg, Rng& rng) {
  if (label < 0 || label > cfg.class_count)
    throw std::invalid_argument("class label out of range");
  for (int64_t i = 0; i < z1.numel(); ++i)
    if (!std::isfinite(z1[i])) throw std::invalid_argument("non-finite latent");

  FlowSample s;
  s.t = rng.uniform();
  s.z_t = Tensor<float>(z1.shape);
  s.target = Tensor<float>(z1.shape);
  float t = static_cast<float>(s.t);
  for (int64_t i = 0; i < z1.numel(); ++i) {
    float z0 = static_cast<float>(rng.normal());
    s.z_t[i] = (1.0f - t) * z0 + t * z1[i];
    s.target[i] = z1[i] - z0;
  }
  s.label = rng.uniform() < cfg.cfg_dropout ? cfg.class_count : label;
  return s;
}

double fm_loss(const Tensor<float>& z1, int64_t grid_h, int64_t grid_w,
               int64_t label, const ParamStore<float>& ps, const FlowConfig& cfg,
               Rng& rng) {
  FlowSample s = make_flow_sample(z1, label, cfg, rng);
  Graph<float> g(false);
  Bound<float> b = bind(g, ps, false);
  auto v = velocity(g, g.leaf(std::move(s.z_t)), s.t, s.label, b, cfg, grid_h,
                    grid_w);
  return static_cast<double>(g.value(g.mse(v, g.leaf(std::move(s.target))))[0]);
}

Tensor<float> euler_sample(const ParamStore<float>& ps, const FlowConfig& cfg,
                           int64_t label, int64_t steps, double cfg_scale,
                           int64_t grid_h, int64_t grid_w, Rng& rng) {
  validate_flow_config(cfg);
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (cfg_scale < 0) throw std::invalid_argument("guidance scale must be >= 0");

  Tensor<float> z({grid_h * grid_w, cfg.latent_channels});
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());

  auto eval = [&](const Tensor<float>& zt, double t, int64_t lab) {
    Graph<float> g(false);
    Bound<float> b = bind(g, ps, false);
    Tensor<float> out =
        g.value(velocity(g, g.leaf(zt), t, lab, b, cfg, grid_h, grid_w));
    return out;
  };

  const float dt = static_cast<float>(1.0 / static_cast<double>(steps));
  for (int64_t k = 0; k < steps; ++k) {
    double t = static_cast<double>(k) / static_cast<double>(steps);
    if (cfg_scale == 1.0) {
      // guided and conditional fields coincide; skip the unconditional pass
      Tensor<float> v = eval(z, t, label);
      for (int64_t i = 0; i < z.numel(); ++i) z[i] += dt * v[i];
    } else {
      Tensor<float> vc = eval(z, t, label);
      Tensor<float> vu = eval(z, t, cfg.class_count);
      for (int64_t i = 0; i < z.numel(); ++i)
        z[i] += dt * static_cast<float>(vu[i] + cfg_scale * (vc[i] - vu[i]));
    }
  }
  return z;
}

std::vector<Image> generate_images(const ParamStore<float>& ae_ps,
                                   const ModelConfig& ae_cfg, const FlowState& st,
                                   const FlowConfig& cfg,
                                   const std::vector<int64_t>& labels,
                                   int64_t steps, double cfg_scale,
                                   int64_t grid_h, int64_t grid_w, uint64_t seed) {
  if (ae_cfg.latent_channels != cfg.latent_channels)
    throw std::invalid_argument("flow and autoencoder disagree on latent channels");

  std::vector<Image> out;
  out.reserve(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    Rng rng = derive_rng(seed, {0x9E17ull, static_cast<uint64_t>(i)});
    Tensor<float> z = euler_sample(st.ema_params, cfg, labels[i], steps, cfg_scale,
                                   grid_h, grid_w, rng);

    Graph<float> g(false);
    Bound<float> b = bind(g, ae_ps, false);
    auto ctx = make_attn_context<float>(ae_cfg.block(), grid_h, grid_w, -1, false);
    const Tensor<float>& canvas =
        g.value(decode(g, g.leaf(std::move(z)), b, ae_cfg, ctx));

    Image img(grid_h * ae_cfg.patch, grid_w * ae_cfg.patch);
    for (size_t j = 0; j < img.pixels.size(); ++j)
      img.pixels[j] = std::clamp(canvas[static_cast<int64_t>(j)], 0.0f, 1.0f);
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<LatentExample> make_latent_dataset(const std::vector<LabeledImage>& data,
                                               const ParamStore<float>& ae_ps,
                                               const ModelConfig& ae_cfg,
                                               int64_t budget) {
  std::vector<LatentExample> out;
  out.reserve(data.size());
  for (const LabeledImage& li : data) {
    PackedImage packed = pack_image(li.image, ae_cfg.patch, budget);
    LatentExample ex;
    ex.z = encode_latent(packed, ae_ps, ae_cfg);
    ex.grid_h = packed.grid.grid_h;
    ex.grid_w = packed.grid.grid_w;
    ex.label = li.label;
    out.push_back(std::move(ex));
  }
  return out;
}

std::string flow_log_line(const FlowStepLog& s) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["loss_fm"] = s.loss_fm;
  j["grad_norm"] = s.grad_norm;
  j["flops"] = s.flops;
  j["flops_convention"] = "fwd+bwd";
  return j.dump();
}

FlowTrainResult train_flow(FlowState& st, const FlowConfig& fcfg,
                           const std::vector<LatentExample>& dataset,
                           const TrainConfig& tcfg, const TrainIO& io) {
  validate_train_config(tcfg);
  validate_flow_config(fcfg);
  if (dataset.empty()) throw std::invalid_argument("empty latent dataset");

  std::ofstream log_file;
  if (!io.log_path.empty()) {
    log_file.open(io.log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write log " + io.log_path);
  }
  auto save = [&]() {
    if (!io.checkpoint_path.empty())
      save_flow_checkpoint(io.checkpoint_path, fcfg, st);
  };

  FlowTrainResult result;
  AdamMoments<float> moments = make_moments(st.params);
  const int64_t param_count = st.params.scalar_count();
  int64_t flops = 0;

  std::vector<size_t> order(dataset.size());
  size_t cursor = order.size();
  uint64_t epoch = 0;
  auto reshuffle = [&]() {
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng = derive_rng(tcfg.seed, {0xF50ull, epoch});
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }
    cursor = 0;
    ++epoch;
  };

  for (int64_t s = 0; s < tcfg.total_steps; ++s) {
    FlowStepLog entry;
    entry.step = s + 1;
    entry.lr = lr_at(s, tcfg);
    Rng step_rng = derive_rng(tcfg.seed, {0xF57ull, static_cast<uint64_t>(s)});

    try {
      Graph<float> g(true);
      Bound<float> bound = bind(g, st.params, true);
      typename Graph<float>::Id batch_total{};
      double acc = 0;
      int64_t tokens = 0;

      for (int64_t b = 0; b < tcfg.batch_size; ++b) {
        if (cursor >= order.size()) reshuffle();
        const LatentExample& ex = dataset[order[cursor++]];

        FlowSample sample = make_flow_sample(ex.z, ex.label, fcfg, step_rng);
        auto v = velocity(g, g.leaf(std::move(sample.z_t)), sample.t, sample.label,
                          bound, fcfg, ex.grid_h, ex.grid_w);
        auto loss = g.mse(v, g.leaf(std::move(sample.target)));
        double lv = static_cast<double>(g.value(loss)[0]);
        if (!std::isfinite(lv))
          throw std::runtime_error("non-finite flow matching loss");
        acc += lv;
        tokens += ex.grid_h * ex.grid_w;
        batch_total = b == 0 ? loss : g.add(batch_total, loss);
      }

      double inv = 1.0 / static_cast<double>(tcfg.batch_size);
      g.backward(g.scale(batch_total, static_cast<float>(inv)));
      st.params.zero_grads();
      collect_grads(bound, st.params);

      entry.grad_norm = adamw_step(st.params, moments, entry.lr, tcfg);
      ema_update(st, fcfg.ema_decay);
      st.step += 1;
      entry.loss_fm = acc * inv;
      flops += 6 * param_count * tokens;  // 2*P forward, 4*P backward per token
      entry.flops = flops;
    } catch (const std::exception& ex) {
      result.aborted = true;
      result.abort_reason = ex.what();
      save();
      break;
    }

    result.log.push_back(entry);
    result.steps_run = s + 1;
    if (log_file) log_file << flow_log_line(entry) << '\n';
    if (io.checkpoint_every > 0 && (s + 1) % io.checkpoint_every == 0) save();
  }

  if (!result.aborted) save();
  return result;
}

std::string flow_config_json(const FlowConfig& cfg) {
  nlohmann::ordered_json j;
  j["depth"] = cfg.depth;
  j["width"] = cfg.width;
  j["heads"] = cfg.heads;
  j["latent_channels"] = cfg.latent_channels;
  j["class_count"] = cfg.class_count;
  j["max_grid_side"] = cfg.max_grid_side;
  j["cfg_dropout"] = cfg.cfg_dropout;
  j["ema_decay"] = cfg.ema_decay;
  j["mlp_expansion"] = cfg.mlp_expansion;
  j["layerscale_init"] = cfg.layerscale_init;
  j["rope_base"] = cfg.rope_base;
  j["eps"] = cfg.eps;
  return j.dump();
}

FlowConfig flow_config_from_json(const std::string& json_text) {
  auto j = nlohmann::json::parse(json_text);
  FlowConfig cfg;
  cfg.depth = j.at("depth").get<int64_t>();
  cfg.width = j.at("width").get<int64_t>();
  cfg.heads = j.at("heads").get<int64_t>();
  cfg.latent_channels = j.at("latent_channels").get<int64_t>();
  cfg.class_count = j.at("class_count").get<int64_t>();
  cfg.max_grid_side = j.at("max_grid_side").get<int64_t>();
  cfg.cfg_dropout = j.at("cfg_dropout").get<double>();
  cfg.ema_decay = j.at("ema_decay").get<double>();
  cfg.mlp_expansion = j.at("mlp_expansion").get<double>();
  cfg.layerscale_init = j.at("layerscale_init").get<double>();
  cfg.rope_base = j.at("rope_base").get<double>();
  cfg.eps = j.at("eps").get<double>();
  validate_flow_config(cfg);
  return cfg;
}

void save_flow_checkpoint(const std::string& path, const FlowConfig& cfg,
                          const FlowState& st) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  tensors.reserve(2 * st.params.entries().size());
  for (const auto& e : st.params.entries()) tensors.emplace_back(e.name, &e.value);
  for (const auto& e : st.ema_params.entries())
    tensors.emplace_back("ema." + e.name, &e.value);
  save_checkpoint(path, flow_config_json(cfg), tensors);
}

FlowState load_flow_checkpoint(const std::string& path, FlowConfig& cfg_out) {
  Checkpoint ck = load_checkpoint(path);
  cfg_out = flow_config_from_json(ck.config_json);
  FlowState st = make_flow_state(cfg_out, 0);
  load_into(st.params, ck);
  load_into(st.ema_params, ck, "ema.");
  return st;
}

#define VITAE_INSTANTIATE_FLOW(T)                                              \
  template void init_flow_params<T>(ParamStore<T>&, const FlowConfig&,         \
                                    uint64_t);                                 \
  template typename Graph<T>::Id velocity<T>(Graph<T>&, typename Graph<T>::Id, \
                                             double, int64_t, const Bound<T>&, \
                                             const FlowConfig&, int64_t,       \
                                             int64_t);

VITAE_INSTANTIATE_FLOW(float)
VITAE_INSTANTIATE_FLOW(double)

}  // namespace vitae
