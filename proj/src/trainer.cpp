#include "vitae/trainer.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "vitae/checkpoint.hpp"
#include "vitae/naflex.hpp"

namespace vitae {

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(cfg.peak_lr > 0)) throw std::invalid_argument("peak_lr must be positive");
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1) || !(cfg.beta2 >= 0 && cfg.beta2 < 1))
    throw std::invalid_argument("betas must lie in [0, 1)");
  if (cfg.weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(cfg.clip_norm > 0)) throw std::invalid_argument("clip_norm must be positive");
  if (!(cfg.adam_eps > 0)) throw std::invalid_argument("adam_eps must be positive");
  if (cfg.warmup_fraction < 0 || cfg.warmup_fraction >= 1)
    throw std::invalid_argument("warmup_fraction must lie in [0, 1)");
  if (!(cfg.stage_split > 0 && cfg.stage_split < 1))
    throw std::invalid_argument("stage_split must lie in (0, 1)");
  if (cfg.budget_lo < 1) throw std::invalid_argument("budgets must be >= 1");
  if (cfg.budget_hi <= cfg.budget_lo)
    throw std::invalid_argument("budgets must be strictly increasing");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step >= cfg.total_steps) return 0.0;
  if (step < 0) throw std::invalid_argument("negative step");
  double total = static_cast<double>(cfg.total_steps);
  double warm = cfg.warmup_fraction * total;
  double s = static_cast<double>(step);
  if (s < warm) return cfg.peak_lr * s / warm;
  double progress = (s - warm) / (total - warm);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(progress * std::numbers::pi));
}

int64_t budget_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("negative step");
  double frac = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return frac < cfg.stage_split ? cfg.budget_lo : cfg.budget_hi;
}

template <typename T>
AdamMoments<T> make_moments(const ParamStore<T>& ps) {
  AdamMoments<T> mom;
  mom.m.reserve(ps.entries().size());
  mom.v.reserve(ps.entries().size());
  for (const auto& e : ps.entries()) {
    mom.m.emplace_back(e.value.shape);
    mom.v.emplace_back(e.value.shape);
  }
  return mom;
}

template <typename T>
double adamw_step(ParamStore<T>& ps, AdamMoments<T>& moments, double lr,
                  const TrainConfig& cfg) {
  auto& entries = ps.entries();
  if (moments.m.size() != entries.size() || moments.v.size() != entries.size())
    throw std::invalid_argument("optimizer moments do not match the store");

  double sq = 0;
  for (const auto& e : entries)
    for (int64_t i = 0; i < e.grad.numel(); ++i) {
      double g = static_cast<double>(e.grad[i]);
      if (!std::isfinite(g))
        throw std::runtime_error("non-finite gradient in " + e.name);
      sq += g * g;
    }
  double norm = std::sqrt(sq);
  double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

  moments.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(moments.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(moments.step));

  for (size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    Tensor<T>& m = moments.m[k];
    Tensor<T>& v = moments.v[k];
    if (m.shape != e.value.shape)
      throw std::invalid_argument("moment shape mismatch for " + e.name);
    for (int64_t i = 0; i < e.value.numel(); ++i) {
      double g = static_cast<double>(e.grad[i]) * clip;
      double mv = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
      double vv = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mv);
      v[i] = static_cast<T>(vv);
      double p = static_cast<double>(e.value[i]);
      p -= lr * cfg.weight_decay * p;
      p -= lr * (mv / bc1) / (std::sqrt(vv / bc2) + cfg.adam_eps);
      e.value[i] = static_cast<T>(p);
    }
  }
  ps.step += 1;
  return norm;
}

std::string log_line(const StepLog& s) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["budget"] = s.budget;
  j["loss_total"] = s.loss_total;
  j["loss_char"] = s.loss_char;
  j["loss_ssim"] = s.loss_ssim;
  j["loss_perc"] = s.loss_perc;
  j["loss_reg"] = s.loss_reg;
  j["grad_norm"] = s.grad_norm;
  return j.dump();
}

TrainResult train_autoencoder(ParamStore<float>& ps, const ModelConfig& mcfg,
                              const std::vector<LabeledImage>& dataset,
                              const TrainConfig& tcfg, const LossWeights& weights,
                              const TrainIO& io) {
  validate_train_config(tcfg);
  validate_config(mcfg);
  if (dataset.empty()) throw std::invalid_argument("empty training set");

  std::unique_ptr<FrozenExtractor<float>> extractor;
  if (weights.w_perc > 0)
    extractor = std::make_unique<FrozenExtractor<float>>(8, 64, 4, 2, 1001);

  std::ofstream log_file;
  if (!io.log_path.empty()) {
    log_file.open(io.log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write log " + io.log_path);
  }
  auto save = [&]() {
    if (!io.checkpoint_path.empty())
      save_checkpoint(io.checkpoint_path, model_config_json(mcfg), ps);
  };

  TrainResult result;
  AdamMoments<float> moments = make_moments(ps);

  std::vector<size_t> order(dataset.size());
  size_t cursor = order.size();  // forces a shuffle before the first draw
  uint64_t epoch = 0;
  auto reshuffle = [&]() {
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng = derive_rng(tcfg.seed, {0x50ull, epoch});
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }
    cursor = 0;
    ++epoch;
  };

  for (int64_t s = 0; s < tcfg.total_steps; ++s) {
    StepLog entry;
    entry.step = s + 1;
    entry.lr = lr_at(s, tcfg);
    entry.budget = budget_at(s, tcfg);
    Rng step_rng = derive_rng(tcfg.seed, {0x57ull, static_cast<uint64_t>(s)});

    try {
      Graph<float> g(true);
      Bound<float> bound = bind(g, ps, true);
      typename Graph<float>::Id batch_total{};
      LossValues acc;

      for (int64_t b = 0; b < tcfg.batch_size; ++b) {
        if (cursor >= order.size()) reshuffle();
        const Image& img = dataset[order[cursor++]].image;

        GridFit fit = fit_grid(img.height, img.width, mcfg.patch, entry.budget);
        PaddedImage padded = resize_pad(img, fit, mcfg.patch);
        auto ctx = make_attn_context<float>(mcfg.block(), fit.grid_h, fit.grid_w,
                                            -1, true);

        auto head = encode(g, g.leaf(patchify(padded.canvas, mcfg.patch)), bound,
                           mcfg, ctx);
        auto reg = regularize_latent(g, head, mcfg, true, step_rng);
        auto xhat_canvas = decode(g, reg.z, bound, mcfg, ctx);
        auto x_canvas = g.leaf(padded.canvas.tensor<float>());
        auto [x, xhat] = crop_valid(g, x_canvas, xhat_canvas, fit);
        auto breakdown =
            total_loss(g, x, xhat, reg.reg_loss, extractor.get(), weights, step_rng);

        LossValues lv = loss_values(g, breakdown);
        acc.total += lv.total;
        acc.charb += lv.charb;
        acc.ssim += lv.ssim;
        acc.perc += lv.perc;
        acc.reg += lv.reg;
        batch_total = b == 0 ? breakdown.total : g.add(batch_total, breakdown.total);
      }

      double inv = 1.0 / static_cast<double>(tcfg.batch_size);
      g.backward(g.scale(batch_total, static_cast<float>(inv)));
      ps.zero_grads();
      collect_grads(bound, ps);

      entry.grad_norm = adamw_step(ps, moments, entry.lr, tcfg);
      entry.loss_total = acc.total * inv;
      entry.loss_char = acc.charb * inv;
      entry.loss_ssim = acc.ssim * inv;
      entry.loss_perc = acc.perc * inv;
      entry.loss_reg = acc.reg * inv;
    } catch (const std::exception& ex) {
      result.aborted = true;
      result.abort_reason = ex.what();
      save();  // parameters untouched by the failing step
      break;
    }

    result.log.push_back(entry);
    result.steps_run = s + 1;
    if (log_file) log_file << log_line(entry) << '\n';
    if (io.checkpoint_every > 0 && (s + 1) % io.checkpoint_every == 0) save();
  }

  if (!result.aborted) save();
  return result;
}

template struct AdamMoments<float>;
template struct AdamMoments<double>;
template AdamMoments<float> make_moments(const ParamStore<float>&);
template AdamMoments<double> make_moments(const ParamStore<double>&);
template double adamw_step(ParamStore<float>&, AdamMoments<float>&, double,
                           const TrainConfig&);
template double adamw_step(ParamStore<double>&, AdamMoments<double>&, double,
                           const TrainConfig&);

}  // namespace vitae
