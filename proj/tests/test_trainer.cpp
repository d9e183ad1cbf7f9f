#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "vitae/checkpoint.hpp"
#include "vitae/trainer.hpp"

using namespace vitae;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

ModelConfig tiny_model() {
  ModelConfig cfg = desk_config();
  cfg.width = 16;
  cfg.heads = 4;
  cfg.enc_depth = 1;
  cfg.dec_depth = 1;
  cfg.latent_channels = 4;
  return cfg;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(validate_train_config(cfg));

  TrainConfig bad = cfg;
  bad.stage_split = 1.0;
  CHECK_THROWS(validate_train_config(bad));
  bad = cfg;
  bad.budget_hi = bad.budget_lo;
  CHECK_THROWS(validate_train_config(bad));
  bad = cfg;
  bad.clip_norm = 0;
  CHECK_THROWS(validate_train_config(bad));
  bad = cfg;
  bad.warmup_fraction = 1.0;
  CHECK_THROWS(validate_train_config(bad));
  bad = cfg;
  bad.beta2 = 1.0;
  CHECK_THROWS(validate_train_config(bad));
}

TEST_CASE("learning rate schedule: warmup, junction, midpoint, endpoint") {
  TrainConfig cfg;
  cfg.total_steps = 1000;
  cfg.peak_lr = 5e-4;
  cfg.warmup_fraction = 0.01;  // 10 warmup steps

  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(5, cfg) == doctest::Approx(cfg.peak_lr / 2).epsilon(1e-12));
  CHECK(lr_at(10, cfg) == cfg.peak_lr);

  // cosine midpoint: (505 - 10) / 990 is exactly one half
  CHECK(lr_at(505, cfg) == doctest::Approx(cfg.peak_lr / 2).epsilon(1e-12));
  CHECK(lr_at(1000, cfg) == 0.0);

  // continuity at the junction and monotone decay after it
  CHECK(lr_at(10, cfg) - lr_at(9, cfg) <= cfg.peak_lr * 0.11);
  double prev = lr_at(10, cfg);
  for (int64_t s : {200, 400, 600, 800, 999}) {
    double v = lr_at(s, cfg);
    CHECK(v < prev);
    prev = v;
  }
  CHECK(prev > 0.0);
}

TEST_CASE("budget schedule is right-closed at the split") {
  TrainConfig cfg;
  cfg.total_steps = 2000;
  CHECK(budget_at(0, cfg) == 256);
  CHECK(budget_at(1000, cfg) == 256);
  CHECK(budget_at(1799, cfg) == 256);
  CHECK(budget_at(1800, cfg) == 1024);  // fraction exactly 0.9
  CHECK(budget_at(1900, cfg) == 1024);
  CHECK(budget_at(1999, cfg) == 1024);

  int64_t low_steps = 0;
  for (int64_t s = 0; s < cfg.total_steps; ++s)
    if (budget_at(s, cfg) == 256) ++low_steps;
  CHECK(low_steps == 1800);
}

TEST_CASE("adamw: hand-computed steps, decay identity, clipping") {
  TrainConfig cfg;
  cfg.peak_lr = 1e-3;
  cfg.clip_norm = 100.0;  // inert for the oracle

  SUBCASE("one scalar parameter, two steps against hand arithmetic") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({1}, 1.0));
    auto mom = make_moments(ps);

    double p = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
      double g = t == 1 ? 0.5 : -0.25;
      ps.entries()[0].grad[0] = g;
      double norm = adamw_step(ps, mom, 1e-3, cfg);
      CHECK(norm == doctest::Approx(std::abs(g)).epsilon(1e-15));

      m = 0.9 * m + 0.1 * g;
      v = 0.95 * v + 0.05 * g * g;
      double mhat = m / (1.0 - std::pow(0.9, t));
      double vhat = v / (1.0 - std::pow(0.95, t));
      p -= 1e-3 * 0.05 * p;
      p -= 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(ps["w"][0] == doctest::Approx(p).epsilon(1e-12));
    }
    CHECK(mom.step == 2);
    CHECK(ps.step == 2);
  }

  SUBCASE("zero gradient leaves only the decoupled decay") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({2}, 3.0));
    auto mom = make_moments(ps);
    adamw_step(ps, mom, 1e-3, cfg);
    double expect = 3.0 - 1e-3 * 0.05 * 3.0;
    CHECK(ps["w"][0] == expect);
    CHECK(ps["w"][1] == expect);
  }

  SUBCASE("global clip rescales and reports the raw norm") {
    TrainConfig clip_cfg = cfg;
    clip_cfg.clip_norm = 1.0;
    clip_cfg.weight_decay = 0.0;
    ParamStore<double> ps;
    ps.add("a", Tensor<double>({1}, 0.0));
    ps.add("b", Tensor<double>({1}, 0.0));
    ps.entries()[0].grad[0] = 3.0;
    ps.entries()[1].grad[0] = 4.0;
    auto mom = make_moments(ps);
    CHECK(adamw_step(ps, mom, 1e-3, clip_cfg) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(mom.m[0][0] == doctest::Approx(0.1 * 0.6).epsilon(1e-15));
    CHECK(mom.m[1][0] == doctest::Approx(0.1 * 0.8).epsilon(1e-15));
  }

  SUBCASE("clipped update depends only on gradient direction") {
    TrainConfig clip_cfg = cfg;
    clip_cfg.clip_norm = 1.0;
    auto run = [&](double scale) {
      ParamStore<double> ps;
      ps.add("w", Tensor<double>({3}, 0.5));
      ps.entries()[0].grad[0] = 2.0 * scale;
      ps.entries()[0].grad[1] = -1.0 * scale;
      ps.entries()[0].grad[2] = 2.0 * scale;
      auto mom = make_moments(ps);
      adamw_step(ps, mom, 1e-3, clip_cfg);
      return std::vector<double>(ps["w"].data.begin(), ps["w"].data.end());
    };
    auto a = run(1.0), b = run(2.5);
    for (size_t i = 0; i < a.size(); ++i)
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }

  SUBCASE("non-finite gradient names the parameter") {
    ParamStore<double> ps;
    ps.add("enc.embed.w", Tensor<double>({1}, 0.0));
    ps.entries()[0].grad[0] = std::numeric_limits<double>::quiet_NaN();
    auto mom = make_moments(ps);
    CHECK_THROWS_WITH_AS(adamw_step(ps, mom, 1e-3, cfg),
                         doctest::Contains("enc.embed.w"), std::runtime_error);
  }
}

TEST_CASE("log lines are one json object with the schema keys") {
  StepLog s;
  s.step = 7;
  s.lr = 2.5e-4;
  s.budget = 256;
  s.loss_total = 0.5;
  s.loss_char = 0.25;
  s.loss_ssim = 0.125;
  s.loss_perc = 0.0625;
  s.loss_reg = 0.03125;
  s.grad_norm = 1.5;

  std::string line = log_line(s);
  CHECK(line.find('\n') == std::string::npos);
  CHECK(line.rfind("{\"step\":7,\"lr\":", 0) == 0);

  auto j = nlohmann::json::parse(line);
  CHECK(j.size() == 9);
  CHECK(j["step"].get<int64_t>() == 7);
  CHECK(j["lr"].get<double>() == 2.5e-4);
  CHECK(j["budget"].get<int64_t>() == 256);
  CHECK(j["loss_total"].get<double>() == 0.5);
  CHECK(j["loss_char"].get<double>() == 0.25);
  CHECK(j["loss_ssim"].get<double>() == 0.125);
  CHECK(j["loss_perc"].get<double>() == 0.0625);
  CHECK(j["loss_reg"].get<double>() == 0.03125);
  CHECK(j["grad_norm"].get<double>() == 1.5);
}

TEST_CASE("autoencoder training: schedule in the log, files, determinism") {
  DatasetSpec spec;
  spec.count = 4;
  spec.seed = 21;
  spec.min_px = 16;
  spec.max_px = 16;
  auto data = generate_synthetic(spec);

  ModelConfig mcfg = tiny_model();
  TrainConfig tcfg;
  tcfg.total_steps = 6;
  tcfg.batch_size = 2;
  tcfg.budget_lo = 4;
  tcfg.budget_hi = 16;
  tcfg.stage_split = 0.5;
  tcfg.warmup_fraction = 0.34;  // two warmup steps
  tcfg.seed = 3;

  LossWeights weights = loss_preset("pixel+ssim");

  auto run = [&](const std::string& tag) {
    ParamStore<float> ps;
    init_params(ps, mcfg, 11);
    TrainIO io;
    io.checkpoint_path = "/tmp/vitae_train_" + tag + ".vtkf";
    io.log_path = "/tmp/vitae_train_" + tag + ".jsonl";
    io.checkpoint_every = 4;
    return train_autoencoder(ps, mcfg, data, tcfg, weights, io);
  };

  auto r1 = run("a");
  CHECK_FALSE(r1.aborted);
  CHECK(r1.steps_run == 6);
  REQUIRE(r1.log.size() == 6);

  for (int64_t s = 0; s < 6; ++s) {
    const StepLog& e = r1.log[static_cast<size_t>(s)];
    CHECK(e.step == s + 1);
    CHECK(e.lr == lr_at(s, tcfg));
    CHECK(e.budget == (s < 3 ? 4 : 16));
    CHECK(std::isfinite(e.loss_total));
    CHECK(e.loss_total > 0.0);
    CHECK(e.loss_char > 0.0);
    CHECK(e.loss_ssim >= 0.0);
    CHECK(e.loss_perc == 0.0);
    CHECK(e.loss_reg == 0.0);
    CHECK(e.grad_norm > 0.0);
  }

  // one transition, observed exactly once
  int transitions = 0;
  for (size_t i = 1; i < r1.log.size(); ++i)
    if (r1.log[i].budget != r1.log[i - 1].budget) ++transitions;
  CHECK(transitions == 1);

  // the jsonl file mirrors the in-memory log
  std::ifstream lf("/tmp/vitae_train_a.jsonl");
  std::string line;
  size_t lines = 0;
  while (std::getline(lf, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["step"].get<int64_t>() == static_cast<int64_t>(lines) + 1);
    ++lines;
  }
  CHECK(lines == 6);

  // checkpoint loads back into a fresh store
  auto ck = load_checkpoint("/tmp/vitae_train_a.vtkf");
  ModelConfig parsed = model_config_from_json(ck.config_json);
  CHECK(parsed.width == mcfg.width);
  ParamStore<float> fresh;
  init_params(fresh, parsed, 999);
  CHECK_NOTHROW(load_into(fresh, ck));

  // same seed, same data: bit-identical checkpoint bytes and equal logs
  auto r2 = run("b");
  CHECK(slurp("/tmp/vitae_train_a.vtkf") == slurp("/tmp/vitae_train_b.vtkf"));
  REQUIRE(r2.log.size() == r1.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].loss_total == r2.log[i].loss_total);
    CHECK(r1.log[i].grad_norm == r2.log[i].grad_norm);
  }

  std::remove("/tmp/vitae_train_a.vtkf");
  std::remove("/tmp/vitae_train_b.vtkf");
  std::remove("/tmp/vitae_train_a.jsonl");
  std::remove("/tmp/vitae_train_b.jsonl");
}

TEST_CASE("a poisoned parameter aborts with the reason recorded") {
  DatasetSpec spec;
  spec.count = 2;
  spec.seed = 5;
  spec.min_px = 16;
  spec.max_px = 16;
  auto data = generate_synthetic(spec);

  ModelConfig mcfg = tiny_model();
  ParamStore<float> ps;
  init_params(ps, mcfg, 1);
  ps["dec.head.w"][0] = std::numeric_limits<float>::quiet_NaN();

  TrainConfig tcfg;
  tcfg.total_steps = 3;
  tcfg.batch_size = 1;
  tcfg.budget_lo = 4;
  tcfg.budget_hi = 16;

  TrainIO io;
  io.checkpoint_path = "/tmp/vitae_abort.vtkf";
  auto r = train_autoencoder(ps, mcfg, data, tcfg, loss_preset("pixel"), io);
  CHECK(r.aborted);
  CHECK(r.steps_run == 0);
  CHECK(r.log.empty());
  CHECK(r.abort_reason.find("charbonnier") != std::string::npos);
  CHECK_NOTHROW(load_checkpoint("/tmp/vitae_abort.vtkf"));
  std::remove("/tmp/vitae_abort.vtkf");
}

TEST_CASE("short overfit run drives the pixel loss down") {
  DatasetSpec spec;
  spec.count = 2;
  spec.seed = 8;
  spec.min_px = 16;
  spec.max_px = 16;
  auto data = generate_synthetic(spec);

  ModelConfig mcfg = tiny_model();
  ParamStore<float> ps;
  init_params(ps, mcfg, 2);

  TrainConfig tcfg;
  tcfg.total_steps = 40;
  tcfg.batch_size = 2;
  tcfg.peak_lr = 3e-3;
  tcfg.warmup_fraction = 0.1;
  tcfg.budget_lo = 4;
  tcfg.budget_hi = 16;
  tcfg.stage_split = 0.99;

  auto r = train_autoencoder(ps, mcfg, data, tcfg, loss_preset("pixel"), {});
  REQUIRE_FALSE(r.aborted);
  REQUIRE(r.log.size() == 40);
  double early = r.log[2].loss_char;
  double late = r.log[39].loss_char;
  CHECK(late < early);
  CHECK(late < 0.5 * early + 1e-3);
}
