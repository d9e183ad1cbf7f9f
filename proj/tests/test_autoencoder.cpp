#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "vitae/autoencoder.hpp"
#include "vitae/checkpoint.hpp"
#include "vitae/naflex.hpp"

using namespace vitae;

namespace {

using IdD = Graph<double>::Id;

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.enc_depth = 1;
  cfg.dec_depth = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.latent_channels = 4;
  cfg.reg = Regularizer::layernorm;
  cfg.layerscale_init = 0.05;
  cfg.name = "toy";
  return cfg;
}

template <typename T>
Tensor<T> leaf_tensor(std::vector<int64_t> shape, uint64_t seed, double scale) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.normal() * scale);
  return t;
}

}  // namespace

TEST_CASE("scale table and names") {
  auto b = make_config("B", 4, 16, 64, Regularizer::layernorm);
  CHECK(b.width == 768);
  CHECK(b.dec_depth == 12);
  CHECK(b.heads == 12);
  CHECK(b.name == "Bd4-B/16x64");

  auto t = make_config("T", 4, 16, 64, Regularizer::kl);
  CHECK(t.width == 3072);
  CHECK(t.dec_depth == 40);
  CHECK(t.heads == 24);

  auto lin = make_config("B", 0, 16, 64, Regularizer::layernorm);
  CHECK(lin.name == "Linear-B/16x64");

  CHECK_THROWS(make_config("Q", 4, 16, 64, Regularizer::layernorm));

  CHECK(compression_ratio(16, 64) == doctest::Approx(12.0));
  CHECK(compression_ratio(8, 16) == doctest::Approx(12.0));
  CHECK(compression_ratio(32, 128) == doctest::Approx(24.0));
  CHECK(compression_ratio(1, 3) == doctest::Approx(1.0));
}

TEST_CASE("config validation") {
  ModelConfig cfg = desk_config();
  // desk width 128 < 3*8*8 = 192 pixels per token: lossy embedding warning
  CHECK(validate_config(cfg).size() == 1);

  cfg.width = 192;
  CHECK(validate_config(cfg).empty());

  cfg = desk_config();
  cfg.heads = 3;
  CHECK_THROWS(validate_config(cfg));

  cfg = desk_config();
  cfg.heads = 64;  // head dim 2 cannot host axial rotations
  CHECK_THROWS(validate_config(cfg));

  cfg = desk_config();
  cfg.latent_channels = 0;
  CHECK_THROWS(validate_config(cfg));

  cfg = desk_config();
  cfg.dec_depth = 0;
  CHECK_THROWS(validate_config(cfg));
}

TEST_CASE("parameter counts match the built store") {
  for (auto reg : {Regularizer::layernorm, Regularizer::kl, Regularizer::tanh_noise}) {
    ModelConfig cfg = toy_config();
    cfg.reg = reg;
    cfg.enc_depth = 2;
    cfg.dec_depth = 3;
    auto counts = count_parameters(cfg);
    CHECK(counts.total == counts.encoder + counts.decoder);

    ParamStore<float> ps;
    init_params(ps, cfg, 7);
    CHECK(ps.scalar_count() == counts.total);

    int64_t enc_scalars = 0, dec_scalars = 0;
    for (const auto& e : ps.entries()) {
      if (e.name.rfind("enc.", 0) == 0) enc_scalars += e.value.numel();
      if (e.name.rfind("dec.", 0) == 0) dec_scalars += e.value.numel();
    }
    CHECK(enc_scalars == counts.encoder);
    CHECK(dec_scalars == counts.decoder);
  }

  // linear encoder at p=16, c=64: one affine map from 768 patch pixels
  auto lin = make_config("B", 0, 16, 64, Regularizer::layernorm);
  CHECK(count_parameters(lin).encoder == 64 * 768 + 64);
}

TEST_CASE("decoder counts across the scale table") {
  struct Row {
    const char* scale;
    double target;
  };
  for (auto [scale, target] : {Row{"B", 88e6}, Row{"L", 302e6}, Row{"G", 1.1e9},
                               Row{"T", 4.5e9}}) {
    auto cfg = make_config(scale, 4, 16, 64, Regularizer::layernorm);
    auto counts = count_parameters(cfg);
    INFO(scale << " decoder " << counts.decoder);
    CHECK(static_cast<double>(counts.decoder) > 0.8 * target);
    CHECK(static_cast<double>(counts.decoder) < 1.2 * target);
  }
}

TEST_CASE("kl regularizer closed forms") {
  ModelConfig cfg = toy_config();
  cfg.reg = Regularizer::kl;
  const int64_t L = 3, c = cfg.latent_channels;

  // exact prior match: mu = 0, log variance = 0
  {
    Graph<double> g;
    auto head = g.leaf(Tensor<double>({L, 2 * c}, 0.0));
    Rng rng(1);
    auto r = regularize_latent(g, head, cfg, false, rng);
    CHECK(g.value(r.reg_loss)[0] == 0.0);
    for (int64_t i = 0; i < L * c; ++i) CHECK(g.value(r.z)[i] == 0.0);
  }

  // mu = 1, sigma = 1: KL is exactly 0.5 per dimension
  {
    Graph<double> g;
    Tensor<double> h({L, 2 * c}, 0.0);
    for (int64_t i = 0; i < L; ++i)
      for (int64_t j = 0; j < c; ++j) h.at(i, j) = 1.0;
    auto head = g.leaf(h);
    Rng rng(1);
    auto r = regularize_latent(g, head, cfg, false, rng);
    CHECK(g.value(r.reg_loss)[0] == doctest::Approx(cfg.reg_param * 0.5).epsilon(1e-12));
  }

  // random head: loss nonnegative, sampling is seeded, inference is the mean
  {
    auto h = leaf_tensor<double>({L, 2 * c}, 11, 0.7);
    Graph<double> g1, g2, g3;
    Rng r1(5), r2(5), r3(6);
    auto a = regularize_latent(g1, g1.leaf(h), cfg, true, r1);
    auto b = regularize_latent(g2, g2.leaf(h), cfg, true, r2);
    auto d = regularize_latent(g3, g3.leaf(h), cfg, true, r3);
    CHECK(g1.value(a.reg_loss)[0] >= 0.0);
    bool same = true, differs = false;
    for (int64_t i = 0; i < L * c; ++i) {
      same = same && g1.value(a.z)[i] == g2.value(b.z)[i];
      differs = differs || g1.value(a.z)[i] != g3.value(d.z)[i];
    }
    CHECK(same);
    CHECK(differs);

    Graph<double> gi;
    Rng ri(9);
    auto inf = regularize_latent(gi, gi.leaf(h), cfg, false, ri);
    for (int64_t i = 0; i < L; ++i)
      for (int64_t j = 0; j < c; ++j)
        CHECK(gi.value(inf.z).at(i, j) == h.at(i, j));
  }
}

TEST_CASE("tanh_noise and layernorm regularizers") {
  ModelConfig cfg = toy_config();
  const int64_t L = 5;

  cfg.reg = Regularizer::tanh_noise;
  {
    auto h = leaf_tensor<double>({L, cfg.latent_channels}, 21, 2.0);
    Graph<double> g;
    Rng rng(3);
    auto inf = regularize_latent(g, g.leaf(h), cfg, false, rng);
    CHECK(inf.reg_loss == Graph<double>::npos);
    for (int64_t i = 0; i < h.numel(); ++i) {
      double v = g.value(inf.z)[i];
      CHECK(v > -1.0);
      CHECK(v < 1.0);
      CHECK(v == doctest::Approx(std::tanh(h[i])).epsilon(1e-12));
    }

    Graph<double> gt;
    Rng rt(3);
    auto tr = regularize_latent(gt, gt.leaf(h), cfg, true, rt);
    bool moved = false;
    for (int64_t i = 0; i < h.numel(); ++i) {
      double v = gt.value(tr.z)[i];
      moved = moved || v != std::tanh(h[i]);
      CHECK(std::abs(v - std::tanh(h[i])) < 6 * cfg.reg_param);
    }
    CHECK(moved);
  }

  cfg.reg = Regularizer::layernorm;
  {
    auto h = leaf_tensor<double>({L, cfg.latent_channels}, 23, 1.4);
    Graph<double> g;
    Rng rng(3);
    auto r = regularize_latent(g, g.leaf(h), cfg, false, rng);
    CHECK(r.reg_loss == Graph<double>::npos);
    const Tensor<double>& z = g.value(r.z);
    const int64_t c = cfg.latent_channels;
    for (int64_t i = 0; i < L; ++i) {
      double mean = 0, var = 0;
      for (int64_t j = 0; j < c; ++j) mean += z.at(i, j);
      mean /= static_cast<double>(c);
      for (int64_t j = 0; j < c; ++j) {
        double d = z.at(i, j) - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      CHECK(std::abs(mean) < 1e-12);
      CHECK(std::abs(var - 1.0) < 1e-5);
    }
  }

  cfg.reg = Regularizer::kl;  // c-channel head is a config error in kl mode
  auto h = leaf_tensor<double>({L, cfg.latent_channels}, 29, 1.0);
  Graph<double> g;
  Rng rng(3);
  CHECK_THROWS(regularize_latent(g, g.leaf(h), cfg, false, rng));
}

TEST_CASE("round trip shapes and deterministic inference") {
  for (auto reg : {Regularizer::layernorm, Regularizer::kl, Regularizer::tanh_noise}) {
    ModelConfig cfg = toy_config();
    cfg.reg = reg;
    ParamStore<double> ps;
    init_params(ps, cfg, 101);

    const int64_t gh = 3, gw = 2;
    auto tokens =
        leaf_tensor<double>({gh * gw, 3 * cfg.patch * cfg.patch}, 31, 0.5);

    auto run = [&]() {
      Graph<double> g(false);
      Bound<double> b = bind(g, ps, false);
      auto ctx = make_attn_context<double>(cfg.block(), gh, gw, -1, false);
      auto head = encode(g, g.leaf(tokens), b, cfg, ctx);
      Rng rng(0);
      auto r = regularize_latent(g, head, cfg, false, rng);
      auto canvas = decode(g, r.z, b, cfg, ctx);
      return std::pair<Tensor<double>, Tensor<double>>(g.value(r.z),
                                                       g.value(canvas));
    };

    auto [z, canvas] = run();
    CHECK(z.rows() == gh * gw);
    CHECK(z.cols() == cfg.latent_channels);
    CHECK(canvas.shape == std::vector<int64_t>{gh * cfg.patch, gw * cfg.patch, 3});

    auto [z2, canvas2] = run();
    for (int64_t i = 0; i < canvas.numel(); ++i)
      CHECK(canvas[i] == canvas2[i]);
  }
}

TEST_CASE("window radius is inference-only behavior") {
  ModelConfig cfg = toy_config();
  cfg.width = 16;
  cfg.heads = 4;
  cfg.dec_depth = 2;
  ParamStore<double> ps;
  init_params(ps, cfg, 55);
  auto before = ps.entries();

  const int64_t gh = 4, gw = 5;
  auto z = leaf_tensor<double>({gh * gw, cfg.latent_channels}, 61, 1.0);

  auto decode_at = [&](int64_t radius) {
    Graph<double> g(false);
    Bound<double> b = bind(g, ps, false);
    auto ctx = make_attn_context<double>(cfg.block(), gh, gw, radius, false);
    return g.value(decode(g, g.leaf(z), b, cfg, ctx));
  };

  auto full = decode_at(-1);
  auto covering = decode_at(8);  // window covers the whole 4x5 grid
  auto narrow = decode_at(1);
  double max_diff = 0, narrow_diff = 0;
  for (int64_t i = 0; i < full.numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(full[i] - covering[i]));
    narrow_diff = std::max(narrow_diff, std::abs(full[i] - narrow[i]));
  }
  CHECK(max_diff < 1e-12);
  CHECK(narrow_diff > 0.0);  // the window genuinely changes attention

  for (size_t i = 0; i < before.size(); ++i)
    for (int64_t j = 0; j < before[i].value.numel(); ++j)
      CHECK(before[i].value[j] == ps.entries()[i].value[j]);
}

TEST_CASE("gradcheck: encode through decode through charbonnier") {
  for (auto reg : {Regularizer::layernorm, Regularizer::kl}) {
    ModelConfig cfg = toy_config();
    cfg.reg = reg;
    ParamStore<double> ps;
    init_params(ps, cfg, 201);
    Rng pr(202);
    for (auto& e : ps.entries())
      for (int64_t i = 0; i < e.value.numel(); ++i)
        e.value[i] += 0.01 * pr.normal();

    const int64_t gh = 2, gw = 2;
    Rng xr(203);
    auto tokens = random_tensor({gh * gw, 3 * cfg.patch * cfg.patch}, xr, 0.5);
    auto target = random_tensor({gh * cfg.patch, gw * cfg.patch, 3}, xr, 0.5);

    std::vector<Tensor<double>> inputs;
    inputs.push_back(tokens);
    inputs.push_back(target);
    for (auto& e : ps.entries()) inputs.push_back(e.value);

    auto build = [&](Graph<double>& g, const std::vector<IdD>& in) -> IdD {
      Bound<double> bound;
      bound.g = &g;
      bound.store = &ps;
      for (size_t i = 2; i < in.size(); ++i) bound.ids.push_back(in[i]);
      auto ctx = make_attn_context<double>(cfg.block(), gh, gw, -1, true);
      auto head = encode(g, in[0], bound, cfg, ctx);
      Rng rng(7);  // same draw on every rebuild
      auto r = regularize_latent(g, head, cfg, true, rng);
      auto canvas = decode(g, r.z, bound, cfg, ctx);
      return g.charbonnier(canvas, in[1], 1e-3);
    };

    auto res = grad_check(inputs, build, 1e-5, 12, 59);
    INFO(regularizer_name(reg) << " rel " << res.max_rel);
    CHECK(res.max_rel < 1e-4);
  }
}

TEST_CASE("inference helpers produce valid-region images") {
  ModelConfig cfg = toy_config();
  cfg.width = 16;
  cfg.heads = 4;
  ParamStore<float> ps;
  init_params(ps, cfg, 77);

  DatasetSpec spec;
  spec.count = 1;
  spec.seed = 5;
  spec.min_px = 20;
  spec.max_px = 30;
  auto imgs = generate_synthetic(spec);
  const Image& img = imgs[0].image;

  PackedImage packed = pack_image(img, cfg.patch, 64);
  auto z = encode_latent(packed, ps, cfg);
  CHECK(z.rows() == packed.grid.grid_h * packed.grid.grid_w);
  CHECK(z.cols() == cfg.latent_channels);

  Image rec = reconstruct_image(img, ps, cfg, 64, -1);
  CHECK(rec.height == packed.grid.resized_h);
  CHECK(rec.width == packed.grid.resized_w);
  for (float v : rec.pixels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig cfg = toy_config();
  ParamStore<float> ps;
  init_params(ps, cfg, 303);
  std::string cfg_json = model_config_json(cfg);

  const char* path = "ckpt_roundtrip.vtkf";
  save_checkpoint(path, cfg_json, ps);
  Checkpoint ck = load_checkpoint(path);

  CHECK(ck.config_json == cfg_json);
  REQUIRE(ck.tensors.size() == ps.entries().size());
  for (size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(ck.tensors[i].first == ps.entries()[i].name);
    REQUIRE(ck.tensors[i].second.shape == ps.entries()[i].value.shape);
    for (int64_t j = 0; j < ck.tensors[i].second.numel(); ++j) {
      uint32_t a, b;
      std::memcpy(&a, &ck.tensors[i].second[j], 4);
      std::memcpy(&b, &ps.entries()[i].value[j], 4);
      CHECK(a == b);
    }
  }

  ParamStore<float> ps2;
  init_params(ps2, cfg, 999);
  load_into(ps2, ck);
  for (size_t i = 0; i < ps2.entries().size(); ++i)
    for (int64_t j = 0; j < ps2.entries()[i].value.numel(); ++j)
      CHECK(ps2.entries()[i].value[j] == ps.entries()[i].value[j]);

  auto parsed = model_config_from_json(ck.config_json);
  CHECK(parsed.width == cfg.width);
  CHECK(parsed.patch == cfg.patch);
  CHECK(parsed.latent_channels == cfg.latent_channels);
  CHECK(parsed.reg == cfg.reg);
  CHECK(parsed.name == cfg.name);
  std::remove(path);
}

TEST_CASE("checkpoint rejects junk and missing tensors") {
  const char* path = "ckpt_bad.vtkf";
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint at all";
  }
  CHECK_THROWS(load_checkpoint(path));
  std::remove(path);

  ModelConfig cfg = toy_config();
  ParamStore<float> ps;
  init_params(ps, cfg, 5);
  std::vector<std::pair<std::string, const Tensor<float>*>> some;
  some.emplace_back(ps.entries()[0].name, &ps.entries()[0].value);
  const char* partial = "ckpt_partial.vtkf";
  save_checkpoint(partial, "{}", some);
  auto ck = load_checkpoint(partial);
  ParamStore<float> ps2;
  init_params(ps2, cfg, 5);
  CHECK_THROWS(load_into(ps2, ck));
  std::remove(partial);
}

TEST_CASE("prefixed load picks one family from a merged file") {
  ModelConfig cfg = toy_config();
  ParamStore<float> live, avg;
  init_params(live, cfg, 1);
  init_params(avg, cfg, 2);

  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (const auto& e : live.entries()) tensors.emplace_back(e.name, &e.value);
  for (const auto& e : avg.entries())
    tensors.emplace_back("ema." + e.name, &e.value);
  const char* path = "ckpt_merged.vtkf";
  save_checkpoint(path, "{}", tensors);

  auto ck = load_checkpoint(path);
  ParamStore<float> out;
  init_params(out, cfg, 3);
  load_into(out, ck, "ema.");
  for (size_t i = 0; i < out.entries().size(); ++i)
    for (int64_t j = 0; j < out.entries()[i].value.numel(); ++j)
      CHECK(out.entries()[i].value[j] == avg.entries()[i].value[j]);
  std::remove(path);
}
