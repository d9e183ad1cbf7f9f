#include "vitae/cli.hpp"

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vitae/autoencoder.hpp"
#include "vitae/checkpoint.hpp"
#include "vitae/flowgen.hpp"
#include "vitae/image.hpp"
#include "vitae/losses.hpp"
#include "vitae/metrics.hpp"
#include "vitae/naflex.hpp"
#include "vitae/runconfig.hpp"
#include "vitae/trainer.hpp"

namespace fs = std::filesystem;

namespace vitae {

void write_report(const EvalReport& r, const std::string& path, ReportFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << (format == ReportFormat::json ? report_json(r) : report_csv(r)) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path);
}

namespace {

using nlohmann::ordered_json;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config file (sections model, train, loss, flow, eval, data)");
  cmd->add_option("--set", c.sets, "section.key=value override, repeatable, wins over the file");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

std::string slurp_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot read config " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

// File, then the VTK_SEED environment variable, then --set overrides.
RunConfig assemble_config(const Common& c) {
  RunConfig rc;
  if (!c.config_path.empty()) rc = run_config_from_json(slurp_file(c.config_path));
  if (const char* env = std::getenv("VTK_SEED")) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw std::invalid_argument("VTK_SEED must be an unsigned integer");
    rc.train.seed = v;
    rc.data.seed = v;
  }
  for (const std::string& s : c.sets) apply_override(rc, s);
  return rc;
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path);
}

std::string zero_pad(size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0*zu", width, i);
  return buf;
}

ParamStore<float> load_ae_checkpoint(const std::string& path, ModelConfig& cfg_out) {
  Checkpoint ck = load_checkpoint(path);
  cfg_out = model_config_from_json(ck.config_json);
  ParamStore<float> ps;
  init_params(ps, cfg_out, 0);
  load_into(ps, ck);
  return ps;
}

std::vector<Image> plain_images(const std::vector<LabeledImage>& data) {
  std::vector<Image> out;
  out.reserve(data.size());
  for (const auto& li : data) out.push_back(li.image);
  return out;
}

int cmd_gen_data(const Common& c, const RunConfig& rc) {
  auto data = generate_synthetic(rc.data);
  fs::create_directories(c.out);

  ordered_json manifest;
  manifest["config_hash"] = config_hash(rc);
  manifest["count"] = data.size();
  manifest["seed"] = rc.data.seed;
  auto files = ordered_json::array();
  for (size_t i = 0; i < data.size(); ++i) {
    std::string name = "img_" + zero_pad(i, 5) + ".ppm";
    save_image(data[i].image, c.out + "/" + name);
    ordered_json row;
    row["file"] = name;
    row["label"] = data[i].label;
    row["height"] = data[i].image.height;
    row["width"] = data[i].image.width;
    files.push_back(row);
  }
  manifest["images"] = files;
  spit(c.out + "/manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << data.size() << " images and manifest.json to " << c.out
            << "\n";
  return 0;
}

int cmd_train_ae(const Common& c, const RunConfig& rc) {
  auto data = generate_synthetic(rc.data);
  fs::create_directories(c.out);

  ParamStore<float> ps;
  init_params(ps, rc.model, rc.train.seed);
  TrainIO io;
  io.checkpoint_path = c.out + "/ae.vtkf";
  io.log_path = c.out + "/ae_log.jsonl";
  TrainResult r = train_autoencoder(ps, rc.model, data, rc.train, rc.loss, io);

  ordered_json summary;
  summary["config_hash"] = config_hash(rc);
  summary["loss_preset"] = rc.loss_preset_name;
  summary["steps_run"] = r.steps_run;
  summary["aborted"] = r.aborted;
  if (r.aborted) summary["abort_reason"] = r.abort_reason;
  if (!r.log.empty()) summary["final_loss"] = r.log.back().loss_total;
  summary["checkpoint"] = "ae.vtkf";
  spit(c.out + "/ae_summary.json", summary.dump(2) + "\n");

  if (r.aborted) {
    std::cerr << "training aborted after " << r.steps_run << " steps: "
              << r.abort_reason << "\n";
    return 2;
  }
  std::cout << "trained " << r.steps_run << " steps, final loss "
            << (r.log.empty() ? 0.0 : r.log.back().loss_total) << ", checkpoint "
            << io.checkpoint_path << "\n";
  return 0;
}

int cmd_train_flow(const Common& c, const RunConfig& rc, const std::string& ae_path,
                   int64_t budget) {
  ModelConfig ae_cfg;
  ParamStore<float> ae_ps = load_ae_checkpoint(ae_path, ae_cfg);
  if (ae_cfg.latent_channels != rc.flow.latent_channels)
    throw std::runtime_error("flow.latent_channels is " +
                             std::to_string(rc.flow.latent_channels) +
                             " but the autoencoder produces " +
                             std::to_string(ae_cfg.latent_channels));

  auto data = generate_synthetic(rc.data);
  auto latents = make_latent_dataset(data, ae_ps, ae_cfg, budget);
  for (const auto& ex : latents)
    if (ex.grid_h > rc.flow.max_grid_side || ex.grid_w > rc.flow.max_grid_side)
      throw std::runtime_error("latent grid " + std::to_string(ex.grid_h) + "x" +
                               std::to_string(ex.grid_w) +
                               " exceeds flow.max_grid_side; lower the budget or "
                               "raise max_grid_side");

  fs::create_directories(c.out);
  FlowState st = make_flow_state(rc.flow, rc.train.seed);
  TrainIO io;
  io.checkpoint_path = c.out + "/flow.vtkf";
  io.log_path = c.out + "/flow_log.jsonl";
  FlowTrainResult r = train_flow(st, rc.flow, latents, rc.train, io);

  ordered_json summary;
  summary["config_hash"] = config_hash(rc);
  summary["steps_run"] = r.steps_run;
  summary["aborted"] = r.aborted;
  if (r.aborted) summary["abort_reason"] = r.abort_reason;
  if (!r.log.empty()) {
    summary["final_loss_fm"] = r.log.back().loss_fm;
    summary["flops"] = r.log.back().flops;
    summary["flops_convention"] = "fwd+bwd";
  }
  summary["param_count"] = st.params.scalar_count();
  summary["checkpoint"] = "flow.vtkf";
  spit(c.out + "/flow_summary.json", summary.dump(2) + "\n");

  if (r.aborted) {
    std::cerr << "training aborted after " << r.steps_run << " steps: "
              << r.abort_reason << "\n";
    return 2;
  }
  std::cout << "trained " << r.steps_run << " steps, final matching loss "
            << (r.log.empty() ? 0.0 : r.log.back().loss_fm) << ", checkpoint "
            << io.checkpoint_path << "\n";
  return 0;
}

int cmd_reconstruct(const Common& c, const RunConfig& rc,
                    const std::vector<std::string>& inputs,
                    const std::string& ae_path, int64_t budget, int64_t radius) {
  ModelConfig cfg;
  ParamStore<float> ps = load_ae_checkpoint(ae_path, cfg);
  fs::create_directories(c.out);

  auto rows = ordered_json::array();
  for (size_t i = 0; i < inputs.size(); ++i) {
    Image img = load_image(inputs[i]);
    GridFit fit = fit_grid(img.height, img.width, cfg.patch, budget);
    Image recon = reconstruct_image(img, ps, cfg, budget, radius);

    // the comparable reference is the aspect-fitted resize, not the original
    PaddedImage padded = resize_pad(img, fit, cfg.patch);
    Image ref(fit.resized_h, fit.resized_w);
    for (int64_t y = 0; y < ref.height; ++y)
      for (int64_t x = 0; x < ref.width; ++x)
        for (int64_t ch = 0; ch < 3; ++ch)
          ref.at(y, x, ch) = padded.canvas.at(y, x, ch);

    std::string name = "recon_" + zero_pad(i, 2) + "_" +
                       fs::path(inputs[i]).stem().string() + ".ppm";
    save_image(recon, c.out + "/" + name);

    ordered_json row;
    row["input"] = inputs[i];
    row["output"] = name;
    row["psnr_db"] = psnr(ref, recon);
    row["ssim"] = ssim_metric(ref, recon);
    row["tokens"] = fit.grid_h * fit.grid_w;
    rows.push_back(row);
    std::cout << inputs[i] << " -> " << name << "  psnr "
              << row["psnr_db"].get<double>() << " dB\n";
  }

  ordered_json summary;
  summary["config_hash"] = config_hash(rc);
  summary["budget"] = budget;
  summary["window_radius"] = radius;
  summary["rows"] = rows;
  spit(c.out + "/recon_summary.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_sample(const Common& c, const RunConfig& rc, const std::string& flow_path,
               const std::string& ae_path, const std::vector<int64_t>& labels,
               int64_t steps, double cfg_scale, int64_t grid_h, int64_t grid_w) {
  FlowConfig fcfg;
  FlowState st = load_flow_checkpoint(flow_path, fcfg);
  ModelConfig ae_cfg;
  ParamStore<float> ae_ps = load_ae_checkpoint(ae_path, ae_cfg);

  auto imgs = generate_images(ae_ps, ae_cfg, st, fcfg, labels, steps, cfg_scale,
                              grid_h, grid_w, rc.train.seed);
  fs::create_directories(c.out);

  auto files = ordered_json::array();
  for (size_t i = 0; i < imgs.size(); ++i) {
    std::string name = "sample_" + zero_pad(i, 2) + "_label" +
                       std::to_string(labels[i]) + ".ppm";
    save_image(imgs[i], c.out + "/" + name);
    files.push_back(name);
  }

  ordered_json summary;
  summary["config_hash"] = config_hash(rc);
  summary["seed"] = rc.train.seed;
  summary["steps"] = steps;
  summary["cfg_scale"] = cfg_scale;
  summary["labels"] = labels;
  summary["files"] = files;
  spit(c.out + "/sample_summary.json", summary.dump(2) + "\n");
  std::cout << "wrote " << imgs.size() << " samples to " << c.out << "\n";
  return 0;
}

int cmd_eval(const Common& c, const RunConfig& rc, const std::string& ae_path,
             bool identity_stub) {
  ModelConfig cfg = rc.model;
  ParamStore<float> ps;
  if (identity_stub)
    init_params(ps, cfg, rc.train.seed);
  else
    ps = load_ae_checkpoint(ae_path, cfg);

  auto images = plain_images(generate_synthetic(rc.data));
  EvalOptions opts;
  opts.budget = rc.eval.budget;
  opts.window_radius = rc.eval.window_radius;
  opts.stat_side = rc.eval.stat_side;
  opts.identity_stub = identity_stub;
  opts.config_hash = config_hash(rc);
  EvalReport report = eval_reconstruction(ps, cfg, images, opts);

  fs::create_directories(c.out);
  write_report(report, c.out + "/eval.json", ReportFormat::json);
  write_report(report, c.out + "/eval.csv", ReportFormat::csv);

  std::cout << "psnr " << report.psnr_db << " dB  ssim " << report.ssim;
  for (const auto& [id, v] : report.frechet) std::cout << "  " << id << " " << v;
  std::cout << "\n";
  return 0;
}

std::string bench_csv(const std::vector<LatencyRow>& rows) {
  std::ostringstream csv;
  csv << "resolution,mode,median_ms,p90_ms,tokens,pairs,ok\n";
  for (const LatencyRow& r : rows)
    csv << r.resolution << ',' << r.mode << ',' << r.median_ms << ',' << r.p90_ms
        << ',' << r.tokens << ',' << r.pairs << ',' << (r.ok ? "true" : "false")
        << '\n';
  return csv.str();
}

int cmd_bench(const Common& c, const RunConfig& rc,
              const std::vector<std::string>& attention,
              const std::vector<int64_t>& resolutions, int repeats,
              int64_t swa_radius) {
  std::vector<BenchMode> modes;
  for (const std::string& name : attention)
    modes.push_back({name, name == "full" ? int64_t{-1} : swa_radius});

  ParamStore<float> ps;
  init_params(ps, rc.model, rc.train.seed);
  auto rows = bench_latency(ps, rc.model, resolutions, modes, repeats, rc.train.seed);

  fs::create_directories(c.out);
  ordered_json j;
  j["config_hash"] = config_hash(rc);
  auto arr = ordered_json::array();
  for (const LatencyRow& r : rows) {
    ordered_json row;
    row["resolution"] = r.resolution;
    row["mode"] = r.mode;
    row["median_ms"] = r.median_ms;
    row["p90_ms"] = r.p90_ms;
    row["tokens"] = r.tokens;
    row["pairs"] = r.pairs;
    row["ok"] = r.ok;
    if (!r.note.empty()) row["note"] = r.note;
    arr.push_back(row);
  }
  j["latency_ms"] = arr;
  spit(c.out + "/bench.json", j.dump(2) + "\n");
  spit(c.out + "/bench.csv", bench_csv(rows));

  for (const LatencyRow& r : rows)
    std::cout << r.resolution << "px " << r.mode << "  median " << r.median_ms
              << " ms  p90 " << r.p90_ms << " ms  tokens " << r.tokens << "  pairs "
              << r.pairs << (r.ok ? "" : "  FAILED " + r.note) << "\n";
  return 0;
}

struct AblateRow {
  std::string key;
  std::string row_hash;
  bool ok = true;
  std::string note;
  double final_loss = 0;
  EvalReport report;
};

AblateRow run_ablate_row(const std::string& key, const RunConfig& rc,
                         const std::vector<LabeledImage>& data) {
  AblateRow row;
  row.key = key;
  row.row_hash = config_hash(rc);

  ParamStore<float> ps;
  init_params(ps, rc.model, rc.train.seed);
  TrainResult r = train_autoencoder(ps, rc.model, data, rc.train, rc.loss, {});
  if (!r.log.empty()) row.final_loss = r.log.back().loss_total;
  if (r.aborted) {
    row.ok = false;
    row.note = r.abort_reason;
    return row;
  }

  EvalOptions opts;
  opts.budget = rc.eval.budget;
  opts.window_radius = rc.eval.window_radius;
  opts.stat_side = rc.eval.stat_side;
  opts.config_hash = row.row_hash;
  row.report = eval_reconstruction(ps, rc.model, plain_images(data), opts);
  return row;
}

int write_ablate_outputs(const Common& c, const RunConfig& base,
                         const std::string& key_name,
                         const std::vector<AblateRow>& rows,
                         const std::string& stem) {
  fs::create_directories(c.out);
  ordered_json j;
  j["config_hash"] = config_hash(base);
  auto arr = ordered_json::array();
  std::ostringstream csv;
  csv << key_name << ",psnr_db,ssim,latent_std,fdd,fid,final_loss,ok\n";
  for (const AblateRow& row : rows) {
    ordered_json o;
    o[key_name] = row.key;
    o["config_hash"] = row.row_hash;
    o["ok"] = row.ok;
    if (!row.ok) o["note"] = row.note;
    o["final_loss"] = row.final_loss;
    o["psnr_db"] = row.report.psnr_db;
    o["ssim"] = row.report.ssim;
    o["latent_std"] = row.report.latent_std;
    for (const auto& [id, v] : row.report.frechet) o[id] = v;
    arr.push_back(o);

    double fdd = 0, fid = 0;
    for (const auto& [id, v] : row.report.frechet) (id == "fdd" ? fdd : fid) = v;
    csv << row.key << ',' << row.report.psnr_db << ',' << row.report.ssim << ','
        << row.report.latent_std << ',' << fdd << ',' << fid << ','
        << row.final_loss << ',' << (row.ok ? "true" : "false") << '\n';

    std::cout << row.key << "  psnr " << row.report.psnr_db << " dB  ssim "
              << row.report.ssim << (row.ok ? "" : "  ABORTED " + row.note) << "\n";
  }
  j["rows"] = arr;
  spit(c.out + "/" + stem + ".json", j.dump(2) + "\n");
  spit(c.out + "/" + stem + ".csv", csv.str());
  return 0;
}

int cmd_ablate_loss(const Common& c, const RunConfig& base) {
  auto data = generate_synthetic(base.data);
  std::vector<AblateRow> rows;
  for (const std::string& preset : loss_preset_names()) {
    RunConfig rc = base;
    rc.loss_preset_name = preset;
    rc.loss = loss_preset(preset);
    rows.push_back(run_ablate_row(preset, rc, data));
  }
  return write_ablate_outputs(c, base, "preset", rows, "ablate_loss");
}

int cmd_ablate_reg(const Common& c, const RunConfig& base) {
  auto data = generate_synthetic(base.data);
  std::vector<AblateRow> rows;
  for (Regularizer reg :
       {Regularizer::kl, Regularizer::tanh_noise, Regularizer::layernorm}) {
    RunConfig rc = base;
    rc.model.reg = reg;
    rows.push_back(run_ablate_row(regularizer_name(reg), rc, data));
  }
  return write_ablate_outputs(c, base, "regularizer", rows, "ablate_reg");
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"native-resolution transformer autoencoder with a latent flow sampler"};
  app.require_subcommand(1);

  Common c_gen, c_tae, c_tfl, c_rec, c_smp, c_evl, c_bch, c_abl, c_abr;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic labeled image set");
  add_common(gen, c_gen);

  auto* tae = app.add_subcommand("train-ae", "train the autoencoder on synthetic data");
  add_common(tae, c_tae);

  auto* tfl = app.add_subcommand("train-flow", "train the latent flow sampler");
  add_common(tfl, c_tfl);
  std::string tfl_ae;
  int64_t tfl_budget = -1;
  tfl->add_option("--ae", tfl_ae, "autoencoder checkpoint")->required();
  tfl->add_option("--budget", tfl_budget, "token budget for the latent dataset (default eval.budget)");

  auto* rec = app.add_subcommand("reconstruct", "round-trip images through the autoencoder");
  add_common(rec, c_rec);
  std::string rec_ae;
  int64_t rec_budget = -1, rec_radius = -1;
  std::vector<std::string> rec_inputs;
  rec->add_option("--ae", rec_ae, "autoencoder checkpoint")->required();
  rec->add_option("--budget", rec_budget, "token budget (default eval.budget)");
  rec->add_option("--window-radius", rec_radius, "sliding attention window radius, -1 = full attention")
      ->capture_default_str();
  rec->add_option("inputs", rec_inputs, "image files (.ppm)")->required();

  auto* smp = app.add_subcommand("sample", "draw images from the flow sampler");
  add_common(smp, c_smp);
  std::string smp_flow, smp_ae;
  std::vector<int64_t> smp_labels{0};
  int64_t smp_steps = 50, smp_gh = 8, smp_gw = 8;
  double smp_scale = 1.0;
  smp->add_option("--flow", smp_flow, "flow checkpoint")->required();
  smp->add_option("--ae", smp_ae, "autoencoder checkpoint")->required();
  smp->add_option("--labels", smp_labels, "class labels, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  smp->add_option("--steps", smp_steps, "Euler steps")->capture_default_str();
  smp->add_option("--cfg-scale", smp_scale, "guidance scale")->capture_default_str();
  smp->add_option("--grid-h", smp_gh, "latent grid rows")->capture_default_str();
  smp->add_option("--grid-w", smp_gw, "latent grid columns")->capture_default_str();

  auto* evl = app.add_subcommand("eval", "reconstruction metrics over a synthetic set");
  add_common(evl, c_evl);
  std::string evl_ae;
  bool evl_stub = false;
  evl->add_option("--ae", evl_ae, "autoencoder checkpoint (its stored shape wins over config model)");
  evl->add_flag("--identity-stub", evl_stub, "score the fitted input against itself, bypassing the model");

  auto* bch = app.add_subcommand("bench", "attention latency across resolutions");
  add_common(bch, c_bch);
  std::vector<std::string> bch_attention{"full", "swa"};
  std::vector<int64_t> bch_resolutions{64, 128, 256};
  int bch_repeats = 5;
  int64_t bch_radius = 8;
  bch->add_option("--attention", bch_attention, "modes: full, swa")
      ->delimiter(',')
      ->capture_default_str();
  bch->add_option("--resolutions", bch_resolutions, "square image sides, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  bch->add_option("--repeats", bch_repeats, "timed runs per cell")->capture_default_str();
  bch->add_option("--swa-radius", bch_radius, "window radius for swa mode")
      ->capture_default_str();

  auto* abl = app.add_subcommand("ablate-loss", "train and score every loss preset");
  add_common(abl, c_abl);

  auto* abr = app.add_subcommand("ablate-reg", "train and score every latent regularizer");
  add_common(abr, c_abr);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    CLI::App* a = &app;
    while (!a->get_subcommands().empty()) a = a->get_subcommands().front();
    std::cout << a->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  const Common& c = gen->parsed()   ? c_gen
                    : tae->parsed() ? c_tae
                    : tfl->parsed() ? c_tfl
                    : rec->parsed() ? c_rec
                    : smp->parsed() ? c_smp
                    : evl->parsed() ? c_evl
                    : bch->parsed() ? c_bch
                    : abl->parsed() ? c_abl
                                    : c_abr;

  RunConfig rc;
  try {
    rc = assemble_config(c);
    if (evl->parsed() && !evl_stub && evl_ae.empty())
      throw std::invalid_argument("eval needs --ae or --identity-stub");
    if (bch->parsed()) {
      if (bch_repeats < 1) throw std::invalid_argument("--repeats must be >= 1");
      for (const std::string& name : bch_attention)
        if (name != "full" && name != "swa")
          throw std::invalid_argument("unknown attention mode " + name);
    }
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(c, rc);
    if (tae->parsed()) return cmd_train_ae(c, rc);
    if (tfl->parsed())
      return cmd_train_flow(c, rc, tfl_ae,
                            tfl_budget > 0 ? tfl_budget : rc.eval.budget);
    if (rec->parsed())
      return cmd_reconstruct(c, rc, rec_inputs, rec_ae,
                             rec_budget > 0 ? rec_budget : rc.eval.budget,
                             rec_radius);
    if (smp->parsed())
      return cmd_sample(c, rc, smp_flow, smp_ae, smp_labels, smp_steps, smp_scale,
                        smp_gh, smp_gw);
    if (evl->parsed()) return cmd_eval(c, rc, evl_ae, evl_stub);
    if (bch->parsed())
      return cmd_bench(c, rc, bch_attention, bch_resolutions, bch_repeats,
                       bch_radius);
    if (abl->parsed()) return cmd_ablate_loss(c, rc);
    return cmd_ablate_reg(c, rc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace vitae
