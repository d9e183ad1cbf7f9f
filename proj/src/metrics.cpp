#include "vitae/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <new>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "vitae/naflex.hpp"

namespace vitae {

double psnr(const Image& x, const Image& xhat) {
  if (x.height != xhat.height || x.width != xhat.width)
    throw std::invalid_argument("psnr shape mismatch");
  if (x.pixels.empty()) throw std::invalid_argument("psnr on empty image");
  double acc = 0;
  for (size_t i = 0; i < x.pixels.size(); ++i) {
    double d = static_cast<double>(x.pixels[i]) - static_cast<double>(xhat.pixels[i]);
    acc += d * d;
  }
  double mse = acc / static_cast<double>(x.pixels.size());
  if (mse <= 0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim_metric(const Image& x, const Image& xhat) {
  Graph<double> g(false);
  auto loss = ssim_loss(g, g.leaf(x.tensor<double>()), g.leaf(xhat.tensor<double>()));
  return 1.0 - g.value(loss)[0];
}

namespace {

void check_stats(const FeatureStats& s) {
  if (s.count < 2) throw std::invalid_argument("feature stats need >= 2 samples");
  if (s.dim < 1 || static_cast<int64_t>(s.mean.size()) != s.dim ||
      static_cast<int64_t>(s.cov.size()) != s.dim * s.dim)
    throw std::invalid_argument("malformed feature stats");
  for (double v : s.mean)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite feature mean");
  for (double v : s.cov)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite feature covariance");
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd lam = es.eigenvalues();
  for (int i = 0; i < lam.size(); ++i) lam[i] = lam[i] > 0 ? std::sqrt(lam[i]) : 0.0;
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  check_stats(a);
  check_stats(b);
  if (a.dim != b.dim) throw std::invalid_argument("feature dimension mismatch");
  const int64_t d = a.dim;

  Eigen::Map<const Eigen::VectorXd> ma(a.mean.data(), d), mb(b.mean.data(), d);
  Eigen::Map<const Eigen::MatrixXd> ca(a.cov.data(), d, d), cb(b.cov.data(), d, d);

  Eigen::MatrixXd sa = psd_sqrt(ca);
  Eigen::MatrixXd inner = psd_sqrt(sa * cb * sa);

  double dist = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * inner.trace();
  return std::max(0.0, dist);
}

FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b) {
  check_stats(a);
  check_stats(b);
  if (a.dim != b.dim) throw std::invalid_argument("feature dimension mismatch");
  const int64_t d = a.dim;
  const double na = static_cast<double>(a.count), nb = static_cast<double>(b.count);
  const double n = na + nb;

  FeatureStats out;
  out.dim = d;
  out.count = a.count + b.count;
  out.mean.resize(d);
  out.cov.resize(d * d);
  for (int64_t i = 0; i < d; ++i)
    out.mean[i] = (na * a.mean[i] + nb * b.mean[i]) / n;
  // scatter matrices add, plus the between-means rank-one term
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double sa = a.cov[i * d + j] * (na - 1);
      double sb = b.cov[i * d + j] * (nb - 1);
      double between = (na * nb / n) * (a.mean[i] - b.mean[i]) * (a.mean[j] - b.mean[j]);
      out.cov[i * d + j] = (sa + sb + between) / (n - 1);
    }
  return out;
}

namespace {

std::vector<double> pooled_feature(const Image& img,
                                   const FrozenExtractor<float>& extractor,
                                   int64_t side) {
  if (img.height < 1 || img.width < 1)
    throw std::invalid_argument("empty image in feature extraction");
  double s = static_cast<double>(side) /
             static_cast<double>(std::min(img.height, img.width));
  int64_t rh = std::max<int64_t>(side, std::llround(img.height * s));
  int64_t rw = std::max<int64_t>(side, std::llround(img.width * s));

  auto resize = bilinear_plan<float>(img.height, img.width, rh, rw);
  std::vector<float> resized = apply_plan(*resize, img.pixels.data());
  auto crop =
      offset_crop_plan<float>(rh, rw, (rh - side) / 2, (rw - side) / 2, side, side);
  std::vector<float> tile = apply_plan(*crop, resized.data());

  Graph<float> g(false);
  Tensor<float> t({side, side, 3});
  t.data = std::move(tile);
  auto feats = extractor.features(g, g.leaf(std::move(t)));
  const Tensor<float>& deep = g.value(feats.back());

  std::vector<double> pooled(deep.cols(), 0.0);
  for (int64_t r = 0; r < deep.rows(); ++r)
    for (int64_t c = 0; c < deep.cols(); ++c)
      pooled[c] += static_cast<double>(deep.at(r, c));
  for (double& v : pooled) v /= static_cast<double>(deep.rows());
  return pooled;
}

}  // namespace

FeatureStats collect_stats(const std::vector<Image>& images,
                           const FrozenExtractor<float>& extractor, int64_t side) {
  if (images.size() < 2)
    throw std::invalid_argument("feature stats need >= 2 images");

  std::vector<std::vector<double>> feats;
  feats.reserve(images.size());
  for (const Image& img : images) feats.push_back(pooled_feature(img, extractor, side));

  const int64_t d = static_cast<int64_t>(feats[0].size());
  const int64_t n = static_cast<int64_t>(feats.size());
  FeatureStats out;
  out.dim = d;
  out.count = n;
  out.mean.assign(d, 0.0);
  out.cov.assign(d * d, 0.0);

  for (const auto& f : feats)
    for (int64_t i = 0; i < d; ++i) out.mean[i] += f[i];
  for (int64_t i = 0; i < d; ++i) out.mean[i] /= static_cast<double>(n);

  for (const auto& f : feats)
    for (int64_t i = 0; i < d; ++i) {
      double di = f[i] - out.mean[i];
      for (int64_t j = 0; j < d; ++j)
        out.cov[i * d + j] += di * (f[j] - out.mean[j]);
    }
  for (double& v : out.cov) v /= static_cast<double>(n - 1);
  return out;
}

std::vector<std::pair<std::string, FrozenExtractor<float>>> default_extractors() {
  std::vector<std::pair<std::string, FrozenExtractor<float>>> out;
  out.emplace_back("fdd", FrozenExtractor<float>(8, 64, 4, 2, 1001));
  out.emplace_back("fid", FrozenExtractor<float>(8, 64, 4, 2, 2002));
  return out;
}

std::string report_json(const EvalReport& r) {
  nlohmann::json j;
  j["psnr_db"] = r.psnr_db;
  j["ssim"] = r.ssim;
  j["latent_std"] = r.latent_std;
  j["frechet"] = nlohmann::json::object();
  for (const auto& [id, v] : r.frechet) j["frechet"][id] = v;
  j["latency_ms"] = nlohmann::json::array();
  for (const auto& row : r.latency) {
    nlohmann::json cell;
    cell["resolution"] = row.resolution;
    cell["mode"] = row.mode;
    cell["median"] = row.median_ms;
    cell["p90"] = row.p90_ms;
    cell["tokens"] = row.tokens;
    cell["pairs"] = row.pairs;
    cell["ok"] = row.ok;
    if (!row.note.empty()) cell["note"] = row.note;
    j["latency_ms"].push_back(cell);
  }
  j["config_hash"] = r.config_hash;
  return j.dump(2);
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "psnr_db,ssim,latent_std,config_hash,resolution,mode,median_ms,p90_ms,"
        "tokens,pairs,ok\n";
  auto scalar_prefix = [&]() {
    os << r.psnr_db << ',' << r.ssim << ',' << r.latent_std << ','
       << r.config_hash << ',';
  };
  if (r.latency.empty()) {
    scalar_prefix();
    os << ",,,,,\n";
    return os.str();
  }
  for (const auto& row : r.latency) {
    scalar_prefix();
    os << row.resolution << ',' << row.mode << ',' << row.median_ms << ','
       << row.p90_ms << ',' << row.tokens << ',' << row.pairs << ','
       << (row.ok ? "true" : "false") << '\n';
  }
  return os.str();
}

namespace {

Image valid_view(const PaddedImage& padded, const GridFit& fit) {
  Image out;
  out.height = fit.resized_h;
  out.width = fit.resized_w;
  out.pixels.resize(static_cast<size_t>(out.height * out.width * 3));
  int64_t canvas_w = padded.canvas.width;
  for (int64_t y = 0; y < out.height; ++y)
    for (int64_t x = 0; x < out.width; ++x)
      for (int64_t c = 0; c < 3; ++c)
        out.pixels[static_cast<size_t>((y * out.width + x) * 3 + c)] =
            padded.canvas.pixels[static_cast<size_t>((y * canvas_w + x) * 3 + c)];
  return out;
}

}  // namespace

EvalReport eval_reconstruction(const ParamStore<float>& ps, const ModelConfig& cfg,
                               const std::vector<Image>& images,
                               const EvalOptions& opts) {
  if (images.empty()) throw std::invalid_argument("empty evaluation set");

  EvalReport report;
  report.config_hash = opts.config_hash;

  std::vector<Image> originals, recons;
  originals.reserve(images.size());
  recons.reserve(images.size());

  double psnr_acc = 0, ssim_acc = 0;
  double z_sum = 0, z_sq = 0;
  int64_t z_n = 0;

  for (const Image& img : images) {
    GridFit fit = fit_grid(img.height, img.width, cfg.patch, opts.budget);
    PaddedImage padded = resize_pad(img, fit, cfg.patch);
    Image original = valid_view(padded, fit);

    Image recon;
    if (opts.identity_stub) {
      recon = original;
    } else {
      recon = reconstruct_image(img, ps, cfg, opts.budget, opts.window_radius);
    }

    PackedImage packed = pack_image(img, cfg.patch, opts.budget);
    Tensor<float> z = encode_latent(packed, ps, cfg);
    for (int64_t i = 0; i < z.numel(); ++i) {
      double v = static_cast<double>(z[i]);
      z_sum += v;
      z_sq += v * v;
      ++z_n;
    }

    psnr_acc += psnr(original, recon);
    ssim_acc += ssim_metric(original, recon);
    originals.push_back(std::move(original));
    recons.push_back(std::move(recon));
  }

  report.psnr_db = psnr_acc / static_cast<double>(images.size());
  report.ssim = ssim_acc / static_cast<double>(images.size());
  double zm = z_sum / static_cast<double>(z_n);
  report.latent_std = std::sqrt(std::max(0.0, z_sq / static_cast<double>(z_n) - zm * zm));

  if (images.size() >= 2) {
    for (const auto& [id, ext] : default_extractors()) {
      FeatureStats sa = collect_stats(originals, ext, opts.stat_side);
      FeatureStats sb = collect_stats(recons, ext, opts.stat_side);
      report.frechet.emplace_back(id, frechet_distance(sa, sb));
    }
  }
  return report;
}

std::vector<LatencyRow> bench_latency(const ParamStore<float>& ps,
                                      const ModelConfig& cfg,
                                      const std::vector<int64_t>& resolutions,
                                      const std::vector<BenchMode>& modes,
                                      int repeats, uint64_t seed) {
  using clock = std::chrono::steady_clock;
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");

  std::vector<LatencyRow> rows;
  for (int64_t res : resolutions) {
    Rng rng = derive_rng(seed, {0xBE5Cull, static_cast<uint64_t>(res)});
    Image img;
    img.height = res;
    img.width = res;
    img.pixels.resize(static_cast<size_t>(res * res * 3));
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());

    int64_t grid = (res + cfg.patch - 1) / cfg.patch;
    int64_t budget = grid * grid;

    for (const BenchMode& mode : modes) {
      LatencyRow row;
      row.resolution = res;
      row.mode = mode.name;
      row.tokens = budget;
      row.pairs = attention_pair_count(grid, grid, mode.radius);
      try {
        std::vector<double> samples;
        for (int i = 0; i < repeats + 2; ++i) {
          auto t0 = clock::now();
          Image out = reconstruct_image(img, ps, cfg, budget, mode.radius);
          auto t1 = clock::now();
          if (out.height != res) throw std::runtime_error("benched wrong fit");
          if (i >= 2)
            samples.push_back(
                std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        std::sort(samples.begin(), samples.end());
        auto percentile = [&](double q) {
          double pos = q * static_cast<double>(samples.size() - 1);
          size_t lo = static_cast<size_t>(pos);
          size_t hi = std::min(samples.size() - 1, lo + 1);
          double frac = pos - static_cast<double>(lo);
          return samples[lo] * (1 - frac) + samples[hi] * frac;
        };
        row.median_ms = percentile(0.5);
        row.p90_ms = percentile(0.9);
      } catch (const std::bad_alloc&) {
        row.ok = false;
        row.note = "OOM";
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace vitae
