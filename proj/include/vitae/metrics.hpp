#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vitae/autoencoder.hpp"
#include "vitae/image.hpp"
#include "vitae/losses.hpp"
#include "vitae/params.hpp"

namespace vitae {

// Peak signal-to-noise ratio on unit dynamic range, capped at 100 dB (the
// value reported for an exact match).
double psnr(const Image& x, const Image& xhat);

// Mean local SSIM with the same window and constants as the training loss;
// exactly 1 - ssim_loss.
double ssim_metric(const Image& x, const Image& xhat);

// Gaussian moments of a feature set: mean, unbiased covariance, sample count.
struct FeatureStats {
  int64_t dim = 0;
  int64_t count = 0;
  std::vector<double> mean;  // [dim]
  std::vector<double> cov;   // [dim*dim] row-major, symmetric
};

// Squared Fréchet distance between the Gaussians the stats describe. The
// matrix square root uses symmetric eigendecomposition with negative
// eigenvalues clamped to zero; the result is clamped to be non-negative.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Exact merge of moments of two disjoint sets (scatter matrices added plus
// the between-means term), so sharded collection reproduces pooled stats.
FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b);

// One pooled feature vector per image: aspect-preserving resize of the short
// side to `side`, center crop, extractor forward, token mean of the deepest
// tap. Moments are accumulated in two passes.
FeatureStats collect_stats(const std::vector<Image>& images,
                           const FrozenExtractor<float>& extractor,
                           int64_t side = 64);

// The two measurement extractors whose ids key the report's Fréchet values:
// same geometry, independent seeds.
std::vector<std::pair<std::string, FrozenExtractor<float>>> default_extractors();

struct LatencyRow {
  int64_t resolution = 0;
  std::string mode;
  double median_ms = 0;
  double p90_ms = 0;
  int64_t tokens = 0;
  int64_t pairs = 0;
  bool ok = true;
  std::string note;
};

struct EvalReport {
  double psnr_db = 0;
  double ssim = 0;
  double latent_std = 0;
  std::vector<std::pair<std::string, double>> frechet;
  std::vector<LatencyRow> latency;
  std::string config_hash;
};

std::string report_json(const EvalReport& r);
// One row per latency cell; scalar metrics repeat on each row.
std::string report_csv(const EvalReport& r);

struct EvalOptions {
  int64_t budget = 256;
  int64_t window_radius = -1;
  int64_t stat_side = 64;
  // Bypasses the model entirely: the "reconstruction" is the fitted input
  // itself. Exercises the metric path's perfect-score plumbing.
  bool identity_stub = false;
  std::string config_hash;
};

EvalReport eval_reconstruction(const ParamStore<float>& ps, const ModelConfig& cfg,
                               const std::vector<Image>& images,
                               const EvalOptions& opts);

struct BenchMode {
  std::string name;  // "full" or "swa"
  int64_t radius = -1;
};

// Median and p90 wall-clock of a full reconstruction per (resolution, mode),
// after two warmup runs. Allocation failures become failure rows.
std::vector<LatencyRow> bench_latency(const ParamStore<float>& ps,
                                      const ModelConfig& cfg,
                                      const std::vector<int64_t>& resolutions,
                                      const std::vector<BenchMode>& modes,
                                      int repeats, uint64_t seed);

}  // namespace vitae
