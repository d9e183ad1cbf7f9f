// Python bindings for the core operations: dataset synthesis, grid fitting,
// autoencoder and flow lifecycles, and the evaluation metrics. Configuration
// uses the same sectioned JSON the command line accepts, so snippets move
// between the two front ends unchanged.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vitae/autoencoder.hpp"
#include "vitae/checkpoint.hpp"
#include "vitae/flowgen.hpp"
#include "vitae/image.hpp"
#include "vitae/metrics.hpp"
#include "vitae/naflex.hpp"
#include "vitae/runconfig.hpp"
#include "vitae/trainer.hpp"

namespace py = pybind11;
using namespace vitae;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Image to_image(const FloatArray& arr) {
  if (arr.ndim() != 3 || arr.shape(2) != 3)
    throw std::invalid_argument("expected an (h, w, 3) array");
  Image img(arr.shape(0), arr.shape(1));
  std::memcpy(img.pixels.data(), arr.data(), img.pixels.size() * sizeof(float));
  return img;
}

py::array_t<float> from_image(const Image& img) {
  py::array_t<float> out({img.height, img.width, int64_t{3}});
  std::memcpy(out.mutable_data(), img.pixels.data(),
              img.pixels.size() * sizeof(float));
  return out;
}

py::array_t<float> from_tensor(const Tensor<float>& t) {
  py::array_t<float> out({t.rows(), t.cols()});
  std::memcpy(out.mutable_data(), &t[0], (size_t)t.numel() * sizeof(float));
  return out;
}

std::vector<LabeledImage> to_dataset(const std::vector<FloatArray>& images,
                                     const std::vector<int64_t>& labels) {
  if (images.size() != labels.size())
    throw std::invalid_argument("images and labels differ in length");
  std::vector<LabeledImage> out;
  out.reserve(images.size());
  for (size_t i = 0; i < images.size(); ++i)
    out.push_back({to_image(images[i]), labels[i]});
  return out;
}

py::dict train_summary(int64_t steps_run, bool aborted, const std::string& reason,
                       double final_loss) {
  py::dict d;
  d["steps_run"] = steps_run;
  d["aborted"] = aborted;
  d["abort_reason"] = reason;
  d["final_loss"] = final_loss;
  return d;
}

class PyAutoencoder {
 public:
  PyAutoencoder(const std::string& config, uint64_t seed)
      : cfg_(run_config_from_json(config).model) {
    init_params(ps_, cfg_, seed);
  }

  static PyAutoencoder from_checkpoint(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    PyAutoencoder ae(ck.config_json);
    load_into(ae.ps_, ck);
    return ae;
  }

  std::string config_json() const { return model_config_json(cfg_); }

  py::tuple parameter_counts() const {
    ParamCounts pc = count_parameters(cfg_);
    return py::make_tuple(pc.encoder, pc.decoder, pc.total);
  }

  py::dict train(const std::vector<FloatArray>& images,
                 const std::vector<int64_t>& labels, const std::string& config) {
    auto data = to_dataset(images, labels);
    RunConfig rc = run_config_from_json(config);
    TrainResult res;
    {
      py::gil_scoped_release release;
      res = train_autoencoder(ps_, cfg_, data, rc.train, rc.loss, TrainIO{});
    }
    double final_loss = res.log.empty() ? 0.0 : res.log.back().loss_total;
    return train_summary(res.steps_run, res.aborted, res.abort_reason, final_loss);
  }

  py::array_t<float> reconstruct(const FloatArray& image, int64_t budget,
                                 int64_t window_radius) {
    Image img = to_image(image);
    Image rec;
    {
      py::gil_scoped_release release;
      rec = reconstruct_image(img, ps_, cfg_, budget, window_radius);
    }
    return from_image(rec);
  }

  py::tuple encode(const FloatArray& image, int64_t budget) {
    PackedImage packed = pack_image(to_image(image), cfg_.patch, budget);
    Tensor<float> z = encode_latent(packed, ps_, cfg_);
    return py::make_tuple(from_tensor(z),
                          py::make_tuple(packed.grid.grid_h, packed.grid.grid_w));
  }

  std::string evaluate(const std::vector<FloatArray>& images,
                       const std::string& config) {
    std::vector<Image> imgs;
    imgs.reserve(images.size());
    for (const auto& a : images) imgs.push_back(to_image(a));
    RunConfig rc = run_config_from_json(config);
    EvalOptions opts;
    opts.budget = rc.eval.budget;
    opts.window_radius = rc.eval.window_radius;
    opts.stat_side = rc.eval.stat_side;
    opts.config_hash = config_hash(rc);
    EvalReport report;
    {
      py::gil_scoped_release release;
      report = eval_reconstruction(ps_, cfg_, imgs, opts);
    }
    return report_json(report);
  }

  void save(const std::string& path) const {
    save_checkpoint(path, model_config_json(cfg_), ps_);
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamStore<float>& params() const { return ps_; }

 private:
  explicit PyAutoencoder(const std::string& model_json)
      : cfg_(model_config_from_json(model_json)) {
    init_params(ps_, cfg_, 0);
  }

  ModelConfig cfg_;
  ParamStore<float> ps_;
};

class PyFlow {
 public:
  PyFlow(const std::string& config, uint64_t seed)
      : cfg_(run_config_from_json(config).flow), st_(make_flow_state(cfg_, seed)) {}

  static PyFlow from_checkpoint(const std::string& path) { return PyFlow(path); }

  std::string config_json() const { return flow_config_json(cfg_); }

  py::dict train(const PyAutoencoder& ae, const std::vector<FloatArray>& images,
                 const std::vector<int64_t>& labels, const std::string& config) {
    if (cfg_.latent_channels != ae.config().latent_channels)
      throw std::invalid_argument("flow and autoencoder disagree on latent_channels");
    auto data = to_dataset(images, labels);
    RunConfig rc = run_config_from_json(config);
    FlowTrainResult res;
    {
      py::gil_scoped_release release;
      auto latents = make_latent_dataset(data, ae.params(), ae.config(), rc.eval.budget);
      for (const auto& ex : latents)
        if (ex.grid_h > cfg_.max_grid_side || ex.grid_w > cfg_.max_grid_side)
          throw std::invalid_argument("latent grid exceeds max_grid_side");
      res = train_flow(st_, cfg_, latents, rc.train, TrainIO{});
    }
    double final_loss = res.log.empty() ? 0.0 : res.log.back().loss_fm;
    return train_summary(res.steps_run, res.aborted, res.abort_reason, final_loss);
  }

  std::vector<py::array_t<float>> sample(const PyAutoencoder& ae,
                                         const std::vector<int64_t>& labels,
                                         int64_t steps, double cfg_scale,
                                         int64_t grid_h, int64_t grid_w,
                                         uint64_t seed) {
    std::vector<Image> images;
    {
      py::gil_scoped_release release;
      images = generate_images(ae.params(), ae.config(), st_, cfg_, labels, steps,
                               cfg_scale, grid_h, grid_w, seed);
    }
    std::vector<py::array_t<float>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(from_image(img));
    return out;
  }

  void save(const std::string& path) const { save_flow_checkpoint(path, cfg_, st_); }

 private:
  explicit PyFlow(const std::string& path) : st_(load_flow_checkpoint(path, cfg_)) {}

  FlowConfig cfg_;
  FlowState st_;
};

}  // namespace

PYBIND11_MODULE(_vitae, m) {
  m.doc() = "Native-aspect image autoencoder with token packing, latent flow "
            "generation and evaluation metrics";
  m.attr("__version__") = "0.1.0";

  m.def(
      "fit_grid",
      [](int64_t h, int64_t w, int64_t patch, int64_t budget) {
        GridFit f = fit_grid(h, w, patch, budget);
        py::dict d;
        d["grid_h"] = f.grid_h;
        d["grid_w"] = f.grid_w;
        d["resized_h"] = f.resized_h;
        d["resized_w"] = f.resized_w;
        d["scale"] = f.scale;
        return d;
      },
      py::arg("height"), py::arg("width"), py::arg("patch"), py::arg("budget"),
      "Largest downscale whose patch grid fits the token budget");

  m.def("compression_ratio", &compression_ratio, py::arg("patch"),
        py::arg("latent_channels"), "Pixels represented per latent scalar");

  m.def(
      "config_hash",
      [](const std::string& config) { return config_hash(run_config_from_json(config)); },
      py::arg("config"), "Stable 16-hex-digit digest of a canonicalized config");

  m.def(
      "synthetic_images",
      [](int64_t count, uint64_t seed, int64_t min_px, int64_t max_px,
         double min_aspect, double max_aspect, int64_t class_count) {
        DatasetSpec spec;
        spec.count = count;
        spec.seed = seed;
        spec.min_px = min_px;
        spec.max_px = max_px;
        spec.min_aspect = min_aspect;
        spec.max_aspect = max_aspect;
        spec.class_count = class_count;
        auto data = generate_synthetic(spec);
        std::vector<std::pair<py::array_t<float>, int64_t>> out;
        out.reserve(data.size());
        for (const auto& item : data) out.emplace_back(from_image(item.image), item.label);
        return out;
      },
      py::arg("count") = 1, py::arg("seed") = 0, py::arg("min_px") = 32,
      py::arg("max_px") = 64, py::arg("min_aspect") = 1.0, py::arg("max_aspect") = 1.0,
      py::arg("class_count") = 1,
      "Deterministic labeled test images as (array, label) pairs");

  m.def(
      "psnr", [](const FloatArray& a, const FloatArray& b) {
        return psnr(to_image(a), to_image(b));
      },
      py::arg("x"), py::arg("xhat"), "Peak signal-to-noise ratio in dB, capped at 100");

  m.def(
      "ssim", [](const FloatArray& a, const FloatArray& b) {
        return ssim_metric(to_image(a), to_image(b));
      },
      py::arg("x"), py::arg("xhat"),
      "Mean local structural similarity; needs at least 11 px per side");

  py::class_<PyAutoencoder>(m, "Autoencoder",
                            "Native-aspect ViT autoencoder over packed tokens")
      .def(py::init<const std::string&, uint64_t>(), py::arg("config") = "{}",
           py::arg("seed") = 0)
      .def_static("load", &PyAutoencoder::from_checkpoint, py::arg("path"),
                  "Restore a model from a checkpoint file")
      .def_property_readonly("config_json", &PyAutoencoder::config_json)
      .def("parameter_counts", &PyAutoencoder::parameter_counts,
           "(encoder, decoder, total) scalar counts")
      .def("train", &PyAutoencoder::train, py::arg("images"), py::arg("labels"),
           py::arg("config") = "{}")
      .def("reconstruct", &PyAutoencoder::reconstruct, py::arg("image"),
           py::arg("budget") = 256, py::arg("window_radius") = -1)
      .def("encode", &PyAutoencoder::encode, py::arg("image"), py::arg("budget") = 256,
           "Latent tokens and their (grid_h, grid_w)")
      .def("evaluate", &PyAutoencoder::evaluate, py::arg("images"),
           py::arg("config") = "{}", "Reconstruction metrics as a JSON report")
      .def("save", &PyAutoencoder::save, py::arg("path"));

  py::class_<PyFlow>(m, "Flow", "Latent flow-matching generator")
      .def(py::init<const std::string&, uint64_t>(), py::arg("config") = "{}",
           py::arg("seed") = 0)
      .def_static("load", &PyFlow::from_checkpoint, py::arg("path"))
      .def_property_readonly("config_json", &PyFlow::config_json)
      .def("train", &PyFlow::train, py::arg("autoencoder"), py::arg("images"),
           py::arg("labels"), py::arg("config") = "{}")
      .def("sample", &PyFlow::sample, py::arg("autoencoder"), py::arg("labels"),
           py::arg("steps") = 50, py::arg("cfg_scale") = 1.0, py::arg("grid_h") = 8,
           py::arg("grid_w") = 8, py::arg("seed") = 0,
           "Decode one generated image per label")
      .def("save", &PyFlow::save, py::arg("path"));
}
