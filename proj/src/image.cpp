#include "vitae/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "vitae/rng.hpp"

namespace vitae {

namespace {

// Reads one ASCII integer from a PPM header, skipping whitespace and
// '#'-comments.
int64_t read_header_int(std::istream& in) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw std::runtime_error("bad ppm header");
  int64_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    ch = in.get();
  }
  return v;
}

}  // namespace

Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error("not a P6 ppm: " + path);
  int64_t w = read_header_int(in);
  int64_t h = read_header_int(in);
  int64_t maxval = read_header_int(in);
  if (w < 1 || h < 1) throw std::runtime_error("zero dimension in " + path);
  if (maxval < 1 || maxval > 255)
    throw std::runtime_error("unsupported maxval in " + path);
  Image img(h, w);
  std::vector<unsigned char> raw(static_cast<size_t>(h * w * 3));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error("truncated ppm " + path);
  float inv = 1.0f / static_cast<float>(maxval);
  for (size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] * inv;
  return img;
}

void save_ppm(const Image& img, const std::string& path) {
  if (img.height < 1 || img.width < 1 ||
      img.pixels.size() != static_cast<size_t>(img.height * img.width * 3))
    throw std::runtime_error("invalid image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    float v = std::round(img.pixels[i] * 255.0f);
    raw[i] = static_cast<unsigned char>(std::clamp(v, 0.0f, 255.0f));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw std::runtime_error("write failed " + path);
}

namespace {

bool has_suffix(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

}  // namespace

Image load_image(const std::string& path) {
  if (has_suffix(path, ".ppm")) return load_ppm(path);
  throw std::runtime_error("unsupported image format: " + path);
}

void save_image(const Image& img, const std::string& path) {
  if (has_suffix(path, ".ppm")) return save_ppm(img, path);
  throw std::runtime_error("unsupported image format: " + path);
}

namespace {

float smoothstep(float e0, float e1, float x) {
  float t = std::clamp((x - e0) / (e1 - e0), 0.0f, 1.0f);
  return t * t * (3.0f - 2.0f * t);
}

struct Palette {
  float a[3], b[3], bg[3];
};

Palette draw_palette(Rng& rng) {
  Palette p;
  for (int c = 0; c < 3; ++c) {
    p.a[c] = static_cast<float>(rng.uniform(0.1, 0.9));
    p.b[c] = static_cast<float>(rng.uniform(0.1, 0.9));
    p.bg[c] = static_cast<float>(rng.uniform(0.15, 0.85));
  }
  return p;
}

void render(Image& img, int64_t family, Rng& rng) {
  int64_t h = img.height, w = img.width;
  float diag = static_cast<float>(std::max(h, w));
  Palette pal = draw_palette(rng);
  float theta = static_cast<float>(rng.uniform(0.0, 3.14159265));
  float freq = static_cast<float>(rng.uniform(1.5, 3.5));
  float phase = static_cast<float>(rng.uniform(0.0, 6.2831853));
  float cx = static_cast<float>(rng.uniform(0.25, 0.75)) * static_cast<float>(w);
  float cy = static_cast<float>(rng.uniform(0.25, 0.75)) * static_cast<float>(h);
  float cx2 = static_cast<float>(rng.uniform(0.2, 0.8)) * static_cast<float>(w);
  float cy2 = static_cast<float>(rng.uniform(0.2, 0.8)) * static_cast<float>(h);
  float radius = static_cast<float>(rng.uniform(0.15, 0.3)) * diag;
  float ct = std::cos(theta), st = std::sin(theta);

  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      float fx = static_cast<float>(x) / static_cast<float>(w);
      float fy = static_cast<float>(y) / static_cast<float>(h);
      // smooth background gradient shared by all families
      float gbg = 0.5f * (fx + fy);
      float mix = 0.0f;
      switch (family) {
        case 0: {  // soft diagonal stripes
          float u = (static_cast<float>(x) * ct + static_cast<float>(y) * st) / diag;
          mix = 0.5f + 0.5f * std::sin(6.2831853f * freq * u + phase);
          break;
        }
        case 1: {  // two radial blobs
          float d1 = std::hypot(static_cast<float>(x) - cx, static_cast<float>(y) - cy);
          float d2 = std::hypot(static_cast<float>(x) - cx2, static_cast<float>(y) - cy2);
          mix = std::max(1.0f - smoothstep(radius * 0.5f, radius, d1),
                         1.0f - smoothstep(radius * 0.4f, radius * 0.8f, d2));
          break;
        }
        case 2: {  // low-frequency plaid
          mix = 0.5f + 0.5f * std::sin(6.2831853f * freq * fx + phase) *
                           std::sin(6.2831853f * freq * fy - phase);
          break;
        }
        default: {  // soft-edged rectangle over the gradient
          float rx = smoothstep(cx - radius, cx - radius * 0.6f, static_cast<float>(x)) *
                     (1.0f - smoothstep(cx + radius * 0.6f, cx + radius, static_cast<float>(x)));
          float ry = smoothstep(cy - radius, cy - radius * 0.6f, static_cast<float>(y)) *
                     (1.0f - smoothstep(cy + radius * 0.6f, cy + radius, static_cast<float>(y)));
          mix = rx * ry;
          break;
        }
      }
      for (int64_t c = 0; c < 3; ++c) {
        float fg = pal.a[c] * (1.0f - mix) + pal.b[c] * mix;
        float base = pal.bg[c] * (1.0f - gbg) + fg * (0.35f + 0.65f * gbg);
        img.at(y, x, c) = std::clamp(0.3f * pal.bg[c] + 0.7f * base, 0.0f, 1.0f);
      }
    }
  }
}

}  // namespace

std::vector<LabeledImage> generate_synthetic(const DatasetSpec& spec) {
  if (spec.count < 1 || spec.min_px < 1 || spec.max_px < spec.min_px ||
      spec.class_count < 1 || spec.min_aspect <= 0 ||
      spec.max_aspect < spec.min_aspect)
    throw std::runtime_error("invalid dataset spec");
  std::vector<LabeledImage> out;
  out.reserve(static_cast<size_t>(spec.count));
  for (int64_t i = 0; i < spec.count; ++i) {
    Rng rng = derive_rng(spec.seed, {17ull, static_cast<uint64_t>(i)});
    int64_t base = spec.min_px + rng.uniform_int(spec.max_px - spec.min_px + 1);
    double aspect = rng.uniform(spec.min_aspect, spec.max_aspect);
    int64_t h = std::clamp(static_cast<int64_t>(std::llround(base / std::sqrt(aspect))),
                           spec.min_px, spec.max_px);
    int64_t w = std::clamp(static_cast<int64_t>(std::llround(base * std::sqrt(aspect))),
                           spec.min_px, spec.max_px);
    LabeledImage li;
    li.label = i % spec.class_count;
    li.image = Image(h, w);
    render(li.image, li.label % 4, rng);
    out.push_back(std::move(li));
  }
  return out;
}

}  // namespace vitae
