// SPDX-License-Identifier: Apache-2.0

#include "convfuse/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "convfuse/error.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

namespace fs = std::filesystem;

namespace {

void normalize_std(std::vector<double>& v, double target_std) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  for (double& x : v) x = sd > 0 ? (x - mean) * target_std / sd : 0.0;
}

std::vector<double> noise_texture(std::size_t s, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> white(s * s);
  for (double& v : white) v = normal(rng);
  // Separable Gaussian blur with periodic wrap keeps low frequencies only.
  constexpr double sigma = 1.5;
  constexpr int radius = 4;
  std::vector<double> taps(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) taps[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const auto wrap = [s](long i) { return static_cast<std::size_t>((i % static_cast<long>(s) + static_cast<long>(s)) % static_cast<long>(s)); };
  std::vector<double> tmp(s * s, 0.0), out(s * s, 0.0);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (int k = -radius; k <= radius; ++k) tmp[y * s + x] += taps[k + radius] * white[y * s + wrap(static_cast<long>(x) + k)];
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (int k = -radius; k <= radius; ++k) out[y * s + x] += taps[k + radius] * tmp[wrap(static_cast<long>(y) + k) * s + x];
  return out;
}

std::vector<double> grid_texture(std::size_t s, Rng& rng) {
  std::uniform_real_distribution<double> freq(2.0, 5.0), phase(0.0, 2.0 * std::numbers::pi),
      angle(0.0, std::numbers::pi);
  const double f1 = freq(rng), f2 = freq(rng), p1 = phase(rng), p2 = phase(rng), theta = angle(rng);
  const double ct = std::cos(theta), st = std::sin(theta), n = static_cast<double>(s);
  std::vector<double> out(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double u = ct * x + st * y, v = -st * x + ct * y;
      out[y * s + x] = std::sin(2 * std::numbers::pi * f1 * u / n + p1) + std::sin(2 * std::numbers::pi * f2 * v / n + p2);
    }
  return out;
}

// Rasterized defect whose area fraction lies within [min, max].
std::vector<std::uint8_t> sample_defect(const SyntheticParams& p, Rng& rng) {
  const std::size_t s = p.image_size;
  const double total = static_cast<double>(s * s);
  std::uniform_real_distribution<double> frac(p.min_defect_fraction, p.max_defect_fraction), aspect(0.5, 2.0),
      unit(0.0, 1.0);
  std::bernoulli_distribution ellipse(0.5);
  std::vector<std::uint8_t> mask(s * s);
  for (int attempt = 0; attempt < 500; ++attempt) {
    std::fill(mask.begin(), mask.end(), 0);
    const double area = frac(rng) * total, a = aspect(rng);
    if (ellipse(rng)) {
      const double rx = std::sqrt(area * a / std::numbers::pi), ry = area / (std::numbers::pi * rx);
      if (2 * rx > s || 2 * ry > s) continue;
      const double cx = rx + unit(rng) * (s - 2 * rx), cy = ry + unit(rng) * (s - 2 * ry);
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
          if (dx * dx + dy * dy <= 1.0) mask[y * s + x] = 1;
        }
    } else {
      const auto w = static_cast<std::size_t>(std::max(1.0, std::round(std::sqrt(area * a))));
      const auto h = static_cast<std::size_t>(std::max(1.0, std::round(area / static_cast<double>(w))));
      if (w > s || h > s) continue;
      std::uniform_int_distribution<std::size_t> px(0, s - w), py(0, s - h);
      const std::size_t x0 = px(rng), y0 = py(rng);
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) mask[y * s + x] = 1;
    }
    const double got = std::accumulate(mask.begin(), mask.end(), 0.0) / total;
    if (got >= p.min_defect_fraction && got <= p.max_defect_fraction) return mask;
  }
  throw ConfigError("cannot place a defect with area fraction in [" + std::to_string(p.min_defect_fraction) + ", " +
                    std::to_string(p.max_defect_fraction) + "] inside a " + std::to_string(s) + "x" +
                    std::to_string(s) + " image");
}

std::string padded(std::size_t i) {
  std::string n = std::to_string(i);
  return std::string(n.size() < 5 ? 5 - n.size() : 0, '0') + n;
}

}  // namespace

TextureFamily parse_texture_family(const std::string& name) {
  if (name == "noise") return TextureFamily::Noise;
  if (name == "grid") return TextureFamily::Grid;
  if (name == "mixed") return TextureFamily::Mixed;
  throw ConfigError("unknown texture family '" + name + "' (expected noise, grid or mixed)");
}

std::string texture_family_name(TextureFamily family) {
  switch (family) {
    case TextureFamily::Noise: return "noise";
    case TextureFamily::Grid: return "grid";
    case TextureFamily::Mixed: return "mixed";
  }
  return "mixed";
}

void SyntheticParams::validate() const {
  std::vector<std::string> bad;
  if (image_size == 0) bad.emplace_back("image_size must be positive");
  if (anomaly_rate < 0 || anomaly_rate > 1) bad.emplace_back("anomaly_rate must be in [0, 1]");
  if (!(texture_std > 0)) bad.emplace_back("texture_std must be positive");
  if (!(min_defect_fraction > 0) || min_defect_fraction > max_defect_fraction)
    bad.emplace_back("defect fractions must satisfy 0 < min <= max");
  if (max_defect_fraction >= 1.0) bad.emplace_back("defect larger than image: max_defect_fraction must be < 1");
  if (min_delta < 3.0 || min_delta > max_delta) bad.emplace_back("defect delta must satisfy 3 <= min <= max (texture std units)");
  if (brightness_min > brightness_max || brightness_min < 0 || brightness_max > 255)
    bad.emplace_back("brightness range must lie within [0, 255]");
  if (!bad.empty()) {
    std::string msg = "invalid synthetic data configuration:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

std::vector<Sample> gen_synthetic(const SyntheticParams& params, std::uint64_t seed) {
  params.validate();
  const std::size_t s = params.image_size;
  const auto anomalous = static_cast<std::size_t>(std::llround(params.anomaly_rate * static_cast<double>(params.count)));
  std::vector<int> labels(params.count, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<long>(anomalous), 1);
  Rng label_rng(derive_seed(seed, "labels"));
  std::shuffle(labels.begin(), labels.end(), label_rng);

  std::vector<Sample> out;
  out.reserve(params.count);
  for (std::size_t i = 0; i < params.count; ++i) {
    Rng rng(derive_seed(seed, "sample." + std::to_string(i)));
    const bool grid = params.texture == TextureFamily::Grid ||
                      (params.texture == TextureFamily::Mixed && std::bernoulli_distribution(0.5)(rng));
    std::vector<double> texture = grid ? grid_texture(s, rng) : noise_texture(s, rng);
    normalize_std(texture, params.texture_std);
    const double base = std::uniform_real_distribution<double>(params.brightness_min, params.brightness_max)(rng);

    Sample smp;
    smp.id = params.id_prefix + padded(i);
    smp.height = smp.width = s;
    smp.label = labels[i];
    smp.mask.assign(s * s, 0);
    double offset = 0.0;
    if (smp.label) {
      smp.mask = sample_defect(params, rng);
      const double delta = std::uniform_real_distribution<double>(params.min_delta, params.max_delta)(rng);
      offset = (std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0) * delta * params.texture_std;
    }
    smp.pixels.resize(s * s);
    for (std::size_t k = 0; k < s * s; ++k) {
      const double v = base + texture[k] + (smp.mask[k] ? offset : 0.0);
      smp.pixels[k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
    out.push_back(std::move(smp));
  }
  return out;
}

double normalize_pixel(std::uint8_t value) { return (static_cast<double>(value) / 255.0 - 0.5) * 4.0; }

Tensor images_tensor(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ShapeError("images_tensor: empty batch");
  const std::size_t h = batch.front()->height, w = batch.front()->width;
  Tensor t({batch.size(), 1, h, w});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b]->height != h || batch[b]->width != w) throw ShapeError("images_tensor: mixed image sizes");
    for (std::size_t k = 0; k < h * w; ++k) t[b * h * w + k] = normalize_pixel(batch[b]->pixels[k]);
  }
  return t;
}

Tensor masks_tensor(const std::vector<const Sample*>& batch) {
  const std::size_t h = batch.front()->height, w = batch.front()->width;
  Tensor t({batch.size(), h, w});
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t k = 0; k < h * w; ++k) t[b * h * w + k] = batch[b]->mask[k] ? 1.0 : 0.0;
  return t;
}

Graymap read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open graymap " + path.string());
  auto fail = [&](const std::string& why) -> LoadError { return LoadError("corrupt graymap " + path.string() + ": " + why); };
  auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  if (next_token() != "P5") throw fail("expected binary P5 header");
  Graymap g;
  try {
    g.width = std::stoul(next_token());
    g.height = std::stoul(next_token());
    g.maxval = static_cast<unsigned>(std::stoul(next_token()));
  } catch (const std::exception&) {
    throw fail("malformed dimensions");
  }
  if (g.width == 0 || g.height == 0 || g.maxval == 0 || g.maxval > 65535) throw fail("invalid dimensions or maxval");
  const std::size_t n = g.width * g.height;
  const std::size_t bytes = g.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bytes);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw fail("truncated pixel data");
  g.values.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    g.values[i] = bytes == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  return g;
}

void write_pgm(const fs::path& path, const Graymap& image) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write graymap " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << '\n' << image.maxval << '\n';
  const bool wide = image.maxval > 255;
  std::vector<unsigned char> raw;
  raw.reserve(image.values.size() * (wide ? 2 : 1));
  for (std::uint16_t v : image.values) {
    if (wide) raw.push_back(static_cast<unsigned char>(v >> 8));
    raw.push_back(static_cast<unsigned char>(v & 0xff));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

void export_dataset(const fs::path& root, const std::string& split, const std::vector<Sample>& samples) {
  for (const Sample& s : samples) {
    Graymap img{s.width, s.height, 255, {s.pixels.begin(), s.pixels.end()}};
    write_pgm(root / split / (s.label ? "defect" : "good") / (s.id + ".pgm"), img);
    if (s.label) {
      Graymap mask{s.width, s.height, 255, {}};
      for (std::uint8_t m : s.mask) mask.values.push_back(m ? 255 : 0);
      write_pgm(root / "ground_truth" / "defect" / (s.id + "_mask.pgm"), mask);
    }
  }
}

std::vector<Sample> load_dataset(const fs::path& root, const std::string& split) {
  if (!fs::is_directory(root / split)) throw LoadError("dataset split directory missing: " + (root / split).string());
  std::vector<Sample> out;
  for (const char* kind : {"good", "defect"}) {
    const fs::path dir = root / split / kind;
    if (!fs::is_directory(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
    for (const fs::path& file : files) {
      const Graymap img = read_pgm(file);
      if (img.maxval > 255) throw LoadError("expected 8-bit graymap: " + file.string());
      Sample s;
      s.id = file.stem().string();
      s.width = img.width;
      s.height = img.height;
      s.pixels.assign(img.values.begin(), img.values.end());
      s.mask.assign(img.width * img.height, 0);
      s.label = std::string(kind) == "defect" ? 1 : 0;
      if (s.label) {
        const fs::path mask_path = root / "ground_truth" / "defect" / (s.id + "_mask.pgm");
        if (!fs::exists(mask_path)) throw LoadError("defect image '" + s.id + "' has no mask at " + mask_path.string());
        const Graymap mask = read_pgm(mask_path);
        if (mask.width != img.width || mask.height != img.height)
          throw LoadError("mask size differs from image for '" + s.id + "'");
        for (std::size_t k = 0; k < s.mask.size(); ++k) s.mask[k] = mask.values[k] ? 1 : 0;
      }
      out.push_back(std::move(s));
    }
  }
  std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return out;
}

}  // namespace convfuse
