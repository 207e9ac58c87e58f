#pragma once

// Procedural RGB-D scenes: a background plane whose depth rises linearly from
// the bottom row (d_min) to the top row (d_max), overlaid with fronto-parallel
// rectangles at random depths. Image intensity is albedo * (1/depth) plus
// additive noise, so a genuine depth signal exists in the image.

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddissect/bins.hpp"
#include "ddissect/image_io.hpp"
#include "ddissect/parallel.hpp"
#include "ddissect/rng.hpp"
#include "ddissect/tensor.hpp"

namespace ddissect {

struct SceneConfig {
  int h = 64, w = 64;
  double d_min = 1.0, d_max = 10.0;
  int min_rects = 2, max_rects = 6;
  double noise_sigma = 0.05;

  void validate() const {
    expect(h >= 16 && w >= 16, "scene config: dims must be >= 16");
    expect(d_min < d_max, "scene config: d_min must be < d_max");
    expect(d_min > 0.0, "scene config: d_min must be positive");
    expect(min_rects >= 2 && max_rects <= 8 && min_rects <= max_rects,
           "scene config: rectangle count must lie in [2,8]");
  }
};

struct Sample {
  Tensor image;  // (1,3,H,W) in [0,1]
  Tensor depth;  // (1,1,H,W) meters
  Tensor valid;  // (1,1,H,W) binary
};

namespace scene_detail {

inline Sample render_scene(std::uint64_t seed, const SceneConfig& cfg) {
  std::mt19937_64 rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Sample s;
  s.image = Tensor::zeros({1, 3, cfg.h, cfg.w});
  s.depth = Tensor::zeros({1, 1, cfg.h, cfg.w});
  s.valid = Tensor::full({1, 1, cfg.h, cfg.w}, 1.f);

  // Background plane: bottom row at d_min, top row at d_max.
  std::vector<double> albedo_r(static_cast<std::size_t>(cfg.h) * cfg.w);
  std::vector<double> albedo_g(albedo_r.size()), albedo_b(albedo_r.size());
  const double pr = 0.25 + 0.7 * unit(rng);
  const double pg = 0.25 + 0.7 * unit(rng);
  const double pb = 0.25 + 0.7 * unit(rng);
  for (int y = 0; y < cfg.h; ++y) {
    const double frac = cfg.h > 1 ? static_cast<double>(y) / (cfg.h - 1) : 0.0;
    const double d = cfg.d_max + (cfg.d_min - cfg.d_max) * frac;
    for (int x = 0; x < cfg.w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * cfg.w + x;
      s.depth.data()[i] = static_cast<float>(d);
      albedo_r[i] = pr;
      albedo_g[i] = pg;
      albedo_b[i] = pb;
    }
  }

  // Rectangles: log-uniform depths so near (narrow) bins get covered too;
  // nearer surfaces win every overlap. Sizes run up to ~60% of a side, so the
  // visible plane (and with it the per-sample bin coverage) varies strongly
  // from sample to sample.
  std::uniform_int_distribution<int> nrect(cfg.min_rects, cfg.max_rects);
  const int rects = nrect(rng);
  const double log_lo = std::log(cfg.d_min), log_hi = std::log(cfg.d_max);
  for (int r = 0; r < rects; ++r) {
    const double rd = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
    std::uniform_int_distribution<int> rw(cfg.w / 8, std::max(cfg.w / 8, (cfg.w * 3) / 5));
    std::uniform_int_distribution<int> rh(cfg.h / 8, std::max(cfg.h / 8, (cfg.h * 3) / 5));
    const int ww = rw(rng), hh = rh(rng);
    std::uniform_int_distribution<int> rx(0, cfg.w - ww), ry(0, cfg.h - hh);
    const int x0 = rx(rng), y0 = ry(rng);
    const double ar = 0.15 + 0.8 * unit(rng);
    const double ag = 0.15 + 0.8 * unit(rng);
    const double ab = 0.15 + 0.8 * unit(rng);
    for (int y = y0; y < y0 + hh; ++y)
      for (int x = x0; x < x0 + ww; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * cfg.w + x;
        if (rd < s.depth.data()[i]) {
          s.depth.data()[i] = static_cast<float>(rd);
          albedo_r[i] = ar;
          albedo_g[i] = ag;
          albedo_b[i] = ab;
        }
      }
  }

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  const long long plane = static_cast<long long>(cfg.h) * cfg.w;
  for (long long i = 0; i < plane; ++i) {
    const double shade = 1.0 / s.depth.data()[static_cast<std::size_t>(i)];
    const double rgb[3] = {albedo_r[static_cast<std::size_t>(i)] * shade,
                           albedo_g[static_cast<std::size_t>(i)] * shade,
                           albedo_b[static_cast<std::size_t>(i)] * shade};
    for (int c = 0; c < 3; ++c) {
      const double v = rgb[c] + noise(rng);
      s.image.data()[static_cast<std::size_t>(c * plane + i)] =
          static_cast<float>(std::min(std::max(v, 0.0), 1.0));
    }
  }
  return s;
}

inline int distinct_bins(const Sample& s, const BinningScheme& scheme) {
  std::vector<char> seen(static_cast<std::size_t>(scheme.n_bins), 0);
  for (auto d : s.depth.data()) seen[static_cast<std::size_t>(scheme.bin_of(d))] = 1;
  int n = 0;
  for (char c : seen) n += c;
  return n;
}

}  // namespace scene_detail

// Deterministic in seed. Regenerates with derived seeds until the depth map
// covers at least 8 distinct bins under the default 64-bin scheme, so
// dissection always sees populated bins.
inline Sample generate_sample(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  const BinningScheme coverage = BinningScheme::sid(cfg.d_min, cfg.d_max, 64);
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : mix_seed(seed, attempt);
    Sample sample = scene_detail::render_scene(s, cfg);
    if (scene_detail::distinct_bins(sample, coverage) >= 8) return sample;
    expect(attempt < 64, "generate_sample: cannot reach 8-bin depth coverage");
  }
}

struct DatasetManifest {
  int n = 0;
  double d_min = 0.0, d_max = 0.0;
  int h = 0, w = 0;
  std::string split;
  struct Entry {
    std::string image;
    std::string depth;
  };
  std::vector<Entry> samples;
  std::filesystem::path dir;  // directory the manifest lives in; not serialized
};

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::json j;
  j["n"] = m.n;
  j["d_min"] = m.d_min;
  j["d_max"] = m.d_max;
  j["h"] = m.h;
  j["w"] = m.w;
  j["split"] = m.split;
  auto arr = nlohmann::json::array();
  for (const auto& e : m.samples) arr.push_back({{"image", e.image}, {"depth", e.depth}});
  j["samples"] = arr;
  std::ofstream f(path);
  expect(f.good(), msg("write_manifest: cannot open ", path.string()));
  f << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  expect(f.good(), msg("load_manifest: cannot open ", path.string()));
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(msg("load_manifest: cannot parse ", path.string(), ": ", e.what()));
  }
  DatasetManifest m;
  m.n = j.at("n").get<int>();
  m.d_min = j.at("d_min").get<double>();
  m.d_max = j.at("d_max").get<double>();
  m.h = j.at("h").get<int>();
  m.w = j.at("w").get<int>();
  m.split = j.at("split").get<std::string>();
  for (const auto& e : j.at("samples")) {
    m.samples.push_back({e.at("image").get<std::string>(), e.at("depth").get<std::string>()});
  }
  expect(m.n >= 1, "load_manifest: dataset must have n >= 1");
  expect(static_cast<int>(m.samples.size()) == m.n,
         msg("load_manifest: sample list length ", m.samples.size(), " != n ", m.n));
  m.dir = path.parent_path();
  return m;
}

// Writes images as PPM, depths as PFM, plus manifest.json. Sample i is
// generated from seed ^ i.
inline DatasetManifest generate_dataset(std::uint64_t seed, int n, const SceneConfig& cfg,
                                        const std::filesystem::path& out_dir,
                                        const std::string& split = "train") {
  expect(n >= 1, "generate_dataset: n must be >= 1");
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  DatasetManifest m;
  m.n = n;
  m.d_min = cfg.d_min;
  m.d_max = cfg.d_max;
  m.h = cfg.h;
  m.w = cfg.w;
  m.split = split;
  m.dir = out_dir;
  m.samples.resize(static_cast<std::size_t>(n));
  parallel_for(n, [&](int i) {
    char img_name[32], dep_name[32];
    std::snprintf(img_name, sizeof img_name, "img_%05d.ppm", i);
    std::snprintf(dep_name, sizeof dep_name, "depth_%05d.pfm", i);
    const Sample s = generate_sample(seed ^ static_cast<std::uint64_t>(i), cfg);
    write_ppm(out_dir / img_name, s.image);
    write_pfm(out_dir / dep_name, s.depth);
    m.samples[static_cast<std::size_t>(i)] = {img_name, dep_name};
  });
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

// Valid pixels are those with finite positive depth; synthetic data is fully
// valid, externally supplied datasets may carry holes as zeros/negatives.
inline Sample load_sample(const DatasetManifest& m, int i) {
  expect(i >= 0 && i < m.n, msg("load_sample: index ", i, " out of range"));
  const auto& e = m.samples[static_cast<std::size_t>(i)];
  Sample s;
  s.image = read_ppm(m.dir / e.image);
  s.depth = read_pfm(m.dir / e.depth);
  expect(s.image.shape().h == s.depth.shape().h && s.image.shape().w == s.depth.shape().w,
         msg("load_sample: image/depth dims differ for ", e.image));
  s.valid = Tensor::zeros(s.depth.shape());
  for (long long px = 0; px < s.depth.size(); ++px) {
    const float d = s.depth.data()[static_cast<std::size_t>(px)];
    if (std::isfinite(d) && d > 0.f) s.valid.data()[static_cast<std::size_t>(px)] = 1.f;
  }
  return s;
}

inline std::vector<Sample> load_all(const DatasetManifest& m) {
  std::vector<Sample> out(static_cast<std::size_t>(m.n));
  parallel_for(m.n, [&](int i) { out[static_cast<std::size_t>(i)] = load_sample(m, i); });
  return out;
}

}  // namespace ddissect
