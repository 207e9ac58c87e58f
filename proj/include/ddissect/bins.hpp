#pragma once

// Depth discretization: bin schemes (uniform and space-increasing/log-spaced),
// per-pixel bin index maps, and per-bin masks.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddissect/tensor.hpp"

namespace ddissect {

struct BinningScheme {
  std::string kind;           // "uniform" | "sid"
  std::vector<double> edges;  // n_bins + 1 strictly increasing values, meters
  int n_bins = 0;

  double d_min() const { return edges.front(); }
  double d_max() const { return edges.back(); }

  // Space-increasing discretization: log-spaced edges
  // edges[i] = exp(log d_min + (i/n) * log(d_max/d_min)), endpoints pinned.
  static BinningScheme sid(double d_min, double d_max, int n_bins) {
    expect(d_min > 0.0, "sid bins: d_min must be positive");
    expect(d_min < d_max, "sid bins: d_min must be < d_max");
    expect(n_bins >= 2, "sid bins: need at least 2 bins");
    BinningScheme s;
    s.kind = "sid";
    s.n_bins = n_bins;
    s.edges.resize(static_cast<std::size_t>(n_bins) + 1);
    const double lo = std::log(d_min);
    const double span = std::log(d_max / d_min);
    for (int i = 1; i < n_bins; ++i)
      s.edges[static_cast<std::size_t>(i)] = std::exp(lo + span * i / n_bins);
    s.edges.front() = d_min;
    s.edges.back() = d_max;
    return s;
  }

  static BinningScheme uniform(double d_min, double d_max, int n_bins) {
    expect(d_min < d_max, "uniform bins: d_min must be < d_max");
    expect(n_bins >= 2, "uniform bins: need at least 2 bins");
    BinningScheme s;
    s.kind = "uniform";
    s.n_bins = n_bins;
    s.edges.resize(static_cast<std::size_t>(n_bins) + 1);
    for (int i = 1; i < n_bins; ++i)
      s.edges[static_cast<std::size_t>(i)] = d_min + (d_max - d_min) * i / n_bins;
    s.edges.front() = d_min;
    s.edges.back() = d_max;
    return s;
  }

  static BinningScheme make(const std::string& kind, double d_min, double d_max, int n_bins) {
    if (kind == "sid") return sid(d_min, d_max, n_bins);
    if (kind == "uniform") return uniform(d_min, d_max, n_bins);
    fail(msg("unknown binning kind '", kind, "'"));
  }

  // Left-closed / right-open intervals, last bin closed; out-of-range depths
  // clamp to the end bins.
  int bin_of(double depth) const {
    if (depth <= edges.front()) return 0;
    if (depth >= edges.back()) return n_bins - 1;
    const auto it = std::upper_bound(edges.begin(), edges.end(), depth);
    return static_cast<int>(it - edges.begin()) - 1;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"kind", kind}, {"edges", edges}};
  }
  static BinningScheme from_json(const nlohmann::json& j) {
    BinningScheme s;
    s.kind = j.at("kind").get<std::string>();
    s.edges = j.at("edges").get<std::vector<double>>();
    expect(s.edges.size() >= 3, "binning scheme: need at least 2 bins");
    for (std::size_t i = 1; i < s.edges.size(); ++i)
      expect(s.edges[i] > s.edges[i - 1], "binning scheme: edges must be strictly increasing");
    s.n_bins = static_cast<int>(s.edges.size()) - 1;
    return s;
  }
};

// Per-pixel bin indices for one sample; -1 marks invalid pixels.
struct BinMap {
  int h = 0, w = 0;
  std::vector<int> bins;

  int at(int y, int x) const { return bins[static_cast<std::size_t>(y) * w + x]; }
};

template <class S>
BinMap discretize(const TensorT<S>& depth, const TensorT<S>& valid_mask,
                  const BinningScheme& scheme) {
  const Shape& s = depth.shape();
  expect(s.n == 1 && s.c == 1, "discretize: depth must be a (1,1,H,W) map");
  expect(valid_mask.shape() == s, "discretize: mask shape mismatch");
  BinMap out;
  out.h = s.h;
  out.w = s.w;
  out.bins.resize(static_cast<std::size_t>(s.h) * s.w, -1);
  auto dv = depth.data();
  auto mv = valid_mask.data();
  for (std::size_t i = 0; i < out.bins.size(); ++i) {
    if (mv[i] == S(0)) continue;
    const double d = static_cast<double>(dv[i]);
    expect(std::isfinite(d), "discretize: non-finite depth at valid pixel");
    out.bins[i] = scheme.bin_of(d);
  }
  return out;
}

template <class S = float>
TensorT<S> bin_mask(const BinMap& bins, int d) {
  TensorT<S> m = TensorT<S>::zeros({1, 1, bins.h, bins.w});
  auto mv = m.data();
  for (std::size_t i = 0; i < bins.bins.size(); ++i)
    if (bins.bins[i] == d) mv[i] = S(1);
  return m;
}

}  // namespace ddissect
