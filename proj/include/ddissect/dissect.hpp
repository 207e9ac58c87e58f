#pragma once

// Unit dissection: per-(unit, bin) average responses accumulated over a
// dataset, the depth-selectivity index derived from them, and the
// uniform-random selectivity baseline.

#include <algorithm>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddissect/bins.hpp"
#include "ddissect/ops.hpp"
#include "ddissect/tensor.hpp"

namespace ddissect {

// Running sums realizing the average response of unit k on bin d: activation
// mass (float64) over pixel mass. Pixel counts are unit-independent, so one
// count per bin is stored.
class ResponseTable {
 public:
  ResponseTable() = default;
  ResponseTable(std::string layer, int units, int n_bins)
      : layer_(std::move(layer)),
        units_(units),
        n_bins_(n_bins),
        sums_(static_cast<std::size_t>(units) * n_bins, 0.0),
        counts_(static_cast<std::size_t>(n_bins), 0) {
    expect(units >= 1 && n_bins >= 2, "response table: need units >= 1, bins >= 2");
  }

  const std::string& layer() const { return layer_; }
  int units() const { return units_; }
  int n_bins() const { return n_bins_; }

  // One sample: activation (1,K,h,w) is bilinearly resized to the bin map's
  // resolution; invalid pixels (bin -1) are excluded.
  void accumulate(const Tensor& act, const BinMap& bins) {
    expect(act.shape().n == 1, "accumulate: one sample at a time");
    expect(act.shape().c == units_,
           msg("accumulate: activation has ", act.shape().c, " units, table has ", units_));
    const Tensor resized = ops::resize_bilinear(act, bins.h, bins.w);
    const long long plane = static_cast<long long>(bins.h) * bins.w;
    for (long long px = 0; px < plane; ++px) {
      const int d = bins.bins[static_cast<std::size_t>(px)];
      if (d >= 0) {
        expect(d < n_bins_, "accumulate: bin index out of range");
        ++counts_[static_cast<std::size_t>(d)];
      }
    }
    for (int k = 0; k < units_; ++k) {
      const float* pk = resized.data().data() + static_cast<long long>(k) * plane;
      double* row = sums_.data() + static_cast<std::size_t>(k) * n_bins_;
      for (long long px = 0; px < plane; ++px) {
        const int d = bins.bins[static_cast<std::size_t>(px)];
        if (d >= 0) row[d] += static_cast<double>(pk[px]);
      }
    }
  }

  void merge(const ResponseTable& other) {
    expect(other.units_ == units_ && other.n_bins_ == n_bins_ && other.layer_ == layer_,
           "merge: table layout mismatch");
    for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  bool defined(int d) const { return counts_[static_cast<std::size_t>(d)] > 0; }
  std::uint64_t count(int /*k*/, int d) const { return counts_[static_cast<std::size_t>(d)]; }

  double response(int k, int d) const {
    expect(defined(d), msg("response: bin ", d, " has no pixels"));
    return sums_[static_cast<std::size_t>(k) * n_bins_ + d] /
           static_cast<double>(counts_[static_cast<std::size_t>(d)]);
  }
  double response_sum(int k, int d) const {
    return sums_[static_cast<std::size_t>(k) * n_bins_ + d];
  }

  // |R| over defined bins for one unit, with the bin ids alongside.
  std::pair<std::vector<double>, std::vector<int>> abs_responses(int k) const {
    std::vector<double> vals;
    std::vector<int> ids;
    for (int d = 0; d < n_bins_; ++d) {
      if (!defined(d)) continue;
      vals.push_back(std::abs(response(k, d)));
      ids.push_back(d);
    }
    return {std::move(vals), std::move(ids)};
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["layer"] = layer_;
    j["units"] = units_;
    j["n_bins"] = n_bins_;
    auto rows = nlohmann::json::array();
    for (int k = 0; k < units_; ++k) {
      rows.push_back(std::vector<double>(sums_.begin() + static_cast<long>(k) * n_bins_,
                                         sums_.begin() + static_cast<long>(k + 1) * n_bins_));
    }
    j["sums"] = rows;
    j["counts"] = counts_;
    return j;
  }

  static ResponseTable from_json(const nlohmann::json& j) {
    ResponseTable t(j.at("layer").get<std::string>(), j.at("units").get<int>(),
                    j.at("n_bins").get<int>());
    const auto& rows = j.at("sums");
    expect(static_cast<int>(rows.size()) == t.units_, "response table json: bad sums");
    for (int k = 0; k < t.units_; ++k) {
      const auto row = rows[static_cast<std::size_t>(k)].get<std::vector<double>>();
      expect(static_cast<int>(row.size()) == t.n_bins_, "response table json: bad sums row");
      std::copy(row.begin(), row.end(), t.sums_.begin() + static_cast<long>(k) * t.n_bins_);
    }
    t.counts_ = j.at("counts").get<std::vector<std::uint64_t>>();
    expect(static_cast<int>(t.counts_.size()) == t.n_bins_, "response table json: bad counts");
    return t;
  }

 private:
  std::string layer_;
  int units_ = 0, n_bins_ = 0;
  std::vector<double> sums_;
  std::vector<std::uint64_t> counts_;
};

// Depth selectivity of one unit from its per-bin response magnitudes:
// (|R|_max - mean of the other |R|) / (|R|_max + mean of the other |R|).
// Collapsed (all-zero) units score 0; ties at the max break toward the lowest
// bin index. Needs at least two defined bins.
inline double selectivity(std::span<const double> responses) {
  expect(responses.size() >= 2, "selectivity: insufficient bins");
  std::size_t arg = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const double a = std::abs(responses[i]);
    if (a > best) {
      best = a;
      arg = i;
    }
  }
  double others = 0.0;
  for (std::size_t i = 0; i < responses.size(); ++i)
    if (i != arg) others += std::abs(responses[i]);
  const double mean_others = others / static_cast<double>(responses.size() - 1);
  const double denom = best + mean_others;
  if (denom == 0.0) return 0.0;
  return (best - mean_others) / denom;
}

inline std::size_t selectivity_argmax(std::span<const double> responses) {
  expect(!responses.empty(), "selectivity_argmax: empty responses");
  std::size_t arg = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const double a = std::abs(responses[i]);
    if (a > best) {
      best = a;
      arg = i;
    }
  }
  return arg;
}

// Monte Carlo estimate of E[DS] for i.i.d. uniform responses on [0, b]. DS is
// scale-invariant, so the estimate is computed from U(0,1) draws and b only
// validated; identical seeds give bit-identical estimates for any b.
inline double random_baseline(int n_bins, int trials, double b, std::uint64_t seed) {
  expect(n_bins >= 2, "random_baseline: need at least 2 bins");
  expect(trials >= 1000, "random_baseline: need at least 1000 trials");
  expect(b > 0.0, "random_baseline: b must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> r(static_cast<std::size_t>(n_bins));
  double acc = 0.0;
  for (int t = 0; t < trials; ++t) {
    for (auto& v : r) v = unit(rng);
    acc += selectivity(r);
  }
  return acc / trials;
}

struct UnitStats {
  int unit = 0;
  double ds = 0.0;
  int argmax_bin = 0;
  int assigned_bin = -1;
  double r_max_abs = 0.0;
  double r_other_mean = 0.0;
};

struct SelectivityReport {
  std::string layer;
  std::string split;
  int n_bins = 0;
  double mean_ds = 0.0;
  std::vector<UnitStats> units;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["layer"] = layer;
    j["split"] = split;
    j["n_bins"] = n_bins;
    j["mean_ds"] = mean_ds;
    auto arr = nlohmann::json::array();
    for (const auto& u : units)
      arr.push_back({{"unit", u.unit},
                     {"ds", u.ds},
                     {"argmax_bin", u.argmax_bin},
                     {"assigned_bin", u.assigned_bin},
                     {"r_max_abs", u.r_max_abs},
                     {"r_other_mean", u.r_other_mean}});
    j["units"] = arr;
    return j;
  }

  static SelectivityReport from_json(const nlohmann::json& j) {
    SelectivityReport r;
    r.layer = j.at("layer").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.n_bins = j.at("n_bins").get<int>();
    r.mean_ds = j.at("mean_ds").get<double>();
    for (const auto& u : j.at("units"))
      r.units.push_back({u.at("unit").get<int>(), u.at("ds").get<double>(),
                         u.at("argmax_bin").get<int>(), u.at("assigned_bin").get<int>(),
                         u.at("r_max_abs").get<double>(), u.at("r_other_mean").get<double>()});
    return r;
  }

  std::string to_csv() const {
    std::string out = "unit,DS,argmax_bin,assigned_bin\n";
    for (const auto& u : units)
      out += msg(u.unit, ",", u.ds, ",", u.argmax_bin, ",", u.assigned_bin, "\n");
    return out;
  }
};

// Bins with zero pixel count are excluded from both the max and the mean.
inline SelectivityReport build_report(const ResponseTable& table,
                                      const std::vector<int>* assignments,
                                      const std::string& split) {
  if (assignments)
    expect(static_cast<int>(assignments->size()) == table.units(),
           "build_report: assignment list length mismatch");
  SelectivityReport rep;
  rep.layer = table.layer();
  rep.split = split;
  rep.n_bins = table.n_bins();
  double total = 0.0;
  for (int k = 0; k < table.units(); ++k) {
    auto [vals, ids] = table.abs_responses(k);
    UnitStats u;
    u.unit = k;
    u.ds = selectivity(vals);
    const std::size_t arg = selectivity_argmax(vals);
    u.argmax_bin = ids[arg];
    u.r_max_abs = vals[arg];
    double others = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i)
      if (i != arg) others += vals[i];
    u.r_other_mean = others / static_cast<double>(vals.size() - 1);
    u.assigned_bin = assignments ? (*assignments)[static_cast<std::size_t>(k)] : -1;
    total += u.ds;
    rep.units.push_back(u);
  }
  rep.mean_ds = total / table.units();
  return rep;
}

}  // namespace ddissect
