#pragma once

// Evaluation procedures: threshold/error depth metrics, ordered unit
// ablation, response correction from a train-split table, FGSM input
// attacks, and attribution of adversarial error to assigned units.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddissect/bins.hpp"
#include "ddissect/dissect.hpp"
#include "ddissect/net.hpp"
#include "ddissect/ops.hpp"
#include "ddissect/parallel.hpp"
#include "ddissect/scene.hpp"
#include "ddissect/train.hpp"

namespace ddissect {

struct DepthMetrics {
  double delta1 = 0.0, delta2 = 0.0, delta3 = 0.0;  // accuracy under 1.25^i
  double rms = 0.0, rel = 0.0, log10 = 0.0;

  nlohmann::json to_json() const {
    return {{"delta_1.25", delta1}, {"delta_1.25^2", delta2}, {"delta_1.25^3", delta3},
            {"rms", rms},           {"rel", rel},             {"log10", log10}};
  }
};

// Pixel-level aggregation across any number of samples, float64 sums.
class MetricsAccumulator {
 public:
  void add(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
    expect(pred.shape() == gt.shape() && gt.shape() == valid.shape(),
           "depth_metrics: shape mismatch");
    auto pv = pred.data();
    auto gv = gt.data();
    auto mv = valid.data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (mv[i] != 1.f) continue;
      const double g = gv[i];
      expect(g > 0.0, "depth_metrics: gt must be positive on valid pixels");
      const double p = pv[i];
      expect(p > 0.0, "depth_metrics: predictions must be positive");
      const double ratio = std::max(p / g, g / p);
      d1_ += ratio < 1.25;
      d2_ += ratio < 1.25 * 1.25;
      d3_ += ratio < 1.25 * 1.25 * 1.25;
      se_ += (p - g) * (p - g);
      rel_ += std::abs(p - g) / g;
      log10_ += std::abs(std::log10(p) - std::log10(g));
      ++n_;
    }
  }

  void merge(const MetricsAccumulator& o) {
    d1_ += o.d1_;
    d2_ += o.d2_;
    d3_ += o.d3_;
    se_ += o.se_;
    rel_ += o.rel_;
    log10_ += o.log10_;
    n_ += o.n_;
  }

  DepthMetrics finalize() const {
    expect(n_ > 0, "depth_metrics: empty valid set");
    DepthMetrics m;
    const double n = static_cast<double>(n_);
    m.delta1 = d1_ / n;
    m.delta2 = d2_ / n;
    m.delta3 = d3_ / n;
    m.rms = std::sqrt(se_ / n);
    m.rel = rel_ / n;
    m.log10 = log10_ / n;
    return m;
  }

 private:
  long long d1_ = 0, d2_ = 0, d3_ = 0, n_ = 0;
  double se_ = 0.0, rel_ = 0.0, log10_ = 0.0;
};

inline DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  MetricsAccumulator acc;
  acc.add(pred, gt, valid);
  return acc.finalize();
}

// Parallel over samples, merged in sample order.
inline DepthMetrics evaluate_samples(const Network& net, const std::vector<Sample>& samples) {
  std::vector<MetricsAccumulator> parts(samples.size());
  parallel_for(static_cast<int>(samples.size()), [&](int i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    auto res = net.forward(s.image);
    parts[static_cast<std::size_t>(i)].add(res.pred, s.depth, s.valid);
  });
  MetricsAccumulator all;
  for (const auto& p : parts) all.merge(p);
  return all.finalize();
}

inline DepthMetrics evaluate_manifest(const Network& net, const DatasetManifest& data) {
  return evaluate_samples(net, load_all(data));
}

// --- ordered ablation --------------------------------------------------------

struct AblationCurve {
  std::string layer;
  bool descending = true;       // true: most selective units ablated first
  std::vector<int> order;       // unit ids in ablation order
  std::vector<double> delta1;   // step t = t units ablated; size K+1

  nlohmann::json to_json() const {
    return {{"layer", layer},
            {"order", descending ? "descending" : "ascending"},
            {"units", order},
            {"delta1", delta1}};
  }
  std::string to_csv() const {
    std::string out = "units_ablated,delta1\n";
    for (std::size_t t = 0; t < delta1.size(); ++t) out += msg(t, ",", delta1[t], "\n");
    return out;
  }
  double area() const {
    double a = 0.0;
    for (std::size_t t = 1; t < delta1.size(); ++t) a += 0.5 * (delta1[t - 1] + delta1[t]);
    return a;
  }
};

// Units sorted by report DS (ties toward the lower unit id), zeroed
// cumulatively; accuracy recorded after each step. Step 0 is the unablated
// model.
inline AblationCurve ablation_curve(const Network& net, const std::vector<Sample>& samples,
                                    const std::string& layer, const SelectivityReport& report,
                                    bool descending) {
  const int K = net.config().unit_count(layer);
  expect(static_cast<int>(report.units.size()) == K,
         msg("ablation_curve: report covers ", report.units.size(), " units, layer has ", K));
  expect(!samples.empty(), "ablation_curve: no samples");

  AblationCurve curve;
  curve.layer = layer;
  curve.descending = descending;
  curve.order.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) curve.order[static_cast<std::size_t>(k)] = k;
  std::stable_sort(curve.order.begin(), curve.order.end(), [&](int a, int b) {
    const double da = report.units[static_cast<std::size_t>(a)].ds;
    const double db = report.units[static_cast<std::size_t>(b)].ds;
    return descending ? da > db : da < db;
  });

  // cache each sample's activation once; zero one more channel per step
  std::vector<Tensor> acts(samples.size());
  parallel_for(static_cast<int>(samples.size()), [&](int i) {
    auto res = net.forward(samples[static_cast<std::size_t>(i)].image, {layer});
    acts[static_cast<std::size_t>(i)] = res.activations.at(layer).clone();
  });

  curve.delta1.resize(static_cast<std::size_t>(K) + 1);
  for (int step = 0; step <= K; ++step) {
    if (step > 0) {
      const int unit = curve.order[static_cast<std::size_t>(step - 1)];
      for (auto& act : acts) {
        const Shape& s = act.shape();
        float* plane = act.data().data() + static_cast<long long>(unit) * s.h * s.w;
        std::fill(plane, plane + static_cast<long long>(s.h) * s.w, 0.f);
      }
    }
    std::vector<MetricsAccumulator> parts(samples.size());
    parallel_for(static_cast<int>(samples.size()), [&](int i) {
      const auto& s = samples[static_cast<std::size_t>(i)];
      auto pred = net.forward_from(layer, acts[static_cast<std::size_t>(i)]);
      parts[static_cast<std::size_t>(i)].add(pred, s.depth, s.valid);
    });
    MetricsAccumulator all;
    for (const auto& p : parts) all.merge(p);
    curve.delta1[static_cast<std::size_t>(step)] = all.finalize().delta1;
  }
  return curve;
}

// --- correction --------------------------------------------------------------

struct CorrectionResult {
  DepthMetrics before, after;

  nlohmann::json to_json() const {
    return {{"before", before.to_json()}, {"after", after.to_json()}};
  }
};

// Replaces every pixel of unit k's map by the unit's train-split average
// response on the pixel's ground-truth bin (nearest-resized to the layer
// resolution); bins undefined in the table leave the activation untouched.
inline CorrectionResult correct_responses(const Network& net,
                                          const std::vector<Sample>& test_samples,
                                          const std::string& layer,
                                          const ResponseTable& train_table,
                                          const BinningScheme& scheme) {
  expect(train_table.units() == net.config().unit_count(layer),
         "correct_responses: table unit count mismatch");
  expect(train_table.n_bins() == scheme.n_bins, "correct_responses: table bin count mismatch");
  expect(!test_samples.empty(), "correct_responses: no samples");

  std::vector<MetricsAccumulator> before_parts(test_samples.size());
  std::vector<MetricsAccumulator> after_parts(test_samples.size());
  parallel_for(static_cast<int>(test_samples.size()), [&](int i) {
    const auto& s = test_samples[static_cast<std::size_t>(i)];
    auto res = net.forward(s.image, {layer});
    before_parts[static_cast<std::size_t>(i)].add(res.pred, s.depth, s.valid);

    const Tensor& act = res.activations.at(layer);
    const Shape& as = act.shape();
    Tensor gt_small = ops::resize_nearest(s.depth, as.h, as.w);
    Tensor valid_small = ops::resize_nearest(s.valid, as.h, as.w);
    const BinMap bins = discretize(gt_small, valid_small, scheme);

    Tensor corrected = act.clone();
    const long long plane = static_cast<long long>(as.h) * as.w;
    for (long long px = 0; px < plane; ++px) {
      const int d = bins.bins[static_cast<std::size_t>(px)];
      if (d < 0 || !train_table.defined(d)) continue;
      for (int k = 0; k < as.c; ++k)
        corrected.data()[static_cast<std::size_t>(k * plane + px)] =
            static_cast<float>(train_table.response(k, d));
    }
    auto pred_after = net.forward_from(layer, corrected);
    after_parts[static_cast<std::size_t>(i)].add(pred_after, s.depth, s.valid);
  });

  MetricsAccumulator before_all, after_all;
  for (std::size_t i = 0; i < test_samples.size(); ++i) {
    before_all.merge(before_parts[i]);
    after_all.merge(after_parts[i]);
  }
  return {before_all.finalize(), after_all.finalize()};
}

// --- FGSM ---------------------------------------------------------------------

// x' = clip(x + eps * sign(d base_loss / d x), 0, 1); infinity norm of the
// perturbation never exceeds eps.
inline Sample fgsm_attack(const Network& net, const Sample& sample, double eps) {
  expect(eps >= 0.0, "fgsm_attack: eps must be >= 0");
  Tensor x = sample.image.clone();
  x.set_requires_grad(true);
  Tape tape;
  auto res = net.forward(x, {}, &tape);
  auto loss = base_depth_loss(res.pred, sample.depth, sample.valid, &tape);
  tape.backward(loss);

  const float e = static_cast<float>(eps);
  Sample adv;
  adv.image = Tensor::zeros(x.shape());
  auto xv = sample.image.data();
  auto gv = x.grad();
  auto av = adv.image.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const float sign = gv[i] > 0.f ? 1.f : (gv[i] < 0.f ? -1.f : 0.f);
    float v = std::min(std::max(xv[i] + e * sign, 0.f), 1.f);
    // x + e rounds; pull back by ulps so the infinity-norm bound holds exactly
    while (std::abs(v - xv[i]) > e) v = std::nextafterf(v, xv[i]);
    av[i] = v;
  }
  adv.depth = sample.depth;
  adv.valid = sample.valid;
  return adv;
}

// --- adversarial error attribution --------------------------------------------

struct AttributionBin {
  int bin = -1;
  double error_share = 0.0;
  std::vector<int> units;    // units assigned to this bin
  double mean_iou = 0.0;     // assigned-unit activation vs error-in-bin mask
  double random_iou = 0.0;   // control: units not assigned to this bin
};

struct AttributionReport {
  double error_fraction = 0.0;  // errors / valid pixels
  std::vector<AttributionBin> bins;

  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& b : bins)
      arr.push_back({{"bin", b.bin},
                     {"error_share", b.error_share},
                     {"units", b.units},
                     {"mean_iou", b.mean_iou},
                     {"random_iou", b.random_iou}});
    return {{"error_fraction", error_fraction}, {"bins", arr}};
  }
};

namespace eval_detail {

// IoU between {|a| >= 0.5 max|a|} and a binary target mask.
inline double unit_iou(const Tensor& act_resized, int unit, const std::vector<char>& target) {
  const Shape& s = act_resized.shape();
  const long long plane = static_cast<long long>(s.h) * s.w;
  const float* a = act_resized.data().data() + static_cast<long long>(unit) * plane;
  float peak = 0.f;
  for (long long i = 0; i < plane; ++i) peak = std::max(peak, std::abs(a[i]));
  long long inter = 0, uni = 0;
  for (long long i = 0; i < plane; ++i) {
    const bool on = peak > 0.f && std::abs(a[i]) >= 0.5f * peak;
    const bool t = target[static_cast<std::size_t>(i)] != 0;
    inter += on && t;
    uni += on || t;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace eval_detail

// Errors are valid pixels with max(pred/gt, gt/pred) >= 1.25. Shares are
// computed per predicted-depth bin; for the top bins, the assigned units'
// magnitude maps (resized to prediction size, thresholded at half peak) are
// compared against the error-in-bin mask by IoU, with a random non-assigned
// unit control.
inline AttributionReport error_unit_attribution(const Network& net, const Sample& adv,
                                                const std::string& layer,
                                                const AssignmentTable& assignments,
                                                const BinningScheme& scheme, std::uint64_t seed,
                                                int top_n = 3) {
  expect(!assignments.empty(), "error_unit_attribution: needs an assignment table");
  const std::vector<int>& row = assignments.row(layer);
  auto res = net.forward(adv.image, {layer});
  const Shape& ps = res.pred.shape();
  const long long plane = static_cast<long long>(ps.h) * ps.w;

  std::vector<char> error(static_cast<std::size_t>(plane), 0);
  long long n_valid = 0, n_err = 0;
  for (long long i = 0; i < plane; ++i) {
    if (adv.valid.data()[static_cast<std::size_t>(i)] != 1.f) continue;
    ++n_valid;
    const double g = adv.depth.data()[static_cast<std::size_t>(i)];
    expect(g > 0.0, "error_unit_attribution: gt must be positive on valid pixels");
    const double p = res.pred.data()[static_cast<std::size_t>(i)];
    if (std::max(p / g, g / p) >= 1.25) {
      error[static_cast<std::size_t>(i)] = 1;
      ++n_err;
    }
  }
  AttributionReport report;
  report.error_fraction = n_valid == 0 ? 0.0 : static_cast<double>(n_err) / n_valid;
  if (n_err == 0) return report;

  const BinMap pred_bins = discretize(res.pred, adv.valid, scheme);
  std::vector<long long> per_bin(static_cast<std::size_t>(scheme.n_bins), 0);
  for (long long i = 0; i < plane; ++i)
    if (error[static_cast<std::size_t>(i)])
      ++per_bin[static_cast<std::size_t>(pred_bins.bins[static_cast<std::size_t>(i)])];

  std::vector<int> bins_by_share;
  for (int d = 0; d < scheme.n_bins; ++d)
    if (per_bin[static_cast<std::size_t>(d)] > 0) bins_by_share.push_back(d);
  std::stable_sort(bins_by_share.begin(), bins_by_share.end(), [&](int a, int b) {
    return per_bin[static_cast<std::size_t>(a)] > per_bin[static_cast<std::size_t>(b)];
  });
  if (static_cast<int>(bins_by_share.size()) > top_n) bins_by_share.resize(static_cast<std::size_t>(top_n));

  const Tensor act_abs = ops::absval(res.activations.at(layer));
  const Tensor act_resized = ops::resize_bilinear(act_abs, ps.h, ps.w);
  const int K = act_resized.shape().c;
  std::mt19937_64 rng(seed);

  for (int d : bins_by_share) {
    AttributionBin entry;
    entry.bin = d;
    entry.error_share = static_cast<double>(per_bin[static_cast<std::size_t>(d)]) / n_err;
    std::vector<char> target(static_cast<std::size_t>(plane), 0);
    for (long long i = 0; i < plane; ++i)
      target[static_cast<std::size_t>(i)] =
          error[static_cast<std::size_t>(i)] && pred_bins.bins[static_cast<std::size_t>(i)] == d;

    std::vector<int> others;
    for (int k = 0; k < K; ++k) {
      if (row[static_cast<std::size_t>(k)] == d)
        entry.units.push_back(k);
      else
        others.push_back(k);
    }
    double acc = 0.0;
    for (int k : entry.units) acc += eval_detail::unit_iou(act_resized, k, target);
    entry.mean_iou = entry.units.empty() ? 0.0 : acc / static_cast<double>(entry.units.size());

    if (!others.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
      double racc = 0.0;
      const int draws = 5;
      for (int t = 0; t < draws; ++t)
        racc += eval_detail::unit_iou(act_resized, others[pick(rng)], target);
      entry.random_iou = racc / draws;
    }
    report.bins.push_back(entry);
  }
  return report;
}

}  // namespace ddissect
