#pragma once

// Training: depth-to-unit assignment, batch-wise differentiable responses,
// the two selectivity losses (direct regularization and assignment), a plain
// L1 depth loss, Adam, and the fit loop.

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddissect/bins.hpp"
#include "ddissect/dissect.hpp"
#include "ddissect/net.hpp"
#include "ddissect/ops.hpp"
#include "ddissect/scene.hpp"
#include "ddissect/tensor.hpp"

namespace ddissect {

// Bin assigned to unit k of a K-unit layer. The effective bin count drops to
// K when K < n_bins so every bin keeps at least one unit; floor(k*N'/K)
// stays total when K is not a multiple of N' and reduces to floor(k/(K/N'))
// when it is.
inline std::vector<int> assign_bins(int units, int n_bins) {
  expect(units >= 2, "assign_bins: need at least 2 units");
  expect(n_bins >= 2, "assign_bins: need at least 2 bins");
  const long long eff = std::min(n_bins, units);
  std::vector<int> d(static_cast<std::size_t>(units));
  for (long long k = 0; k < units; ++k)
    d[static_cast<std::size_t>(k)] = static_cast<int>(k * eff / units);
  return d;
}

struct AssignmentTable {
  int n_bins = 0;  // requested bin count; per-layer effective counts may be lower
  std::map<std::string, std::vector<int>> by_layer;

  bool empty() const { return by_layer.empty(); }

  const std::vector<int>& row(const std::string& layer) const {
    auto it = by_layer.find(layer);
    expect(it != by_layer.end(), msg("assignment table: no layer '", layer, "'"));
    return it->second;
  }

  static AssignmentTable build(const NetConfig& cfg, const std::vector<std::string>& layers,
                               int n_bins) {
    AssignmentTable t;
    t.n_bins = n_bins;
    for (const auto& l : layers) t.by_layer[l] = assign_bins(cfg.unit_count(l), n_bins);
    return t;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n_bins"] = n_bins;
    j["by_layer"] = by_layer;
    return j;
  }
  static AssignmentTable from_json(const nlohmann::json& j) {
    AssignmentTable t;
    t.n_bins = j.at("n_bins").get<int>();
    t.by_layer = j.at("by_layer").get<std::map<std::string, std::vector<int>>>();
    return t;
  }
};

// Per-(unit, bin) average response evaluated over one batch only,
// differentiable w.r.t. the activations. Bins absent in the batch are flagged
// and hold response 0.
template <class S>
struct BatchResponsesT {
  std::string layer;
  TensorT<S> r;                   // (1, K, n_bins, 1)
  std::vector<char> present;      // n_bins
  std::vector<long long> counts;  // n_bins, batch pixel mass
};

using BatchResponses = BatchResponsesT<float>;

template <class S>
BatchResponsesT<S> batch_bin_responses(const std::string& layer, const TensorT<S>& act,
                                       const std::vector<BinMap>& bins, int n_bins,
                                       TapeT<S>* tape = nullptr) {
  const int B = act.shape().n;
  const int K = act.shape().c;
  expect(static_cast<int>(bins.size()) == B, "batch_bin_responses: one bin map per sample");
  expect(n_bins >= 2, "batch_bin_responses: need at least 2 bins");
  for (const auto& b : bins)
    expect(b.h == bins[0].h && b.w == bins[0].w, "batch_bin_responses: bin map dims differ");

  TensorT<S> resized = ops::resize_bilinear(act, bins[0].h, bins[0].w, tape);
  const long long plane = static_cast<long long>(bins[0].h) * bins[0].w;

  BatchResponsesT<S> out;
  out.layer = layer;
  out.counts.assign(static_cast<std::size_t>(n_bins), 0);
  std::vector<double> sums(static_cast<std::size_t>(K) * n_bins, 0.0);
  for (int i = 0; i < B; ++i) {
    const auto& bm = bins[static_cast<std::size_t>(i)].bins;
    for (long long px = 0; px < plane; ++px) {
      const int d = bm[static_cast<std::size_t>(px)];
      if (d < 0) continue;
      expect(d < n_bins, "batch_bin_responses: bin index out of range");
      ++out.counts[static_cast<std::size_t>(d)];
    }
    for (int k = 0; k < K; ++k) {
      const S* pk = resized.data().data() + (static_cast<long long>(i) * K + k) * plane;
      double* row = sums.data() + static_cast<std::size_t>(k) * n_bins;
      for (long long px = 0; px < plane; ++px) {
        const int d = bm[static_cast<std::size_t>(px)];
        if (d >= 0) row[d] += static_cast<double>(pk[px]);
      }
    }
  }
  out.present.assign(static_cast<std::size_t>(n_bins), 0);
  out.r = TensorT<S>::zeros({1, K, n_bins, 1});
  for (int d = 0; d < n_bins; ++d) {
    if (out.counts[static_cast<std::size_t>(d)] == 0) continue;
    out.present[static_cast<std::size_t>(d)] = 1;
    for (int k = 0; k < K; ++k)
      out.r.data()[static_cast<std::size_t>(k) * n_bins + d] = static_cast<S>(
          sums[static_cast<std::size_t>(k) * n_bins + d] /
          static_cast<double>(out.counts[static_cast<std::size_t>(d)]));
  }

  if (tape && resized.requires_grad()) {
    out.r.set_requires_grad(true);
    auto bins_copy = std::make_shared<std::vector<BinMap>>(bins);
    auto counts = out.counts;
    auto r = out.r;
    tape->record("batch_bin_responses", r,
                 [resized = resized, r, bins_copy, counts, B, K, plane, n_bins]() mutable {
                   if (!r.has_grad()) return;
                   auto gr = r.grad();
                   auto dact = resized.grad_buffer();
                   for (int i = 0; i < B; ++i) {
                     const auto& bm = (*bins_copy)[static_cast<std::size_t>(i)].bins;
                     for (int k = 0; k < K; ++k) {
                       S* drow = dact.data() + (static_cast<long long>(i) * K + k) * plane;
                       const S* grow = gr.data() + static_cast<std::size_t>(k) * n_bins;
                       for (long long px = 0; px < plane; ++px) {
                         const int d = bm[static_cast<std::size_t>(px)];
                         if (d < 0) continue;
                         drow[px] += static_cast<S>(
                             static_cast<double>(grow[d]) /
                             static_cast<double>(counts[static_cast<std::size_t>(d)]));
                       }
                     }
                   }
                 });
  }
  return out;
}

namespace train_detail {

template <class S>
int sign_of(S v) {
  return v > S(0) ? 1 : (v < S(0) ? -1 : 0);
}

// Mean over eligible units of the contrast term
// (|R[target]| - mean other present |R|) / (|R[target]| + mean other present |R|).
// With assignments: target = d_k, units whose d_k is absent are disregarded.
// Without: target = batch argmax over present bins (ties -> lowest bin).
// Returns a constant 0 scalar when no unit is eligible.
template <class S>
TensorT<S> unit_contrast_mean(const BatchResponsesT<S>& br, const std::vector<int>* assignments,
                              TapeT<S>* tape) {
  const int K = br.r.shape().c;
  const int n_bins = br.r.shape().h;
  if (assignments)
    expect(static_cast<int>(assignments->size()) == K,
           "unit_contrast_mean: assignment row length mismatch");
  std::vector<int> present_ids;
  for (int d = 0; d < n_bins; ++d)
    if (br.present[static_cast<std::size_t>(d)]) present_ids.push_back(d);

  struct UnitTerm {
    int unit;
    int target;
    double a, m, denom;
  };
  std::vector<UnitTerm> eligible;
  double total = 0.0;
  if (present_ids.size() >= 2) {
    for (int k = 0; k < K; ++k) {
      const S* row = br.r.data().data() + static_cast<std::size_t>(k) * n_bins;
      int target = -1;
      if (assignments) {
        const int dk = (*assignments)[static_cast<std::size_t>(k)];
        if (dk < 0 || dk >= n_bins || !br.present[static_cast<std::size_t>(dk)]) continue;
        target = dk;
      } else {
        double best = -1.0;
        for (int d : present_ids) {
          const double a = std::abs(static_cast<double>(row[d]));
          if (a > best) {
            best = a;
            target = d;
          }
        }
      }
      const double a = std::abs(static_cast<double>(row[target]));
      double others = 0.0;
      for (int d : present_ids)
        if (d != target) others += std::abs(static_cast<double>(row[d]));
      const double m = others / static_cast<double>(present_ids.size() - 1);
      const double denom = a + m;
      const double term = denom > 0.0 ? (a - m) / denom : 0.0;
      total += term;
      eligible.push_back({k, target, a, m, denom});
    }
  }
  if (eligible.empty()) return TensorT<S>::zeros({1, 1, 1, 1});

  const double mean = total / static_cast<double>(eligible.size());
  TensorT<S> out = TensorT<S>::from_data({1, 1, 1, 1}, {static_cast<S>(mean)});
  if (tape && br.r.requires_grad()) {
    out.set_requires_grad(true);
    auto terms = std::make_shared<std::vector<UnitTerm>>(std::move(eligible));
    auto ids = std::make_shared<std::vector<int>>(present_ids);
    tape->record("unit_contrast_mean", out, [r = br.r, out, terms, ids, n_bins]() mutable {
      if (!out.has_grad()) return;
      const double g = static_cast<double>(out.grad()[0]) / static_cast<double>(terms->size());
      auto dr = r.grad_buffer();
      auto rv = r.data();
      const double pm1 = static_cast<double>(ids->size() - 1);
      for (const auto& t : *terms) {
        if (t.denom <= 0.0) continue;
        const double da = 2.0 * t.m / (t.denom * t.denom);
        const double dm = -2.0 * t.a / (t.denom * t.denom);
        const std::size_t base = static_cast<std::size_t>(t.unit) * n_bins;
        dr[base + static_cast<std::size_t>(t.target)] +=
            static_cast<S>(g * da * sign_of(rv[base + static_cast<std::size_t>(t.target)]));
        for (int d : *ids) {
          if (d == t.target) continue;
          dr[base + static_cast<std::size_t>(d)] += static_cast<S>(
              g * (dm / pm1) * sign_of(rv[base + static_cast<std::size_t>(d)]));
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> layer_mean_scaled(std::vector<TensorT<S>>& layer_terms, double lambda,
                             TapeT<S>* tape) {
  TensorT<S> acc = layer_terms[0];
  for (std::size_t i = 1; i < layer_terms.size(); ++i) acc = ops::add(acc, layer_terms[i], tape);
  const double scale = -lambda / static_cast<double>(layer_terms.size());
  return ops::affine(acc, static_cast<S>(scale), S(0), tape);
}

}  // namespace train_detail

// Direct selectivity regularization: -lambda * mean over layers of mean over
// units of batch-wise DS, the max taken over bins present in the batch.
// Layers with fewer than two present bins contribute 0.
template <class S>
TensorT<S> reg_loss(const std::vector<BatchResponsesT<S>>& layers, double lambda,
                    TapeT<S>* tape = nullptr) {
  expect(!layers.empty(), "reg_loss: no layers");
  std::vector<TensorT<S>> terms;
  for (const auto& br : layers)
    terms.push_back(train_detail::unit_contrast_mean(br, nullptr, tape));
  return train_detail::layer_mean_scaled(terms, lambda, tape);
}

// Assignment loss: contrast against the assigned bin d_k; units whose d_k is
// absent from the batch are disregarded, layers with no eligible unit
// contribute 0.
template <class S>
TensorT<S> assign_loss(const std::vector<BatchResponsesT<S>>& layers,
                       const AssignmentTable& assignments, double lambda,
                       TapeT<S>* tape = nullptr) {
  expect(!layers.empty(), "assign_loss: no layers");
  std::vector<TensorT<S>> terms;
  for (const auto& br : layers)
    terms.push_back(train_detail::unit_contrast_mean(br, &assignments.row(br.layer), tape));
  return train_detail::layer_mean_scaled(terms, lambda, tape);
}

// Mean absolute depth error over valid pixels.
template <class S>
TensorT<S> base_depth_loss(const TensorT<S>& pred, const TensorT<S>& gt, const TensorT<S>& valid,
                           TapeT<S>* tape = nullptr) {
  return ops::reduce_mean(ops::absval(ops::sub(pred, gt, tape), tape), valid, tape);
}

template <class S>
class AdamT {
 public:
  AdamT(std::vector<TensorT<S>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto data = p.data();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = p.has_grad() ? static_cast<double>(p.grad()[j]) : 0.0;
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g;
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g * g;
        const double mhat = m_[i][j] / c1;
        const double vhat = v_[i][j] / c2;
        data[j] -= static_cast<S>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<TensorT<S>*> params_;
  double lr_, b1_, b2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

using Adam = AdamT<float>;

enum class TrainMode { baseline, regularize, assign };

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::baseline: return "baseline";
    case TrainMode::regularize: return "regularize";
    case TrainMode::assign: return "assign";
  }
  fail("bad mode");
}
inline TrainMode mode_from_name(const std::string& s) {
  if (s == "baseline") return TrainMode::baseline;
  if (s == "regularize") return TrainMode::regularize;
  if (s == "assign") return TrainMode::assign;
  fail(msg("unknown training mode '", s, "'"));
}

struct TrainConfig {
  TrainMode mode = TrainMode::baseline;
  double lambda = 0.1;
  std::vector<std::string> layers;  // empty -> config's interpretable_layers
  int n_bins = 64;
  std::string binning = "sid";
  int epochs = 30;
  int batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int ds_log_samples = 0;  // 0 = full train split in the per-epoch DS log

  void validate() const {
    expect(lambda >= 0.0, "train config: lambda must be >= 0");
    expect(epochs >= 1 && batch >= 1, "train config: epochs/batch must be >= 1");
    expect(lr > 0.0, "train config: lr must be positive");
    expect(n_bins >= 2, "train config: need at least 2 bins");
  }
};

struct EpochLog {
  int epoch = 0;
  double base_loss = 0.0;
  double lambda_term = 0.0;
  double train_mean_ds = 0.0;
};

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,base_loss,lambda_term,train_mean_DS\n";
  for (const auto& e : log)
    out += msg(e.epoch, ",", e.base_loss, ",", e.lambda_term, ",", e.train_mean_ds, "\n");
  return out;
}

struct FitResult {
  std::vector<EpochLog> log;
  AssignmentTable assignments;  // empty unless assign mode
  BinningScheme bins;
  std::vector<std::string> layers;
};

namespace train_detail {

inline void stack_batch(const std::vector<Sample>& samples, const std::vector<int>& order,
                        std::size_t begin, std::size_t end, Tensor& images, Tensor& depths,
                        Tensor& valids) {
  const int b = static_cast<int>(end - begin);
  const Shape is = samples[0].image.shape();
  const Shape ds = samples[0].depth.shape();
  images = Tensor::zeros({b, is.c, is.h, is.w});
  depths = Tensor::zeros({b, 1, ds.h, ds.w});
  valids = Tensor::zeros({b, 1, ds.h, ds.w});
  for (int i = 0; i < b; ++i) {
    const Sample& s = samples[static_cast<std::size_t>(order[begin + static_cast<std::size_t>(i)])];
    std::copy(s.image.data().begin(), s.image.data().end(),
              images.data().begin() + static_cast<long long>(i) * is.c * is.h * is.w);
    std::copy(s.depth.data().begin(), s.depth.data().end(),
              depths.data().begin() + static_cast<long long>(i) * ds.h * ds.w);
    std::copy(s.valid.data().begin(), s.valid.data().end(),
              valids.data().begin() + static_cast<long long>(i) * ds.h * ds.w);
  }
}

// Mean DS across the designated layers over the first `limit` samples.
inline double mean_ds_over(Network& net, const std::vector<Sample>& samples,
                           const std::vector<BinMap>& binmaps,
                           const std::vector<std::string>& layers, int n_bins, int limit) {
  const int n = std::min<int>(limit, static_cast<int>(samples.size()));
  std::vector<ResponseTable> tables;
  for (const auto& l : layers)
    tables.emplace_back(l, net.config().unit_count(l), n_bins);
  for (int i = 0; i < n; ++i) {
    auto res = net.forward(samples[static_cast<std::size_t>(i)].image, layers);
    for (std::size_t li = 0; li < layers.size(); ++li)
      tables[li].accumulate(res.activations.at(layers[li]), binmaps[static_cast<std::size_t>(i)]);
  }
  double acc = 0.0;
  for (auto& t : tables) acc += build_report(t, nullptr, "train").mean_ds;
  return acc / static_cast<double>(tables.size());
}

}  // namespace train_detail

// Adam training loop; deterministic in cfg.seed. Per-epoch log carries the
// mean base loss, the mean lambda-term value, and the train-split mean DS of
// the designated layers.
inline FitResult fit(Network& net, const DatasetManifest& data, const TrainConfig& cfg) {
  cfg.validate();
  expect(data.n >= 1, "fit: dataset is empty");
  const std::vector<Sample> samples = load_all(data);

  FitResult result;
  result.bins = BinningScheme::make(cfg.binning, data.d_min, data.d_max, cfg.n_bins);
  result.layers = cfg.layers.empty() ? net.config().interpretable_layers : cfg.layers;
  expect(!result.layers.empty(), "fit: no interpretable layers designated");
  for (const auto& l : result.layers) net.config().unit_count(l);  // existence check

  std::vector<BinMap> binmaps(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    binmaps[i] = discretize(samples[i].depth, samples[i].valid, result.bins);

  const bool use_lambda = cfg.mode != TrainMode::baseline && cfg.lambda != 0.0;
  if (cfg.mode == TrainMode::assign)
    result.assignments = AssignmentTable::build(net.config(), result.layers, cfg.n_bins);

  AdamT<float> opt(net.parameters(), cfg.lr);
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double base_acc = 0.0, lambda_acc = 0.0;
    int steps = 0;
    for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(samples.size(), begin + static_cast<std::size_t>(cfg.batch));
      Tensor images, depths, valids;
      train_detail::stack_batch(samples, order, begin, end, images, depths, valids);
      std::vector<BinMap> batch_bins;
      for (std::size_t i = begin; i < end; ++i)
        batch_bins.push_back(binmaps[static_cast<std::size_t>(order[i])]);

      Tape tape;
      auto fwd = net.forward(images, use_lambda ? result.layers : std::vector<std::string>{},
                             &tape);
      auto base = base_depth_loss(fwd.pred, depths, valids, &tape);
      Tensor total = base;
      double lambda_val = 0.0;
      if (use_lambda) {
        std::vector<BatchResponses> responses;
        for (const auto& l : result.layers)
          responses.push_back(batch_bin_responses(l, fwd.activations.at(l), batch_bins,
                                                  cfg.n_bins, &tape));
        Tensor term = cfg.mode == TrainMode::regularize
                          ? reg_loss(responses, cfg.lambda, &tape)
                          : assign_loss(responses, result.assignments, cfg.lambda, &tape);
        lambda_val = static_cast<double>(term.data()[0]);
        total = ops::add(base, term, &tape);
      }
      const double loss_val = static_cast<double>(total.data()[0]);
      expect(std::isfinite(loss_val),
             msg("fit: diverged (non-finite loss) at epoch ", epoch, " step ", steps,
                 "; try a lower learning rate"));
      tape.backward(total);
      opt.step();
      opt.zero_grad();
      tape.clear();
      base_acc += static_cast<double>(base.data()[0]);
      lambda_acc += lambda_val;
      ++steps;
    }

    EpochLog log;
    log.epoch = epoch;
    log.base_loss = base_acc / steps;
    log.lambda_term = lambda_acc / steps;
    log.train_mean_ds = train_detail::mean_ds_over(
        net, samples, binmaps, result.layers, cfg.n_bins,
        cfg.ds_log_samples > 0 ? cfg.ds_log_samples : static_cast<int>(samples.size()));
    result.log.push_back(log);
  }
  return result;
}

}  // namespace ddissect
