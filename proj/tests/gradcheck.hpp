#pragma once

// Central finite-difference gradient checker. Runs in float64: perturbs every
// element of every grad-requiring input by +-h, re-evaluates the loss without
// a tape, and compares against the reverse-mode gradient.

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "ddissect/tensor.hpp"

namespace ddtest {

using ddissect::Shape;
using ddissect::TapeT;
using ddissect::TensorT;

// Uniform values in [lo, hi]; values with |v| < kink_avoid are resampled so
// finite differences stay clear of non-smooth points (relu/abs at 0).
inline TensorT<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0,
                                     double hi = 1.0, double kink_avoid = 0.0,
                                     bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(static_cast<std::size_t>(s.size()));
  for (auto& v : values) {
    do {
      v = dist(rng);
    } while (kink_avoid > 0.0 && std::abs(v) < kink_avoid);
  }
  return TensorT<double>::from_data(s, std::move(values), requires_grad);
}

// fn(inputs, tape) must rebuild the same scalar loss graph on every call and
// read inputs by reference. tape == nullptr means forward-only.
template <class F>
void check_gradients(F&& fn, std::vector<TensorT<double>>& inputs, double h = 1e-3,
                     double tol = 1e-4) {
  for (auto& input : inputs) input.zero_grad();
  TapeT<double> tape;
  auto loss = fn(inputs, &tape);
  REQUIRE(loss.shape() == (Shape{1, 1, 1, 1}));
  tape.backward(loss);

  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& input = inputs[t];
    if (!input.requires_grad()) continue;
    REQUIRE(input.has_grad());
    std::vector<double> autodiff(input.grad().begin(), input.grad().end());
    auto values = input.data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double orig = values[j];
      auto eval = [&](double x) {
        values[j] = x;
        return fn(inputs, nullptr).data()[0];
      };
      // five-point central stencil, O(h^4) truncation
      auto fd_at = [&](double hh) {
        return (-eval(orig + 2 * hh) + 8 * eval(orig + hh) - 8 * eval(orig - hh) +
                eval(orig - 2 * hh)) /
               (12.0 * hh);
      };
      const double ad = autodiff[j];
      auto rel_err = [&](double fd) {
        return std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-6});
      };
      double fd = fd_at(h);
      double rel = rel_err(fd);
      // A disagreement caused by the stencil straddling a kink (|.| terms in
      // the losses) vanishes as h shrinks; a wrong gradient does not.
      for (double hh = h / 4.0; rel >= tol && hh >= h / 64.0; hh /= 4.0) {
        fd = fd_at(hh);
        rel = rel_err(fd);
      }
      values[j] = orig;
      INFO("input " << t << " element " << j << ": autodiff " << ad << " vs fd " << fd);
      REQUIRE(rel < tol);
    }
  }
}

}  // namespace ddtest
