#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mshubert/rng.hpp"
#include "mshubert/tensor.hpp"

namespace testing {

using mshubert::Rng;
using mshubert::Shape;
using mshubert::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0, bool requires_grad = true) {
  std::vector<double> v(mshubert::shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
  return std::sqrt(diff) / denom;
}

// Analytic gradient of loss() w.r.t. x, from one taped backward pass.
inline std::vector<double> analytic_grad(const std::function<Tensor()>& loss, Tensor x) {
  x.zero_grad();
  mshubert::Tape tape;
  {
    mshubert::TapeScope scope(tape);
    const Tensor l = loss();
    tape.backward(l);
  }
  const auto g = x.grad();
  return {g.begin(), g.end()};
}

// Central differences at the given entries (all entries when `entries` is empty).
inline std::vector<double> numeric_grad(const std::function<Tensor()>& loss, Tensor x,
                                        const std::vector<std::size_t>& entries = {}, double h = 1e-5) {
  std::vector<std::size_t> idx = entries;
  if (idx.empty())
    for (std::size_t i = 0; i < x.numel(); ++i) idx.push_back(i);
  std::vector<double> out;
  auto data = x.mutable_data();
  for (const auto i : idx) {
    const double keep = data[i];
    data[i] = keep + h;
    const double up = loss().item();
    data[i] = keep - h;
    const double down = loss().item();
    data[i] = keep;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

inline double grad_check(const std::function<Tensor()>& loss, Tensor x) {
  return rel_err(analytic_grad(loss, x), numeric_grad(loss, x));
}

// Reduces an arbitrary output to a scalar with fixed random weights so that
// every output entry contributes a distinct cotangent.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return mshubert::sum(mshubert::mul(y, w)); }

}  // namespace testing
