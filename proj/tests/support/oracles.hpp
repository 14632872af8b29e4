#pragma once

// Reference implementations used as independent oracles in tests. Everything
// here is deliberately written with plain loops and <cmath> only, so it
// shares no code path with the library under test.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "rng.hpp"
#include "tensor.hpp"

namespace oracle {

// C[m,p] = A[m,n] * B[n,p], triple loop.
inline std::vector<double> matmul(const std::vector<double>& a,
                                  const std::vector<double>& b, int64_t m,
                                  int64_t n, int64_t p) {
  std::vector<double> c(static_cast<size_t>(m * p), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < p; ++j)
      for (int64_t l = 0; l < n; ++l)
        c[static_cast<size_t>(i * p + j)] +=
            a[static_cast<size_t>(i * n + l)] * b[static_cast<size_t>(l * p + j)];
  return c;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  std::vector<double> y(x.size());
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double sum = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (double& v : y) v /= sum;
  return y;
}

// Eq-style double loop: out[l] = sum_{i,j} kernel_l[i,j] * window[i,j].
inline std::vector<double> cheap_conv_channels(
    const std::vector<double>& kernels,  // [half][k][d]
    const std::vector<double>& window,   // [k][d]
    int64_t half, int64_t k, int64_t d) {
  std::vector<double> out(static_cast<size_t>(half), 0.0);
  for (int64_t l = 0; l < half; ++l)
    for (int64_t i = 0; i < k; ++i)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(l)] +=
            kernels[static_cast<size_t>((l * k + i) * d + j)] *
            window[static_cast<size_t>(i * d + j)];
  return out;
}

inline double kl_divergence(const std::vector<double>& q,
                            const std::vector<double>& p) {
  double acc = 0.0;
  for (size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;
    acc += q[i] * std::log(q[i] / p[i]);
  }
  return acc;
}

inline double cosine(const std::vector<double>& a,
                     const std::vector<double>& b) {
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    saa += a[i] * a[i];
    sbb += b[i] * b[i];
    sab += a[i] * b[i];
  }
  return sab / (std::sqrt(saa) * std::sqrt(sbb));
}

inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

// Central finite differences against a freshly rebuilt loss. `make_loss` must
// rebuild the full forward pass from the current parameter values on the tape
// it is given. Checks every element of every parameter.
struct GradCheck {
  double step = 1e-4;
  double tolerance = 1e-4;

  void run(std::vector<c3s::Tensor> params,
           const std::function<c3s::Tensor(c3s::Tape&)>& make_loss,
           const std::function<bool(size_t, int64_t)>& skip = nullptr) const {
    std::vector<std::vector<double>> analytic;
    {
      c3s::Tape tape;
      c3s::Tensor loss = make_loss(tape);
      tape.backward(loss);
      for (auto& p : params) analytic.push_back(p.grad_values());
    }
    double worst = 0.0;
    std::string worst_at;
    for (size_t pi = 0; pi < params.size(); ++pi) {
      c3s::Tensor& p = params[pi];
      for (int64_t i = 0; i < p.numel(); ++i) {
        if (skip && skip(pi, i)) continue;
        const double saved = p.data()[i];
        p.data()[i] = saved + step;
        c3s::Tape tp(false);
        const double lp = make_loss(tp).scalar();
        p.data()[i] = saved - step;
        c3s::Tape tm(false);
        const double lm = make_loss(tm).scalar();
        p.data()[i] = saved;
        const double fd = (lp - lm) / (2.0 * step);
        const double err = rel_err(analytic[pi][static_cast<size_t>(i)], fd);
        if (err > worst) {
          worst = err;
          worst_at = "param " + std::to_string(pi) + " elem " +
                     std::to_string(i) + ": analytic " +
                     std::to_string(analytic[pi][static_cast<size_t>(i)]) +
                     " vs fd " + std::to_string(fd);
        }
      }
    }
    INFO("worst gradient mismatch: ", worst_at);
    CHECK(worst <= tolerance);
  }
};

inline c3s::Tensor random_tensor(c3s::Shape shape, c3s::Rng& rng,
                                 bool requires_grad = true, double lo = -1.0,
                                 double hi = 1.0) {
  return c3s::Tensor::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

}  // namespace oracle
