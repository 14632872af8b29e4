#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>

namespace c3s {
namespace vecmath {

// Branch-free exp/tanh kernels. The hot loops in softmax and the tanh
// activations dominate runtime at training scale, and libm's scalar calls do
// not auto-vectorize. These use Cody-Waite range reduction plus a degree-13
// polynomial (error ~2 ulp) and compile to straight-line SIMD code under -O3.
//
// Inputs are expected to be finite; NaN propagates but is not IEEE-exact.

namespace detail {
constexpr double kLog2E = 1.4426950408889634074;
constexpr double kLn2Hi = 6.93147180369123816490e-01;
constexpr double kLn2Lo = 1.90821492927058770002e-10;
constexpr double kRoundMagic = 6755399441055744.0;  // 1.5 * 2^52
constexpr double kExpLo = -708.0;                    // below: exp == 0
constexpr double kExpHi = 709.0;                     // above: exp == inf
// Largest double strictly below 1; tanh saturates here so outputs stay in
// the open interval (-1, 1) for every finite input.
constexpr double kOneBelow = 1.0 - 0x1.0p-53;

// exp(x) for x in [kExpLo, kExpHi]; caller handles clamping.
inline double exp_core(double x) {
  double t = x * kLog2E;
  double nf = (t + kRoundMagic) - kRoundMagic;  // round to nearest int
  double r = (x - nf * kLn2Hi) - nf * kLn2Lo;   // |r| <= ln(2)/2

  double p = 1.0 / 6227020800.0;  // 1/13!
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;

  int64_t n = static_cast<int64_t>(nf);
  uint64_t bits = static_cast<uint64_t>(n + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return p * scale;
}
}  // namespace detail

inline double fast_exp(double x) {
  if (x < detail::kExpLo) return 0.0;
  if (x > detail::kExpHi) return x * 1e308 * 1e308;  // +inf, NaN-propagating
  return detail::exp_core(x);
}

inline double fast_tanh(double x) {
  double a = x < 0.0 ? -x : x;
  double sign = x < 0.0 ? -1.0 : 1.0;
  if (a >= 19.0) return sign * detail::kOneBelow;
  double e = detail::exp_core(2.0 * a);
  return sign * ((e - 1.0) / (e + 1.0));
}

inline void exp_array(double* dst, const double* src, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    double x = src[i];
    double xc = x < detail::kExpLo ? detail::kExpLo : (x > detail::kExpHi ? detail::kExpHi : x);
    double v = detail::exp_core(xc);
    dst[i] = x < detail::kExpLo ? 0.0 : v;
  }
}

inline void tanh_array(double* dst, const double* src, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    double x = src[i];
    double a = x < 0.0 ? -x : x;
    double sign = x < 0.0 ? -1.0 : 1.0;
    double ac = a > 19.0 ? 19.0 : a;
    double e = detail::exp_core(2.0 * ac);
    double t = (e - 1.0) / (e + 1.0);
    dst[i] = sign * (a >= 19.0 ? detail::kOneBelow : t);
  }
}

}  // namespace vecmath
}  // namespace c3s
