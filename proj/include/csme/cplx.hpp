#pragma once

#include <cmath>
#include <string>

#include "csme/error.hpp"

namespace csme {

// Complex value as an explicit pair of reals. Estimating functions evaluate
// scores at perturbed exposures a* + i*eps, so the arithmetic rules are spelled
// out here rather than pulled from std::complex.
struct Cplx {
  double re = 0.0;
  double im = 0.0;

  constexpr Cplx() = default;
  constexpr Cplx(double r) : re(r), im(0.0) {}
  constexpr Cplx(double r, double i) : re(r), im(i) {}

  constexpr Cplx operator-() const { return {-re, -im}; }

  constexpr Cplx& operator+=(const Cplx& o) {
    re += o.re;
    im += o.im;
    return *this;
  }
  constexpr Cplx& operator-=(const Cplx& o) {
    re -= o.re;
    im -= o.im;
    return *this;
  }
  constexpr Cplx& operator*=(double s) {
    re *= s;
    im *= s;
    return *this;
  }
};

constexpr Cplx operator+(Cplx a, const Cplx& b) { return a += b; }
constexpr Cplx operator-(Cplx a, const Cplx& b) { return a -= b; }

constexpr Cplx operator*(const Cplx& a, const Cplx& b) {
  return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re};
}
constexpr Cplx operator*(const Cplx& a, double s) { return {a.re * s, a.im * s}; }
constexpr Cplx operator*(double s, const Cplx& a) { return a * s; }

constexpr Cplx operator/(const Cplx& a, const Cplx& b) {
  const double d = b.re * b.re + b.im * b.im;
  return {(a.re * b.re + a.im * b.im) / d, (a.im * b.re - a.re * b.im) / d};
}
constexpr Cplx operator/(const Cplx& a, double s) { return {a.re / s, a.im / s}; }

// exp(re + i*im) = exp(re) * (cos(im) + i*sin(im))
inline Cplx cexp(const Cplx& z) {
  const double r = std::exp(z.re);
  return {r * std::cos(z.im), r * std::sin(z.im)};
}

// Exponentials whose real argument exceeds this bound are rejected before they
// overflow to inf (exp(709.8) is the IEEE double limit).
inline constexpr double kExpGuard = 700.0;

inline void check_exp_argument(const Cplx& z, long long observation) {
  if (!(std::abs(z.re) <= kExpGuard)) {
    throw OverflowError("exponential argument |Re(z)| = " + std::to_string(std::abs(z.re)) +
                        " exceeds overflow guard at observation " + std::to_string(observation));
  }
}

// Integer power by repeated multiplication; design powers are small.
inline Cplx cpow_int(const Cplx& z, int p) {
  Cplx out{1.0, 0.0};
  for (int k = 0; k < p; ++k) out = out * z;
  return out;
}

inline bool cfinite(const Cplx& z) { return std::isfinite(z.re) && std::isfinite(z.im); }

}  // namespace csme
