#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/erf.hpp>

#include "deltami/errors.hpp"

namespace deltami {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double norm_pdf(double x) {
  return std::exp(-0.5 * x * x) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
}
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double norm_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

inline double norm_quantile(double p) {
  if (p <= 0.0) return -kInf;
  if (p >= 1.0) return kInf;
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

/// Upper-tail quantile: x with norm_sf(x) == q, accurate for tiny q.
inline double norm_sf_quantile(double q) {
  if (q <= 0.0) return kInf;
  if (q >= 1.0) return -kInf;
  return std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * q);
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double log1pexp(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

/// Two-sided quantile of Student t; df = inf gives the normal quantile.
inline double t_quantile(double p, double df) {
  if (!std::isfinite(df)) return norm_quantile(p);
  return boost::math::quantile(boost::math::students_t(df), p);
}

inline double t_sf(double x, double df) {
  if (!std::isfinite(df)) return norm_sf(x);
  return boost::math::cdf(boost::math::complement(boost::math::students_t(df), x));
}

// ---------------------------------------------------------------------------
// Cumulative links

enum class Link { probit, logit };

inline std::string to_string(Link link) { return link == Link::probit ? "probit" : "logit"; }

inline Link parse_link(std::string_view s) {
  if (s == "probit") return Link::probit;
  if (s == "logit") return Link::logit;
  throw DataError("unknown link '" + std::string(s) + "' (expected probit or logit)");
}

inline double link_cdf(Link link, double x) {
  if (x == kInf) return 1.0;
  if (x == -kInf) return 0.0;
  return link == Link::probit ? norm_cdf(x) : logistic(x);
}

inline double link_sf(Link link, double x) {
  if (x == kInf) return 0.0;
  if (x == -kInf) return 1.0;
  return link == Link::probit ? norm_sf(x) : logistic(-x);
}

inline double link_pdf(Link link, double x) {
  if (std::isinf(x)) return 0.0;
  if (link == Link::probit) return norm_pdf(x);
  const double p = logistic(x);
  return p * (1.0 - p);
}

/// Derivative of the density.
inline double link_dpdf(Link link, double x) {
  if (std::isinf(x)) return 0.0;
  if (link == Link::probit) return -x * norm_pdf(x);
  const double p = logistic(x);
  return p * (1.0 - p) * (1.0 - 2.0 * p);
}

inline double link_quantile(Link link, double p) {
  if (link == Link::probit) return norm_quantile(p);
  if (p <= 0.0) return -kInf;
  if (p >= 1.0) return kInf;
  return std::log(p / (1.0 - p));
}

/// F(upper) - F(lower), computed on whichever side of the distribution keeps
/// the difference accurate.
inline double link_interval(Link link, double lower, double upper) {
  if (lower >= 0.0) return link_sf(link, lower) - link_sf(link, upper);
  return link_cdf(link, upper) - link_cdf(link, lower);
}

// ---------------------------------------------------------------------------
// Truncated normal

/// Draw from N(0,1) restricted to (a, b) for a > 0 deep in the upper tail.
template <class Uniform>
double upper_tail_normal(double a, double b, Uniform&& uniform) {
  if (b - a > 1.0 / a) {
    // Exponential proposal with optimal rate.
    const double rate = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
      const double x = a - std::log(uniform()) / rate;
      if (x >= b) continue;
      if (uniform() <= std::exp(-0.5 * (x - rate) * (x - rate))) return x;
    }
  }
  for (;;) {
    const double x = a + (b - a) * uniform();
    if (uniform() <= std::exp(-0.5 * (x * x - a * a))) return x;
  }
}

/// Standard normal restricted to (a, b). Inversion in the body of the
/// distribution, rejection sampling in the far tails.
template <class Uniform>
double truncated_std_normal(double a, double b, Uniform&& uniform) {
  if (!(a < b)) throw FitError("truncated normal with empty interval");
  if (a > 8.0) return upper_tail_normal(a, b, uniform);
  if (b < -8.0) return -upper_tail_normal(-b, -a, uniform);
  if (a >= 0.0) {
    const double qa = norm_sf(a), qb = norm_sf(b);
    const double x = norm_sf_quantile(qb + (qa - qb) * uniform());
    return std::clamp(x, a, b);
  }
  if (b <= 0.0) {
    const double pa = norm_cdf(a), pb = norm_cdf(b);
    const double x = norm_quantile(pa + (pb - pa) * uniform());
    return std::clamp(x, a, b);
  }
  const double pa = norm_cdf(a), pb = norm_cdf(b);
  return std::clamp(norm_quantile(pa + (pb - pa) * uniform()), a, b);
}

template <class Uniform>
double truncated_normal(double mean, double sd, double lower, double upper, Uniform&& uniform) {
  return mean + sd * truncated_std_normal((lower - mean) / sd, (upper - mean) / sd, uniform);
}

}  // namespace deltami
