#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace uga {

namespace detail {

// Lanczos coefficients for g = 7, n = 9.
inline constexpr double kLanczosG = 7.0;
inline constexpr std::array<double, 9> kLanczosCoef = {
    0.99999999999980993227684700473478,  676.520368121885098567009190444019,
    -1259.13921672240287047156078755283, 771.3234287776530788486528258894,
    -176.615029162140599065845513540,    12.507343278686904814458936853,
    -0.13857109526572011689554707,       9.984369578019570859563e-6,
    1.50563273514931155834e-7};

}  // namespace detail

/// Natural log of the gamma function for x > 0.
///
/// Lanczos approximation for x >= 0.5; smaller arguments are shifted up one
/// step with lgamma(x) = lgamma(x + 1) - log(x). Negative arguments are not
/// supported.
inline double lgamma(double x) {
    if (!(x > 0.0) || !std::isfinite(x)) {
        throw std::domain_error("lgamma: argument must be positive and finite, got " +
                                std::to_string(x));
    }
    if (x < 0.5) return lgamma(x + 1.0) - std::log(x);
    if (x == 1.0 || x == 2.0) return 0.0;

    const double xm1 = x - 1.0;
    double series = detail::kLanczosCoef[0];
    for (std::size_t i = 1; i < detail::kLanczosCoef.size(); ++i) {
        series += detail::kLanczosCoef[i] / (xm1 + static_cast<double>(i));
    }
    const double t = xm1 + detail::kLanczosG + 0.5;
    return 0.5 * std::log(2.0 * std::numbers::pi) + (xm1 + 0.5) * std::log(t) - t +
           std::log(series);
}

/// Digamma (derivative of lgamma) for x > 0.
///
/// Upward recurrence psi(x) = psi(x + 1) - 1/x until x >= 10, then the
/// asymptotic Bernoulli series truncated after the x^-14 term.
inline double digamma(double x) {
    if (!(x > 0.0) || !std::isfinite(x)) {
        throw std::domain_error("digamma: argument must be positive and finite, got " +
                                std::to_string(x));
    }
    double acc = 0.0;
    while (x < 10.0) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // Horner form of sum_k B_2k / (2k x^2k), k = 1..7
    const double tail =
        inv2 * (1.0 / 12.0 -
                inv2 * (1.0 / 120.0 -
                        inv2 * (1.0 / 252.0 -
                                inv2 * (1.0 / 240.0 -
                                        inv2 * (1.0 / 132.0 -
                                                inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    return acc + std::log(x) - 0.5 * inv - tail;
}

}  // namespace uga
