#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>

#include <boost/math/distributions/students_t.hpp>

#include "uga/autodiff.hpp"

namespace uga {

/// Normal-Inverse-Gamma parameters of one prediction.
struct NigOutput {
    double gamma = 0.0;  ///< predicted mean
    double nu = 1.0;     ///< precision of the mean, > 0
    double alpha = 2.0;  ///< inverse-gamma shape, > 1
    double beta = 1.0;   ///< inverse-gamma scale, > 0

    bool valid() const noexcept {
        return std::isfinite(gamma) && std::isfinite(nu) && std::isfinite(alpha) &&
               std::isfinite(beta) && nu > 0.0 && alpha > 1.0 && beta > 0.0;
    }
};

/// Batched NIG parameters on a tape; each member is an n x 1 column.
struct NigVars {
    Var gamma, nu, alpha, beta;

    std::size_t size() const { return gamma.value().size(); }

    NigOutput at(std::size_t i) const {
        return {gamma.value()[i], nu.value()[i], alpha.value()[i], beta.value()[i]};
    }
};

struct EvidentialConfig {
    double lambda_evi = 1.0;
};

inline void validate(const NigOutput& p) {
    if (!p.valid()) {
        throw std::invalid_argument("nig: parameters violate nu>0, alpha>1, beta>0 (got nu=" +
                                    std::to_string(p.nu) + ", alpha=" + std::to_string(p.alpha) +
                                    ", beta=" + std::to_string(p.beta) + ")");
    }
}

inline void validate(const NigVars& p) {
    for (std::size_t i = 0; i < p.size(); ++i) validate(p.at(i));
}

// ---------------------------------------------------------------------------
// Raw head outputs -> constrained parameters
// ---------------------------------------------------------------------------

inline NigOutput nig_from_raw(const std::array<double, 4>& raw) {
    for (double r : raw) {
        if (!std::isfinite(r)) throw std::invalid_argument("nig_from_raw: non-finite raw output");
    }
    NigOutput p{raw[0], softplus(raw[1]), softplus(raw[2]) + 1.0, softplus(raw[3])};
    // softplus underflows to 0 for raw below about -745
    if (!(p.nu > 0.0)) p.nu = std::numeric_limits<double>::min();
    if (!(p.beta > 0.0)) p.beta = std::numeric_limits<double>::min();
    if (!(p.alpha > 1.0)) p.alpha = std::nextafter(1.0, 2.0);
    return p;
}

/// Maps an n x 4 raw head output to NIG columns.
inline NigVars nig_from_raw(Var raw) {
    const Tensor& r = raw.value();
    if (r.rank() != 2 || r.cols() != 4) {
        throw shape_error("nig_from_raw: expected n x 4 raw outputs, got " + shape_str(r.shape()));
    }
    for (double v : r.values()) {
        if (!std::isfinite(v)) throw std::invalid_argument("nig_from_raw: non-finite raw output");
    }
    return {slice(raw, 0, 1), softplus(slice(raw, 1, 2)), softplus(slice(raw, 2, 3)) + 1.0,
            softplus(slice(raw, 3, 4))};
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Per-sample negative log-likelihood of y under the NIG marginal (a Student-t),
/// written with log(psi) = lgamma(alpha) - lgamma(alpha + 1/2). Returns an n x 1 column.
inline Var nll_loss(Var y, const NigVars& p) {
    validate(p);
    const Var two_beta_lambda = 2.0 * p.beta * (1.0 + p.nu);
    const Var resid = y - p.gamma;
    return 0.5 * log(std::numbers::pi / p.nu) - p.alpha * log(two_beta_lambda) +
           (lgamma(p.alpha) - lgamma(p.alpha + 0.5)) +
           (p.alpha + 0.5) * log(resid * resid * p.nu + two_beta_lambda);
}

/// |y - gamma| * (2 nu + alpha), per sample.
inline Var evidence_regularizer(Var y, const NigVars& p) {
    validate(p);
    return abs(y - p.gamma) * (2.0 * p.nu + p.alpha);
}

/// Batch mean of NLL + lambda_evi * regularizer.
inline Var evidential_loss(Var ys, const NigVars& p, const EvidentialConfig& cfg) {
    if (ys.value().size() == 0 || p.size() == 0) throw std::invalid_argument("evidential_loss: empty batch");
    if (ys.value().size() != p.size()) {
        throw shape_error("evidential_loss: " + std::to_string(ys.value().size()) + " labels for " +
                          std::to_string(p.size()) + " predictions");
    }
    if (!(cfg.lambda_evi >= 0.0)) throw std::invalid_argument("evidential_loss: lambda_evi must be >= 0");
    Var total = nll_loss(ys, p);
    if (cfg.lambda_evi != 0.0) total = total + cfg.lambda_evi * evidence_regularizer(ys, p);
    return mean(total);
}

namespace detail {

inline NigVars nig_constants(Tape& t, const NigOutput& p) {
    return {t.constant(Tensor({1, 1}, p.gamma)), t.constant(Tensor({1, 1}, p.nu)),
            t.constant(Tensor({1, 1}, p.alpha)), t.constant(Tensor({1, 1}, p.beta))};
}

}  // namespace detail

inline double nll_loss(double y, const NigOutput& p) {
    validate(p);
    if (!std::isfinite(y)) throw std::invalid_argument("nll_loss: non-finite label");
    Tape t;
    return nll_loss(t.constant(Tensor({1, 1}, y)), detail::nig_constants(t, p)).item();
}

inline double evidence_regularizer(double y, const NigOutput& p) {
    validate(p);
    return std::abs(y - p.gamma) * (2.0 * p.nu + p.alpha);
}

// ---------------------------------------------------------------------------
// Uncertainty
// ---------------------------------------------------------------------------

struct Uncertainties {
    double aleatoric;  ///< E[sigma^2] = beta / (alpha - 1)
    double epistemic;  ///< Var[mu] = beta / (nu (alpha - 1))
    double total() const noexcept { return aleatoric + epistemic; }
};

inline Uncertainties uncertainties(const NigOutput& p) {
    validate(p);
    const double a = p.beta / (p.alpha - 1.0);
    return {a, a / p.nu};
}

struct Interval {
    double lo;
    double hi;
    double width() const noexcept { return hi - lo; }
    bool contains(double y) const noexcept { return lo <= y && y <= hi; }
};

/// Central interval of the Student-t posterior predictive: 2 alpha degrees of
/// freedom, location gamma, scale sqrt(beta (1 + nu) / (nu alpha)).
inline Interval predictive_interval(const NigOutput& p, double level) {
    validate(p);
    if (!(level >= 0.0 && level < 1.0)) {
        throw std::invalid_argument("predictive_interval: level must lie in [0, 1), got " +
                                    std::to_string(level));
    }
    if (level == 0.0) return {p.gamma, p.gamma};
    const boost::math::students_t dist(2.0 * p.alpha);
    const double t = boost::math::quantile(dist, 0.5 + 0.5 * level);
    const double scale = std::sqrt(p.beta * (1.0 + p.nu) / (p.nu * p.alpha));
    return {p.gamma - t * scale, p.gamma + t * scale};
}

}  // namespace uga
