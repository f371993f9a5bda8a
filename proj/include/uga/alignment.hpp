#pragma once

// Kernel two-sample discrepancies, the uncertainty-guided alignment inputs,
// and the CORAL covariance distance.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "uga/autodiff.hpp"
#include "uga/evidential.hpp"

namespace uga {

enum class AlignmentKind { None, PlainMMD, CORAL, UgaFeature, UgaPosterior };

inline std::string to_string(AlignmentKind k) {
    switch (k) {
        case AlignmentKind::None: return "none";
        case AlignmentKind::PlainMMD: return "mmd";
        case AlignmentKind::CORAL: return "coral";
        case AlignmentKind::UgaFeature: return "uga_feature";
        case AlignmentKind::UgaPosterior: return "uga_posterior";
    }
    return "?";
}

inline AlignmentKind parse_alignment(const std::string& s) {
    for (auto k : {AlignmentKind::None, AlignmentKind::PlainMMD, AlignmentKind::CORAL,
                   AlignmentKind::UgaFeature, AlignmentKind::UgaPosterior}) {
        if (to_string(k) == s) return k;
    }
    throw std::invalid_argument("unknown alignment kind '" + s +
                                "' (expected none, mmd, coral, uga_feature, uga_posterior)");
}

/// Gaussian kernel bandwidths, in squared-distance units.
struct KernelBank {
    std::vector<double> bandwidths;

    void validate() const {
        if (bandwidths.empty()) throw std::invalid_argument("kernel bank: no bandwidths");
        for (double s : bandwidths) {
            if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("kernel bank: bandwidth must be > 0");
        }
    }

    /// {median * 2^k : k = -2..2}
    static KernelBank around(double median) {
        KernelBank b;
        for (int k = -2; k <= 2; ++k) b.bandwidths.push_back(std::ldexp(median, k));
        b.validate();
        return b;
    }
};

inline double rbf_kernel(std::span<const double> x, std::span<const double> y, double sigma2) {
    if (x.size() != y.size()) throw shape_error("rbf_kernel: dimension mismatch");
    if (!(sigma2 > 0.0)) throw std::invalid_argument("rbf_kernel: sigma2 must be > 0");
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
    return std::exp(-d2 / (2.0 * sigma2));
}

/// Median of the nonzero pairwise squared distances over the rows of X and Y
/// together (self-pairs excluded). Falls back to 1 when all distances are zero.
inline double median_bandwidth(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols()) {
        throw shape_error("median_bandwidth: expected row matrices of equal width");
    }
    const std::size_t n = x.rows() + y.rows();
    if (n < 2) throw std::invalid_argument("median_bandwidth: need at least 2 points");
    const std::size_t d = x.cols();
    auto row = [&](std::size_t i) -> const double* {
        return i < x.rows() ? x.values().data() + i * d : y.values().data() + (i - x.rows()) * d;
    };
    std::vector<double> dist;
    dist.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = row(i);
        for (std::size_t j = i + 1; j < n; ++j) {
            const double* b = row(j);
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
            if (s > 0.0) dist.push_back(s);
        }
    }
    if (dist.empty()) return 1.0;
    const std::size_t mid = dist.size() / 2;
    std::nth_element(dist.begin(), dist.begin() + mid, dist.end());
    const double upper = dist[mid];
    if (dist.size() % 2 == 1) return upper;
    const double lower = *std::max_element(dist.begin(), dist.begin() + mid);
    return 0.5 * (lower + upper);
}

namespace detail {

inline void check_sets(const Tensor& x, const Tensor& y, const char* op) {
    if (x.rank() != 2 || y.rank() != 2) throw shape_error(std::string(op) + ": expected n x d row matrices");
    if (x.rows() == 0 || y.rows() == 0) throw std::invalid_argument(std::string(op) + ": empty sample set");
    if (x.cols() != y.cols()) {
        throw shape_error(std::string(op) + ": dimension mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(y.shape()));
    }
}

// Strict weak order on sample sets used to evaluate the cross term in a
// fixed argument order, which makes mmd2(X, Y) and mmd2(Y, X) bit-identical.
inline bool canonical_before(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) return a.rows() < b.rows();
    return std::lexicographical_compare(a.values().begin(), a.values().end(), b.values().begin(),
                                        b.values().end());
}

}  // namespace detail

/// Biased (V-statistic) squared MMD averaged over the kernel bank.
inline Var mmd2_biased(Var x, Var y, const KernelBank& bank) {
    detail::check_sets(x.value(), y.value(), "mmd2_biased");
    detail::same_tape(x, y);
    bank.validate();
    if (detail::canonical_before(y.value(), x.value())) std::swap(x, y);
    const Var dxx = pairwise_sqdist(x, x);
    const Var dyy = pairwise_sqdist(y, y);
    const Var dxy = pairwise_sqdist(x, y);
    Var acc;
    for (double s2 : bank.bandwidths) {
        const double c = -1.0 / (2.0 * s2);
        const Var term = mean(exp(dxx * c)) + mean(exp(dyy * c)) - 2.0 * mean(exp(dxy * c));
        acc = acc.valid() ? acc + term : term;
    }
    const Var avg = acc / static_cast<double>(bank.bandwidths.size());
    // rounding can leave a tiny negative value on near-identical sets
    return clamp_min(avg, 0.0);
}

/// Same estimator with the bank placed around the median heuristic of the
/// current values. The bandwidths are constants for differentiation.
inline Var mmd2_biased(Var x, Var y) {
    return mmd2_biased(x, y, KernelBank::around(median_bandwidth(x.value(), y.value())));
}

/// Value-only estimator for large evaluation sets; streams the kernel sums.
inline double mmd2_biased_value(const Tensor& x, const Tensor& y, const KernelBank& bank) {
    detail::check_sets(x, y, "mmd2_biased_value");
    bank.validate();
    const Tensor* a = &x;
    const Tensor* b = &y;
    if (detail::canonical_before(y, x)) std::swap(a, b);
    const std::size_t d = a->cols();
    auto mean_kernel = [d](const Tensor& p, const Tensor& q, double c) {
        double s = 0.0;
        for (std::size_t i = 0; i < p.rows(); ++i) {
            for (std::size_t j = 0; j < q.rows(); ++j) {
                double d2 = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = p[i * d + k] - q[j * d + k];
                    d2 += diff * diff;
                }
                s += std::exp(d2 * c);
            }
        }
        return s / static_cast<double>(p.rows() * q.rows());
    };
    double acc = 0.0;
    for (double s2 : bank.bandwidths) {
        const double c = -1.0 / (2.0 * s2);
        acc += mean_kernel(*a, *a, c) + mean_kernel(*b, *b, c) - 2.0 * mean_kernel(*a, *b, c);
    }
    return std::max(acc / static_cast<double>(bank.bandwidths.size()), 0.0);
}

inline double mmd2_biased_value(const Tensor& x, const Tensor& y) {
    return mmd2_biased_value(x, y, KernelBank::around(median_bandwidth(x, y)));
}

// ---------------------------------------------------------------------------
// Alignment inputs
// ---------------------------------------------------------------------------

/// [z; gamma; nu; alpha; beta], with the appended block scaled by `weight`.
inline std::vector<double> augmented_embedding(std::span<const double> z, const NigOutput& p,
                                               double weight = 1.0) {
    validate(p);
    for (double v : z) {
        if (!std::isfinite(v)) throw std::invalid_argument("augmented_embedding: non-finite feature");
    }
    std::vector<double> out(z.begin(), z.end());
    for (double v : {p.gamma, p.nu, p.alpha, p.beta}) out.push_back(weight * v);
    return out;
}

/// Row-wise augmented embeddings of an n x k feature batch.
inline Var augmented_embedding(Var z, const NigVars& p, double weight = 1.0) {
    for (double v : z.value().values()) {
        if (!std::isfinite(v)) throw std::invalid_argument("augmented_embedding: non-finite feature");
    }
    Var block = concat({p.gamma, p.nu, p.alpha, p.beta});
    if (weight != 1.0) block = block * weight;
    return concat(z, block);
}

/// [nu, alpha, beta]; gamma is deliberately absent.
inline std::array<double, 3> posterior_vector(const NigOutput& p) { return {p.nu, p.alpha, p.beta}; }

inline Var posterior_vector(const NigVars& p) { return concat({p.nu, p.alpha, p.beta}); }

/// |C_X - C_Y|_F^2 / (4 d^2) with unbiased sample covariances.
inline Var coral_distance(Var x, Var y) {
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    if (xv.rank() != 2 || yv.rank() != 2 || xv.cols() != yv.cols()) {
        throw shape_error("coral_distance: expected row matrices of equal width");
    }
    if (xv.rows() < 2 || yv.rows() < 2) throw std::invalid_argument("coral_distance: need at least 2 samples per set");
    Tape& t = detail::same_tape(x, y);
    const double d = static_cast<double>(xv.cols());
    auto covariance = [&t](Var s) {
        const std::size_t n = s.value().rows();
        const Var ones_row = t.constant(Tensor({1, n}, 1.0));
        const Var mu = matmul(ones_row, s) / static_cast<double>(n);
        const Var centered = s - matmul(t.constant(Tensor({n, 1}, 1.0)), mu);
        return matmul(transpose(centered), centered) / static_cast<double>(n - 1);
    };
    const Var diff = covariance(x) - covariance(y);
    return sum(diff * diff) / (4.0 * d * d);
}

}  // namespace uga
