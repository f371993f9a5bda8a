#pragma once

// Central finite-difference checks of the tape gradients.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uga/alignment.hpp"
#include "uga/autodiff.hpp"
#include "uga/evidential.hpp"
#include "uga/models.hpp"

namespace uga {

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// ||a - n|| / max(||a||, ||n||) over every input coordinate, where a is the
/// tape gradient and n the central difference with step h. Both gradients
/// vanishing counts as agreement.
inline double gradient_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-4) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    tape.backward(f(tape, leaves));

    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape t;
        std::vector<Var> cs;
        for (const auto& x : xs) cs.push_back(t.constant(x));
        return f(t, cs).item();
    };

    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    std::vector<Tensor> probe = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor& g = tape.grad(leaves[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k][i];
            probe[k].values()[i] = x0 + h;
            const double up = eval(probe);
            probe[k].values()[i] = x0 - h;
            const double down = eval(probe);
            probe[k].values()[i] = x0;
            const double num = (up - down) / (2.0 * h);
            diff2 += (g[i] - num) * (g[i] - num);
            a2 += g[i] * g[i];
            n2 += num * num;
        }
    }
    const double scale = std::sqrt(std::max(a2, n2));
    return scale == 0.0 ? 0.0 : std::sqrt(diff2) / scale;
}

struct GradcheckResult {
    std::string name;
    std::size_t points = 0;
    double max_error = 0.0;
    double tolerance = 0.0;
    double seconds = 0.0;
    bool passed() const { return points > 0 && max_error < tolerance; }
};

namespace detail {

inline Tensor random_tensor(Shape shape, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape), 0.0);
    for (auto& v : t.values()) v = u(rng);
    return t;
}

template <class Body>
GradcheckResult timed_suite(std::string name, std::size_t points, double tolerance, Body body) {
    const auto start = std::chrono::steady_clock::now();
    GradcheckResult r{std::move(name), points, 0.0, tolerance, 0.0};
    for (std::size_t i = 0; i < points; ++i) r.max_error = std::max(r.max_error, body(i));
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

// One random composition over x (2x3), y (2x3), w (3x2). Every unary step
// maps its input into the domain of the next, so any sequence is valid.
inline Var random_composition(std::span<const Var> in, std::uint64_t recipe) {
    Var v = in[0];
    const Var y = in[1];
    const Var w = in[2];
    Rng rng(recipe);
    std::uniform_int_distribution<int> pick(0, 14);
    for (int step = 0; step < 5; ++step) {
        switch (pick(rng)) {
            case 0: v = tanh(v); break;
            case 1: v = sigmoid(v) * 2.0; break;
            case 2: v = softplus(v) - 0.5; break;
            case 3: v = exp(v * 0.3); break;
            case 4: v = log(softplus(v) + 0.5); break;
            case 5: v = pow(softplus(v) + 0.5, 1.5); break;
            case 6: v = abs(v + 0.05) - 0.3; break;
            case 7: v = lgamma(softplus(v) + 0.5); break;
            case 8: v = clamp_min(v, -50.0); break;
            case 9: v = v * y - v; break;
            case 10: v = v / (softplus(y) + 1.0) + y; break;
            case 11: v = matmul(matmul(v, w), transpose(w)) * 0.5; break;
            case 12: v = concat(slice(v, 1, 3), slice(v, 0, 1)); break;
            case 13: v = v + matmul(pairwise_sqdist(v, y), y) * 0.05; break;
            default: {
                const Var half = tape_of(v).constant(Tensor({1, 2}, 0.5));
                v = add_row(v, matmul(half, y));
                break;
            }
        }
    }
    return recipe % 2 == 0 ? sum(v) : mean(v);
}

}  // namespace detail

inline GradcheckResult check_primitives(std::uint64_t seed, std::size_t points = 100) {
    Rng rng(seed);
    return detail::timed_suite("primitives", points, 1e-5, [&](std::size_t i) {
        const std::vector<Tensor> in{detail::random_tensor({2, 3}, -1.0, 1.0, rng),
                                     detail::random_tensor({2, 3}, -1.0, 1.0, rng),
                                     detail::random_tensor({3, 2}, -1.0, 1.0, rng)};
        const std::uint64_t recipe = seed * 1000003 + i;
        return gradient_error([recipe](Tape&, std::span<const Var> v) { return detail::random_composition(v, recipe); },
                              in);
    });
}

/// d nll / d(gamma, nu, alpha, beta) at random valid points.
inline GradcheckResult check_nll(std::uint64_t seed, std::size_t points = 100) {
    Rng rng(seed);
    return detail::timed_suite("nll", points, 1e-5, [&](std::size_t) {
        const std::vector<Tensor> in{detail::random_tensor({1, 1}, -2.0, 2.0, rng),
                                     detail::random_tensor({1, 1}, 0.1, 3.0, rng),
                                     detail::random_tensor({1, 1}, 1.1, 4.0, rng),
                                     detail::random_tensor({1, 1}, 0.1, 3.0, rng)};
        const Tensor y = detail::random_tensor({1, 1}, -2.0, 2.0, rng);
        return gradient_error(
            [&y](Tape& t, std::span<const Var> v) { return sum(nll_loss(t.constant(y), NigVars{v[0], v[1], v[2], v[3]})); },
            in);
    });
}

/// d mmd^2 / d(X, Y) with the kernel bank fixed at the unperturbed inputs.
inline GradcheckResult check_mmd(std::uint64_t seed, std::size_t points = 100) {
    Rng rng(seed);
    return detail::timed_suite("mmd", points, 1e-5, [&](std::size_t) {
        const std::vector<Tensor> in{detail::random_tensor({5, 3}, -1.0, 1.0, rng),
                                     detail::random_tensor({6, 3}, -0.5, 1.5, rng)};
        const KernelBank bank = KernelBank::around(median_bandwidth(in[0], in[1]));
        return gradient_error([&bank](Tape&, std::span<const Var> v) { return mmd2_biased(v[0], v[1], bank); }, in);
    });
}

namespace detail {

// Evidential loss of a bundle on (x, y) plus an augmented-embedding MMD
// against xt, as a function of every parameter.
inline double model_gradient_error(const ModelBundle& bundle, const Tensor& x, const Tensor& y, const Tensor& xt) {
    std::vector<Tensor> in;
    for (const auto& p : bundle.params) in.push_back(p.value);
    Tape probe;
    const auto fixed = bind_frozen(probe, bundle);
    Rng unused(0);
    const auto fs = model_forward(bundle, fixed, probe.constant(x), false, unused);
    const auto ft = model_forward(bundle, fixed, probe.constant(xt), false, unused);
    const KernelBank bank = KernelBank::around(median_bandwidth(augmented_embedding(fs.z, fs.nig).value(),
                                                                augmented_embedding(ft.z, ft.nig).value()));
    return gradient_error(
        [&](Tape& t, std::span<const Var> params) {
            Rng none(0);
            const auto s = model_forward(bundle, params, t.constant(x), false, none);
            const auto g = model_forward(bundle, params, t.constant(xt), false, none);
            const Var align = mmd2_biased(augmented_embedding(s.z, s.nig), augmented_embedding(g.z, g.nig), bank);
            return evidential_loss(t.constant(y), s.nig, EvidentialConfig{}) + 0.5 * align;
        },
        in);
}

}  // namespace detail

inline GradcheckResult check_mlp_model(std::uint64_t seed, std::size_t points = 20) {
    Rng rng(seed);
    const MlpSpec spec{{2, 8, 8}, {Activation::Tanh, Activation::Sigmoid}, 0.0};
    return detail::timed_suite("mlp_model", points, 1e-5, [&](std::size_t i) {
        const ModelBundle b = init_bundle(spec, seed + i);
        return detail::model_gradient_error(b, detail::random_tensor({4, 2}, -1.0, 1.0, rng),
                                            detail::random_tensor({4, 1}, 0.0, 1.0, rng),
                                            detail::random_tensor({4, 2}, -0.5, 1.5, rng));
    });
}

/// Recurrent encoder with 4 hidden units over `window` steps.
inline GradcheckResult check_lstm_model(std::uint64_t seed, std::size_t window, double tolerance, std::size_t points) {
    Rng rng(seed);
    const SeqEncoderSpec spec{1, 4, 3, window};
    return detail::timed_suite("lstm_model_w" + std::to_string(window), points, tolerance, [&](std::size_t i) {
        const ModelBundle b = init_bundle(spec, seed + i);
        return detail::model_gradient_error(b, detail::random_tensor({2, window * 3}, -1.0, 1.0, rng),
                                            detail::random_tensor({2, 1}, 0.0, 1.0, rng),
                                            detail::random_tensor({2, window * 3}, -0.5, 1.5, rng));
    });
}

/// Every finite-difference suite; the model suites together contribute
/// well over 100 random points through their parameter vectors.
inline std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed = 0) {
    return {check_primitives(seed),
            check_nll(seed + 1),
            check_mmd(seed + 2),
            check_mlp_model(seed + 3, 100),
            check_lstm_model(seed + 4, 10, 1e-5, 50),
            check_lstm_model(seed + 5, 100, 1e-4, 10)};
}

}  // namespace uga
