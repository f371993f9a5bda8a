#pragma once

// Feature extractors (MLP, stacked LSTM) and the affine evidential head.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "uga/autodiff.hpp"
#include "uga/evidential.hpp"

namespace uga {

using Rng = std::mt19937_64;

enum class Activation { Tanh, Sigmoid };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "sigmoid"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "sigmoid") return Activation::Sigmoid;
    throw std::invalid_argument("unknown activation '" + s + "' (expected tanh or sigmoid)");
}

struct MlpSpec {
    /// input -> hidden... -> feature dim
    std::vector<std::size_t> layer_widths{1, 32, 32};
    /// one per layer; a single entry applies to all layers
    std::vector<Activation> activations{Activation::Tanh};
    double dropout_p = 0.1;

    std::size_t num_layers() const { return layer_widths.size() - 1; }
    std::size_t input_dim() const { return layer_widths.front(); }
    std::size_t feature_dim() const { return layer_widths.back(); }
    Activation activation(std::size_t layer) const {
        return activations.size() == 1 ? activations[0] : activations.at(layer);
    }

    void validate() const {
        if (layer_widths.size() < 2) throw std::invalid_argument("mlp: needs at least one layer");
        for (auto w : layer_widths) {
            if (w == 0) throw std::invalid_argument("mlp: layer widths must be positive");
        }
        if (activations.size() != 1 && activations.size() != num_layers()) {
            throw std::invalid_argument("mlp: need one activation or one per layer");
        }
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw std::invalid_argument("mlp: dropout_p must lie in [0,1)");
    }
};

struct SeqEncoderSpec {
    std::size_t num_layers = 2;
    std::size_t hidden_dim = 64;
    std::size_t input_dim = 3;
    std::size_t window_len = 100;

    std::size_t feature_dim() const { return hidden_dim; }

    void validate() const {
        if (num_layers == 0 || hidden_dim == 0 || input_dim == 0 || window_len == 0) {
            throw std::invalid_argument("lstm: all sizes must be positive");
        }
    }
};

using ExtractorSpec = std::variant<MlpSpec, SeqEncoderSpec>;

struct Parameter {
    std::string name;
    Tensor value;
    bool extractor = true;  ///< false for the head group
};

/// Feature extractor g plus a single affine evidential head r with 4 outputs.
struct ModelBundle {
    ExtractorSpec extractor;
    std::vector<Parameter> params;

    static constexpr std::size_t kHeadOutputs = 4;

    bool is_sequence() const { return std::holds_alternative<SeqEncoderSpec>(extractor); }

    std::size_t feature_dim() const {
        return std::visit([](const auto& s) { return s.feature_dim(); }, extractor);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.value.size();
        return n;
    }

    const Parameter& param(const std::string& name) const {
        for (const auto& p : params) {
            if (p.name == name) return p;
        }
        throw std::out_of_range("model: no parameter named " + name);
    }
    Parameter& param(const std::string& name) {
        return const_cast<Parameter&>(std::as_const(*this).param(name));
    }
};

inline std::size_t mlp_parameter_count(const MlpSpec& s) {
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < s.layer_widths.size(); ++i) {
        n += s.layer_widths[i] * s.layer_widths[i + 1] + s.layer_widths[i + 1];
    }
    return n;
}

inline std::size_t lstm_parameter_count(const SeqEncoderSpec& s) {
    std::size_t n = 0;
    std::size_t in = s.input_dim;
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        n += 4 * (s.hidden_dim * (in + s.hidden_dim) + s.hidden_dim);
        in = s.hidden_dim;
    }
    return n;
}

namespace detail {

inline Tensor uniform_tensor(Shape shape, double a, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-a, a);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

}  // namespace detail

/// Seeded initialization: weights uniform(-a, a), a = 1/sqrt(fan_in); LSTM
/// biases zero except the forget gate, which starts at 1.
inline ModelBundle init_bundle(const ExtractorSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    ModelBundle b{spec, {}};
    std::visit([](const auto& s) { s.validate(); }, spec);
    if (const auto* mlp = std::get_if<MlpSpec>(&spec)) {
        for (std::size_t l = 0; l < mlp->num_layers(); ++l) {
            const std::size_t in = mlp->layer_widths[l], out = mlp->layer_widths[l + 1];
            const double a = 1.0 / std::sqrt(static_cast<double>(in));
            b.params.push_back({"mlp." + std::to_string(l) + ".weight", detail::uniform_tensor({in, out}, a, rng), true});
            b.params.push_back({"mlp." + std::to_string(l) + ".bias", detail::uniform_tensor({1, out}, a, rng), true});
        }
    } else {
        const auto& seq = std::get<SeqEncoderSpec>(spec);
        const std::size_t h = seq.hidden_dim;
        std::size_t in = seq.input_dim;
        for (std::size_t l = 0; l < seq.num_layers; ++l) {
            const std::string prefix = "lstm." + std::to_string(l);
            b.params.push_back({prefix + ".w_ih", detail::uniform_tensor({in, 4 * h}, 1.0 / std::sqrt(double(in)), rng), true});
            b.params.push_back({prefix + ".w_hh", detail::uniform_tensor({h, 4 * h}, 1.0 / std::sqrt(double(h)), rng), true});
            Tensor bias({1, 4 * h}, 0.0);
            for (std::size_t j = h; j < 2 * h; ++j) bias[j] = 1.0;
            b.params.push_back({prefix + ".bias", std::move(bias), true});
            in = h;
        }
    }
    const std::size_t k = b.feature_dim();
    const double a = 1.0 / std::sqrt(static_cast<double>(k));
    b.params.push_back({"head.weight", detail::uniform_tensor({k, ModelBundle::kHeadOutputs}, a, rng), false});
    b.params.push_back({"head.bias", detail::uniform_tensor({1, ModelBundle::kHeadOutputs}, a, rng), false});
    return b;
}

/// Registers every parameter of the bundle as a differentiable leaf.
inline std::vector<Var> bind(Tape& tape, const ModelBundle& bundle) {
    std::vector<Var> vars;
    vars.reserve(bundle.params.size());
    for (const auto& p : bundle.params) vars.push_back(tape.leaf(p.value));
    return vars;
}

/// Registers parameters as constants (inference only).
inline std::vector<Var> bind_frozen(Tape& tape, const ModelBundle& bundle) {
    std::vector<Var> vars;
    vars.reserve(bundle.params.size());
    for (const auto& p : bundle.params) vars.push_back(tape.constant(p.value));
    return vars;
}

namespace detail {

inline Var activate(Var x, Activation a) { return a == Activation::Tanh ? tanh(x) : sigmoid(x); }

inline Var dropout(Var x, double p, bool training, Rng& rng) {
    if (!training || p == 0.0) return x;
    Tensor mask(x.shape());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 / (1.0 - p);
    for (auto& m : mask.values()) m = u(rng) < p ? 0.0 : keep;
    return x * x.tape->constant(std::move(mask));
}

}  // namespace detail

/// Batched MLP features. `params` must start with the MLP layers in bind() order.
inline Var mlp_forward(Var x, const MlpSpec& spec, std::span<const Var> params, bool training, Rng& rng) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.cols() != spec.input_dim()) {
        throw shape_error("mlp_forward: expected n x " + std::to_string(spec.input_dim()) + " input, got " +
                          shape_str(xv.shape()));
    }
    Var h = x;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        h = detail::activate(add_row(matmul(h, params[2 * l]), params[2 * l + 1]), spec.activation(l));
        h = detail::dropout(h, spec.dropout_p, training, rng);
    }
    return h;
}

/// Stacked LSTM over an n x (window_len * input_dim) batch of row-major
/// windows (or an n x window_len x input_dim tensor). Returns the top layer's
/// final hidden state, n x hidden_dim.
inline Var seq_forward(Var windows, const SeqEncoderSpec& spec, std::span<const Var> params) {
    const Tensor& w = windows.value();
    const std::size_t per = spec.window_len * spec.input_dim;
    const bool ok = (w.rank() == 2 && w.cols() == per) ||
                    (w.rank() == 3 && w.shape()[1] == spec.window_len && w.shape()[2] == spec.input_dim);
    if (!ok) {
        throw shape_error("seq_forward: expected windows of " + std::to_string(spec.window_len) + " x " +
                          std::to_string(spec.input_dim) + ", got " + shape_str(w.shape()));
    }
    Tape& tape = *windows.tape;
    const std::size_t n = w.shape()[0];
    const std::size_t h = spec.hidden_dim;

    std::vector<Var> inputs;
    inputs.reserve(spec.window_len);
    for (std::size_t t = 0; t < spec.window_len; ++t) {
        Tensor xt({n, spec.input_dim});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < spec.input_dim; ++c) {
                xt[i * spec.input_dim + c] = w[i * per + t * spec.input_dim + c];
            }
        }
        inputs.push_back(tape.constant(std::move(xt)));
    }

    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        const Var w_ih = params[3 * l], w_hh = params[3 * l + 1], bias = params[3 * l + 2];
        Var hs = tape.constant(Tensor({n, h}, 0.0));
        Var cs = tape.constant(Tensor({n, h}, 0.0));
        std::vector<Var> outputs;
        outputs.reserve(inputs.size());
        for (Var xt : inputs) {
            const Var gates = add_row(matmul(xt, w_ih) + matmul(hs, w_hh), bias);
            const Var in_gate = sigmoid(slice(gates, 0, h));
            const Var forget = sigmoid(slice(gates, h, 2 * h));
            const Var cand = tanh(slice(gates, 2 * h, 3 * h));
            const Var out_gate = sigmoid(slice(gates, 3 * h, 4 * h));
            cs = forget * cs + in_gate * cand;
            hs = out_gate * tanh(cs);
            outputs.push_back(hs);
        }
        inputs = std::move(outputs);
    }
    return inputs.back();
}

struct ForwardResult {
    Var z;    ///< features, n x k
    Var raw;  ///< head outputs, n x 4
    NigVars nig;
};

/// z = g(input); NIG parameters from the affine head on z.
inline ForwardResult model_forward(const ModelBundle& bundle, std::span<const Var> params, Var input,
                                   bool training, Rng& rng) {
    if (params.size() != bundle.params.size()) throw std::invalid_argument("model_forward: parameter count mismatch");
    Var z;
    if (const auto* mlp = std::get_if<MlpSpec>(&bundle.extractor)) {
        z = mlp_forward(input, *mlp, params, training, rng);
    } else {
        z = seq_forward(input, std::get<SeqEncoderSpec>(bundle.extractor), params);
    }
    const std::size_t head = params.size() - 2;
    const Var raw = add_row(matmul(z, params[head]), params[head + 1]);
    return {z, raw, nig_from_raw(raw)};
}

/// Single-sample feature vector of an MLP with the bundle's current weights.
inline std::vector<double> mlp_forward(std::span<const double> x, const ModelBundle& bundle, bool training, Rng& rng) {
    const auto& spec = std::get<MlpSpec>(bundle.extractor);
    Tape tape;
    const auto params = bind_frozen(tape, bundle);
    const Var z = mlp_forward(tape.constant(Tensor({1, x.size()}, std::vector<double>(x.begin(), x.end()))), spec,
                              params, training, rng);
    return z.value().values();
}

/// Single-window features of an LSTM bundle; `window` is window_len x input_dim, row-major.
inline std::vector<double> seq_forward(std::span<const double> window, const ModelBundle& bundle) {
    const auto& spec = std::get<SeqEncoderSpec>(bundle.extractor);
    if (window.size() != spec.window_len * spec.input_dim) {
        throw shape_error("seq_forward: window has " + std::to_string(window.size()) + " values, expected " +
                          std::to_string(spec.window_len * spec.input_dim));
    }
    Tape tape;
    const auto params = bind_frozen(tape, bundle);
    const Var z = seq_forward(tape.constant(Tensor({1, window.size()}, std::vector<double>(window.begin(), window.end()))),
                              spec, params);
    return z.value().values();
}

}  // namespace uga
