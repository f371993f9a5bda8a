#pragma once

// Joint source/target training with the uncertainty-guided alignment terms.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uga/alignment.hpp"
#include "uga/autodiff.hpp"
#include "uga/data.hpp"
#include "uga/evidential.hpp"
#include "uga/models.hpp"

namespace uga {

enum class OptimizerKind { Sgd, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

/// Full run recipe. JSON keys are the field names.
struct TrainConfig {
    AlignmentKind alignment = AlignmentKind::UgaFeature;
    double lambda_evi = 1.0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double lr = 1e-3;
    /// learning rate of the feature extractor group; unset means lr
    std::optional<double> lr_extractor;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t iterations = 1000;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    double aug_weight = 1.0;
    /// global gradient-norm clip; 0 disables
    double grad_clip = 10.0;

    // model
    std::string model = "mlp";
    std::vector<std::size_t> hidden{32, 32};
    std::string activation = "tanh";
    double dropout = 0.1;
    std::size_t lstm_hidden = 64;
    std::size_t lstm_layers = 2;
    /// standardize inputs with source feature statistics
    bool standardize = true;
    // sequence data
    std::size_t window_len = 100;
    std::size_t window_stride = 10;

    double extractor_lr() const { return lr_extractor.value_or(lr); }

    void validate() const {
        if (!(lr > 0.0) || (lr_extractor && !(*lr_extractor > 0.0))) throw std::invalid_argument("config: lr must be > 0");
        if (iterations == 0) throw std::invalid_argument("config: iterations must be > 0");
        if (batch_size == 0) throw std::invalid_argument("config: batch_size must be > 0");
        if (!(lambda_evi >= 0.0)) throw std::invalid_argument("config: lambda_evi must be >= 0");
        if (!(weight_decay >= 0.0)) throw std::invalid_argument("config: weight_decay must be >= 0");
        if (!(grad_clip >= 0.0)) throw std::invalid_argument("config: grad_clip must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("config: momentum must lie in [0,1)");
        if (model != "mlp" && model != "lstm") throw std::invalid_argument("config: model must be mlp or lstm");
        if (model == "mlp" && hidden.empty()) throw std::invalid_argument("config: hidden must list at least one width");
        parse_activation(activation);
        if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("config: dropout must lie in [0,1)");
        if (window_len == 0 || window_stride == 0) throw std::invalid_argument("config: window_len and window_stride must be > 0");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["alignment"] = to_string(c.alignment);
    j["lambda_evi"] = c.lambda_evi;
    j["optimizer"] = to_string(c.optimizer);
    j["lr"] = c.lr;
    j["lr_extractor"] = c.lr_extractor ? nlohmann::json(*c.lr_extractor) : nlohmann::json(nullptr);
    j["momentum"] = c.momentum;
    j["weight_decay"] = c.weight_decay;
    j["iterations"] = c.iterations;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["aug_weight"] = c.aug_weight;
    j["grad_clip"] = c.grad_clip;
    j["model"] = c.model;
    j["hidden"] = c.hidden;
    j["activation"] = c.activation;
    j["dropout"] = c.dropout;
    j["lstm_hidden"] = c.lstm_hidden;
    j["lstm_layers"] = c.lstm_layers;
    j["standardize"] = c.standardize;
    j["window_len"] = c.window_len;
    j["window_stride"] = c.window_stride;
    return j;
}

class config_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Parses a config object; missing keys keep their defaults, unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw config_error("config: top level must be a JSON object");
    TrainConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "alignment") c.alignment = parse_alignment(v.get<std::string>());
            else if (key == "lambda_evi") c.lambda_evi = v.get<double>();
            else if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
            else if (key == "lr") c.lr = v.get<double>();
            else if (key == "lr_extractor") c.lr_extractor = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
            else if (key == "momentum") c.momentum = v.get<double>();
            else if (key == "weight_decay") c.weight_decay = v.get<double>();
            else if (key == "iterations") c.iterations = v.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "aug_weight") c.aug_weight = v.get<double>();
            else if (key == "grad_clip") c.grad_clip = v.get<double>();
            else if (key == "model") c.model = v.get<std::string>();
            else if (key == "hidden") c.hidden = v.get<std::vector<std::size_t>>();
            else if (key == "activation") c.activation = v.get<std::string>();
            else if (key == "dropout") c.dropout = v.get<double>();
            else if (key == "lstm_hidden") c.lstm_hidden = v.get<std::size_t>();
            else if (key == "lstm_layers") c.lstm_layers = v.get<std::size_t>();
            else if (key == "standardize") c.standardize = v.get<bool>();
            else if (key == "window_len") c.window_len = v.get<std::size_t>();
            else if (key == "window_stride") c.window_stride = v.get<std::size_t>();
            else throw config_error("config: unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("config: ") + e.what());
    } catch (const config_error&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw config_error(e.what());
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw config_error(e.what());
    }
    return c;
}

/// Extractor spec for the data shape described by `data`.
inline ExtractorSpec extractor_from_config(const TrainConfig& cfg, const UnlabeledSet& data) {
    if (cfg.model == "lstm") {
        SeqEncoderSpec s;
        s.num_layers = cfg.lstm_layers;
        s.hidden_dim = cfg.lstm_hidden;
        s.input_dim = data.features;
        s.window_len = data.steps;
        return s;
    }
    MlpSpec s;
    s.layer_widths = {data.sample_width()};
    s.layer_widths.insert(s.layer_widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    s.activations = {parse_activation(cfg.activation)};
    s.dropout_p = cfg.dropout;
    return s;
}

// ---------------------------------------------------------------------------
// Schedule and optimizers
// ---------------------------------------------------------------------------

/// Alignment weight ramp 2 / (1 + exp(-10 p)) - 1 over training progress p in [0, 1].
inline double lambda_schedule(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("lambda_schedule: progress must lie in [0,1]");
    return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

/// v <- momentum v + (g + wd p); p <- p - lr v
inline void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
                     double weight_decay) {
    detail::check_same_shape(param, grad, "sgd_step");
    detail::check_same_shape(param, velocity, "sgd_step");
    auto& p = param.values();
    auto& v = velocity.values();
    const auto& g = grad.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum * v[i] + (g[i] + weight_decay * p[i]);
        p[i] -= lr * v[i];
    }
}

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Bias-corrected Adam update; `step` is the 1-based update count.
inline void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::size_t step, double lr,
                      const AdamHyper& h = {}) {
    detail::check_same_shape(param, grad, "adam_step");
    detail::check_same_shape(param, m, "adam_step");
    detail::check_same_shape(param, v, "adam_step");
    if (step == 0) throw std::invalid_argument("adam_step: step count starts at 1");
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
    auto& p = param.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = grad[i] + h.weight_decay * p[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
    }
}

/// Optimizer state for every tensor of a bundle, with separate learning rates
/// for the extractor and head groups.
class Optimizer {
public:
    Optimizer(const ModelBundle& bundle, const TrainConfig& cfg) : cfg_(cfg) {
        for (const auto& p : bundle.params) {
            first_.emplace_back(p.value.shape(), 0.0);
            second_.emplace_back(p.value.shape(), 0.0);
        }
    }

    void step(ModelBundle& bundle, const std::vector<Tensor>& grads) {
        if (grads.size() != bundle.params.size()) throw std::invalid_argument("optimizer: gradient count mismatch");
        ++t_;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            auto& p = bundle.params[i];
            const double lr = p.extractor ? cfg_.extractor_lr() : cfg_.lr;
            if (cfg_.optimizer == OptimizerKind::Sgd) {
                sgd_step(p.value, grads[i], first_[i], lr, cfg_.momentum, cfg_.weight_decay);
            } else {
                adam_step(p.value, grads[i], first_[i], second_[i], t_, lr,
                          AdamHyper{0.9, 0.999, 1e-8, cfg_.weight_decay});
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Tensor> first_;
    std::vector<Tensor> second_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Loss assembly
// ---------------------------------------------------------------------------

struct LossTerms {
    Var total;
    Var supervised;
    Var alignment;  ///< invalid when the config has no alignment term
    double lambda = 0.0;
};

/// Source-supervised loss plus lambda(p) times the configured alignment term.
/// PlainMMD trains the gamma output with squared error instead of the evidential loss.
inline LossTerms assemble_loss(const ForwardResult& src, Var src_labels, const ForwardResult* tgt,
                               const TrainConfig& cfg, double lambda) {
    LossTerms out;
    out.lambda = lambda;
    if (cfg.alignment == AlignmentKind::PlainMMD) {
        const Var err = src.nig.gamma - src_labels;
        out.supervised = mean(err * err);
    } else {
        out.supervised = evidential_loss(src_labels, src.nig, EvidentialConfig{cfg.lambda_evi});
    }
    if (cfg.alignment == AlignmentKind::None) {
        out.total = out.supervised;
        return out;
    }
    if (tgt == nullptr) throw std::invalid_argument("assemble_loss: alignment needs a target batch");
    switch (cfg.alignment) {
        case AlignmentKind::PlainMMD: out.alignment = mmd2_biased(src.z, tgt->z); break;
        case AlignmentKind::CORAL: out.alignment = coral_distance(src.z, tgt->z); break;
        case AlignmentKind::UgaFeature:
            out.alignment = mmd2_biased(augmented_embedding(src.z, src.nig, cfg.aug_weight),
                                        augmented_embedding(tgt->z, tgt->nig, cfg.aug_weight));
            break;
        case AlignmentKind::UgaPosterior:
            out.alignment = mmd2_biased(posterior_vector(src.nig), posterior_vector(tgt->nig));
            break;
        case AlignmentKind::None: break;
    }
    out.total = out.supervised + lambda * out.alignment;
    return out;
}

/// Convenience form: forwards both batches through `bundle` on a fresh tape.
inline double assemble_loss_value(const LabeledSet& src, const UnlabeledSet& tgt, const ModelBundle& bundle,
                                  const TrainConfig& cfg, double p) {
    Tape tape;
    Rng rng(cfg.seed);
    const auto params = bind_frozen(tape, bundle);
    std::vector<std::size_t> si(src.size()), ti(tgt.size());
    for (std::size_t i = 0; i < si.size(); ++i) si[i] = i;
    for (std::size_t i = 0; i < ti.size(); ++i) ti[i] = i;
    const auto fs = model_forward(bundle, params, tape.constant(src.gather(si)), false, rng);
    const auto ft = model_forward(bundle, params, tape.constant(tgt.gather(ti)), false, rng);
    return assemble_loss(fs, tape.constant(src.gather_labels(si)), &ft, cfg, lambda_schedule(p)).total.item();
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct HistoryRow {
    std::size_t iteration;
    double supervised;
    double alignment;
    double lambda;
};

struct TrainResult {
    ModelBundle bundle;
    std::vector<HistoryRow> history;
};

class training_diverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Schedule = std::function<double(double)>;

namespace detail {

// Independent deterministic streams derived from one seed.
inline Rng stream(std::uint64_t seed, std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(salt)};
    return Rng(seq);
}

inline std::vector<std::size_t> draw_batch(std::size_t n, std::size_t batch, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> rows(batch);
    for (auto& r : rows) r = pick(rng);
    return rows;
}

}  // namespace detail

/// Trains `spec` on labeled source and unlabeled target data. Each iteration
/// draws one with-replacement minibatch per domain, evaluates the loss at
/// progress p = i / iterations, backpropagates and steps the optimizer.
inline TrainResult train_uga(const LabeledSet& source, const UnlabeledSet& target, const TrainConfig& cfg,
                             const ExtractorSpec& spec, const Schedule& schedule = lambda_schedule) {
    cfg.validate();
    source.validate();
    if (source.empty()) throw std::invalid_argument("train_uga: empty source set");
    const bool aligned = cfg.alignment != AlignmentKind::None;
    if (aligned && target.empty()) throw std::invalid_argument("train_uga: empty target set");
    if (aligned && target.sample_width() != source.sample_width()) {
        throw shape_error("train_uga: source and target sample widths differ");
    }

    TrainResult result{init_bundle(spec, cfg.seed), {}};
    ModelBundle& bundle = result.bundle;
    Optimizer opt(bundle, cfg);
    Rng src_pick = detail::stream(cfg.seed, 1);
    Rng tgt_pick = detail::stream(cfg.seed, 2);
    Rng src_drop = detail::stream(cfg.seed, 3);
    Rng tgt_drop = detail::stream(cfg.seed, 4);
    result.history.reserve(cfg.iterations);

    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        const double progress = static_cast<double>(it) / static_cast<double>(cfg.iterations);
        Tape tape;
        const auto params = bind(tape, bundle);
        const auto si = detail::draw_batch(source.size(), cfg.batch_size, src_pick);
        const auto fs = model_forward(bundle, params, tape.constant(source.gather(si)), true, src_drop);
        const Var ys = tape.constant(source.gather_labels(si));
        std::optional<ForwardResult> ft;
        if (aligned) {
            const auto ti = detail::draw_batch(target.size(), cfg.batch_size, tgt_pick);
            ft = model_forward(bundle, params, tape.constant(target.gather(ti)), true, tgt_drop);
        }
        const LossTerms loss = assemble_loss(fs, ys, ft ? &*ft : nullptr, cfg, schedule(progress));
        const double total = loss.total.item();
        const double align = loss.alignment.valid() ? loss.alignment.item() : 0.0;
        if (!std::isfinite(total)) {
            std::ostringstream msg;
            msg << "train_uga: non-finite loss at iteration " << it << " (supervised=" << loss.supervised.item()
                << ", alignment=" << align << ", lambda=" << loss.lambda << ")";
            throw training_diverged(msg.str());
        }
        tape.backward(loss.total);

        std::vector<Tensor> grads;
        grads.reserve(params.size());
        double norm2 = 0.0;
        for (Var p : params) {
            grads.push_back(tape.grad(p));
            for (double g : grads.back().values()) norm2 += g * g;
        }
        if (!std::isfinite(norm2)) {
            throw training_diverged("train_uga: non-finite gradient at iteration " + std::to_string(it));
        }
        if (cfg.grad_clip > 0.0 && norm2 > cfg.grad_clip * cfg.grad_clip) {
            const double s = cfg.grad_clip / std::sqrt(norm2);
            for (auto& g : grads) {
                for (auto& v : g.values()) v *= s;
            }
        }
        opt.step(bundle, grads);
        result.history.push_back({it, loss.supervised.item(), align, loss.lambda});
    }
    return result;
}

}  // namespace uga
