#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape owns every value produced during one forward pass. Primitives are
// appended in execution order, so the record is topologically sorted by
// construction and backward() is a single reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uga/special.hpp"
#include "uga/tensor.hpp"

namespace uga {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    bool valid() const noexcept { return tape != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Input that receives a gradient buffer.
    Var leaf(Tensor value) { return push(std::move(value), {}, {}, true, true); }

    /// Input that is never differentiated.
    Var constant(Tensor value) { return push(std::move(value), {}, {}, false, true); }
    Var constant(double value) { return constant(Tensor(value)); }

    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
        bool needs = false;
        for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
        return push(std::move(value), std::move(inputs), needs ? std::move(backward) : BackwardFn{},
                    needs, false);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Accumulated gradient of a leaf. Zero-filled until a backward pass reaches it.
    const Tensor& grad(Var v) const {
        check_owned(v);
        const Node& n = nodes_[v.id];
        if (!n.is_leaf || !n.requires_grad) {
            throw std::invalid_argument("tape: grad() requested for a node that is not a leaf "
                                        "with requires_grad");
        }
        return n.grad;
    }

    void zero_grad() {
        for (Node& n : nodes_) {
            if (n.is_leaf && n.requires_grad) std::fill(n.grad.values().begin(), n.grad.values().end(), 0.0);
        }
    }

    /// Propagates d(loss)/d(node) to every leaf. Leaf gradients accumulate
    /// across calls; interior adjoints are rebuilt on every call.
    void backward(Var loss);

private:
    friend class BackwardContext;

    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        bool is_leaf = false;
    };

    Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad,
             bool is_leaf) {
        Node n;
        if (is_leaf && requires_grad) n.grad = Tensor(value.shape(), 0.0);
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        n.backward = std::move(fn);
        n.requires_grad = requires_grad;
        n.is_leaf = is_leaf;
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    void check_owned(Var v) const {
        if (v.tape != this || v.id >= nodes_.size()) {
            throw std::invalid_argument("tape: variable does not belong to this tape");
        }
    }

    // deque: values stay addressable while later nodes are appended
    std::deque<Node> nodes_;
};

/// View handed to a primitive's derivative rule during the reverse sweep.
class BackwardContext {
public:
    BackwardContext(const Tape& tape, std::size_t node, std::vector<std::vector<double>>& adjoints)
        : tape_(tape), node_(node), adjoints_(adjoints) {}

    const Tensor& output() const { return tape_.nodes_[node_].value; }
    const Tensor& input(std::size_t k) const { return tape_.nodes_[input_id(k)].value; }
    std::span<const double> out_grad() const { return adjoints_[node_]; }

    /// Adjoint buffer of input k, or an empty span when that input needs no gradient.
    std::span<double> input_grad(std::size_t k) {
        const std::size_t id = input_id(k);
        if (!tape_.nodes_[id].requires_grad) return {};
        auto& buf = adjoints_[id];
        if (buf.empty()) buf.assign(tape_.nodes_[id].value.size(), 0.0);
        return buf;
    }

private:
    std::size_t input_id(std::size_t k) const { return tape_.nodes_[node_].inputs.at(k); }

    const Tape& tape_;
    std::size_t node_;
    std::vector<std::vector<double>>& adjoints_;
};

inline const Tensor& Var::value() const {
    if (!tape) throw std::invalid_argument("var: detached variable has no value");
    return tape->value(id);
}

inline void Tape::backward(Var loss) {
    if (!loss.valid()) throw std::invalid_argument("backward: detached loss variable");
    check_owned(loss);
    if (nodes_[loss.id].value.size() != 1) {
        throw shape_error("backward: loss must be a scalar, got shape " +
                          shape_str(nodes_[loss.id].value.shape()));
    }
    if (!nodes_[loss.id].requires_grad) {
        throw std::invalid_argument("backward: loss does not depend on any differentiable leaf");
    }
    std::vector<std::vector<double>> adjoints(nodes_.size());
    adjoints[loss.id].assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (adjoints[i].empty() || !n.requires_grad) continue;
        if (n.is_leaf) {
            auto& g = n.grad.values();
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += adjoints[i][j];
        } else if (n.backward) {
            BackwardContext ctx(*this, i, adjoints);
            n.backward(ctx);
        }
        // interior adjoints are not needed once propagated
        if (!n.is_leaf) std::vector<double>().swap(adjoints[i]);
    }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument("op: detached variable");
    if (a.tape != b.tape) throw std::invalid_argument("op: operands live on different tapes");
    return *a.tape;
}

inline Tape& tape_of(Var a) {
    if (!a.valid()) throw std::invalid_argument("op: detached variable");
    return *a.tape;
}

// Elementwise result shape: equal shapes, or one side is a rank-0 scalar.
inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (a.is_scalar()) return b.shape();
    if (b.is_scalar()) return a.shape();
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

// Adds g into dst, reducing to a single element when dst is a broadcast scalar.
inline void accumulate(std::span<double> dst, std::span<const double> g) {
    if (dst.empty()) return;
    if (dst.size() == g.size()) {
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    } else {
        double s = 0.0;
        for (double v : g) s += v;
        dst[0] += s;
    }
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
    Tape& t = tape_of(a);
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return t.record(std::move(out), {a.id}, [df](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        if (gx.empty()) return;
        const Tensor& x = ctx.input(0);
        const Tensor& y = ctx.output();
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
    });
}

template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA da, DB db) {
    Tape& t = same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor out(broadcast_shape(x, y, name));
    const bool xs = x.size() == 1 && out.size() != 1;
    const bool ys = y.size() == 1 && out.size() != 1;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[xs ? 0 : i], y[ys ? 0 : i]);
    return t.record(std::move(out), {a.id, b.id}, [da, db, xs, ys](BackwardContext& ctx) {
        const Tensor& x = ctx.input(0);
        const Tensor& y = ctx.input(1);
        const Tensor& z = ctx.output();
        auto g = ctx.out_grad();
        std::vector<double> tmp(g.size());
        if (auto gx = ctx.input_grad(0); !gx.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * da(x[xs ? 0 : i], y[ys ? 0 : i], z[i]);
            accumulate(gx, tmp);
        }
        if (auto gy = ctx.input_grad(1); !gy.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * db(x[xs ? 0 : i], y[ys ? 0 : i], z[i]);
            accumulate(gy, tmp);
        }
    });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace detail

inline double sigmoid(double x) { return detail::sigmoid_value(x); }
inline double softplus(double x) { return detail::softplus_value(x); }

inline Var add(Var a, Var b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Var div(Var a, Var b) {
    for (double v : b.value().values()) {
        if (v == 0.0) throw std::domain_error("div: division by zero");
    }
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double z) { return -z / y; });
}

/// Elementwise power with a constant exponent.
inline Var pow(Var a, double p) {
    const bool integral = std::floor(p) == p;
    for (double v : a.value().values()) {
        if (v < 0.0 && !integral) throw std::domain_error("pow: negative base with fractional exponent");
        if (v == 0.0 && p < 0.0) throw std::domain_error("pow: zero base with negative exponent");
    }
    return detail::unary(
        a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

inline Var exp(Var a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    for (double v : a.value().values()) {
        if (!(v > 0.0)) throw std::domain_error("log: non-positive argument " + std::to_string(v));
    }
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(Var a) {
    return detail::unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
    return detail::unary(a, detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(Var a) {
    return detail::unary(a, detail::softplus_value,
                         [](double x, double) { return detail::sigmoid_value(x); });
}

/// |x| with subgradient 0 at 0.
inline Var abs(Var a) {
    return detail::unary(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var lgamma(Var a) {
    for (double v : a.value().values()) {
        if (!(v > 0.0)) throw std::domain_error("lgamma: non-positive argument " + std::to_string(v));
    }
    return detail::unary(
        a, [](double x) { return uga::lgamma(x); }, [](double x, double) { return uga::digamma(x); });
}

/// max(x, lo) elementwise; gradient passes only where x > lo.
inline Var clamp_min(Var a, double lo) {
    return detail::unary(
        a, [lo](double x) { return x > lo ? x : lo; }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

inline Var sum(Var a) {
    Tape& t = detail::tape_of(a);
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return t.record(Tensor(s), {a.id}, [](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        const double g = ctx.out_grad()[0];
        for (double& v : gx) v += g;
    });
}

inline Var mean(Var a) {
    Tape& t = detail::tape_of(a);
    const auto& xs = a.value().values();
    double s = 0.0;
    for (double v : xs) s += v;
    const double n = static_cast<double>(xs.size());
    return t.record(Tensor(s / n), {a.id}, [n](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        const double g = ctx.out_grad()[0] / n;
        for (double& v : gx) v += g;
    });
}

/// Concatenates along the last axis. All parts must agree on the leading dimensions.
inline Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Tape& t = detail::tape_of(parts[0]);
    const Shape& first = parts[0].shape();
    if (first.empty()) throw shape_error("concat: scalars cannot be concatenated");
    const Shape lead(first.begin(), first.end() - 1);
    const std::size_t rows = shape_numel(lead);
    std::vector<std::size_t> widths;
    std::vector<std::size_t> ids;
    std::size_t total = 0;
    for (Var p : parts) {
        detail::same_tape(parts[0], p);
        const Shape& s = p.shape();
        if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
            throw shape_error("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
        }
        widths.push_back(s.back());
        ids.push_back(p.id);
        total += s.back();
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor out(out_shape);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < widths[k]; ++c) out[r * total + off + c] = v[r * widths[k] + c];
        }
        off += widths[k];
    }
    return t.record(std::move(out), std::move(ids), [widths, rows, total](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto gx = ctx.input_grad(k);
            if (!gx.empty()) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < widths[k]; ++c) gx[r * widths[k] + c] += g[r * total + off + c];
                }
            }
            off += widths[k];
        }
    });
}

inline Var concat(Var a, Var b) { return concat(std::vector<Var>{a, b}); }

/// Columns [begin, end) of the last axis.
inline Var slice(Var a, std::size_t begin, std::size_t end) {
    Tape& t = detail::tape_of(a);
    const Shape& s = a.shape();
    if (s.empty()) throw shape_error("slice: cannot slice a scalar");
    const std::size_t width = s.back();
    if (begin >= end || end > width) {
        throw shape_error("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") outside last axis of " + shape_str(s));
    }
    const std::size_t rows = a.value().size() / width;
    const std::size_t w = end - begin;
    Shape out_shape = s;
    out_shape.back() = w;
    Tensor out(out_shape);
    const Tensor& x = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * width + begin + c];
    }
    return t.record(std::move(out), {a.id}, [rows, width, begin, w](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < w; ++c) gx[r * width + begin + c] += g[r * w + c];
        }
    });
}

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) {
        throw shape_error("matmul: cannot multiply " + shape_str(x.shape()) + " by " + shape_str(y.shape()));
    }
    const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x[i * k + p];
            for (std::size_t j = 0; j < m; ++j) out[i * m + j] += xv * y[p * m + j];
        }
    }
    return t.record(std::move(out), {a.id, b.id}, [n, k, m](BackwardContext& ctx) {
        const Tensor& x = ctx.input(0);
        const Tensor& y = ctx.input(1);
        auto g = ctx.out_grad();
        if (auto gx = ctx.input_grad(0); !gx.empty()) {
            // dX = G * Y^T
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y[p * m + j];
                    gx[i * k + p] += s;
                }
            }
        }
        if (auto gy = ctx.input_grad(1); !gy.empty()) {
            // dY = X^T * G
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double xv = x[i * k + p];
                    for (std::size_t j = 0; j < m; ++j) gy[p * m + j] += xv * g[i * m + j];
                }
            }
        }
    });
}

inline Var transpose(Var a) {
    Tape& t = detail::tape_of(a);
    const Tensor& x = a.value();
    if (x.rank() != 2) throw shape_error("transpose: needs rank 2, got " + shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    }
    return t.record(std::move(out), {a.id}, [r, c](BackwardContext& ctx) {
        auto gx = ctx.input_grad(0);
        auto g = ctx.out_grad();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
        }
    });
}

/// D[i][j] = |x_i - y_j|^2 for the rows of X (n x d) and Y (m x d).
inline Var pairwise_sqdist(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols()) {
        throw shape_error("pairwise_sqdist: row dimension mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(y.shape()));
    }
    const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = x[i * d + c] - y[j * d + c];
                s += diff * diff;
            }
            out[i * m + j] = s;
        }
    }
    return t.record(std::move(out), {a.id, b.id}, [n, m, d](BackwardContext& ctx) {
        const Tensor& x = ctx.input(0);
        const Tensor& y = ctx.input(1);
        auto g = ctx.out_grad();
        auto gx = ctx.input_grad(0);
        auto gy = ctx.input_grad(1);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double w = 2.0 * g[i * m + j];
                if (w == 0.0) continue;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = w * (x[i * d + c] - y[j * d + c]);
                    if (!gx.empty()) gx[i * d + c] += diff;
                    if (!gy.empty()) gy[j * d + c] -= diff;
                }
            }
        }
    });
}

// Scalar convenience overloads. Constants are recorded on the operand's tape.

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, double c) { return add(a, detail::tape_of(a).constant(c)); }
inline Var operator+(double c, Var a) { return add(detail::tape_of(a).constant(c), a); }
inline Var operator-(Var a, double c) { return sub(a, detail::tape_of(a).constant(c)); }
inline Var operator-(double c, Var a) { return sub(detail::tape_of(a).constant(c), a); }
inline Var operator*(Var a, double c) { return mul(a, detail::tape_of(a).constant(c)); }
inline Var operator*(double c, Var a) { return mul(detail::tape_of(a).constant(c), a); }
inline Var operator/(Var a, double c) { return div(a, detail::tape_of(a).constant(c)); }
inline Var operator/(double c, Var a) { return div(detail::tape_of(a).constant(c), a); }
inline Var operator-(Var a) { return mul(detail::tape_of(a).constant(-1.0), a); }

/// X (n x k) plus a 1 x k row repeated over all rows. Written as X + 1 * b so
/// only scalar broadcasting is needed.
inline Var add_row(Var x, Var row) {
    Tape& t = detail::same_tape(x, row);
    const std::size_t n = x.value().rows();
    return add(x, matmul(t.constant(Tensor({n, 1}, 1.0)), row));
}

}  // namespace uga
