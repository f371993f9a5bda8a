#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uga {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class shape_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles. Rank 0 is a scalar holding one value.
class Tensor {
public:
    Tensor() : values_(1, 0.0) {}

    explicit Tensor(double scalar) : values_(1, scalar) {}

    Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (shape_numel(shape_) != values_.size()) {
            throw shape_error("tensor: shape " + shape_str(shape_) + " does not hold " +
                              std::to_string(values_.size()) + " values");
        }
    }

    static Tensor vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    bool is_scalar() const noexcept { return shape_.empty(); }

    std::size_t rows() const {
        if (rank() != 2) throw shape_error("tensor: rows() needs rank 2, got " + shape_str(shape_));
        return shape_[0];
    }
    std::size_t cols() const {
        if (rank() != 2) throw shape_error("tensor: cols() needs rank 2, got " + shape_str(shape_));
        return shape_[1];
    }

    double item() const {
        if (values_.size() != 1) throw shape_error("tensor: item() on " + shape_str(shape_));
        return values_[0];
    }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> values_;
};

}  // namespace uga
