#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "timesbert/errors.hpp"

namespace timesbert {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same size as value
    bool requires_grad = false;
};

}  // namespace detail

/// Shared handle to a dense row-major float64 array with an optional gradient
/// accumulator. Copies alias the same storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    // Zero-filled.
    explicit Tensor(Shape shape) : d_(std::make_shared<detail::TensorData>()) {
        validate(shape);
        d_->value.assign(shape_numel(shape), 0.0);
        d_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : d_(std::make_shared<detail::TensorData>()) {
        validate(shape);
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        }
        d_->shape = std::move(shape);
        d_->value = std::move(values);
        d_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    bool defined() const { return static_cast<bool>(d_); }
    const void* id() const { return d_.get(); }

    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
    std::size_t numel() const { return d_->value.size(); }

    // Matrix view: trailing axis is columns, everything before it is rows.
    std::size_t cols() const { return d_->shape.back(); }
    std::size_t rows() const { return numel() / cols(); }

    std::span<double> values() { return d_->value; }
    std::span<const double> values() const { return d_->value; }
    double* data() { return d_->value.data(); }
    const double* data() const { return d_->value.data(); }

    double& operator[](std::size_t i) { return d_->value[i]; }
    double operator[](std::size_t i) const { return d_->value[i]; }
    double& at(std::size_t r, std::size_t c) { return d_->value[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return d_->value[r * cols() + c]; }

    double item() const {
        if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool on) { d_->requires_grad = on; }

    bool has_grad() const { return !d_->grad.empty(); }

    // Allocates a zero accumulator on first access. The accumulator is not
    // part of the value, so const handles may write it.
    std::span<double> grad() const {
        if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
        return d_->grad;
    }

    void zero_grad() const { std::fill(d_->grad.begin(), d_->grad.end(), 0.0); }
    void drop_grad() const {
        d_->grad.clear();
        d_->grad.shrink_to_fit();
    }

    Tensor clone() const {
        Tensor t(d_->shape, d_->value, d_->requires_grad);
        return t;
    }

    // Value copy disconnected from any graph.
    Tensor detach() const { return Tensor(d_->shape, d_->value, false); }

    bool all_finite() const {
        return std::all_of(d_->value.begin(), d_->value.end(), [](double v) { return std::isfinite(v); });
    }

private:
    static void validate(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor: empty shape");
        for (auto s : shape) {
            if (s == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_str(shape));
        }
    }

    std::shared_ptr<detail::TensorData> d_;
};

/// Record of executed differentiable operations. Each entry is the backward
/// closure of one op; backward() replays them in exact reverse order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return ops_.size(); }

    void backward(Tensor loss) {
        if (loss.numel() != 1) {
            throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) return;
        loss.grad()[0] += 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() { ops_.clear(); }

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

private:
    std::vector<std::function<void()>> ops_;
};

/// Makes `tape` the recording target for the current thread while in scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(Tape::active()) { Tape::active() = &tape; }
    ~TapeScope() { Tape::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

/// Disables recording while in scope.
class NoGradScope {
public:
    NoGradScope() : prev_(Tape::active()) { Tape::active() = nullptr; }
    ~NoGradScope() { Tape::active() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

}  // namespace timesbert
