#pragma once

// Dense row-major fp64 arrays used throughout the pipeline. All training-path
// math stays in double precision; narrowing to float32 happens only at asset
// export.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsplat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

    static Tensor of(Shape shape, std::initializer_list<double> values) {
        return Tensor(std::move(shape), std::vector<double>(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Multi-index access, row-major. Slow; meant for tests and small code paths.
    double& at(std::initializer_list<std::size_t> idx) { return data_[flat_index(idx)]; }
    double at(std::initializer_list<std::size_t> idx) const { return data_[flat_index(idx)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double item() const {
        if (numel() != 1)
            throw std::logic_error("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " +
                                        shape_str(shape));
        Tensor out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

private:
    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size())
            throw std::logic_error("index rank mismatch for shape " + shape_str(shape_));
        std::size_t flat = 0;
        std::size_t axis = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[axis])
                throw std::out_of_range("index out of range on axis " + std::to_string(axis));
            flat = flat * shape_[axis] + i;
            ++axis;
        }
        return flat;
    }

    Shape shape_;
    std::vector<double> data_;
};

// Deterministic random source for initialization, data synthesis, and tests.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }

    // Truncated at two standard deviations, the usual transformer init.
    double trunc_normal(double stddev) {
        for (;;) {
            double v = normal(0.0, stddev);
            if (std::abs(v) <= 2.0 * stddev) return v;
        }
    }

    std::uint64_t next_u64() { return gen_(); }

    std::size_t index(std::size_t n) {
        std::uniform_int_distribution<std::size_t> d(0, n - 1);
        return d(gen_);
    }

    Tensor uniform_tensor(Shape shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
        return t;
    }

    Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
        return t;
    }

    Tensor trunc_normal_tensor(Shape shape, double stddev) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = trunc_normal(stddev);
        return t;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace tsplat
