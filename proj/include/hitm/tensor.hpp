#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hitm {

/// Dense row-major tensor of 64-bit reals. Shape metadata is explicit and
/// there is no broadcasting; every operation checks shapes and throws
/// std::invalid_argument on mismatch.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s)
        : shape(std::move(s)), data(element_count(shape), 0.0) {}

    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (element_count(shape) != data.size()) {
            throw std::invalid_argument("Tensor: shape " + shape_string() +
                                        " does not match data length " +
                                        std::to_string(data.size()));
        }
    }

    static std::size_t element_count(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1},
                               std::multiplies<>{});
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    /// CHW accessor for rank-3 tensors (no bounds check in release paths).
    double& at3(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * shape[1] + y) * shape[2] + x];
    }
    double at3(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * shape[1] + y) * shape[2] + x];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(),
                           [](double v) { return std::isfinite(v); });
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "operator+=");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
        return *this;
    }

    Tensor& operator-=(const Tensor& other) {
        require_same_shape(other, "operator-=");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= other.data[i];
        return *this;
    }

    Tensor& operator*=(double a) {
        for (double& v : data) v *= a;
        return *this;
    }

    /// this += a * other
    Tensor& scaled_add(double a, const Tensor& other) {
        require_same_shape(other, "scaled_add");
        for (std::size_t i = 0; i < data.size(); ++i)
            data[i] += a * other.data[i];
        return *this;
    }

    Tensor& clamp_inplace(double lo, double hi) {
        for (double& v : data) v = std::clamp(v, lo, hi);
        return *this;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_string() const {
        std::ostringstream out;
        out << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) out << 'x';
            out << shape[i];
        }
        out << ']';
        return out.str();
    }

    void require_same_shape(const Tensor& other, const char* where) const {
        if (!same_shape(other)) {
            throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                        shape_string() + " vs " +
                                        other.shape_string());
        }
    }
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(double s, Tensor a) { return a *= s; }

}  // namespace hitm
