#pragma once

// Dense row-major tensors of 64-bit floats. Everything the workbench moves
// around is rank-2 in practice (batch x features, or a weight matrix); rank-1
// data is stored as a single row.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "csdi/common.hpp"

namespace csdi {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : shape{rows, cols}, v(rows * cols, fill) {}

    static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(rows, cols, 0.0); }

    static Tensor row(std::initializer_list<double> xs) {
        Tensor t(1, xs.size());
        std::size_t i = 0;
        for (double x : xs) t.v[i++] = x;
        return t;
    }

    static Tensor from_rows(std::size_t rows, std::size_t cols, std::vector<double> data) {
        if (data.size() != rows * cols)
            throw ShapeError("Tensor::from_rows: " + std::to_string(data.size()) + " values for " +
                             std::to_string(rows) + "x" + std::to_string(cols));
        Tensor t;
        t.shape = {rows, cols};
        t.v = std::move(data);
        return t;
    }

    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }
    std::size_t numel() const { return v.size(); }

    double& at(std::size_t r, std::size_t c) { return v[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

inline double squared_norm(const Tensor& t) {
    double s = 0.0;
    for (double x : t.v) s += x * x;
    return s;
}

inline double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double x : t.v) m = std::max(m, std::fabs(x));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shapes " + a.shape_str() + " vs " + b.shape_str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
    return m;
}

}  // namespace csdi
