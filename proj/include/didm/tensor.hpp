#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "didm/error.hpp"

namespace didm {

/// Dense row-major matrix of doubles. Vectors are 1×n, scalars 1×1.
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Tensor() = default;

    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

    Tensor(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v))
    {
        if (values.size() != rows * cols) {
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape [" +
                             std::to_string(rows) + ", " + std::to_string(cols) + "]");
        }
    }

    [[nodiscard]] static Tensor scalar(double v) { return Tensor(1, 1, std::vector<double>{v}); }

    [[nodiscard]] static Tensor row(std::initializer_list<double> v)
    {
        return Tensor(1, v.size(), std::vector<double>(v));
    }

    [[nodiscard]] static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows_in)
    {
        Tensor t;
        t.rows = rows_in.size();
        t.cols = t.rows == 0 ? 0 : rows_in.begin()->size();
        for (const auto& r : rows_in) {
            if (r.size() != t.cols) {
                throw ShapeError("tensor: ragged row list");
            }
            t.values.insert(t.values.end(), r.begin(), r.end());
        }
        return t;
    }

    [[nodiscard]] static Tensor identity(std::size_t n)
    {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            t(i, i) = 1.0;
        }
        return t;
    }

    [[nodiscard]] std::array<std::size_t, 2> shape() const { return {rows, cols}; }
    [[nodiscard]] std::size_t size() const { return values.size(); }
    [[nodiscard]] bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

    [[nodiscard]] double item() const
    {
        if (values.size() != 1) {
            throw ShapeError("tensor: item() on non-scalar of shape " + shape_string());
        }
        return values[0];
    }

    [[nodiscard]] bool all_finite() const
    {
        for (double v : values) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    [[nodiscard]] std::string shape_string() const
    {
        return "[" + std::to_string(rows) + ", " + std::to_string(cols) + "]";
    }

    bool operator==(const Tensor&) const = default;
};

}  // namespace didm
