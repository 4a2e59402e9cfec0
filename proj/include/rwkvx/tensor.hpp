// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "rwkvx/errors.hpp"

namespace rwkvx {

template <typename T>
using Vector = std::vector<T>;

/// Dense row-major matrix. All kernels in this header accumulate in a fixed
/// order (ascending inner index) so that repeated calls are bitwise identical.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        RWKVX_CHECK(data_.size() == rows_ * cols_, ShapeError, "matrix data length != rows*cols");
    }
    Matrix(std::initializer_list<std::initializer_list<T>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            RWKVX_CHECK(row.size() == cols_, ShapeError, "ragged matrix initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return rows_ == 0; }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }

    /// Appends one row. An empty matrix adopts the row's width.
    void push_row(std::span<const T> values) {
        if (rows_ == 0 && cols_ == 0) cols_ = values.size();
        RWKVX_CHECK(values.size() == cols_, ShapeError, "push_row width mismatch");
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    /// Removes the first row, shifting the rest up.
    void pop_front_row() {
        RWKVX_CHECK(rows_ > 0, EmptyInputError, "pop_front_row on empty matrix");
        data_.erase(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(cols_));
        --rows_;
    }

    void reserve_rows(std::size_t n) { data_.reserve(n * cols_); }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

/// C = A·B. Loop order i-p-j: every C(i,j) is summed over p in ascending
/// order, and the inner j loop vectorizes without reassociation.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
    Matrix<T> c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T* out = c.row(i).data();
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const T s = a(i, p);
            const T* brow = b.row(p).data();
            for (std::size_t j = 0; j < n; ++j) out[j] += s * brow[j];
        }
    }
    return c;
}

/// y = x·W for a row vector x. Same accumulation order as matmul.
template <typename T>
Vector<T> vecmat(std::span<const T> x, const Matrix<T>& w) {
    if (x.size() != w.rows())
        throw ShapeError("vecmat: x dim " + std::to_string(x.size()) + " vs W " +
                         shape_str(w.rows(), w.cols()));
    Vector<T> y(w.cols(), T(0));
    for (std::size_t p = 0; p < w.rows(); ++p) {
        const T s = x[p];
        const T* wrow = w.row(p).data();
        for (std::size_t j = 0; j < y.size(); ++j) y[j] += s * wrow[j];
    }
    return y;
}

/// y = M·x (column vector).
template <typename T>
Vector<T> matvec(const Matrix<T>& m, std::span<const T> x) {
    if (x.size() != m.cols())
        throw ShapeError("matvec: M " + shape_str(m.rows(), m.cols()) + " x dim " +
                         std::to_string(x.size()));
    Vector<T> y(m.rows(), T(0));
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const T* mrow = m.row(i).data();
        T acc = T(0);
        for (std::size_t j = 0; j < x.size(); ++j) acc += mrow[j] * x[j];
        y[i] = acc;
    }
    return y;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    RWKVX_CHECK(a.size() == b.size(), ShapeError, "dot: length mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

/// Numerically stable softmax of one row, written in place.
template <typename T>
void softmax_inplace(std::span<T> row) {
    if (row.empty()) return;
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = T(0);
    for (T& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (T& v : row) v /= sum;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& m) {
    Matrix<T> out = m;
    for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
    return out;
}

/// Column-wise arithmetic mean over the rows of a row-range.
template <typename T>
Vector<T> mean_pool(const Matrix<T>& rows, std::size_t begin, std::size_t end) {
    RWKVX_CHECK(end > begin && end <= rows.rows(), EmptyInputError, "mean_pool: empty chunk");
    Vector<T> acc(rows.cols(), T(0));
    for (std::size_t r = begin; r < end; ++r) {
        const T* src = rows.row(r).data();
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += src[c];
    }
    const T n = static_cast<T>(end - begin);
    for (T& v : acc) v /= n;
    return acc;
}

template <typename T>
Vector<T> mean_pool(const Matrix<T>& rows) {
    return mean_pool(rows, 0, rows.rows());
}

/// Central-difference gradient (f(x+εeᵢ) − f(x−εeᵢ)) / 2ε.
inline Vector<double> finite_diff_grad(const std::function<double(const Vector<double>&)>& f,
                                       Vector<double> x, double eps) {
    RWKVX_CHECK(eps > 0.0, InputError, "finite_diff_grad: eps must be positive");
    Vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f(x);
        x[i] = orig - eps;
        const double fm = f(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw OracleError("finite_diff_grad: non-finite function value at coordinate " +
                              std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

template <typename T>
bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
    std::vector<To> data(m.data().begin(), m.data().end());
    return Matrix<To>(m.rows(), m.cols(), std::move(data));
}

}  // namespace rwkvx
