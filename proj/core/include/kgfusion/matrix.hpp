#pragma once
// Row-major f64 matrix. All model math runs in 64-bit so the finite-difference
// gradient checks have the precision they need. The op set is exactly what the
// encoders and decoder use; this is deliberately not a linear algebra library.

#include "kgfusion/errors.hpp"
#include "kgfusion/rng.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace kgf {

class Matrix {
public:
    Matrix() = default;
    Matrix(size_t rows, size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    size_t rows() const { return rows_; }
    size_t cols() const { return cols_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(size_t i, size_t j) { return data_[i * cols_ + j]; }
    double operator()(size_t i, size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(size_t i) const {
        return {data_.data() + i * cols_, cols_};
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    void fill(double v) { data_.assign(data_.size(), v); }

    void fill_uniform(Rng& rng, double limit) {
        for (auto& x : data_) x = rng.next_uniform(limit);
    }

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Matrix& operator+=(const Matrix& o) {
        require_same_shape(o);
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Matrix& operator*=(double s) {
        for (auto& x : data_) x *= s;
        return *this;
    }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    void require_same_shape(const Matrix& o) const {
        if (rows_ != o.rows_ || cols_ != o.cols_)
            throw DimensionMismatch("matrix shape mismatch");
    }

    size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DimensionMismatch("matmul: inner dims differ");
    Matrix c(a.rows(), b.cols());
    for (size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        auto cr = c.row(i);
        for (size_t k = 0; k < a.cols(); ++k) {
            const double aik = ar[k];
            if (aik == 0.0) continue;
            const auto br = b.row(k);
            for (size_t j = 0; j < b.cols(); ++j) cr[j] += aik * br[j];
        }
    }
    return c;
}

// C = A * B^T
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionMismatch("matmul_bt: widths differ");
    Matrix c(a.rows(), b.rows());
    for (size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        for (size_t j = 0; j < b.rows(); ++j) {
            const auto br = b.row(j);
            double s = 0.0;
            for (size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
            c(i, j) = s;
        }
    }
    return c;
}

// C = A^T * B
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw DimensionMismatch("matmul_at: heights differ");
    Matrix c(a.cols(), b.cols());
    for (size_t k = 0; k < a.rows(); ++k) {
        const auto ar = a.row(k);
        const auto br = b.row(k);
        for (size_t i = 0; i < a.cols(); ++i) {
            const double aki = ar[i];
            if (aki == 0.0) continue;
            auto cr = c.row(i);
            for (size_t j = 0; j < b.cols(); ++j) cr[j] += aki * br[j];
        }
    }
    return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> a) {
    return std::sqrt(dot(a, a));
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

} // namespace kgf
