#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dcla/errors.hpp"

namespace dcla {

// Dense row-major float32 matrix. Hidden states are rows x d_model.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw InvalidArgument("matrix data size does not match shape");
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> flat() { return data_; }
    std::span<const float> flat() const { return data_; }
    const std::vector<float>& values() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Read-only view of row-major weights owned elsewhere.
struct MatrixView {
    const float* data = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::span<const float> row(std::size_t r) const { return {data + r * cols, cols}; }
};

inline bool all_finite(std::span<const float> values) {
    for (float v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace dcla
