#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace textrec {

/// Dense row-major matrix. The numeric workhorse for the model; gemms are
/// delegated to Eigen maps (single-threaded, bitwise deterministic per build).
template <typename T>
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

    T* row(std::size_t r) { return data.data() + r * cols; }
    const T* row(std::size_t r) const { return data.data() + r * cols; }
    T& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    T at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::size_t size() const { return data.size(); }
    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }
};

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<EMat<T>>;
template <typename T>
using CMap = Eigen::Map<const EMat<T>>;
template <typename T>
using Stride = Eigen::OuterStride<Eigen::Dynamic>;
template <typename T>
using SMap = Eigen::Map<EMat<T>, Eigen::Unaligned, Eigen::OuterStride<Eigen::Dynamic>>;
template <typename T>
using SCMap = Eigen::Map<const EMat<T>, Eigen::Unaligned, Eigen::OuterStride<Eigen::Dynamic>>;

}  // namespace detail

template <typename T>
detail::Map<T> as_eigen(Mat<T>& m) {
    return detail::Map<T>(m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols));
}

template <typename T>
detail::CMap<T> as_eigen(const Mat<T>& m) {
    return detail::CMap<T>(m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols));
}

/// C = A * B  (or C += when accumulate).
template <typename T>
void matmul_nn(Mat<T>& c, const Mat<T>& a, const Mat<T>& b, bool accumulate = false) {
    if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols) throw std::invalid_argument("matmul_nn: shape mismatch");
    if (accumulate)
        as_eigen(c).noalias() += as_eigen(a) * as_eigen(b);
    else
        as_eigen(c).noalias() = as_eigen(a) * as_eigen(b);
}

/// C = A * B^T.
template <typename T>
void matmul_nt(Mat<T>& c, const Mat<T>& a, const Mat<T>& b, bool accumulate = false) {
    if (a.cols != b.cols || c.rows != a.rows || c.cols != b.rows) throw std::invalid_argument("matmul_nt: shape mismatch");
    if (accumulate)
        as_eigen(c).noalias() += as_eigen(a) * as_eigen(b).transpose();
    else
        as_eigen(c).noalias() = as_eigen(a) * as_eigen(b).transpose();
}

/// C = A^T * B.
template <typename T>
void matmul_tn(Mat<T>& c, const Mat<T>& a, const Mat<T>& b, bool accumulate = false) {
    if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols) throw std::invalid_argument("matmul_tn: shape mismatch");
    if (accumulate)
        as_eigen(c).noalias() += as_eigen(a).transpose() * as_eigen(b);
    else
        as_eigen(c).noalias() = as_eigen(a).transpose() * as_eigen(b);
}

}  // namespace textrec
