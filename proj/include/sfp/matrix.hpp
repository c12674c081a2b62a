#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace sfp {

// Dense row-major matrix. N x C feature blocks, kernel weight tables and
// 1 x 1 scalars all use this one carrier.
template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix scalar(T v) {
        Matrix m(1, 1);
        m.data[0] = v;
        return m;
    }

    T* row(std::size_t i) { return data.data() + i * cols; }
    const T* row(std::size_t i) const { return data.data() + i * cols; }

    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <class U>
    Matrix<U> cast() const {
        Matrix<U> out(rows, cols);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool operator==(const Matrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

// out += a * b, with a: m x k, b: k x n, out: m x n.
template <class T>
inline void gemm_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* oi = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = ai[p];
            if (aip == T(0)) continue;
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) oi[j] += aip * bp[j];
        }
    }
}

}  // namespace sfp
