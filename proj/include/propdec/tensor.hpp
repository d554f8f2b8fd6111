#pragma once

#include <cassert>
#include <cstring>
#include <vector>

namespace propdec {

// Dense row-major matrix over an arbitrary scalar (double, float or Dual).
template <typename T>
struct MatT {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    MatT() = default;
    MatT(int r, int c) : rows(r), cols(c), data(size_t(r) * c, T(0)) {}

    T* row(int r) { return data.data() + size_t(r) * cols; }
    const T* row(int r) const { return data.data() + size_t(r) * cols; }

    T& at(int r, int c) { return data[size_t(r) * cols + c]; }
    const T& at(int r, int c) const { return data[size_t(r) * cols + c]; }

    void zero() { std::fill(data.begin(), data.end(), T(0)); }
    void resize(int r, int c) { rows = r; cols = c; data.assign(size_t(r) * c, T(0)); }
};

using Mat = MatT<double>;
using Vec = std::vector<double>;

inline Mat transpose(const Mat& a) {
    Mat t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j)
            t.at(j, i) = a.at(i, j);
    return t;
}

inline double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const Vec& a, const Vec& b) {
    assert(a.size() == b.size());
    return dot(a.data(), b.data(), (int)a.size());
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline void axpy(double alpha, const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
    assert(x.size() == y.size());
    axpy(alpha, x.data(), y.data(), (int)x.size());
}

inline void scale(Vec& v, double alpha) {
    for (auto& x : v) x *= alpha;
}

} // namespace propdec
