#pragma once

// Data-parallel kernels used by the model and the analysis passes.
// Each kernel has an OpenMP-parallel version here and a serial reference
// under kern::ref; tests compare the two and tools/bench times them.
// Parallelism is always over independent output rows, so results are
// identical for any thread count.

#include <cmath>

#include "propdec/tensor.hpp"

namespace propdec::kern {

namespace ref {

// C[m x n] = A[m x k] * B[k x n]
template <typename T, typename P>
void matmul(const T* a, const P* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + size_t(i) * k;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            const P* brow = b + size_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] = A[m x k] * B^T where B is [n x k]
template <typename T, typename P>
void matmul_nt(const T* a, const P* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + size_t(i) * k;
        T* crow = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const P* brow = b + size_t(j) * k;
            T s(0);
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = s;
        }
    }
}

// C[m x n] += A^T[m x k] * B[k x n] where A is [k x m] (grad accumulation)
template <typename T>
void matmul_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const T* arow = a + size_t(p) * m;
        const T* brow = b + size_t(p) * n;
        for (int i = 0; i < m; ++i) {
            T av = arow[i];
            T* crow = c + size_t(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void softmax_row(T* x, int n) {
    using std::exp; // ADL picks up the Dual overload
    T mx = x[0];
    for (int i = 1; i < n; ++i)
        if (x[i] > mx) mx = x[i];
    T sum(0);
    for (int i = 0; i < n; ++i) {
        x[i] = exp(x[i] - mx);
        sum += x[i];
    }
    for (int i = 0; i < n; ++i) x[i] = x[i] / sum;
}

} // namespace ref

template <typename T, typename P>
void matmul(const T* a, const P* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m >= 8)
    for (int i = 0; i < m; ++i) {
        ref::matmul(a + size_t(i) * k, b, c + size_t(i) * n, 1, k, n);
    }
}

template <typename T, typename P>
void matmul_nt(const T* a, const P* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m >= 8)
    for (int i = 0; i < m; ++i) {
        ref::matmul_nt(a + size_t(i) * k, b, c + size_t(i) * n, 1, k, n);
    }
}

template <typename T>
void matmul_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    // serial: output rows are shared across the k loop
    ref::matmul_tn_acc(a, b, c, m, k, n);
}

using ref::softmax_row;

} // namespace propdec::kern
