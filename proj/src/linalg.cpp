#include "propdec/linalg.hpp"

#include <cmath>
#include <stdexcept>

namespace propdec {

SvdResult svd(const Mat& a, int max_sweeps, double tol) {
    const int m = a.rows, n = a.cols;
    if (m < n) throw std::invalid_argument("svd: expects rows >= cols");
    Mat w = a; // columns get orthogonalized in place
    Mat v(n, n);
    for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

    auto col_dot = [&](const Mat& mat, int i, int j) {
        double s = 0.0;
        for (int r = 0; r < mat.rows; ++r) s += mat.at(r, i) * mat.at(r, j);
        return s;
    };

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double app = col_dot(w, p, p);
                double aqq = col_dot(w, q, q);
                double apq = col_dot(w, p, q);
                if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
                off += std::abs(apq);
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (int r = 0; r < m; ++r) {
                    double wp = w.at(r, p), wq = w.at(r, q);
                    w.at(r, p) = c * wp - s * wq;
                    w.at(r, q) = s * wp + c * wq;
                }
                for (int r = 0; r < n; ++r) {
                    double vp = v.at(r, p), vq = v.at(r, q);
                    v.at(r, p) = c * vp - s * vq;
                    v.at(r, q) = s * vp + c * vq;
                }
            }
        }
        if (off == 0.0) break;
    }

    SvdResult res;
    res.s.assign(n, 0.0);
    res.u.resize(m, n);
    res.v.resize(n, n);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Vec norms(n);
    for (int j = 0; j < n; ++j) norms[j] = std::sqrt(col_dot(w, j, j));
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return norms[i] > norms[j]; });

    for (int jj = 0; jj < n; ++jj) {
        int j = order[jj];
        double sj = norms[j];
        res.s[jj] = sj;
        if (sj > 0.0) {
            for (int r = 0; r < m; ++r) res.u.at(r, jj) = w.at(r, j) / sj;
        } else {
            // null direction: keep an arbitrary unit vector orthogonalized later
            res.u.at(jj < m ? jj : 0, jj) = 1.0;
        }
        for (int r = 0; r < n; ++r) res.v.at(r, jj) = v.at(r, j);
    }
    return res;
}

Mat orthonormalize_columns(const Mat& a, double drop_tol) {
    const int m = a.rows, n = a.cols;
    Mat q(m, n);
    int r = 0;
    Vec col(m);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < m; ++i) col[i] = a.at(i, j);
        for (int k = 0; k < r; ++k) {
            double proj = 0.0;
            for (int i = 0; i < m; ++i) proj += q.at(i, k) * col[i];
            for (int i = 0; i < m; ++i) col[i] -= proj * q.at(i, k);
        }
        // second pass for numerical cleanliness
        for (int k = 0; k < r; ++k) {
            double proj = 0.0;
            for (int i = 0; i < m; ++i) proj += q.at(i, k) * col[i];
            for (int i = 0; i < m; ++i) col[i] -= proj * q.at(i, k);
        }
        double nrm = 0.0;
        for (int i = 0; i < m; ++i) nrm += col[i] * col[i];
        nrm = std::sqrt(nrm);
        if (nrm < drop_tol) continue;
        for (int i = 0; i < m; ++i) q.at(i, r) = col[i] / nrm;
        ++r;
    }
    Mat out(m, r);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < r; ++j) out.at(i, j) = q.at(i, j);
    return out;
}

Vec principal_angles_deg(const Mat& basis_a, const Mat& basis_b) {
    if (basis_a.rows != basis_b.rows)
        throw std::invalid_argument("principal_angles: row mismatch");
    const int ka = basis_a.cols, kb = basis_b.cols;
    const int k = std::min(ka, kb);
    // cross-Gram, then singular values are the cosines
    Mat g(ka, kb);
    for (int i = 0; i < ka; ++i)
        for (int j = 0; j < kb; ++j) {
            double s = 0.0;
            for (int r = 0; r < basis_a.rows; ++r)
                s += basis_a.at(r, i) * basis_b.at(r, j);
            g.at(i, j) = s;
        }
    Mat gt = (ka >= kb) ? g : transpose(g);
    SvdResult res = svd(gt);
    Vec angles(k);
    for (int i = 0; i < k; ++i) {
        double c = std::min(1.0, std::max(-1.0, res.s[i]));
        angles[i] = std::acos(c) * 180.0 / M_PI;
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

Mat random_orthogonal(int d, Rng& rng) {
    Mat g(d, d);
    for (auto& x : g.data) x = rng.normal();
    Mat q = orthonormalize_columns(g);
    if (q.cols != d) throw std::runtime_error("random_orthogonal: degenerate draw");
    return q;
}

void jacobi_eigh(const Mat& a, Vec& eigenvalues, Mat& eigenvectors) {
    const int n = a.rows;
    if (a.cols != n) throw std::invalid_argument("jacobi_eigh: square matrix required");
    Mat w = a;
    Mat v(n, n);
    for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = w.at(p, q);
                if (std::abs(apq) < 1e-14) continue;
                off += std::abs(apq);
                double app = w.at(p, p), aqq = w.at(q, q);
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (int r = 0; r < n; ++r) {
                    double wrp = w.at(r, p), wrq = w.at(r, q);
                    w.at(r, p) = c * wrp - s * wrq;
                    w.at(r, q) = s * wrp + c * wrq;
                }
                for (int r = 0; r < n; ++r) {
                    double wpr = w.at(p, r), wqr = w.at(q, r);
                    w.at(p, r) = c * wpr - s * wqr;
                    w.at(q, r) = s * wpr + c * wqr;
                }
                for (int r = 0; r < n; ++r) {
                    double vrp = v.at(r, p), vrq = v.at(r, q);
                    v.at(r, p) = c * vrp - s * vrq;
                    v.at(r, q) = s * vrp + c * vrq;
                }
            }
        }
        if (off == 0.0) break;
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return w.at(i, i) > w.at(j, j); });
    eigenvalues.assign(n, 0.0);
    eigenvectors.resize(n, n);
    for (int j = 0; j < n; ++j) {
        eigenvalues[j] = w.at(order[j], order[j]);
        for (int r = 0; r < n; ++r) eigenvectors.at(r, j) = v.at(r, order[j]);
    }
}

} // namespace propdec
