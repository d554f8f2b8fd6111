#include "propdec/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <algorithm>
#include <sstream>

#include "propdec/config.hpp"

namespace propdec {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T gelu(T x) {
    using std::tanh;
    T w = (x + x * x * x * T(kGeluA)) * T(kGeluC);
    return x * (tanh(w) + T(1)) * T(0.5);
}

template <typename T>
T gelu_deriv(T x) {
    using std::tanh;
    T w = (x + x * x * x * T(kGeluA)) * T(kGeluC);
    T th = tanh(w);
    T dw = (T(1) + x * x * T(3.0 * kGeluA)) * T(kGeluC);
    return (th + T(1)) * T(0.5) + x * (T(1) - th * th) * dw * T(0.5);
}

// y = g * xhat + b; xhat = (x - mu) * rstd
template <typename T, typename P>
void ln_forward_row(const T* x, const P* g, const P* b, int d, T* xhat, T* y, T* rstd_out) {
    using std::sqrt;
    T mu(0);
    for (int i = 0; i < d; ++i) mu += x[i];
    mu = mu / T(double(d));
    T var(0);
    for (int i = 0; i < d; ++i) {
        T c = x[i] - mu;
        var += c * c;
    }
    var = var / T(double(d));
    T rstd = T(1) / sqrt(var + T(kLnEps));
    for (int i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mu) * rstd;
        y[i] = xhat[i] * T(g[i]) + T(b[i]);
    }
    *rstd_out = rstd;
}

template <typename T, typename P>
void ln_backward_row(const T* dy, const T* xhat, T rstd, const P* g, int d, T* dx_acc,
                     T* dg_acc, T* db_acc) {
    T m1(0), m2(0);
    for (int i = 0; i < d; ++i) {
        T dxh = dy[i] * T(g[i]);
        m1 += dxh;
        m2 += dxh * xhat[i];
    }
    m1 = m1 / T(double(d));
    m2 = m2 / T(double(d));
    for (int i = 0; i < d; ++i) {
        T dxh = dy[i] * T(g[i]);
        dx_acc[i] += rstd * (dxh - m1 - xhat[i] * m2);
        if (dg_acc) {
            dg_acc[i] += dy[i] * xhat[i];
            db_acc[i] += dy[i];
        }
    }
}

template <typename T, typename P>
void add_bias_rows(MatT<T>& m, const std::vector<P>& b) {
    for (int s = 0; s < m.rows; ++s) {
        T* row = m.row(s);
        for (int j = 0; j < m.cols; ++j) row[j] += T(b[size_t(j)]);
    }
}

} // namespace

void validate_intervention(const InterventionSpec& spec, int d_model, int seq_len,
                           int n_layers) {
    for (const auto& e : spec.edits) {
        if (e.pos < 0 || e.pos >= seq_len)
            throw std::invalid_argument("intervention: position out of range");
        for (int l : e.layers)
            if (l < 0 || l >= n_layers)
                throw std::invalid_argument("intervention: layer out of range");
        if (e.kind == Edit::Kind::AddVector) {
            if (int(e.v.size()) != d_model)
                throw std::invalid_argument("intervention: payload size mismatch");
        } else {
            if (e.partner < 0 || e.partner >= seq_len)
                throw std::invalid_argument("intervention: partner out of range");
            const Mat& p = e.projector;
            if (p.rows != d_model || p.cols != d_model)
                throw std::invalid_argument("projector error: shape mismatch");
            // symmetric and idempotent within 1e-6
            double worst = 0.0;
            for (int i = 0; i < d_model; ++i)
                for (int j = 0; j < d_model; ++j) {
                    worst = std::max(worst, std::abs(p.at(i, j) - p.at(j, i)));
                    double pp = 0.0;
                    for (int r = 0; r < d_model; ++r) pp += p.at(i, r) * p.at(r, j);
                    worst = std::max(worst, std::abs(pp - p.at(i, j)));
                }
            if (worst > 1e-6)
                throw std::invalid_argument("projector error: not symmetric idempotent");
        }
    }
}

// --- forward ----------------------------------------------------------------

template <typename T, typename P>
static void apply_edits(const ModelConfig& cfg, const Vec& layer_scale,
                        const InterventionSpec* spec, int layer, MatT<T>& h,
                        ForwardTrace<T>& tr) {
    if (!spec) return;
    const int d = cfg.d_model;
    double ls = layer_scale.empty() ? 1.0 : layer_scale[size_t(layer)];
    for (const auto& e : spec->edits) {
        if (e.kind != Edit::Kind::AddVector || !e.applies_to(layer)) continue;
        double s = spec->scaled ? ls : 1.0;
        T* row = h.row(e.pos);
        const bool has_tan = !e.v_tangent.empty();
        for (int i = 0; i < d; ++i)
            row[i] += make_scalar<T>(s * e.v[size_t(i)],
                                     has_tan ? s * e.v_tangent[size_t(i)] : 0.0);
    }
    // joint snapshot semantics: all swaps at this layer read pre-swap values
    std::vector<int> rows;
    for (const auto& e : spec->edits) {
        if (e.kind != Edit::Kind::ProjectSwap || !e.applies_to(layer)) continue;
        rows.push_back(e.pos);
        rows.push_back(e.partner);
    }
    if (rows.empty()) {
        tr.swap_rows[size_t(layer)].clear();
        return;
    }
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    MatT<T>& snap = tr.swap_snap[size_t(layer)];
    snap.resize(int(rows.size()), d);
    for (size_t r = 0; r < rows.size(); ++r)
        std::copy(h.row(rows[r]), h.row(rows[r]) + d, snap.row(int(r)));
    tr.swap_rows[size_t(layer)] = rows;
    auto snap_of = [&](int pos) -> const T* {
        auto it = std::lower_bound(rows.begin(), rows.end(), pos);
        return snap.row(int(it - rows.begin()));
    };
    for (const auto& e : spec->edits) {
        if (e.kind != Edit::Kind::ProjectSwap || !e.applies_to(layer)) continue;
        const T* zi = snap_of(e.pos);
        const T* zj = snap_of(e.partner);
        T* out = h.row(e.pos);
        for (int i = 0; i < d; ++i) {
            T acc = zi[i];
            const double* prow = e.projector.row(i);
            for (int j = 0; j < d; ++j) acc += T(prow[j]) * (zj[j] - zi[j]);
            out[i] = acc;
        }
    }
}

template <typename T, typename P>
void forward_pass(const ModelConfig& cfg, const ParamsT<P>& params, const Vec& layer_scale,
                  const std::vector<int>& tokens, const InterventionSpec* spec,
                  ForwardTrace<T>& tr) {
    const int S = int(tokens.size());
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const int dff = cfg.d_ff, L = cfg.n_layers, V = cfg.vocab_size;
    if (S == 0) throw std::invalid_argument("length error: empty sequence");
    if (S > cfg.max_seq_len) throw std::invalid_argument("length error: sequence too long");
    for (int t : tokens)
        if (t < 0 || t >= V) throw std::invalid_argument("token out of vocabulary");
    if (spec) validate_intervention(*spec, d, S, L);

    tr.S = S;
    tr.z.assign(size_t(L) + 1, MatT<T>(S, d));
    tr.ln1_xhat.assign(size_t(L), MatT<T>(S, d));
    tr.ln2_xhat.assign(size_t(L), MatT<T>(S, d));
    tr.ln1_rstd.assign(size_t(L), std::vector<T>(size_t(S)));
    tr.ln2_rstd.assign(size_t(L), std::vector<T>(size_t(S)));
    tr.q.assign(size_t(L), MatT<T>(S, d));
    tr.k.assign(size_t(L), MatT<T>(S, d));
    tr.v.assign(size_t(L), MatT<T>(S, d));
    tr.att.assign(size_t(L), MatT<T>(H * S, S));
    tr.ctx.assign(size_t(L), MatT<T>(S, d));
    tr.z_mid.assign(size_t(L), MatT<T>(S, d));
    tr.ff_u.assign(size_t(L), MatT<T>(S, dff));
    tr.final_xhat.resize(S, d);
    tr.final_rstd.assign(size_t(S), T(0));
    tr.logits.resize(S, V);
    tr.swap_rows.assign(size_t(L), {});
    tr.swap_snap.assign(size_t(L), MatT<T>());

    MatT<T> h(S, d);
    for (int s = 0; s < S; ++s) {
        const P* te = params.tok_emb.row(tokens[size_t(s)]);
        const P* pe = params.pos_emb.row(s);
        T* row = h.row(s);
        for (int i = 0; i < d; ++i) row[i] = T(te[i]) + T(pe[i]);
    }

    MatT<T> a(S, d), m(S, d), tmp(S, d), u(S, dff), gact(S, dff);
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    for (int l = 0; l < L; ++l) {
        const auto& lp = params.layers[size_t(l)];
        apply_edits<T, P>(cfg, layer_scale, spec, l, h, tr);
        tr.z[size_t(l)] = h;

        for (int s = 0; s < S; ++s)
            ln_forward_row(h.row(s), lp.ln1_g.data(), lp.ln1_b.data(), d,
                           tr.ln1_xhat[size_t(l)].row(s), a.row(s),
                           &tr.ln1_rstd[size_t(l)][size_t(s)]);

        kern::matmul(a.data.data(), lp.wq.data.data(), tr.q[size_t(l)].data.data(), S, d, d);
        kern::matmul(a.data.data(), lp.wk.data.data(), tr.k[size_t(l)].data.data(), S, d, d);
        kern::matmul(a.data.data(), lp.wv.data.data(), tr.v[size_t(l)].data.data(), S, d, d);
        add_bias_rows(tr.q[size_t(l)], lp.bq);
        add_bias_rows(tr.k[size_t(l)], lp.bk);
        add_bias_rows(tr.v[size_t(l)], lp.bv);

        MatT<T>& att = tr.att[size_t(l)];
        MatT<T>& ctx = tr.ctx[size_t(l)];
        ctx.zero();
        att.zero();
#pragma omp parallel for schedule(static) if (H * S >= 16)
        for (int hs = 0; hs < H * S; ++hs) {
            const int hd = hs / S, s = hs % S;
            const MatT<T>& q = tr.q[size_t(l)];
            const MatT<T>& k = tr.k[size_t(l)];
            const MatT<T>& v = tr.v[size_t(l)];
            T* arow = att.row(hs);
            const T* qrow = q.row(s) + hd * dh;
            for (int t = 0; t <= s; ++t) {
                const T* krow = k.row(t) + hd * dh;
                T sc(0);
                for (int i = 0; i < dh; ++i) sc += qrow[i] * krow[i];
                arow[t] = sc * T(inv_sqrt_dh);
            }
            kern::softmax_row(arow, s + 1);
            T* crow = ctx.row(s) + hd * dh;
            for (int t = 0; t <= s; ++t) {
                const T* vrow = v.row(t) + hd * dh;
                for (int i = 0; i < dh; ++i) crow[i] += arow[t] * vrow[i];
            }
        }

        kern::matmul(ctx.data.data(), lp.wo.data.data(), tmp.data.data(), S, d, d);
        add_bias_rows(tmp, lp.bo);
        MatT<T>& zm = tr.z_mid[size_t(l)];
        for (size_t i = 0; i < h.data.size(); ++i) zm.data[i] = h.data[i] + tmp.data[i];

        for (int s = 0; s < S; ++s)
            ln_forward_row(zm.row(s), lp.ln2_g.data(), lp.ln2_b.data(), d,
                           tr.ln2_xhat[size_t(l)].row(s), m.row(s),
                           &tr.ln2_rstd[size_t(l)][size_t(s)]);

        kern::matmul(m.data.data(), lp.w1.data.data(), tr.ff_u[size_t(l)].data.data(), S, d, dff);
        add_bias_rows(tr.ff_u[size_t(l)], lp.b1);
        for (size_t i = 0; i < tr.ff_u[size_t(l)].data.size(); ++i)
            gact.data[i] = gelu(tr.ff_u[size_t(l)].data[i]);
        kern::matmul(gact.data.data(), lp.w2.data.data(), tmp.data.data(), S, dff, d);
        add_bias_rows(tmp, lp.b2);
        for (size_t i = 0; i < h.data.size(); ++i) h.data[i] = zm.data[i] + tmp.data[i];
    }

    tr.z[size_t(L)] = h;
    MatT<T> y(S, d);
    for (int s = 0; s < S; ++s)
        ln_forward_row(h.row(s), params.lnf_g.data(), params.lnf_b.data(), d,
                       tr.final_xhat.row(s), y.row(s), &tr.final_rstd[size_t(s)]);
    kern::matmul_nt(y.data.data(), params.w_un.data.data(), tr.logits.data.data(), S, d, V);
    add_bias_rows(tr.logits, params.b_un);
}

// --- backward ----------------------------------------------------------------

template <typename T, typename P>
void backward_pass(const ModelConfig& cfg, const ParamsT<P>& params, const Vec& layer_scale,
                   const std::vector<int>& tokens, const InterventionSpec* spec,
                   const ForwardTrace<T>& tr, const MatT<T>& dlogits,
                   std::vector<MatT<T>>* dz_out, ParamGradsT<T>* pgrads,
                   std::vector<Mat>* dproj_out) {
    (void)layer_scale;
    const int S = tr.S;
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const int dff = cfg.d_ff, L = cfg.n_layers, V = cfg.vocab_size;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    if (dz_out) dz_out->assign(size_t(L), MatT<T>(S, d));

    // final head: logits = y * w_un^T + b_un
    MatT<T> y(S, d);
    for (int s = 0; s < S; ++s) {
        const T* xh = tr.final_xhat.row(s);
        T* yr = y.row(s);
        for (int i = 0; i < d; ++i)
            yr[i] = xh[i] * T(params.lnf_g[size_t(i)]) + T(params.lnf_b[size_t(i)]);
    }
    MatT<T> dy(S, d);
    kern::matmul(dlogits.data.data(), params.w_un.data.data(), dy.data.data(), S, V, d);
    if (pgrads) {
        kern::matmul_tn_acc(dlogits.data.data(), y.data.data(), pgrads->g.w_un.data.data(),
                            V, S, d);
        for (int s = 0; s < S; ++s) {
            const T* dr = dlogits.row(s);
            for (int vtok = 0; vtok < V; ++vtok) pgrads->g.b_un[size_t(vtok)] += dr[vtok];
        }
    }

    MatT<T> dh_(S, d);
    dh_.zero();
    for (int s = 0; s < S; ++s)
        ln_backward_row(dy.row(s), tr.final_xhat.row(s), tr.final_rstd[size_t(s)],
                        params.lnf_g.data(), d, dh_.row(s),
                        pgrads ? pgrads->g.lnf_g.data() : nullptr,
                        pgrads ? pgrads->g.lnf_b.data() : nullptr);

    MatT<T> d_o(S, d), dg(S, dff), du(S, dff), dm(S, d), dzmid(S, d);
    MatT<T> dctx(S, d), dq(S, d), dk(S, d), dv(S, d), da(S, d);
    MatT<T> gact(S, dff), m(S, d), a(S, d);

    for (int l = L - 1; l >= 0; --l) {
        const auto& lp = params.layers[size_t(l)];
        auto* lg = pgrads ? &pgrads->g.layers[size_t(l)] : nullptr;

        // recompute cheap intermediates
        for (size_t i = 0; i < tr.ff_u[size_t(l)].data.size(); ++i)
            gact.data[i] = gelu(tr.ff_u[size_t(l)].data[i]);
        for (int s = 0; s < S; ++s) {
            const T* xh2 = tr.ln2_xhat[size_t(l)].row(s);
            const T* xh1 = tr.ln1_xhat[size_t(l)].row(s);
            T* mr = m.row(s);
            T* ar = a.row(s);
            for (int i = 0; i < d; ++i) {
                mr[i] = xh2[i] * T(lp.ln2_g[size_t(i)]) + T(lp.ln2_b[size_t(i)]);
                ar[i] = xh1[i] * T(lp.ln1_g[size_t(i)]) + T(lp.ln1_b[size_t(i)]);
            }
        }

        // MLP: z_next = z_mid + W2 gelu(W1 m + b1) + b2
        kern::matmul_nt(dh_.data.data(), lp.w2.data.data(), dg.data.data(), S, d, dff);
        if (lg) {
            kern::matmul_tn_acc(gact.data.data(), dh_.data.data(), lg->w2.data.data(), dff, S, d);
            for (int s = 0; s < S; ++s) {
                const T* r = dh_.row(s);
                for (int j = 0; j < d; ++j) lg->b2[size_t(j)] += r[j];
            }
        }
        for (size_t i = 0; i < du.data.size(); ++i)
            du.data[i] = dg.data[i] * gelu_deriv(tr.ff_u[size_t(l)].data[i]);
        kern::matmul_nt(du.data.data(), lp.w1.data.data(), dm.data.data(), S, dff, d);
        if (lg) {
            kern::matmul_tn_acc(m.data.data(), du.data.data(), lg->w1.data.data(), d, S, dff);
            for (int s = 0; s < S; ++s) {
                const T* r = du.row(s);
                for (int j = 0; j < dff; ++j) lg->b1[size_t(j)] += r[j];
            }
        }
        dzmid = dh_; // residual branch
        for (int s = 0; s < S; ++s)
            ln_backward_row(dm.row(s), tr.ln2_xhat[size_t(l)].row(s),
                            tr.ln2_rstd[size_t(l)][size_t(s)], lp.ln2_g.data(), d,
                            dzmid.row(s), lg ? lg->ln2_g.data() : nullptr,
                            lg ? lg->ln2_b.data() : nullptr);

        // attention: z_mid = z + Wo ctx + bo
        kern::matmul_nt(dzmid.data.data(), lp.wo.data.data(), dctx.data.data(), S, d, d);
        if (lg) {
            kern::matmul_tn_acc(tr.ctx[size_t(l)].data.data(), dzmid.data.data(),
                                lg->wo.data.data(), d, S, d);
            for (int s = 0; s < S; ++s) {
                const T* r = dzmid.row(s);
                for (int j = 0; j < d; ++j) lg->bo[size_t(j)] += r[j];
            }
        }
        dq.zero();
        dk.zero();
        dv.zero();
        const MatT<T>& q = tr.q[size_t(l)];
        const MatT<T>& k = tr.k[size_t(l)];
        const MatT<T>& v = tr.v[size_t(l)];
        const MatT<T>& att = tr.att[size_t(l)];
        std::vector<T> dp(size_t(S), T(0));
        for (int hd_ = 0; hd_ < H; ++hd_) {
            for (int s = 0; s < S; ++s) {
                const T* arow = att.row(hd_ * S + s);
                const T* dcr = dctx.row(s) + hd_ * dh;
                T dsum(0);
                for (int t = 0; t <= s; ++t) {
                    const T* vrow = v.row(t) + hd_ * dh;
                    T acc(0);
                    for (int i = 0; i < dh; ++i) acc += dcr[i] * vrow[i];
                    dp[size_t(t)] = acc;
                    T* dvrow = dv.row(t) + hd_ * dh;
                    for (int i = 0; i < dh; ++i) dvrow[i] += arow[t] * dcr[i];
                    dsum += arow[t] * acc;
                }
                T* dqrow = dq.row(s) + hd_ * dh;
                const T* qrow = q.row(s) + hd_ * dh;
                for (int t = 0; t <= s; ++t) {
                    T dst = arow[t] * (dp[size_t(t)] - dsum) * T(inv_sqrt_dh);
                    const T* krow = k.row(t) + hd_ * dh;
                    T* dkrow = dk.row(t) + hd_ * dh;
                    for (int i = 0; i < dh; ++i) {
                        dqrow[i] += dst * krow[i];
                        dkrow[i] += dst * qrow[i];
                    }
                }
            }
        }
        kern::matmul_nt(dq.data.data(), lp.wq.data.data(), da.data.data(), S, d, d);
        kern::matmul_nt(dk.data.data(), lp.wk.data.data(), dm.data.data(), S, d, d);
        for (size_t i = 0; i < da.data.size(); ++i) da.data[i] += dm.data[i];
        kern::matmul_nt(dv.data.data(), lp.wv.data.data(), dm.data.data(), S, d, d);
        for (size_t i = 0; i < da.data.size(); ++i) da.data[i] += dm.data[i];
        if (lg) {
            kern::matmul_tn_acc(a.data.data(), dq.data.data(), lg->wq.data.data(), d, S, d);
            kern::matmul_tn_acc(a.data.data(), dk.data.data(), lg->wk.data.data(), d, S, d);
            kern::matmul_tn_acc(a.data.data(), dv.data.data(), lg->wv.data.data(), d, S, d);
            for (int s = 0; s < S; ++s) {
                const T* rq = dq.row(s);
                const T* rk = dk.row(s);
                const T* rv = dv.row(s);
                for (int j = 0; j < d; ++j) {
                    lg->bq[size_t(j)] += rq[j];
                    lg->bk[size_t(j)] += rk[j];
                    lg->bv[size_t(j)] += rv[j];
                }
            }
        }
        // grad w.r.t. z (post-edit residual input): residual + LN1 branch
        for (int s = 0; s < S; ++s)
            ln_backward_row(da.row(s), tr.ln1_xhat[size_t(l)].row(s),
                            tr.ln1_rstd[size_t(l)][size_t(s)], lp.ln1_g.data(), d,
                            dzmid.row(s), lg ? lg->ln1_g.data() : nullptr,
                            lg ? lg->ln1_b.data() : nullptr);
        dh_ = dzmid;
        if (dz_out) (*dz_out)[size_t(l)] = dh_;

        // back through the edits at this layer (swaps; AddVector is identity)
        if (spec && !tr.swap_rows[size_t(l)].empty()) {
            const auto& rows = tr.swap_rows[size_t(l)];
            const MatT<T>& snap = tr.swap_snap[size_t(l)];
            auto row_index = [&](int pos) {
                auto it = std::lower_bound(rows.begin(), rows.end(), pos);
                return int(it - rows.begin());
            };
            // identify overwritten rows
            std::vector<int> written;
            for (const auto& e : spec->edits)
                if (e.kind == Edit::Kind::ProjectSwap && e.applies_to(l))
                    written.push_back(e.pos);
            std::sort(written.begin(), written.end());
            written.erase(std::unique(written.begin(), written.end()), written.end());
            MatT<T> dpre(int(written.size()), d);
            dpre.zero();
            auto written_index = [&](int pos) {
                auto it = std::lower_bound(written.begin(), written.end(), pos);
                return (it != written.end() && *it == pos) ? int(it - written.begin()) : -1;
            };
            size_t edit_idx = 0;
            for (const auto& e : spec->edits) {
                size_t cur = edit_idx++;
                if (e.kind != Edit::Kind::ProjectSwap || !e.applies_to(l)) continue;
                const T* gnew = dh_.row(e.pos);
                // d snap[pos] += (I - P) gnew ; d snap[partner] += P gnew
                int wi = written_index(e.pos);
                int wj = written_index(e.partner);
                for (int i = 0; i < d; ++i) {
                    T proj(0);
                    const double* prow = e.projector.row(i); // symmetric: row = col
                    for (int j = 0; j < d; ++j) proj += T(prow[j]) * gnew[j];
                    dpre.row(wi)[i] += gnew[i] - proj;
                    if (wj >= 0) {
                        dpre.row(wj)[i] += proj;
                    } else {
                        // partner row was not overwritten: grad flows directly
                        dh_.row(e.partner)[i] += proj;
                    }
                }
                if (dproj_out) {
                    // dP += gnew (snap_j - snap_i)^T
                    Mat& dP = (*dproj_out)[cur];
                    if (dP.rows == 0) dP.resize(d, d);
                    const T* si = snap.row(row_index(e.pos));
                    const T* sj = snap.row(row_index(e.partner));
                    for (int i = 0; i < d; ++i)
                        for (int j = 0; j < d; ++j)
                            dP.at(i, j) += value_of(gnew[i]) * (value_of(sj[j]) - value_of(si[j]));
                }
            }
            for (size_t w = 0; w < written.size(); ++w)
                std::copy(dpre.row(int(w)), dpre.row(int(w)) + d, dh_.row(written[w]));
        }
    }

    if (pgrads) {
        for (int s = 0; s < S; ++s) {
            const T* r = dh_.row(s);
            T* te = pgrads->g.tok_emb.row(tokens[size_t(s)]);
            T* pe = pgrads->g.pos_emb.row(s);
            for (int i = 0; i < d; ++i) {
                te[i] += r[i];
                pe[i] += r[i];
            }
        }
    }
}

// explicit instantiations
template void forward_pass<double, double>(const ModelConfig&, const ParamsT<double>&,
                                           const Vec&, const std::vector<int>&,
                                           const InterventionSpec*, ForwardTrace<double>&);
template void forward_pass<float, float>(const ModelConfig&, const ParamsT<float>&,
                                         const Vec&, const std::vector<int>&,
                                         const InterventionSpec*, ForwardTrace<float>&);
template void forward_pass<Dual, double>(const ModelConfig&, const ParamsT<double>&,
                                         const Vec&, const std::vector<int>&,
                                         const InterventionSpec*, ForwardTrace<Dual>&);
template void backward_pass<double, double>(const ModelConfig&, const ParamsT<double>&,
                                            const Vec&, const std::vector<int>&,
                                            const InterventionSpec*, const ForwardTrace<double>&,
                                            const MatT<double>&, std::vector<MatT<double>>*,
                                            ParamGradsT<double>*, std::vector<Mat>*);
template void backward_pass<float, float>(const ModelConfig&, const ParamsT<float>&,
                                          const Vec&, const std::vector<int>&,
                                          const InterventionSpec*, const ForwardTrace<float>&,
                                          const MatT<float>&, std::vector<MatT<float>>*,
                                          ParamGradsT<float>*, std::vector<Mat>*);
template void backward_pass<Dual, double>(const ModelConfig&, const ParamsT<double>&,
                                          const Vec&, const std::vector<int>&,
                                          const InterventionSpec*, const ForwardTrace<Dual>&,
                                          const MatT<Dual>&, std::vector<MatT<Dual>>*,
                                          ParamGradsT<Dual>*, std::vector<Mat>*);

// --- Model -------------------------------------------------------------------

Model::Model(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    params.init_shape(cfg);
    layer_scale.assign(size_t(cfg.n_layers), 1.0);
    init_parameters();
}

void Model::init_parameters() {
    Rng rng(cfg.seed);
    auto fill_normal = [&](std::vector<double>& buf, double std) {
        for (auto& x : buf) x = rng.normal() * std;
    };
    fill_normal(params.tok_emb.data, 0.02);
    fill_normal(params.pos_emb.data, 0.02);
    for (auto& l : params.layers) {
        fill_normal(l.wq.data, 0.02);
        fill_normal(l.wk.data, 0.02);
        fill_normal(l.wv.data, 0.02);
        fill_normal(l.wo.data, 0.02 / std::sqrt(2.0 * cfg.n_layers));
        fill_normal(l.w1.data, 0.02);
        fill_normal(l.w2.data, 0.02 / std::sqrt(2.0 * cfg.n_layers));
    }
    fill_normal(params.w_un.data, 0.02);
}

Mat Model::forward_logits(const std::vector<int>& tokens, const InterventionSpec* spec) const {
    ForwardTrace<double> tr;
    forward_pass<double, double>(cfg, params, layer_scale, tokens, spec, tr);
    Mat logits(tr.S, cfg.vocab_size);
    for (size_t i = 0; i < logits.data.size(); ++i) logits.data[i] = tr.logits.data[i];
    return logits;
}

std::pair<Mat, ActivationCache> Model::forward_with_cache(const std::vector<int>& tokens,
                                                          const InterventionSpec* spec) const {
    ForwardTrace<double> tr;
    forward_pass<double, double>(cfg, params, layer_scale, tokens, spec, tr);
    ActivationCache cache;
    cache.n_layers = cfg.n_layers;
    cache.seq = tr.S;
    cache.d = cfg.d_model;
    cache.z.assign(size_t(cfg.n_layers), Mat());
    cache.per_layer_scale.assign(size_t(cfg.n_layers), 0.0);
    for (int l = 0; l < cfg.n_layers; ++l) {
        cache.z[size_t(l)] = tr.z[size_t(l)];
        double total = 0.0;
        for (int s = 0; s < tr.S; ++s) {
            double n2 = 0.0;
            const double* r = tr.z[size_t(l)].row(s);
            for (int i = 0; i < cfg.d_model; ++i) n2 += r[i] * r[i];
            total += std::sqrt(n2);
        }
        cache.per_layer_scale[size_t(l)] = total / tr.S;
    }
    Mat logits(tr.S, cfg.vocab_size);
    for (size_t i = 0; i < logits.data.size(); ++i) logits.data[i] = tr.logits.data[i];
    return {std::move(logits), std::move(cache)};
}

Mat Model::forward_from_layer(const ActivationCache& cache, int start_layer) const {
    if (start_layer < 0 || start_layer >= cfg.n_layers)
        throw std::invalid_argument("forward_from_layer: bad layer");
    // replay the block stack from the cached stream
    const int S = cache.seq, d = cfg.d_model;
    MatT<double> h(S, d);
    for (int s = 0; s < S; ++s)
        std::copy(cache.at(start_layer, s), cache.at(start_layer, s) + d, h.row(s));

    const int H = cfg.n_heads, dh = cfg.head_dim(), dff = cfg.d_ff;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    MatT<double> a(S, d), m(S, d), tmp(S, d), u(S, dff), gact(S, dff), ctx(S, d);
    MatT<double> q(S, d), k(S, d), v(S, d);
    std::vector<double> att(size_t(S), 0.0);
    for (int l = start_layer; l < cfg.n_layers; ++l) {
        const auto& lp = params.layers[size_t(l)];
        double rstd;
        std::vector<double> xhat(size_t(d), 0.0);
        for (int s = 0; s < S; ++s)
            ln_forward_row(h.row(s), lp.ln1_g.data(), lp.ln1_b.data(), d, xhat.data(),
                           a.row(s), &rstd);
        kern::matmul(a.data.data(), lp.wq.data.data(), q.data.data(), S, d, d);
        kern::matmul(a.data.data(), lp.wk.data.data(), k.data.data(), S, d, d);
        kern::matmul(a.data.data(), lp.wv.data.data(), v.data.data(), S, d, d);
        add_bias_rows(q, lp.bq);
        add_bias_rows(k, lp.bk);
        add_bias_rows(v, lp.bv);
        ctx.zero();
        for (int hd_ = 0; hd_ < H; ++hd_) {
            for (int s = 0; s < S; ++s) {
                const double* qrow = q.row(s) + hd_ * dh;
                for (int t = 0; t <= s; ++t) {
                    const double* krow = k.row(t) + hd_ * dh;
                    double sc = 0;
                    for (int i = 0; i < dh; ++i) sc += qrow[i] * krow[i];
                    att[size_t(t)] = sc * inv_sqrt_dh;
                }
                kern::softmax_row(att.data(), s + 1);
                double* crow = ctx.row(s) + hd_ * dh;
                for (int t = 0; t <= s; ++t) {
                    const double* vrow = v.row(t) + hd_ * dh;
                    for (int i = 0; i < dh; ++i) crow[i] += att[size_t(t)] * vrow[i];
                }
            }
        }
        kern::matmul(ctx.data.data(), lp.wo.data.data(), tmp.data.data(), S, d, d);
        add_bias_rows(tmp, lp.bo);
        for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += tmp.data[i];
        for (int s = 0; s < S; ++s)
            ln_forward_row(h.row(s), lp.ln2_g.data(), lp.ln2_b.data(), d, xhat.data(),
                           m.row(s), &rstd);
        kern::matmul(m.data.data(), lp.w1.data.data(), u.data.data(), S, d, dff);
        add_bias_rows(u, lp.b1);
        for (size_t i = 0; i < u.data.size(); ++i) gact.data[i] = gelu(u.data[i]);
        kern::matmul(gact.data.data(), lp.w2.data.data(), tmp.data.data(), S, dff, d);
        add_bias_rows(tmp, lp.b2);
        for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += tmp.data[i];
    }
    Mat logits(S, cfg.vocab_size);
    std::vector<double> xhat(size_t(d), 0.0);
    MatT<double> y(S, d);
    double rstd;
    for (int s = 0; s < S; ++s)
        ln_forward_row(h.row(s), params.lnf_g.data(), params.lnf_b.data(), d, xhat.data(),
                       y.row(s), &rstd);
    kern::matmul_nt(y.data.data(), params.w_un.data.data(), logits.data.data(), S, d,
                    cfg.vocab_size);
    add_bias_rows(logits, params.b_un);
    return logits;
}

Vec Model::answer_prob(const std::vector<int>& tokens, const std::vector<int>& cand_first_tokens,
                       const InterventionSpec* spec) const {
    if (cand_first_tokens.empty())
        throw std::invalid_argument("argument error: no candidates");
    std::set<int> uniq(cand_first_tokens.begin(), cand_first_tokens.end());
    if (uniq.size() != cand_first_tokens.size())
        throw std::invalid_argument("argument error: candidate first tokens not unique");
    Mat logits = forward_logits(tokens, spec);
    const double* last = logits.row(logits.rows - 1);
    double mx = last[cand_first_tokens[0]];
    for (int c : cand_first_tokens) mx = std::max(mx, last[c]);
    Vec p(cand_first_tokens.size());
    double sum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(last[cand_first_tokens[i]] - mx);
        sum += p[i];
    }
    for (auto& x : p) x /= sum;
    return p;
}

std::vector<Mat> Model::grad_wrt_activations(const std::vector<int>& tokens,
                                             const Metric& metric,
                                             const InterventionSpec* spec) const {
    ForwardTrace<double> tr;
    forward_pass<double, double>(cfg, params, layer_scale, tokens, spec, tr);
    MatT<double> dlogits(tr.S, cfg.vocab_size);
    dlogits.zero();
    int pos = metric.resolve_pos(tr.S);
    metric.grad(tr.logits.row(pos), cfg.vocab_size, dlogits.row(pos));
    std::vector<MatT<double>> dz;
    backward_pass<double, double>(cfg, params, layer_scale, tokens, spec, tr, dlogits, &dz,
                                  nullptr, nullptr);
    std::vector<Mat> out(dz.size());
    for (size_t l = 0; l < dz.size(); ++l) {
        out[l] = dz[l];
        for (double x : out[l].data)
            if (!std::isfinite(x)) throw std::runtime_error("numeric error: non-finite gradient");
    }
    return out;
}

void Model::calibrate_scales(const std::vector<std::vector<int>>& seqs) {
    Vec total(size_t(cfg.n_layers), 0.0);
    long long count = 0;
    for (const auto& toks : seqs) {
        auto [logits, cache] = forward_with_cache(toks);
        for (int l = 0; l < cfg.n_layers; ++l)
            total[size_t(l)] += cache.per_layer_scale[size_t(l)] * cache.seq;
        count += cache.seq;
    }
    if (count == 0) throw std::invalid_argument("argument error: no sequences");
    layer_scale.resize(size_t(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) layer_scale[size_t(l)] = total[size_t(l)] / count;
}

// --- training ------------------------------------------------------------------

namespace {

struct AdamState {
    std::vector<Vec*> master;
    std::vector<Vec> m, v;
    int t = 0;

    explicit AdamState(Params& p) {
        p.visit([&](std::vector<double>& buf) { master.push_back(&buf); });
        for (auto* b : master) {
            m.emplace_back(b->size(), 0.0);
            v.emplace_back(b->size(), 0.0);
        }
    }

    void step(const std::vector<const std::vector<float>*>& grads, double lr) {
        ++t;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
        for (size_t k = 0; k < master.size(); ++k) {
            Vec& w = *master[k];
            const std::vector<float>& g = *grads[k];
            for (size_t i = 0; i < w.size(); ++i) {
                double gi = double(g[i]);
                m[k][i] = b1 * m[k][i] + (1 - b1) * gi;
                v[k][i] = b2 * v[k][i] + (1 - b2) * gi * gi;
                w[i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps);
            }
        }
    }
};

void cast_params(const Params& src, ParamsT<float>& dst) {
    std::vector<const Vec*> s;
    const_cast<Params&>(src).visit([&](Vec& buf) { s.push_back(&buf); });
    std::vector<std::vector<float>*> d;
    dst.visit([&](std::vector<float>& buf) { d.push_back(&buf); });
    for (size_t k = 0; k < s.size(); ++k)
        for (size_t i = 0; i < s[k]->size(); ++i) (*d[k])[i] = float((*s[k])[i]);
}

double run_training(Model& model, const std::vector<TrainExample>& data, int steps,
                    double lr, int warmup, int batch_size, uint64_t seed, TrainLog* log) {
    if (data.empty() || steps <= 0) return 0.0;
    const ModelConfig& cfg = model.cfg;
    Rng rng(seed);

    ParamsT<float> shadow;
    shadow.init_shape(cfg);
    AdamState adam(model.params);

    const int B = batch_size;
    std::vector<ParamGradsT<float>> slot_grads;
    slot_grads.reserve(size_t(B));
    for (int b = 0; b < B; ++b) slot_grads.emplace_back(cfg);
    ParamGradsT<float> total(cfg);
    std::vector<double> slot_loss(size_t(B), 0.0);
    std::vector<long long> slot_count(size_t(B), 0);
    std::vector<int> batch_idx(size_t(B), 0);

    double mean_loss = 0.0;
    for (int step = 0; step < steps; ++step) {
        cast_params(model.params, shadow);
        for (int b = 0; b < B; ++b) batch_idx[size_t(b)] = int(rng.uniform_int(data.size()));

        long long total_preds = 0;
        int live = 0;
        for (int b = 0; b < B; ++b) {
            const auto& ex = data[size_t(batch_idx[size_t(b)])];
            long long c = 0;
            for (uint8_t mv : ex.predict_mask) c += mv;
            slot_count[size_t(b)] = c;
            total_preds += c;
            live += c > 0 ? 1 : 0;
        }
        if (total_preds == 0) continue;

#pragma omp parallel for schedule(static)
        for (int b = 0; b < B; ++b) {
            const auto& ex = data[size_t(batch_idx[size_t(b)])];
            slot_grads[size_t(b)].zero();
            slot_loss[size_t(b)] = 0.0;
            if (slot_count[size_t(b)] == 0) continue;
            ForwardTrace<float> tr;
            forward_pass<float, float>(cfg, shadow, model.layer_scale, ex.tokens, nullptr, tr);
            MatT<float> dlogits(tr.S, cfg.vocab_size);
            dlogits.zero();
            double loss = 0.0;
            // per-example mean so short QA answers are not drowned out by
            // long plain contexts
            const float w = 1.0f / (float(slot_count[size_t(b)]) * float(live));
            std::vector<float> prob(size_t(cfg.vocab_size), 0.0f);
            for (int s = 0; s + 1 < tr.S; ++s) {
                if (!ex.predict_mask[size_t(s)]) continue;
                const float* row = tr.logits.row(s);
                float mx = row[0];
                for (int j = 1; j < cfg.vocab_size; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (int j = 0; j < cfg.vocab_size; ++j) {
                    prob[size_t(j)] = std::exp(row[j] - mx);
                    sum += prob[size_t(j)];
                }
                int target = ex.tokens[size_t(s) + 1];
                loss -= std::log(double(prob[size_t(target)]) / sum);
                float* drow = dlogits.row(s);
                for (int j = 0; j < cfg.vocab_size; ++j)
                    drow[j] = float(double(prob[size_t(j)]) / sum) * w;
                drow[target] -= w;
            }
            slot_loss[size_t(b)] = loss / double(slot_count[size_t(b)]);
            backward_pass<float, float>(cfg, shadow, model.layer_scale, ex.tokens, nullptr, tr,
                                        dlogits, nullptr, &slot_grads[size_t(b)], nullptr);
        }

        // deterministic reduction in batch order
        total.zero();
        std::vector<std::vector<float>*> tbufs;
        total.g.visit([&](std::vector<float>& buf) { tbufs.push_back(&buf); });
        double loss_sum = 0.0;
        for (int b = 0; b < B; ++b) {
            loss_sum += slot_loss[size_t(b)];
            std::vector<std::vector<float>*> sbufs;
            slot_grads[size_t(b)].g.visit([&](std::vector<float>& buf) { sbufs.push_back(&buf); });
            for (size_t k = 0; k < tbufs.size(); ++k)
                for (size_t i = 0; i < tbufs[k]->size(); ++i)
                    (*tbufs[k])[i] += (*sbufs[k])[i];
        }
        mean_loss = live > 0 ? loss_sum / double(live) : 0.0;
        if (!std::isfinite(mean_loss))
            throw std::runtime_error("training-failure: non-finite loss");

        double sched = 1.0;
        if (warmup > 0 && step < warmup) {
            sched = double(step + 1) / warmup;
        } else if (steps > warmup) {
            double p = double(step - warmup) / std::max(1, steps - warmup);
            sched = 0.1 + 0.45 * (1.0 + std::cos(M_PI * p)); // cosine to 0.1
        }
        std::vector<const std::vector<float>*> gptrs;
        total.g.visit([&](std::vector<float>& buf) { gptrs.push_back(&buf); });
        adam.step(gptrs, lr * sched);

        if (log && (step % 50 == 0 || step == steps - 1))
            log->loss_curve.emplace_back(step, mean_loss);
    }
    return mean_loss;
}

} // namespace

TrainLog train_lm(Model& model, const std::vector<TrainExample>& data) {
    TrainLog log;
    log.final_loss = run_training(model, data, model.cfg.steps, model.cfg.lr,
                                  model.cfg.warmup_steps, model.cfg.batch_size,
                                  model.cfg.seed ^ 0x7261696eULL, &log);
    return log;
}

Model finetune(const Model& base, const std::vector<TrainExample>& data, int steps,
               double lr, uint64_t seed) {
    Model out = base;
    if (data.empty() || steps <= 0) return out;
    run_training(out, data, steps, lr, /*warmup=*/0, out.cfg.batch_size, seed, nullptr);
    return out;
}

// --- checkpoint I/O ----------------------------------------------------------

namespace {

void write_u32(std::ofstream& f, uint32_t x) {
    unsigned char b[4] = {(unsigned char)(x), (unsigned char)(x >> 8),
                          (unsigned char)(x >> 16), (unsigned char)(x >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
           (uint32_t(b[3]) << 24);
}

} // namespace

// Checkpoint layout (little endian):
//   "PDCK" | u32 version=1 | u32 config_len | config text ([model] section)
//   parameter tensors as f32, row-major, in ParamsT::visit order
//   layer_scale as f64 per layer
void Model::save_checkpoint(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("PDCK", 4);
    write_u32(f, 1);
    Config c;
    c.set("model", "n_layers", std::to_string(cfg.n_layers));
    c.set("model", "d_model", std::to_string(cfg.d_model));
    c.set("model", "n_heads", std::to_string(cfg.n_heads));
    c.set("model", "d_ff", std::to_string(cfg.d_ff));
    c.set("model", "vocab_size", std::to_string(cfg.vocab_size));
    c.set("model", "max_seq_len", std::to_string(cfg.max_seq_len));
    c.set("model", "seed", std::to_string(cfg.seed));
    std::string text = c.serialize();
    write_u32(f, uint32_t(text.size()));
    f.write(text.data(), std::streamsize(text.size()));
    const_cast<Params&>(params).visit([&](Vec& buf) {
        for (double x : buf) {
            float v = float(x);
            f.write(reinterpret_cast<char*>(&v), 4);
        }
    });
    for (double s : layer_scale) f.write(reinterpret_cast<const char*>(&s), 8);
}

Model Model::load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, "PDCK", 4) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);
    uint32_t version = read_u32(f);
    if (version != 1) throw std::runtime_error("unsupported checkpoint version");
    uint32_t clen = read_u32(f);
    std::string text(clen, '\0');
    f.read(text.data(), clen);
    Config c = Config::parse(text);
    ModelConfig cfg;
    cfg.n_layers = int(c.get_int("model", "n_layers", 4));
    cfg.d_model = int(c.get_int("model", "d_model", 64));
    cfg.n_heads = int(c.get_int("model", "n_heads", 4));
    cfg.d_ff = int(c.get_int("model", "d_ff", 256));
    cfg.vocab_size = int(c.get_int("model", "vocab_size", 0));
    cfg.max_seq_len = int(c.get_int("model", "max_seq_len", 96));
    cfg.seed = uint64_t(c.get_int("model", "seed", 1));
    Model model(cfg);
    model.params.visit([&](Vec& buf) {
        for (double& x : buf) {
            float v;
            f.read(reinterpret_cast<char*>(&v), 4);
            x = double(v);
        }
    });
    model.layer_scale.assign(size_t(cfg.n_layers), 1.0);
    for (double& s : model.layer_scale) f.read(reinterpret_cast<char*>(&s), 8);
    if (!f) throw std::runtime_error("truncated checkpoint " + path);
    return model;
}

} // namespace propdec
