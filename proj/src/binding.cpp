#include "propdec/binding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>

namespace propdec {

std::string provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Hessian: return "hessian";
        case Provenance::Das: return "das";
        case Provenance::Random: return "random";
        case Provenance::Skyline: return "skyline";
        case Provenance::OracleTrue: return "oracle-true";
    }
    return "?";
}

Provenance provenance_from_name(const std::string& s) {
    if (s == "hessian") return Provenance::Hessian;
    if (s == "das") return Provenance::Das;
    if (s == "random") return Provenance::Random;
    if (s == "skyline") return Provenance::Skyline;
    if (s == "oracle-true") return Provenance::OracleTrue;
    throw std::invalid_argument("unknown provenance: " + s);
}

// --- context preparation -----------------------------------------------------

std::vector<BindingCtx> make_binding_contexts(
    const World& world, Rng& rng, int count, int n_entities,
    const std::array<std::vector<int>, kNumDomains>* allowed, Predicate pred) {
    std::vector<BindingCtx> out;
    out.reserve(size_t(count));
    for (int c = 0; c < count; ++c) {
        PropositionSet full = sample_propositions(world, n_entities, rng, allowed);
        PropositionSet props;
        for (const auto& ent : full.entities())
            for (const auto& p : full.items())
                if (p.predicate == pred && p.entity == ent) props.insert(p);
        ContextTemplate tmpl;
        tmpl.family = TemplateFamily::Series;
        tmpl.length_variant = LengthVariant::Short;
        tmpl.predicate_subset = {pred};
        ContextInstance ctx = render_context(world, props, tmpl);

        BindingCtx bc;
        bc.tokens = ctx.tokens;
        bc.props = props;
        bc.entity_pos = ctx.slot_positions(0, n_entities);
        bc.attr_pos = ctx.slot_positions(attribute_domain(pred), n_entities);
        for (int k = 0; k < n_entities; ++k) {
            const std::string& ent = props.entities()[size_t(k)];
            Query q = render_query(world, ctx, ent, pred);
            bc.query.push_back(q.tokens);
            bc.cand_first.push_back(q.answer_first_token);
        }
        out.push_back(std::move(bc));
    }
    return out;
}

// --- deltas --------------------------------------------------------------------

DeltaVectors estimate_deltas(const Model& model, const std::vector<BindingCtx>& ctxs) {
    if (ctxs.empty()) throw std::invalid_argument("argument error: no contexts");
    const int L = model.cfg.n_layers, d = model.cfg.d_model;
    DeltaVectors dv;
    dv.entity.resize(L, d);
    dv.attr.resize(L, d);
    dv.n_contexts = int(ctxs.size());
    for (const auto& c : ctxs) {
        auto [logits, cache] = model.forward_with_cache(c.tokens);
        for (int l = 0; l < L; ++l) {
            const double* e0 = cache.at(l, c.entity_pos[0]);
            const double* e1 = cache.at(l, c.entity_pos[1]);
            const double* a0 = cache.at(l, c.attr_pos[0]);
            const double* a1 = cache.at(l, c.attr_pos[1]);
            for (int i = 0; i < d; ++i) {
                dv.entity.at(l, i) += (e1[i] - e0[i]) / double(ctxs.size());
                dv.attr.at(l, i) += (a1[i] - a0[i]) / double(ctxs.size());
            }
        }
    }
    return dv;
}

DeltaVectors estimate_deltas_oracle(const std::vector<OracleContext>& ctxs) {
    if (ctxs.empty()) throw std::invalid_argument("argument error: no contexts");
    const int d = ctxs[0].cache.d;
    DeltaVectors dv;
    dv.entity.resize(1, d);
    dv.attr.resize(1, d);
    dv.n_contexts = int(ctxs.size());
    for (const auto& c : ctxs) {
        int adom = -1;
        for (int dd = 1; dd < kNumDomains; ++dd)
            if (c.attr_pos[size_t(dd)].size() >= 2 && c.attr_pos[size_t(dd)][0] >= 0) adom = dd;
        const double* e0 = c.cache.at(0, c.entity_pos[0]);
        const double* e1 = c.cache.at(0, c.entity_pos[1]);
        const double* a0 = c.cache.at(0, c.attr_pos[size_t(adom)][0]);
        const double* a1 = c.cache.at(0, c.attr_pos[size_t(adom)][1]);
        for (int i = 0; i < d; ++i) {
            dv.entity.at(0, i) += (e1[i] - e0[i]) / double(ctxs.size());
            dv.attr.at(0, i) += (a1[i] - a0[i]) / double(ctxs.size());
        }
    }
    return dv;
}

InterventionSpec ablate_binding(const DeltaVectors& deltas, const std::vector<int>& entity_pos,
                                const std::vector<int>& attr_pos) {
    if (entity_pos.size() < 2 || attr_pos.size() < 2)
        throw std::invalid_argument("argument error: ablation needs 2-entity positions");
    const int L = deltas.entity.rows, d = deltas.entity.cols;
    InterventionSpec spec;
    for (int l = 0; l < L; ++l) {
        for (int slot = 0; slot < 2; ++slot) {
            double sign = slot == 0 ? 0.5 : -0.5;
            Edit ee;
            ee.kind = Edit::Kind::AddVector;
            ee.layers = {l};
            ee.pos = entity_pos[size_t(slot)];
            ee.v.assign(size_t(d), 0.0);
            for (int i = 0; i < d; ++i) ee.v[size_t(i)] = sign * deltas.entity.at(l, i);
            spec.edits.push_back(ee);
            Edit ea = ee;
            ea.pos = attr_pos[size_t(slot)];
            for (int i = 0; i < d; ++i) ea.v[size_t(i)] = sign * deltas.attr.at(l, i);
            spec.edits.push_back(ea);
        }
    }
    return spec;
}

// --- model binding task ---------------------------------------------------------

ModelBindingTask::ModelBindingTask(const Model& model, std::vector<BindingCtx> contexts,
                                   const DeltaVectors& deltas, bool per_layer_scaling)
    : model_(&model), ctxs_(std::move(contexts)), deltas_(deltas), scaled_(per_layer_scaling) {}

InterventionSpec ModelBindingTask::ablation_spec(const BindingCtx& ctx) const {
    return ablate_binding(deltas_, ctx.entity_pos, ctx.attr_pos);
}

namespace {

// +-(0.5 delta + s_l x) on entity slots, +-(0.5 delta + s_l y) on attributes
InterventionSpec binding_spec(const DeltaVectors& deltas, const Vec& layer_scale, bool scaled,
                              const BindingCtx& ctx, const Vec& x, const Vec& y,
                              const Vec* x_tan, const Vec* y_tan) {
    const int L = deltas.entity.rows, d = deltas.entity.cols;
    InterventionSpec spec;
    for (int l = 0; l < L; ++l) {
        double sl = scaled ? layer_scale[size_t(l)] : 1.0;
        for (int slot = 0; slot < 2; ++slot) {
            double sign = slot == 0 ? 1.0 : -1.0;
            Edit ee;
            ee.kind = Edit::Kind::AddVector;
            ee.layers = {l};
            ee.pos = ctx.entity_pos[size_t(slot)];
            ee.v.assign(size_t(d), 0.0);
            for (int i = 0; i < d; ++i)
                ee.v[size_t(i)] = sign * (0.5 * deltas.entity.at(l, i) + sl * x[size_t(i)]);
            if (x_tan) {
                ee.v_tangent.assign(size_t(d), 0.0);
                for (int i = 0; i < d; ++i) ee.v_tangent[size_t(i)] = sign * sl * (*x_tan)[size_t(i)];
            }
            spec.edits.push_back(std::move(ee));

            Edit ea;
            ea.kind = Edit::Kind::AddVector;
            ea.layers = {l};
            ea.pos = ctx.attr_pos[size_t(slot)];
            ea.v.assign(size_t(d), 0.0);
            for (int i = 0; i < d; ++i)
                ea.v[size_t(i)] = sign * (0.5 * deltas.attr.at(l, i) + sl * y[size_t(i)]);
            if (y_tan) {
                ea.v_tangent.assign(size_t(d), 0.0);
                for (int i = 0; i < d; ++i) ea.v_tangent[size_t(i)] = sign * sl * (*y_tan)[size_t(i)];
            }
            spec.edits.push_back(std::move(ea));
        }
    }
    return spec;
}

} // namespace

template <typename T>
T ModelBindingTask::eval_one(const BindingCtx& ctx, int query_slot, const Vec& x, const Vec& y,
                             const Vec* x_tan, const Vec* y_tan) const {
    InterventionSpec spec =
        binding_spec(deltas_, model_->layer_scale, scaled_, ctx, x, y, x_tan, y_tan);
    ForwardTrace<T> tr;
    forward_pass<T, double>(model_->cfg, model_->params, model_->layer_scale,
                            ctx.query[size_t(query_slot)], &spec, tr);
    Metric m = Metric::candidate_prob(ctx.cand_first, query_slot);
    return m.eval(tr.logits.row(tr.S - 1), model_->cfg.vocab_size);
}

double ModelBindingTask::F(const Vec& x, const Vec& y) const {
    double total = 0.0;
    const int n = int(ctxs_.size());
    std::vector<double> per_ctx(size_t(n), 0.0);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < n; ++c) {
        double s = 0.0;
        for (int q = 0; q < 2; ++q)
            s += eval_one<double>(ctxs_[size_t(c)], q, x, y, nullptr, nullptr);
        per_ctx[size_t(c)] = s / 2.0;
    }
    for (double s : per_ctx) total += s;
    return total / n;
}

void ModelBindingTask::grad_y(const Vec* x_dir, Vec& gy, Vec* gy_tangent) const {
    const int d = dim(), L = model_->cfg.n_layers;
    const int n = int(ctxs_.size());
    Vec zero(size_t(d), 0.0);
    gy.assign(size_t(d), 0.0);
    if (gy_tangent) gy_tangent->assign(size_t(d), 0.0);
    const double w = 1.0 / (2.0 * n);

    auto accumulate = [&](auto scalar_tag, Vec& out, Vec* out_tan) {
        using T = decltype(scalar_tag);
        std::vector<Vec> ctx_gy(size_t(n), Vec(size_t(d), 0.0));
        std::vector<Vec> ctx_gy_tan(size_t(n), Vec(size_t(d), 0.0));
#pragma omp parallel for schedule(static)
        for (int c = 0; c < n; ++c) {
            const BindingCtx& ctx = ctxs_[size_t(c)];
            for (int q = 0; q < 2; ++q) {
                InterventionSpec spec = binding_spec(deltas_, model_->layer_scale, scaled_, ctx,
                                                     zero, zero, x_dir, nullptr);
                ForwardTrace<T> tr;
                forward_pass<T, double>(model_->cfg, model_->params, model_->layer_scale,
                                        ctx.query[size_t(q)], &spec, tr);
                Metric m = Metric::candidate_prob(ctx.cand_first, q);
                MatT<T> dlogits(tr.S, model_->cfg.vocab_size);
                dlogits.zero();
                m.grad(tr.logits.row(tr.S - 1), model_->cfg.vocab_size, dlogits.row(tr.S - 1));
                std::vector<MatT<T>> dz;
                backward_pass<T, double>(model_->cfg, model_->params, model_->layer_scale,
                                         ctx.query[size_t(q)], &spec, tr, dlogits, &dz, nullptr,
                                         nullptr);
                for (int l = 0; l < L; ++l) {
                    double sl = scaled_ ? model_->layer_scale[size_t(l)] : 1.0;
                    const T* g0 = dz[size_t(l)].row(ctx.attr_pos[0]);
                    const T* g1 = dz[size_t(l)].row(ctx.attr_pos[1]);
                    for (int i = 0; i < d; ++i) {
                        T diff = g0[i] - g1[i];
                        ctx_gy[size_t(c)][size_t(i)] += sl * w * value_of(diff);
                        if constexpr (std::is_same_v<T, Dual>)
                            ctx_gy_tan[size_t(c)][size_t(i)] += sl * w * diff.t;
                    }
                }
            }
        }
        for (int c = 0; c < n; ++c) {
            axpy(1.0, ctx_gy[size_t(c)], out);
            if (out_tan) axpy(1.0, ctx_gy_tan[size_t(c)], *out_tan);
        }
    };

    if (x_dir) {
        accumulate(Dual{}, gy, gy_tangent);
    } else {
        accumulate(double{}, gy, nullptr);
    }
}

// --- oracle binding task ----------------------------------------------------------

OracleBindingTask::OracleBindingTask(const Oracle& oracle, std::vector<OracleContext> contexts,
                                     const DeltaVectors& deltas)
    : oracle_(&oracle), ctxs_(std::move(contexts)), deltas_(deltas) {}

// Closed-form F and dF/dy for one oracle context. Scores s_ij between edited
// entity i and attribute j; correct answer is the diagonal.
template <typename T>
void OracleBindingTask::eval_queries(const OracleContext& oc, const Vec& x, const Vec& y,
                                     const Vec* x_tan, T* f_out, std::vector<T>* gy_out) const {
    const int d = dim();
    int adom = -1;
    for (int dd = 1; dd < kNumDomains; ++dd)
        if (!oc.attr_pos[size_t(dd)].empty() && oc.attr_pos[size_t(dd)][0] >= 0) adom = dd;
    const auto& apos = oc.attr_pos[size_t(adom)];

    // edited vectors: e_s = Z_Es +- (0.5 dE + x), a_s = Z_As +- (0.5 dA + y)
    std::vector<std::vector<T>> ev(2, std::vector<T>(size_t(d))),
        av(2, std::vector<T>(size_t(d)));
    for (int slot = 0; slot < 2; ++slot) {
        double sign = slot == 0 ? 1.0 : -1.0;
        const double* ze = oc.cache.at(0, oc.entity_pos[size_t(slot)]);
        const double* za = oc.cache.at(0, apos[size_t(slot)]);
        for (int i = 0; i < d; ++i) {
            double tan = x_tan ? sign * (*x_tan)[size_t(i)] : 0.0;
            ev[size_t(slot)][size_t(i)] = make_scalar<T>(
                ze[i] + sign * (0.5 * deltas_.entity.at(0, i) + x[size_t(i)]), tan);
            av[size_t(slot)][size_t(i)] = make_scalar<T>(
                za[i] + sign * (0.5 * deltas_.attr.at(0, i) + y[size_t(i)]), 0.0);
        }
    }

    using std::exp;
    T f(0);
    if (gy_out) gy_out->assign(size_t(d), T(0));
    for (int qi = 0; qi < 2; ++qi) {
        T s0 = oracle_->score(ev[size_t(qi)], av[0]);
        T s1 = oracle_->score(ev[size_t(qi)], av[1]);
        T mx = (s0 > s1) ? s0 : s1;
        T e0 = exp(s0 - mx), e1 = exp(s1 - mx);
        T sum = e0 + e1;
        T p0 = e0 / sum, p1 = e1 / sum;
        T pc = (qi == 0) ? p0 : p1;
        f += pc * T(0.5);
        if (gy_out) {
            // dF/ds_ij = 0.5 * p_c (delta_ij - p_j); ds_ij/dy = sign_j H^T e_i / tau
            // H^T e_i projected: use the oracle's bilinear form via basis columns
            std::vector<T> he(size_t(d), T(0));
            const Mat& B = oracle_->true_left();
            const Vec& w = oracle_->true_weights();
            for (int c = 0; c < B.cols; ++c) {
                T pe(0);
                for (int i = 0; i < d; ++i) pe += ev[size_t(qi)][size_t(i)] * B.at(i, c);
                pe = pe * T(w[size_t(c)] / oracle_->spec().temperature);
                for (int i = 0; i < d; ++i) he[size_t(i)] += pe * B.at(i, c);
            }
            T c0 = T(0.5) * pc * ((qi == 0 ? T(1) : T(0)) - p0);       // j = 0, sign +1
            T c1 = T(0.5) * pc * ((qi == 1 ? T(1) : T(0)) - p1) * T(-1); // j = 1, sign -1
            for (int i = 0; i < d; ++i)
                (*gy_out)[size_t(i)] += (c0 + c1) * he[size_t(i)];
        }
    }
    *f_out = f;
}

double OracleBindingTask::F(const Vec& x, const Vec& y) const {
    double total = 0.0;
    for (const auto& oc : ctxs_) {
        double f;
        eval_queries<double>(oc, x, y, nullptr, &f, nullptr);
        total += f;
    }
    return total / double(ctxs_.size());
}

void OracleBindingTask::grad_y(const Vec* x_dir, Vec& gy, Vec* gy_tangent) const {
    const int d = dim();
    Vec zero(size_t(d), 0.0);
    gy.assign(size_t(d), 0.0);
    if (gy_tangent) gy_tangent->assign(size_t(d), 0.0);
    for (const auto& oc : ctxs_) {
        if (x_dir) {
            Dual f;
            std::vector<Dual> g;
            eval_queries<Dual>(oc, zero, zero, x_dir, &f, &g);
            for (int i = 0; i < d; ++i) {
                gy[size_t(i)] += g[size_t(i)].v / double(ctxs_.size());
                (*gy_tangent)[size_t(i)] += g[size_t(i)].t / double(ctxs_.size());
            }
        } else {
            double f;
            std::vector<double> g;
            eval_queries<double>(oc, zero, zero, nullptr, &f, &g);
            for (int i = 0; i < d; ++i) gy[size_t(i)] += g[size_t(i)] / double(ctxs_.size());
        }
    }
}

// --- hessian -------------------------------------------------------------------

// --- subspace / similarity ---------------------------------------------------------

BindingSubspace svd_subspace(const Mat& hessian, int k, int metric_layer,
                             Provenance provenance) {
    if (k < 1 || k > hessian.cols)
        throw std::invalid_argument("argument error: k out of range");
    SvdResult res = svd(hessian);
    BindingSubspace sub;
    sub.u.resize(hessian.rows, k);
    sub.v.resize(hessian.cols, k);
    sub.s.assign(size_t(k), 0.0);
    for (int c = 0; c < k; ++c) {
        sub.s[size_t(c)] = res.s[size_t(c)];
        for (int r = 0; r < hessian.rows; ++r) sub.u.at(r, c) = res.u.at(r, c);
        for (int r = 0; r < hessian.cols; ++r) sub.v.at(r, c) = res.v.at(r, c);
    }
    sub.metric_layer = metric_layer;
    sub.provenance = provenance;
    return sub;
}

double binding_similarity(const BindingSubspace& sub, const double* zs, const double* zt) {
    double out = 0.0;
    const int d = sub.u.rows;
    for (int c = 0; c < sub.u.cols; ++c) {
        double ps = 0.0, pt = 0.0;
        for (int i = 0; i < d; ++i) {
            ps += zs[i] * sub.u.at(i, c);
            pt += zt[i] * sub.u.at(i, c);
        }
        out += (sub.s[size_t(c)] * sub.s[size_t(c)]) * (ps * pt);
    }
    return out;
}

double binding_similarity(const BindingSubspace& sub, const ActivationCache& cache,
                          int pos_s, int pos_t) {
    if (sub.metric_layer >= cache.n_layers)
        throw std::invalid_argument("argument error: metric layer not in cache");
    return binding_similarity(sub, cache.at(sub.metric_layer, pos_s),
                              cache.at(sub.metric_layer, pos_t));
}

Mat similarity_matrix(const BindingSubspace& sub, const ActivationCache& cache,
                      const std::vector<int>& positions) {
    const int n = int(positions.size());
    Mat m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            m.at(i, j) = binding_similarity(sub, cache, positions[size_t(i)],
                                            positions[size_t(j)]);
    return m;
}

Mat make_projector(const Mat& basis, int k) {
    if (k < 0 || k > basis.cols) throw std::invalid_argument("argument error: bad projector rank");
    const int d = basis.rows;
    Mat p(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double s = 0.0;
            for (int c = 0; c < k; ++c) s += basis.at(i, c) * basis.at(j, c);
            p.at(i, j) = s;
        }
    return p;
}

InterventionSpec interchange_spec(const Mat& projector, int pos_i, int pos_j) {
    InterventionSpec spec;
    Edit a;
    a.kind = Edit::Kind::ProjectSwap;
    a.pos = pos_i;
    a.partner = pos_j;
    a.projector = projector;
    spec.edits.push_back(a);
    Edit b = a;
    b.pos = pos_j;
    b.partner = pos_i;
    spec.edits.push_back(b);
    return spec;
}

// --- interchange evaluation -----------------------------------------------------

InterchangeResult eval_interchange_swap(const Model& model, const std::vector<BindingCtx>& ctxs,
                                        const BindingSubspace& sub, SwapSide side, int k,
                                        int slot_i, int slot_j) {
    const Mat& basis = side == SwapSide::Entity ? sub.u : sub.v;
    Mat proj = make_projector(basis, k);
    const int n_slots = int(ctxs[0].entity_pos.size());
    InterchangeResult res;
    res.k = k;
    res.slot_i = slot_i;
    res.slot_j = slot_j;
    res.per_entity.assign(size_t(n_slots), 0.0);

    const int n = int(ctxs.size());
    Mat hits(n, n_slots);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < n; ++c) {
        const BindingCtx& ctx = ctxs[size_t(c)];
        const auto& pos = side == SwapSide::Entity ? ctx.entity_pos : ctx.attr_pos;
        InterventionSpec spec = interchange_spec(proj, pos[size_t(slot_i)], pos[size_t(slot_j)]);
        for (int q = 0; q < n_slots; ++q) {
            int expect = q == slot_i ? slot_j : (q == slot_j ? slot_i : q);
            Vec p = model.answer_prob(ctx.query[size_t(q)], ctx.cand_first, &spec);
            int arg = int(std::max_element(p.begin(), p.end()) - p.begin());
            hits.at(c, q) = (arg == expect) ? 1.0 : 0.0;
        }
    }
    for (int q = 0; q < n_slots; ++q) {
        double acc = 0.0;
        for (int c = 0; c < n; ++c) acc += hits.at(c, q);
        res.per_entity[size_t(q)] = acc / n;
    }
    res.min_accuracy = *std::min_element(res.per_entity.begin(), res.per_entity.end());
    return res;
}

std::vector<InterchangeResult> eval_interchange(const Model& model,
                                                const std::vector<BindingCtx>& ctxs,
                                                const BindingSubspace& sub, SwapSide side,
                                                const std::vector<int>& k_grid) {
    const int n_slots = int(ctxs[0].entity_pos.size());
    std::vector<std::pair<int, int>> swaps;
    for (int i = 0; i < n_slots; ++i)
        for (int j = i + 1; j < n_slots; ++j) swaps.emplace_back(i, j);
    std::vector<InterchangeResult> out;
    for (int k : k_grid)
        for (auto [i, j] : swaps)
            out.push_back(eval_interchange_swap(model, ctxs, sub, side, k, i, j));
    return out;
}

InterchangeResult eval_interchange_swap_oracle(const Oracle& oracle,
                                               const std::vector<OracleContext>& ctxs,
                                               const BindingSubspace& sub, SwapSide side,
                                               int k, int slot_i, int slot_j) {
    const Mat& basis = side == SwapSide::Entity ? sub.u : sub.v;
    Mat proj = make_projector(basis, k);
    const int d = proj.rows;
    int n_slots = int(ctxs[0].entity_pos.size());
    InterchangeResult res;
    res.k = k;
    res.slot_i = slot_i;
    res.slot_j = slot_j;
    res.per_entity.assign(size_t(n_slots), 0.0);
    for (const auto& oc : ctxs) {
        int adom = -1;
        for (int dd = 1; dd < kNumDomains; ++dd)
            if (!oc.attr_pos[size_t(dd)].empty() && oc.attr_pos[size_t(dd)][0] >= 0) adom = dd;
        ActivationCache cache = oc.cache; // copy, then swap in place
        const auto& pos = side == SwapSide::Entity ? oc.entity_pos : oc.attr_pos[size_t(adom)];
        Vec zi = cache.vec(0, pos[size_t(slot_i)]);
        Vec zj = cache.vec(0, pos[size_t(slot_j)]);
        Vec ni = zi, nj = zj;
        for (int r = 0; r < d; ++r) {
            double acc_i = 0.0, acc_j = 0.0;
            for (int cidx = 0; cidx < d; ++cidx) {
                acc_i += proj.at(r, cidx) * (zj[size_t(cidx)] - zi[size_t(cidx)]);
                acc_j += proj.at(r, cidx) * (zi[size_t(cidx)] - zj[size_t(cidx)]);
            }
            ni[size_t(r)] += acc_i;
            nj[size_t(r)] += acc_j;
        }
        std::copy(ni.begin(), ni.end(), cache.z[0].row(pos[size_t(slot_i)]));
        std::copy(nj.begin(), nj.end(), cache.z[0].row(pos[size_t(slot_j)]));

        for (int q = 0; q < n_slots; ++q) {
            int expect = q == slot_i ? slot_j : (q == slot_j ? slot_i : q);
            Vec p = oracle.answer(cache, oc.attr_pos[size_t(adom)], oc.entity_pos[size_t(q)]);
            int arg = int(std::max_element(p.begin(), p.end()) - p.begin());
            if (arg == expect) res.per_entity[size_t(q)] += 1.0 / double(ctxs.size());
        }
    }
    res.min_accuracy = *std::min_element(res.per_entity.begin(), res.per_entity.end());
    return res;
}

int knee_k(const std::vector<InterchangeResult>& results, const std::vector<int>& k_grid,
           double tol) {
    // mean over swaps for each k
    std::map<int, std::pair<double, int>> agg;
    for (const auto& r : results) {
        agg[r.k].first += r.min_accuracy;
        agg[r.k].second += 1;
    }
    double best = 0.0;
    for (auto& [k, p] : agg) best = std::max(best, p.first / p.second);
    for (int k : k_grid) {
        auto it = agg.find(k);
        if (it != agg.end() && it->second.first / it->second.second >= best - tol) return k;
    }
    return k_grid.back();
}

// --- DAS -----------------------------------------------------------------------

namespace {

struct AdamSmall {
    Vec m, v;
    int t = 0;
    void step(Vec& w, const Vec& g, double lr) {
        if (m.empty()) {
            m.assign(w.size(), 0.0);
            v.assign(w.size(), 0.0);
        }
        ++t;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

Mat reorthonormalize(const Mat& b) {
    Mat q = orthonormalize_columns(b);
    if (q.cols == b.cols) return q;
    // fill dropped columns with fresh directions
    Mat out(b.rows, b.cols);
    Rng rng(12345);
    int c = 0;
    for (; c < q.cols; ++c)
        for (int r = 0; r < b.rows; ++r) out.at(r, c) = q.at(r, c);
    while (c < b.cols) {
        Mat aug(b.rows, c + 1);
        for (int r = 0; r < b.rows; ++r)
            for (int j = 0; j < c; ++j) aug.at(r, j) = out.at(r, j);
        for (int r = 0; r < b.rows; ++r) aug.at(r, c) = rng.normal();
        Mat q2 = orthonormalize_columns(aug);
        for (int r = 0; r < b.rows; ++r) out.at(r, c) = q2.at(r, q2.cols - 1);
        ++c;
    }
    return out;
}

double das_lr_schedule(int step, int total, double warmup_frac) {
    int warm = std::max(1, int(total * warmup_frac));
    if (step < warm) return double(step + 1) / warm;
    return std::max(0.0, 1.0 - double(step - warm) / std::max(1, total - warm));
}

} // namespace

BindingSubspace das_baseline(const Model& model, const std::vector<BindingCtx>& ctxs,
                             SwapSide side, const DasConfig& cfg) {
    const int d = model.cfg.d_model;
    Rng rng(cfg.seed);
    BindingSubspace sub;
    sub.provenance = Provenance::Das;
    sub.s.assign(size_t(cfg.dim), 1.0);
    if (cfg.dim == 0) {
        sub.u.resize(d, 0);
        sub.v.resize(d, 0);
        return sub;
    }

    Mat b(d, cfg.dim);
    for (auto& x : b.data) x = rng.normal();
    b = reorthonormalize(b);

    AdamSmall adam;
    const int steps_per_epoch = (cfg.n_samples + cfg.batch - 1) / cfg.batch;
    const int total_steps = cfg.epochs * steps_per_epoch;
    std::vector<int> order(size_t(cfg.n_samples));
    for (int i = 0; i < cfg.n_samples; ++i) order[size_t(i)] = i % int(ctxs.size());

    for (int step = 0; step < total_steps; ++step) {
        int epoch_step = step % steps_per_epoch;
        if (epoch_step == 0) rng.shuffle(order);
        Mat proj = make_projector(b, cfg.dim);
        Mat dproj_total(d, d);
        for (int bi = 0; bi < cfg.batch; ++bi) {
            int idx = order[size_t((epoch_step * cfg.batch + bi) % cfg.n_samples)];
            const BindingCtx& ctx = ctxs[size_t(idx)];
            const auto& pos = side == SwapSide::Entity ? ctx.entity_pos : ctx.attr_pos;
            InterventionSpec spec = interchange_spec(proj, pos[0], pos[1]);
            for (int q = 0; q < 2; ++q) {
                int target = ctx.cand_first[size_t(1 - q)]; // swapped answer
                ForwardTrace<double> tr;
                forward_pass<double, double>(model.cfg, model.params, model.layer_scale,
                                             ctx.query[size_t(q)], &spec, tr);
                Metric m = Metric::log_prob(target);
                MatT<double> dlogits(tr.S, model.cfg.vocab_size);
                dlogits.zero();
                m.grad(tr.logits.row(tr.S - 1), model.cfg.vocab_size, dlogits.row(tr.S - 1));
                // maximize log prob: descend on the negated gradient
                for (auto& x : dlogits.data) x = -x;
                std::vector<Mat> dproj(spec.edits.size());
                backward_pass<double, double>(model.cfg, model.params, model.layer_scale,
                                              ctx.query[size_t(q)], &spec, tr, dlogits, nullptr,
                                              nullptr, &dproj);
                for (const auto& dp : dproj) {
                    if (dp.rows == 0) continue;
                    for (size_t i = 0; i < dproj_total.data.size(); ++i)
                        dproj_total.data[i] += dp.data[i];
                }
            }
        }
        // dL/dB = (dP + dP^T) B
        Vec gb(size_t(d) * size_t(cfg.dim), 0.0);
        for (int i = 0; i < d; ++i)
            for (int c = 0; c < cfg.dim; ++c) {
                double s = 0.0;
                for (int j = 0; j < d; ++j)
                    s += (dproj_total.at(i, j) + dproj_total.at(j, i)) * b.at(j, c);
                gb[size_t(i) * size_t(cfg.dim) + size_t(c)] = s / cfg.batch;
            }
        Vec bw(b.data);
        adam.step(bw, gb, cfg.lr * das_lr_schedule(step, total_steps, cfg.warmup_frac));
        b.data = bw;
        b = reorthonormalize(b);
    }

    sub.u = b;
    sub.v = b;
    return sub;
}

BindingSubspace das_baseline_oracle(const Oracle& oracle,
                                    const std::vector<OracleContext>& ctxs,
                                    const DasConfig& cfg) {
    const int d = oracle.spec().d_model;
    const double tau = oracle.spec().temperature;
    Rng rng(cfg.seed);
    BindingSubspace sub;
    sub.provenance = Provenance::Das;
    sub.s.assign(size_t(cfg.dim), 1.0);
    if (cfg.dim == 0) {
        sub.u.resize(d, 0);
        sub.v.resize(d, 0);
        return sub;
    }
    Mat b(d, cfg.dim);
    for (auto& x : b.data) x = rng.normal();
    b = reorthonormalize(b);

    AdamSmall adam;
    const int steps_per_epoch = (cfg.n_samples + cfg.batch - 1) / cfg.batch;
    const int total_steps = cfg.epochs * steps_per_epoch;
    std::vector<int> order(size_t(cfg.n_samples));
    for (int i = 0; i < cfg.n_samples; ++i) order[size_t(i)] = i % int(ctxs.size());

    const Mat& ht = oracle.true_h();
    for (int step = 0; step < total_steps; ++step) {
        int epoch_step = step % steps_per_epoch;
        if (epoch_step == 0) rng.shuffle(order);
        Mat proj = make_projector(b, cfg.dim);
        Mat dproj(d, d);
        for (int bi = 0; bi < cfg.batch; ++bi) {
            const OracleContext& oc = ctxs[size_t(order[size_t((epoch_step * cfg.batch + bi) % cfg.n_samples)])];
            int adom = -1;
            for (int dd = 1; dd < kNumDomains; ++dd)
                if (!oc.attr_pos[size_t(dd)].empty() && oc.attr_pos[size_t(dd)][0] >= 0) adom = dd;
            Vec z0 = oc.cache.vec(0, oc.entity_pos[0]);
            Vec z1 = oc.cache.vec(0, oc.entity_pos[1]);
            Vec a0 = oc.cache.vec(0, oc.attr_pos[size_t(adom)][0]);
            Vec a1 = oc.cache.vec(0, oc.attr_pos[size_t(adom)][1]);
            // swapped entities
            Vec e0 = z0, e1 = z1;
            for (int r = 0; r < d; ++r) {
                double acc = 0.0;
                for (int c = 0; c < d; ++c) acc += proj.at(r, c) * (z1[size_t(c)] - z0[size_t(c)]);
                e0[size_t(r)] += acc;
                e1[size_t(r)] -= acc;
            }
            auto hv = [&](const Vec& x) {
                Vec out(size_t(d), 0.0);
                for (int r = 0; r < d; ++r) {
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c) acc += ht.at(r, c) * x[size_t(c)];
                    out[size_t(r)] = acc / tau;
                }
                return out;
            };
            Vec ha0 = hv(a0), ha1 = hv(a1);
            for (int q = 0; q < 2; ++q) {
                const Vec& e = q == 0 ? e0 : e1;
                double s0 = dot(e, ha0), s1 = dot(e, ha1);
                double mx = std::max(s0, s1);
                double p0 = std::exp(s0 - mx), p1 = std::exp(s1 - mx);
                double sum = p0 + p1;
                p0 /= sum;
                p1 /= sum;
                // target is the swapped attribute (1-q); maximize log p(target)
                double g0 = ((1 - q == 0) ? 1.0 : 0.0) - p0;
                double g1 = ((1 - q == 1) ? 1.0 : 0.0) - p1;
                // dlogp/de = g0 * ha0 + g1 * ha1 ; descend on negative
                Vec de(size_t(d), 0.0);
                for (int i = 0; i < d; ++i)
                    de[size_t(i)] = -(g0 * ha0[size_t(i)] + g1 * ha1[size_t(i)]);
                double sgn = q == 0 ? 1.0 : -1.0;
                // e_q = z_q + sgn * P (z1 - z0): dP += sgn * de (z1-z0)^T
                for (int i = 0; i < d; ++i)
                    for (int j = 0; j < d; ++j)
                        dproj.at(i, j) += sgn * de[size_t(i)] * (z1[size_t(j)] - z0[size_t(j)]);
            }
        }
        Vec gb(size_t(d) * size_t(cfg.dim), 0.0);
        for (int i = 0; i < d; ++i)
            for (int c = 0; c < cfg.dim; ++c) {
                double s = 0.0;
                for (int j = 0; j < d; ++j)
                    s += (dproj.at(i, j) + dproj.at(j, i)) * b.at(j, c);
                gb[size_t(i) * size_t(cfg.dim) + size_t(c)] = s / cfg.batch;
            }
        Vec bw(b.data);
        adam.step(bw, gb, cfg.lr * das_lr_schedule(step, total_steps, cfg.warmup_frac));
        b.data = bw;
        b = reorthonormalize(b);
    }
    sub.u = b;
    sub.v = b;
    return sub;
}

// --- baselines ------------------------------------------------------------------

BindingSubspace random_subspace(int d_model, int dim, int metric_layer, Rng& rng) {
    Mat g(d_model, d_model);
    for (auto& x : g.data) x = rng.normal();
    BindingSubspace sub = svd_subspace(g, dim, metric_layer, Provenance::Random);
    std::fill(sub.s.begin(), sub.s.end(), 1.0);
    return sub;
}

BindingSubspace skyline_subspace(const Model& model, const std::vector<BindingCtx>& ctxs3,
                                 SwapSide side, int metric_layer) {
    const int L = model.cfg.n_layers, d = model.cfg.d_model;
    const int n_slots = int(ctxs3[0].entity_pos.size());
    if (n_slots < 3) throw std::invalid_argument("argument error: skyline needs 3-entity contexts");
    // mean activation per slot per layer
    std::vector<Mat> mean(size_t(n_slots), Mat(L, d));
    for (const auto& c : ctxs3) {
        auto [logits, cache] = model.forward_with_cache(c.tokens);
        const auto& pos = side == SwapSide::Entity ? c.entity_pos : c.attr_pos;
        for (int k = 0; k < n_slots; ++k)
            for (int l = 0; l < L; ++l) {
                const double* z = cache.at(l, pos[size_t(k)]);
                for (int i = 0; i < d; ++i)
                    mean[size_t(k)].at(l, i) += z[i] / double(ctxs3.size());
            }
    }
    // per-layer difference vectors stacked, best shared 2-dim span via SVD
    Mat stack(2 * L, d);
    for (int l = 0; l < L; ++l)
        for (int i = 0; i < d; ++i) {
            stack.at(l, i) = mean[1].at(l, i) - mean[0].at(l, i);
            stack.at(L + l, i) = mean[2].at(l, i) - mean[1].at(l, i);
        }
    SvdResult res = svd(transpose(stack)); // d x 2L
    BindingSubspace sub;
    sub.u.resize(d, 2);
    sub.v.resize(d, 2);
    sub.s.assign(2, 1.0);
    for (int c = 0; c < 2; ++c)
        for (int r = 0; r < d; ++r) {
            sub.u.at(r, c) = res.u.at(r, c);
            sub.v.at(r, c) = res.u.at(r, c);
        }
    sub.metric_layer = metric_layer;
    sub.provenance = Provenance::Skyline;
    return sub;
}

BindingSubspace skyline_subspace_oracle(const std::vector<OracleContext>& ctxs3, SwapSide side) {
    const int d = ctxs3[0].cache.d;
    const int n_slots = int(ctxs3[0].entity_pos.size());
    if (n_slots < 3) throw std::invalid_argument("argument error: skyline needs 3-entity contexts");
    std::vector<Vec> mean(size_t(n_slots), Vec(size_t(d), 0.0));
    for (const auto& c : ctxs3) {
        int adom = -1;
        for (int dd = 1; dd < kNumDomains; ++dd)
            if (!c.attr_pos[size_t(dd)].empty() && c.attr_pos[size_t(dd)][0] >= 0) adom = dd;
        const auto& pos = side == SwapSide::Entity ? c.entity_pos : c.attr_pos[size_t(adom)];
        for (int k = 0; k < n_slots; ++k) {
            const double* z = c.cache.at(0, pos[size_t(k)]);
            for (int i = 0; i < d; ++i) mean[size_t(k)][size_t(i)] += z[i] / double(ctxs3.size());
        }
    }
    Mat span(d, 2);
    for (int i = 0; i < d; ++i) {
        span.at(i, 0) = mean[1][size_t(i)] - mean[0][size_t(i)];
        span.at(i, 1) = mean[2][size_t(i)] - mean[1][size_t(i)];
    }
    Mat q = orthonormalize_columns(span);
    BindingSubspace sub;
    sub.u = q;
    sub.v = q;
    sub.s.assign(size_t(q.cols), 1.0);
    sub.metric_layer = 0;
    sub.provenance = Provenance::Skyline;
    return sub;
}

// --- metric layer selection --------------------------------------------------------

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    // rank statistic with average ranks for ties
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[size_t(a)] < scores[size_t(b)]; });
    double pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0)
        throw std::invalid_argument("metric error: single-class labels");
    double rank_sum = 0.0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j + 1 < idx.size() && scores[size_t(idx[j + 1])] == scores[size_t(idx[i])]) ++j;
        double avg_rank = (double(i) + double(j)) / 2.0 + 1.0;
        for (size_t t = i; t <= j; ++t)
            if (labels[size_t(idx[t])]) rank_sum += avg_rank;
        i = j + 1;
    }
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

int select_metric_layer(const BindingSubspace& sub, const Model& model,
                        const std::vector<BindingCtx>& val_ctxs, Vec* auc_out) {
    const int L = model.cfg.n_layers;
    Vec aucs(size_t(L), 0.0);
    std::vector<std::vector<double>> scores(size_t(L), std::vector<double>{});
    std::vector<std::vector<int>> labels(size_t(L), std::vector<int>{});
    for (const auto& c : val_ctxs) {
        auto [logits, cache] = model.forward_with_cache(c.tokens);
        BindingSubspace probe = sub;
        for (int l = 0; l < L; ++l) {
            probe.metric_layer = l;
            for (int ke = 0; ke < 2; ++ke)
                for (int ka = 0; ka < 2; ++ka) {
                    double dsim = binding_similarity(probe, cache, c.entity_pos[size_t(ke)],
                                                     c.attr_pos[size_t(ka)]);
                    scores[size_t(l)].push_back(dsim);
                    labels[size_t(l)].push_back(ke == ka ? 1 : 0);
                }
        }
    }
    int best = 0;
    for (int l = 0; l < L; ++l) {
        aucs[size_t(l)] = roc_auc(scores[size_t(l)], labels[size_t(l)]);
        if (aucs[size_t(l)] > aucs[size_t(best)]) best = l;
    }
    if (auc_out) *auc_out = aucs;
    return best;
}

// --- subspace io ----------------------------------------------------------------

namespace {
void put_u32(std::ofstream& f, uint32_t x) {
    unsigned char b[4] = {(unsigned char)x, (unsigned char)(x >> 8), (unsigned char)(x >> 16),
                          (unsigned char)(x >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
}
uint32_t get_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
} // namespace

// "PDSS" | version | provenance | metric_layer | d | k | U f32 | S f64 | V f32
void BindingSubspace::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("PDSS", 4);
    put_u32(f, 1);
    put_u32(f, uint32_t(provenance));
    put_u32(f, uint32_t(metric_layer));
    put_u32(f, uint32_t(u.rows));
    put_u32(f, uint32_t(u.cols));
    for (double x : u.data) {
        float v32 = float(x);
        f.write(reinterpret_cast<char*>(&v32), 4);
    }
    for (double x : s) f.write(reinterpret_cast<const char*>(&x), 8);
    for (double x : v.data) {
        float v32 = float(x);
        f.write(reinterpret_cast<char*>(&v32), 4);
    }
}

BindingSubspace BindingSubspace::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::string(magic, 4) != "PDSS") throw std::runtime_error("bad subspace magic");
    if (get_u32(f) != 1) throw std::runtime_error("unsupported subspace version");
    BindingSubspace sub;
    sub.provenance = Provenance(get_u32(f));
    sub.metric_layer = int(get_u32(f));
    int d = int(get_u32(f)), k = int(get_u32(f));
    sub.u.resize(d, k);
    sub.v.resize(d, k);
    sub.s.assign(size_t(k), 0.0);
    for (double& x : sub.u.data) {
        float v32;
        f.read(reinterpret_cast<char*>(&v32), 4);
        x = v32;
    }
    for (double& x : sub.s) f.read(reinterpret_cast<char*>(&x), 8);
    for (double& x : sub.v.data) {
        float v32;
        f.read(reinterpret_cast<char*>(&v32), 4);
        x = v32;
    }
    if (!f) throw std::runtime_error("truncated subspace file");
    return sub;
}

} // namespace propdec
