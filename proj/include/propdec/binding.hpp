#pragma once

// Binding-subspace identification: delta estimation, midpoint ablation,
// binding strength F(x,y), the Hessian d2F/dxdy and its SVD, the induced
// similarity metric, interchange interventions, and the DAS / random /
// skyline baselines.

#include <string>
#include <vector>

#include "propdec/linalg.hpp"
#include "propdec/model.hpp"
#include "propdec/oracle.hpp"
#include "propdec/world.hpp"

namespace propdec {

struct DeltaVectors {
    Mat entity; // [n_layers][d]: mean Z_E1 - Z_E0
    Mat attr;   // [n_layers][d]
    int n_contexts = 0;
};

enum class Provenance { Hessian, Das, Random, Skyline, OracleTrue };
std::string provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& s);

struct BindingSubspace {
    Mat u;  // d x k, orthonormal columns
    Vec s;  // k singular values, descending
    Mat v;  // d x k
    int metric_layer = 0;
    Provenance provenance = Provenance::Hessian;

    int k() const { return u.cols; }
    void save(const std::string& path) const;
    static BindingSubspace load(const std::string& path);
};

enum class HessianMode { Autodiff, FiniteDifference };

struct HessianJob {
    int n_contexts = 20;
    double step = 0.02; // finite-difference step (pre-scale units)
    HessianMode mode = HessianMode::Autodiff;
    bool shared_across_layers = true;
    bool per_layer_scaling = true;
};

// A single-predicate context prepared for binding experiments: slot
// positions, per-slot cloze queries, and candidate answer tokens.
struct BindingCtx {
    std::vector<int> tokens;
    std::vector<int> entity_pos; // per slot
    std::vector<int> attr_pos;   // per slot
    std::vector<std::vector<int>> query; // per queried slot, context ++ cloze
    std::vector<int> cand_first;         // per slot, first token of its attribute
    PropositionSet props;
};

// series single-predicate contexts over the given value subset
std::vector<BindingCtx> make_binding_contexts(
    const World& world, Rng& rng, int count, int n_entities,
    const std::array<std::vector<int>, kNumDomains>* allowed = nullptr,
    Predicate pred = Predicate::LivesIn);

// --- binding strength tasks ---------------------------------------------

// F(x, y) on the trained model: midpoint ablation plus +-x on entity slots
// and +-y on attribute slots at every layer, per-layer scaled.
class ModelBindingTask {
public:
    ModelBindingTask(const Model& model, std::vector<BindingCtx> contexts,
                     const DeltaVectors& deltas, bool per_layer_scaling = true);

    int dim() const { return model_->cfg.d_model; }
    double F(const Vec& x, const Vec& y) const;
    // gradient of F w.r.t. y at (x=0, y=0); optionally with the tangent in
    // an x-direction (forward-over-reverse second derivatives)
    void grad_y(const Vec* x_dir, Vec& gy, Vec* gy_tangent) const;

    InterventionSpec ablation_spec(const BindingCtx& ctx) const;
    const std::vector<BindingCtx>& contexts() const { return ctxs_; }

private:
    const Model* model_;
    std::vector<BindingCtx> ctxs_;
    DeltaVectors deltas_;
    bool scaled_;

    template <typename T>
    T eval_one(const BindingCtx& ctx, int query_slot, const Vec& x, const Vec& y,
               const Vec* x_tan, const Vec* y_tan) const;
};

// Same contract against the oracle (single layer, closed form).
class OracleBindingTask {
public:
    OracleBindingTask(const Oracle& oracle, std::vector<OracleContext> contexts,
                      const DeltaVectors& deltas);

    int dim() const { return oracle_->spec().d_model; }
    double F(const Vec& x, const Vec& y) const;
    void grad_y(const Vec* x_dir, Vec& gy, Vec* gy_tangent) const;

    const std::vector<OracleContext>& contexts() const { return ctxs_; }

private:
    const Oracle* oracle_;
    std::vector<OracleContext> ctxs_;
    DeltaVectors deltas_;

    template <typename T>
    void eval_queries(const OracleContext& oc, const Vec& x, const Vec& y, const Vec* x_tan,
                      T* f_out, std::vector<T>* gy_out) const;
};

// --- operations ------------------------------------------------------------

// mean slot-1 minus slot-0 activation difference per layer
DeltaVectors estimate_deltas(const Model& model, const std::vector<BindingCtx>& ctxs);
DeltaVectors estimate_deltas_oracle(const std::vector<OracleContext>& ctxs);

// midpoint ablation spec for a 2-entity context (no x/y perturbation)
InterventionSpec ablate_binding(const DeltaVectors& deltas,
                                const std::vector<int>& entity_pos,
                                const std::vector<int>& attr_pos);

template <typename Task>
double binding_strength(const Task& task, const Vec& x, const Vec& y) {
    return task.F(x, y);
}

template <typename Task>
double hessian_fd_entry(const Task& task, int i, int j, double h) {
    const int d = task.dim();
    Vec x(size_t(d), 0.0), y(size_t(d), 0.0);
    auto eval = [&](double si, double sj) {
        x[size_t(i)] = si * h;
        y[size_t(j)] = sj * h;
        double f = task.F(x, y);
        x[size_t(i)] = 0.0;
        y[size_t(j)] = 0.0;
        return f;
    };
    return (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4.0 * h * h);
}

template <typename Task>
Mat compute_hessian(const Task& task, const HessianJob& job) {
    const int d = task.dim();
    Mat h(d, d);
    if (job.mode == HessianMode::Autodiff) {
        for (int i = 0; i < d; ++i) {
            Vec xdir(size_t(d), 0.0);
            xdir[size_t(i)] = 1.0;
            Vec gy, gy_tan;
            task.grad_y(&xdir, gy, &gy_tan);
            for (int j = 0; j < d; ++j) h.at(i, j) = gy_tan[size_t(j)];
        }
    } else {
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) h.at(i, j) = hessian_fd_entry(task, i, j, job.step);
    }
    for (double x : h.data)
        if (!std::isfinite(x)) throw std::runtime_error("numeric error: non-finite Hessian");
    return h;
}


BindingSubspace svd_subspace(const Mat& hessian, int k, int metric_layer,
                             Provenance provenance = Provenance::Hessian);

double binding_similarity(const BindingSubspace& sub, const double* zs, const double* zt);
inline double binding_similarity(const BindingSubspace& sub, const Vec& a, const Vec& b) {
    return binding_similarity(sub, a.data(), b.data());
}
// metric-layer activations from a cache
double binding_similarity(const BindingSubspace& sub, const ActivationCache& cache,
                          int pos_s, int pos_t);

Mat similarity_matrix(const BindingSubspace& sub, const ActivationCache& cache,
                      const std::vector<int>& positions);

Mat make_projector(const Mat& basis, int k); // P = B_k B_k^T

// reciprocal ProjectSwap at every layer between two positions
InterventionSpec interchange_spec(const Mat& projector, int pos_i, int pos_j);

enum class SwapSide { Entity, Attribute };

struct InterchangeResult {
    int k = 0;
    int slot_i = 0, slot_j = 0;
    double min_accuracy = 0.0;            // lowest across queried entities
    std::vector<double> per_entity;        // accuracy per queried slot
};

// swap slots (i, j) with a rank-k projector from the subspace and measure
// per-entity expected-answer accuracy over the contexts
InterchangeResult eval_interchange_swap(const Model& model, const std::vector<BindingCtx>& ctxs,
                                        const BindingSubspace& sub, SwapSide side, int k,
                                        int slot_i, int slot_j);
std::vector<InterchangeResult> eval_interchange(const Model& model,
                                                const std::vector<BindingCtx>& ctxs,
                                                const BindingSubspace& sub, SwapSide side,
                                                const std::vector<int>& k_grid);

// oracle versions for ground-truth verification
InterchangeResult eval_interchange_swap_oracle(const Oracle& oracle,
                                               const std::vector<OracleContext>& ctxs,
                                               const BindingSubspace& sub, SwapSide side,
                                               int k, int slot_i, int slot_j);

// smallest k whose mean-over-swaps accuracy is within `tol` of the best
int knee_k(const std::vector<InterchangeResult>& results, const std::vector<int>& k_grid,
           double tol = 0.02);

struct DasConfig {
    int dim = 2;
    double lr = 1e-3;
    int epochs = 5;
    int n_samples = 128;
    int batch = 8;
    double warmup_frac = 0.1;
    uint64_t seed = 1;
};

BindingSubspace das_baseline(const Model& model, const std::vector<BindingCtx>& ctxs,
                             SwapSide side, const DasConfig& cfg);
BindingSubspace das_baseline_oracle(const Oracle& oracle,
                                    const std::vector<OracleContext>& ctxs,
                                    const DasConfig& cfg);

BindingSubspace random_subspace(int d_model, int dim, int metric_layer, Rng& rng);
// span of the three-entity delta vectors (dim 2), orthonormalized
BindingSubspace skyline_subspace(const Model& model, const std::vector<BindingCtx>& ctxs3,
                                 SwapSide side, int metric_layer);
BindingSubspace skyline_subspace_oracle(const std::vector<OracleContext>& ctxs3,
                                        SwapSide side);

// layer whose bound-vs-unbound similarity separation (ROC AUC) is best
int select_metric_layer(const BindingSubspace& sub, const Model& model,
                        const std::vector<BindingCtx>& val_ctxs, Vec* auc_out = nullptr);

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

} // namespace propdec
