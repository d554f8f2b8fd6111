#pragma once

// Decoder-only transformer trained from scratch on the closed world.
// Forward and backward passes are templated on the activation scalar:
//   double — analysis paths and gradient checks
//   float  — training (fast path)
//   Dual   — forward-over-reverse second derivatives for the Hessian
// The residual-stream input of every block ("pre-layernorm activation")
// is what gets cached, edited by interventions, and differentiated.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "propdec/dual.hpp"
#include "propdec/kernels.hpp"
#include "propdec/rng.hpp"
#include "propdec/tensor.hpp"

namespace propdec {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;
    int max_seq_len = 96;
    uint64_t seed = 1;
    // optimizer
    int steps = 2000;
    int batch_size = 16;
    double lr = 1e-3;
    int warmup_steps = 100;

    int head_dim() const { return d_model / n_heads; }
    void validate() const {
        if (d_model % n_heads != 0)
            throw std::invalid_argument("config: d_model not divisible by n_heads");
        if (vocab_size <= 0) throw std::invalid_argument("config: vocab_size unset");
    }
};

template <typename P>
struct LayerParamsT {
    std::vector<P> ln1_g, ln1_b, ln2_g, ln2_b;
    MatT<P> wq, wk, wv, wo; // [d][d]
    std::vector<P> bq, bk, bv, bo;
    MatT<P> w1; // [d][d_ff]
    std::vector<P> b1;
    MatT<P> w2; // [d_ff][d]
    std::vector<P> b2;
};

template <typename P>
struct ParamsT {
    MatT<P> tok_emb; // [vocab][d]
    MatT<P> pos_emb; // [max_seq][d]
    std::vector<LayerParamsT<P>> layers;
    std::vector<P> lnf_g, lnf_b;
    MatT<P> w_un; // [vocab][d], logits = y * w_un^T + b_un
    std::vector<P> b_un;

    void init_shape(const ModelConfig& c) {
        tok_emb.resize(c.vocab_size, c.d_model);
        pos_emb.resize(c.max_seq_len, c.d_model);
        layers.resize(size_t(c.n_layers));
        for (auto& l : layers) {
            l.ln1_g.assign(size_t(c.d_model), P(1));
            l.ln1_b.assign(size_t(c.d_model), P(0));
            l.ln2_g.assign(size_t(c.d_model), P(1));
            l.ln2_b.assign(size_t(c.d_model), P(0));
            l.wq.resize(c.d_model, c.d_model);
            l.wk.resize(c.d_model, c.d_model);
            l.wv.resize(c.d_model, c.d_model);
            l.wo.resize(c.d_model, c.d_model);
            l.bq.assign(size_t(c.d_model), P(0));
            l.bk.assign(size_t(c.d_model), P(0));
            l.bv.assign(size_t(c.d_model), P(0));
            l.bo.assign(size_t(c.d_model), P(0));
            l.w1.resize(c.d_model, c.d_ff);
            l.b1.assign(size_t(c.d_ff), P(0));
            l.w2.resize(c.d_ff, c.d_model);
            l.b2.assign(size_t(c.d_model), P(0));
        }
        lnf_g.assign(size_t(c.d_model), P(1));
        lnf_b.assign(size_t(c.d_model), P(0));
        w_un.resize(c.vocab_size, c.d_model);
        b_un.assign(size_t(c.vocab_size), P(0));
    }

    // flat visitation in the documented checkpoint order
    template <typename Fn>
    void visit(Fn&& fn) {
        fn(tok_emb.data);
        fn(pos_emb.data);
        for (auto& l : layers) {
            fn(l.ln1_g); fn(l.ln1_b);
            fn(l.wq.data); fn(l.bq);
            fn(l.wk.data); fn(l.bk);
            fn(l.wv.data); fn(l.bv);
            fn(l.wo.data); fn(l.bo);
            fn(l.ln2_g); fn(l.ln2_b);
            fn(l.w1.data); fn(l.b1);
            fn(l.w2.data); fn(l.b2);
        }
        fn(lnf_g); fn(lnf_b);
        fn(w_un.data); fn(b_un);
    }
};

using Params = ParamsT<double>;

// --- interventions --------------------------------------------------------

struct Edit {
    enum class Kind { AddVector, ProjectSwap };
    Kind kind = Kind::AddVector;
    std::vector<int> layers; // empty = every layer
    int pos = 0;
    Vec v;         // AddVector payload
    Vec v_tangent; // optional tangent (Dual forward only)
    Mat projector; // ProjectSwap: d x d symmetric idempotent
    int partner = -1;

    bool applies_to(int layer) const {
        if (layers.empty()) return true;
        for (int l : layers)
            if (l == layer) return true;
        return false;
    }
};

struct InterventionSpec {
    std::vector<Edit> edits;
    bool scaled = false; // AddVector payload multiplied by layer_scale[l]
};

void validate_intervention(const InterventionSpec& spec, int d_model, int seq_len,
                           int n_layers);

// --- caches and traces ------------------------------------------------------

struct ActivationCache {
    int n_layers = 0, seq = 0, d = 0;
    std::vector<Mat> z;  // per layer, [S][d] residual inputs (post-edit)
    Vec per_layer_scale; // average row norm per layer of this cache

    const double* at(int layer, int pos) const { return z[size_t(layer)].row(pos); }
    Vec vec(int layer, int pos) const {
        const double* p = at(layer, pos);
        return Vec(p, p + d);
    }
};

template <typename T>
struct ForwardTrace {
    int S = 0;
    std::vector<MatT<T>> z; // n_layers + 1 streams (last = pre-final-LN)
    // per-layer internals for the backward pass
    std::vector<MatT<T>> ln1_xhat, ln2_xhat;
    std::vector<std::vector<T>> ln1_rstd, ln2_rstd;
    std::vector<MatT<T>> q, k, v;      // [S][d]
    std::vector<MatT<T>> att;          // [H*S][S] softmax rows (t <= s)
    std::vector<MatT<T>> ctx;          // [S][d] per-head contexts, concatenated
    std::vector<MatT<T>> z_mid;        // after attention residual
    std::vector<MatT<T>> ff_u;         // [S][d_ff] pre-activation
    MatT<T> final_xhat;
    std::vector<T> final_rstd;
    MatT<T> logits; // [S][vocab]
    // pre-swap rows per layer (swap backward needs the snapshot values)
    std::vector<std::vector<int>> swap_rows;
    std::vector<MatT<T>> swap_snap;
};

// --- scalar metric over logits ----------------------------------------------

// Scalar function of the logits at one position. Differentiable in closed
// form; used for binding strength, Grad-CAM and gradient checks.
struct Metric {
    enum class Kind { Constant, LogProbToken, LogProbDiff, CandidateProb };
    Kind kind = Kind::Constant;
    int pos = -1; // -1 = last position
    int token_a = -1, token_b = -1;
    std::vector<int> candidates; // first answer tokens
    int correct_index = -1;

    static Metric constant() { return {}; }
    static Metric log_prob(int token, int pos = -1) {
        Metric m; m.kind = Kind::LogProbToken; m.token_a = token; m.pos = pos; return m;
    }
    static Metric log_prob_diff(int token_a, int token_b, int pos = -1) {
        Metric m; m.kind = Kind::LogProbDiff; m.token_a = token_a; m.token_b = token_b;
        m.pos = pos; return m;
    }
    static Metric candidate_prob(std::vector<int> cands, int correct, int pos = -1) {
        Metric m; m.kind = Kind::CandidateProb; m.candidates = std::move(cands);
        m.correct_index = correct; m.pos = pos; return m;
    }

    int resolve_pos(int seq_len) const { return pos < 0 ? seq_len - 1 : pos; }

    template <typename T>
    T eval(const T* logits, int vocab) const {
        using std::exp;
        using std::log;
        switch (kind) {
            case Kind::Constant: return T(0);
            case Kind::LogProbToken:
            case Kind::LogProbDiff: {
                T mx = logits[0];
                for (int i = 1; i < vocab; ++i)
                    if (logits[i] > mx) mx = logits[i];
                T sum(0);
                for (int i = 0; i < vocab; ++i) sum += exp(logits[i] - mx);
                T lse = log(sum) + mx;
                if (kind == Kind::LogProbToken) return logits[token_a] - lse;
                return logits[token_a] - logits[token_b];
            }
            case Kind::CandidateProb: {
                T mx = logits[candidates[0]];
                for (int c : candidates)
                    if (logits[c] > mx) mx = logits[c];
                T sum(0);
                for (int c : candidates) sum += exp(logits[c] - mx);
                return exp(logits[candidates[size_t(correct_index)]] - mx) / sum;
            }
        }
        return T(0);
    }

    // d(metric)/d(logits) into grad (length vocab, zero-initialized by caller)
    template <typename T>
    void grad(const T* logits, int vocab, T* grad_out) const {
        using std::exp;
        switch (kind) {
            case Kind::Constant: return;
            case Kind::LogProbToken: {
                T mx = logits[0];
                for (int i = 1; i < vocab; ++i)
                    if (logits[i] > mx) mx = logits[i];
                T sum(0);
                for (int i = 0; i < vocab; ++i) sum += exp(logits[i] - mx);
                for (int i = 0; i < vocab; ++i)
                    grad_out[i] -= exp(logits[i] - mx) / sum;
                grad_out[token_a] += T(1);
                return;
            }
            case Kind::LogProbDiff: {
                grad_out[token_a] += T(1);
                grad_out[token_b] -= T(1);
                return;
            }
            case Kind::CandidateProb: {
                T m = eval(logits, vocab);
                T mx = logits[candidates[0]];
                for (int c : candidates)
                    if (logits[c] > mx) mx = logits[c];
                T sum(0);
                for (int c : candidates) sum += exp(logits[c] - mx);
                for (size_t j = 0; j < candidates.size(); ++j) {
                    T pj = exp(logits[candidates[j]] - mx) / sum;
                    T delta = (int(j) == correct_index) ? T(1) : T(0);
                    grad_out[candidates[j]] += m * (delta - pj);
                }
                return;
            }
        }
    }
};

// --- the model ---------------------------------------------------------------

struct TrainExample {
    std::vector<int> tokens;
    std::vector<uint8_t> predict_mask; // mask[s]=1: loss on predicting tokens[s+1]

    static TrainExample plain(std::vector<int> toks) {
        TrainExample e;
        e.predict_mask.assign(toks.size() > 0 ? toks.size() - 1 : 0, 1);
        e.tokens = std::move(toks);
        return e;
    }
    // loss restricted to predicting the answer span [answer_begin, end)
    static TrainExample qa(std::vector<int> toks, int answer_begin) {
        TrainExample e;
        e.predict_mask.assign(toks.size() > 0 ? toks.size() - 1 : 0, 0);
        for (size_t s = size_t(answer_begin) - 1; s + 1 < toks.size(); ++s)
            e.predict_mask[s] = 1;
        e.tokens = std::move(toks);
        return e;
    }
};

struct TrainLog {
    std::vector<std::pair<int, double>> loss_curve; // (step, mean loss)
    double final_loss = 0.0;
};

struct Model {
    ModelConfig cfg;
    Params params;
    Vec layer_scale; // unit until calibrated

    Model() = default;
    explicit Model(const ModelConfig& c);

    void init_parameters(); // deterministic from cfg.seed

    // logits only
    Mat forward_logits(const std::vector<int>& tokens,
                       const InterventionSpec* spec = nullptr) const;
    // logits + pre-layernorm cache
    std::pair<Mat, ActivationCache> forward_with_cache(
        const std::vector<int>& tokens, const InterventionSpec* spec = nullptr) const;
    // re-run blocks [start_layer..) from a cached stream; logits out
    Mat forward_from_layer(const ActivationCache& cache, int start_layer) const;

    // renormalized next-token distribution over candidate values
    Vec answer_prob(const std::vector<int>& tokens, const std::vector<int>& cand_first_tokens,
                    const InterventionSpec* spec = nullptr) const;

    // exact gradient of metric w.r.t. every cached activation
    std::vector<Mat> grad_wrt_activations(const std::vector<int>& tokens, const Metric& metric,
                                          const InterventionSpec* spec = nullptr) const;

    // mean row norm per layer over the given token sequences
    void calibrate_scales(const std::vector<std::vector<int>>& seqs);

    void save_checkpoint(const std::string& path) const;
    static Model load_checkpoint(const std::string& path);
};

TrainLog train_lm(Model& model, const std::vector<TrainExample>& data);
Model finetune(const Model& base, const std::vector<TrainExample>& data,
               int steps, double lr, uint64_t seed);

// --- templated forward / backward --------------------------------------------

template <typename T>
T make_scalar(double v, double) { return T(v); }
template <>
inline Dual make_scalar<Dual>(double v, double t) { return Dual(v, t); }

template <typename T, typename P>
void forward_pass(const ModelConfig& cfg, const ParamsT<P>& params, const Vec& layer_scale,
                  const std::vector<int>& tokens, const InterventionSpec* spec,
                  ForwardTrace<T>& tr);

template <typename P>
struct ParamGradsT {
    ParamsT<P> g;
    explicit ParamGradsT(const ModelConfig& c) { g.init_shape(c); zero(); }
    void zero() {
        g.visit([](auto& buf) { std::fill(buf.begin(), buf.end(), typename std::decay_t<decltype(buf)>::value_type(0)); });
    }
};

// dz_out: gradient w.r.t. the post-edit residual input of each layer.
// dproj_out: optional, aligned with spec->edits; accumulates dL/dP for swaps.
template <typename T, typename P>
void backward_pass(const ModelConfig& cfg, const ParamsT<P>& params, const Vec& layer_scale,
                   const std::vector<int>& tokens, const InterventionSpec* spec,
                   const ForwardTrace<T>& tr, const MatT<T>& dlogits,
                   std::vector<MatT<T>>* dz_out, ParamGradsT<T>* pgrads,
                   std::vector<Mat>* dproj_out);

} // namespace propdec
