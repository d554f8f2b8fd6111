#pragma once

// Synthetic activation generator that satisfies the lexical + binding
// decomposition exactly, with a known binding matrix. Downstream algorithms
// are verified against it: the subspace they recover must match the stored
// ground truth.

#include <array>

#include "propdec/linalg.hpp"
#include "propdec/model.hpp"
#include "propdec/world.hpp"

namespace propdec {

struct OracleSpec {
    int d_model = 64;
    int rank = 2;              // r: dimension of the binding subspace
    int n_slots = 3;           // K binding slots (r=1 forces 2, r>=3 forces r+1)
    double binding_scale = 2.0;
    double noise = 0.0;        // sigma
    double temperature = 0.1;  // tau
    uint64_t seed = 1;
    std::array<int, kNumDomains> domain_sizes = {16, 8, 8, 8};
};

struct OracleContext {
    ContextInstance meta;   // tokens / labels / entity_index / ground truth
    ActivationCache cache;  // single layer
    std::vector<int> entity_pos;                    // slot k -> name position
    std::array<std::vector<int>, kNumDomains> attr_pos; // domain -> slot k -> position
};

class Oracle {
public:
    Oracle(const OracleSpec& spec, const World& base_world);

    const OracleSpec& spec() const { return spec_; }
    const World& world() const { return world_; } // domains truncated to spec sizes

    // activations for a sampled proposition set; noise drawn from rng
    OracleContext make_context(const PropositionSet& props, Rng& rng) const;

    // 2-entity single-predicate contexts for binding-strength experiments
    OracleContext make_binding_context(Rng& rng, Predicate pred = Predicate::LivesIn,
                                       int n_entities = 2) const;

    // softmax over the context's attribute slots for the queried entity
    Vec answer(const ActivationCache& cache, const std::vector<int>& attr_positions,
               int entity_position) const;

    // stored ground truth
    const Mat& true_left() const { return binding_basis_; }
    const Mat& true_right() const { return binding_basis_; }
    const Mat& true_h() const { return h_true_; }
    const Vec& true_weights() const { return weights_; }
    Vec slot_binding(int k) const; // b(k) = binding_scale * beta_k
    Vec lexical(int domain, const std::string& value) const;

    // scores under the true bilinear form, templated so Hessian code can
    // push Dual tangents through
    template <typename T>
    T score(const std::vector<T>& entity_vec, const std::vector<T>& attr_vec) const {
        const int d = spec_.d_model;
        T out(0);
        // H = B diag(w) B^T: project both sides onto the basis
        for (int c = 0; c < binding_basis_.cols; ++c) {
            T pe(0), pa(0);
            for (int i = 0; i < d; ++i) {
                pe += entity_vec[size_t(i)] * binding_basis_.at(i, c);
                pa += attr_vec[size_t(i)] * binding_basis_.at(i, c);
            }
            out += pe * pa * T(weights_[size_t(c)]);
        }
        return out / T(spec_.temperature);
    }

private:
    OracleSpec spec_;
    World world_;
    Mat binding_basis_; // d x r orthonormal
    Vec weights_;       // near-unit, descending; H = B diag(w) B^T
    Mat h_true_;        // d x d
    std::vector<Vec> slot_dirs_; // K unit vectors inside the basis, d-dim
    std::array<std::vector<Vec>, kNumDomains> lexical_; // per domain per value
    int filler_token_ = 0;

    Vec make_token_vec(int domain, const std::string& value, int slot, Rng& rng) const;
};

} // namespace propdec
