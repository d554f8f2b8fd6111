#include <doctest.h>

#include <cmath>

#include "propdec/binding.hpp"

using namespace propdec;

namespace {

Oracle make_oracle(double noise = 0.0, int rank = 2, uint64_t seed = 5) {
    OracleSpec spec;
    spec.rank = rank;
    spec.noise = noise;
    spec.seed = seed;
    return Oracle(spec, World::make_default());
}

struct OracleSetup {
    Oracle oracle;
    std::vector<OracleContext> delta_ctxs, f_ctxs;
    DeltaVectors deltas;

    explicit OracleSetup(double noise = 0.0, int rank = 2, int n_delta = 200, uint64_t seed = 5)
        : oracle(make_oracle(noise, rank, seed)) {
        Rng rng(seed ^ 0x77);
        for (int i = 0; i < n_delta; ++i)
            delta_ctxs.push_back(oracle.make_binding_context(rng));
        for (int i = 0; i < 20; ++i) f_ctxs.push_back(oracle.make_binding_context(rng));
        deltas = estimate_deltas_oracle(delta_ctxs);
    }

    OracleBindingTask task() const { return OracleBindingTask(oracle, f_ctxs, deltas); }
};

} // namespace

TEST_CASE("delta estimation recovers the binding-vector difference within 10%") {
    OracleSetup s;
    Vec truth = s.oracle.slot_binding(1);
    axpy(-1.0, s.oracle.slot_binding(0), truth);
    Vec est(size_t(s.oracle.spec().d_model), 0.0);
    for (int i = 0; i < s.oracle.spec().d_model; ++i) est[size_t(i)] = s.deltas.entity.at(0, i);
    Vec err = est;
    axpy(-1.0, truth, err);
    CHECK(norm2(err) / norm2(truth) < 0.10);

    // two identical contexts give exactly the single difference
    std::vector<OracleContext> two = {s.delta_ctxs[0], s.delta_ctxs[0]};
    DeltaVectors dv = estimate_deltas_oracle(two);
    const auto& oc = s.delta_ctxs[0];
    for (int i = 0; i < s.oracle.spec().d_model; ++i) {
        double expect = oc.cache.at(0, oc.entity_pos[1])[i] - oc.cache.at(0, oc.entity_pos[0])[i];
        CHECK(dv.entity.at(0, i) == doctest::Approx(expect));
    }
}

TEST_CASE("midpoint ablation drives the oracle to an exactly uniform answer") {
    OracleSetup s;
    // with exact deltas the ablated vectors meet at the midpoint
    DeltaVectors exact;
    exact.entity.resize(1, s.oracle.spec().d_model);
    exact.attr.resize(1, s.oracle.spec().d_model);
    Vec de = s.oracle.slot_binding(1);
    axpy(-1.0, s.oracle.slot_binding(0), de);
    for (int i = 0; i < s.oracle.spec().d_model; ++i) {
        exact.entity.at(0, i) = de[size_t(i)];
        exact.attr.at(0, i) = de[size_t(i)];
    }
    OracleBindingTask task(s.oracle, s.f_ctxs, exact);
    Vec zero(size_t(s.oracle.spec().d_model), 0.0);
    CHECK(task.F(zero, zero) == doctest::Approx(0.5).epsilon(1e-9));

    // estimated deltas stay within the paper tolerance
    CHECK(std::abs(s.task().F(zero, zero) - 0.5) < 0.05);

    // restoring the binding difference recovers or inverts the answer
    Vec x = de, y = de;
    scale(x, 0.5);
    scale(y, 0.5);
    CHECK(binding_strength(task, x, y) > 0.95);
    Vec yneg = y;
    scale(yneg, -1.0);
    CHECK(binding_strength(task, x, yneg) < 0.05);

    // zero deltas produce a no-op ablation spec
    DeltaVectors zero_dv;
    zero_dv.entity.resize(1, s.oracle.spec().d_model);
    zero_dv.attr.resize(1, s.oracle.spec().d_model);
    InterventionSpec spec = ablate_binding(zero_dv, {0, 1}, {2, 3});
    for (const auto& e : spec.edits)
        for (double v : e.v) CHECK(v == 0.0);
}

TEST_CASE("oracle Hessian recovery: principal angle under 5 degrees for r in {1,2,4}") {
    for (int rank : {1, 2, 4}) {
        OracleSetup s(0.0, rank);
        Mat h = compute_hessian(s.task(), HessianJob{});
        BindingSubspace sub = svd_subspace(h, rank, 0);
        CHECK(max_principal_angle_deg(sub.u, s.oracle.true_left()) < 5.0);
        CHECK(max_principal_angle_deg(sub.v, s.oracle.true_right()) < 5.0);
    }
}

TEST_CASE("oracle Hessian recovery under noise stays within 15 degrees") {
    for (int rank : {1, 2, 4}) {
        OracleSetup s(0.05, rank);
        Mat h = compute_hessian(s.task(), HessianJob{});
        BindingSubspace sub = svd_subspace(h, rank, 0);
        CHECK(max_principal_angle_deg(sub.u, s.oracle.true_left()) < 15.0);
    }
}

TEST_CASE("autodiff and finite-difference Hessians agree on the oracle") {
    OracleSetup s;
    Mat ha = compute_hessian(s.task(), HessianJob{});
    double hmax = 0;
    for (double x : ha.data) hmax = std::max(hmax, std::abs(x));
    Rng rng(31);
    OracleBindingTask task = s.task();
    for (int trial = 0; trial < 8; ++trial) {
        int i = int(rng.uniform_int(uint64_t(task.dim())));
        int j = int(rng.uniform_int(uint64_t(task.dim())));
        double fd = hessian_fd_entry(task, i, j, 0.02);
        double ad = ha.at(i, j);
        double denom = std::max({std::abs(fd), std::abs(ad), 0.05 * hmax});
        CHECK(std::abs(fd - ad) / denom < 1e-2);
    }
    // constant F has a vanishing Hessian: zero singular directions only
    struct ConstTask {
        int d;
        int dim() const { return d; }
        double F(const Vec&, const Vec&) const { return 0.25; }
        void grad_y(const Vec*, Vec& gy, Vec* gt) const {
            gy.assign(size_t(d), 0.0);
            if (gt) gt->assign(size_t(d), 0.0);
        }
    } ct{8};
    Mat hz = compute_hessian(ct, HessianJob{});
    for (double x : hz.data) CHECK(x == 0.0);
    Mat hz2 = compute_hessian(ct, HessianJob{20, 0.1, HessianMode::FiniteDifference, true, true});
    for (double x : hz2.data) CHECK(std::abs(x) < 1e-9);
}

TEST_CASE("svd_subspace validates k and orders singular values") {
    Mat h(6, 6);
    h.at(0, 0) = 3;
    h.at(1, 1) = 2;
    h.at(2, 2) = 1;
    BindingSubspace sub = svd_subspace(h, 2, 0);
    CHECK(sub.s[0] == doctest::Approx(3));
    CHECK(sub.s[1] == doctest::Approx(2));
    CHECK(std::abs(sub.u.at(0, 0)) == doctest::Approx(1));
    CHECK_THROWS(svd_subspace(h, 0, 0));
    CHECK_THROWS(svd_subspace(h, 7, 0));
    // orthonormal bases
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double uu = 0;
            for (int r = 0; r < 6; ++r) uu += sub.u.at(r, i) * sub.u.at(r, j);
            CHECK(std::abs(uu - (i == j ? 1 : 0)) < 1e-6);
        }
}

TEST_CASE("similarity metric: symmetry, bilinearity, zero weights") {
    OracleSetup s;
    Mat h = compute_hessian(s.task(), HessianJob{});
    BindingSubspace sub = svd_subspace(h, 2, 0);
    Rng rng(41);
    const int d = s.oracle.spec().d_model;
    Vec z1(size_t(d), 0.0), z2(size_t(d), 0.0), z3(size_t(d), 0.0);
    for (auto* z : {&z1, &z2, &z3})
        for (auto& x : *z) x = rng.normal();
    double d12 = binding_similarity(sub, z1, z2);
    double d21 = binding_similarity(sub, z2, z1);
    CHECK(d12 == d21); // exact symmetry

    double a = 1.7, b = -0.4;
    Vec mix(size_t(d), 0.0);
    for (int i = 0; i < d; ++i) mix[size_t(i)] = a * z1[size_t(i)] + b * z2[size_t(i)];
    double lhs = binding_similarity(sub, mix, z3);
    double rhs = a * binding_similarity(sub, z1, z3) + b * binding_similarity(sub, z2, z3);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

    BindingSubspace zero_s = sub;
    std::fill(zero_s.s.begin(), zero_s.s.end(), 0.0);
    CHECK(binding_similarity(zero_s, z1, z2) == 0.0);
}

TEST_CASE("bound pairs score higher than unbound pairs on every clean context") {
    OracleSetup s;
    Mat h = compute_hessian(s.task(), HessianJob{});
    BindingSubspace sub = svd_subspace(h, 2, 0);
    Rng rng(47);
    for (int trial = 0; trial < 50; ++trial) {
        OracleContext oc = s.oracle.make_binding_context(rng);
        for (int k = 0; k < 2; ++k) {
            double bound = binding_similarity(sub, oc.cache, oc.entity_pos[size_t(k)],
                                              oc.attr_pos[1][size_t(k)]);
            double unbound = binding_similarity(sub, oc.cache, oc.entity_pos[size_t(k)],
                                                oc.attr_pos[1][size_t(1 - k)]);
            CHECK(bound > unbound);
        }
    }
}

TEST_CASE("similarity matrix is symmetric with block structure on oracle contexts") {
    OracleSetup s;
    Mat h = compute_hessian(s.task(), HessianJob{});
    BindingSubspace sub = svd_subspace(h, 2, 0);
    Rng rng(53);
    PropositionSet props = sample_propositions(s.oracle.world(), 2, rng);
    OracleContext oc = s.oracle.make_context(props, rng);
    std::vector<int> positions;
    for (int p = 0; p < oc.cache.seq; ++p) positions.push_back(p);
    Mat m = similarity_matrix(sub, oc.cache, positions);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) CHECK(std::abs(m.at(i, j) - m.at(j, i)) < 1e-9);

    // within-entity blocks dominate cross-entity ones
    double within = 0, cross = 0;
    int nw = 0, nc = 0;
    for (int i = 0; i < oc.cache.seq; ++i)
        for (int j = 0; j < oc.cache.seq; ++j) {
            int ei = oc.meta.entity_index[size_t(i)], ej = oc.meta.entity_index[size_t(j)];
            if (ei < 0 || ej < 0 || i == j) continue;
            if (ei == ej) {
                within += m.at(i, j);
                ++nw;
            } else {
                cross += m.at(i, j);
                ++nc;
            }
        }
    CHECK(within / nw > cross / nc);
}

TEST_CASE("oracle interchange with the true subspace flips every swap exactly") {
    OracleSetup s(0.0, 2);
    Rng rng(59);
    std::vector<OracleContext> ctx3;
    for (int i = 0; i < 40; ++i) ctx3.push_back(s.oracle.make_binding_context(rng, Predicate::LivesIn, 3));
    BindingSubspace truth;
    truth.u = s.oracle.true_left();
    truth.v = s.oracle.true_right();
    truth.s.assign(size_t(truth.u.cols), 1.0);
    truth.provenance = Provenance::OracleTrue;
    for (auto [i, j] : {std::pair{0, 1}, std::pair{0, 2}, std::pair{1, 2}}) {
        auto res = eval_interchange_swap_oracle(s.oracle, ctx3, truth, SwapSide::Entity, 2, i, j);
        CHECK(res.min_accuracy == doctest::Approx(1.0));
        auto res_a =
            eval_interchange_swap_oracle(s.oracle, ctx3, truth, SwapSide::Attribute, 2, i, j);
        CHECK(res_a.min_accuracy == doctest::Approx(1.0));
    }
    // lexical content survives the swap: the projector is orthogonal to it
    OracleContext oc = ctx3[0];
    Mat proj = make_projector(truth.u, 2);
    Vec z0 = oc.cache.vec(0, oc.entity_pos[0]);
    Vec z1 = oc.cache.vec(0, oc.entity_pos[1]);
    Vec swapped = z0;
    for (int r = 0; r < proj.rows; ++r) {
        double acc = 0;
        for (int c = 0; c < proj.cols; ++c) acc += proj.at(r, c) * (z1[size_t(c)] - z0[size_t(c)]);
        swapped[size_t(r)] += acc;
    }
    const std::string& ent0 = oc.meta.propositions.entities()[0];
    Vec lex = s.oracle.lexical(0, ent0);
    CHECK(dot(swapped, lex) == doctest::Approx(dot(z0, lex)).epsilon(1e-9));
}

TEST_CASE("projector span-invariance: rotated bases give identical interchange outcomes") {
    OracleSetup s;
    Rng rng(61);
    std::vector<OracleContext> ctxs;
    for (int i = 0; i < 10; ++i) ctxs.push_back(s.oracle.make_binding_context(rng));
    BindingSubspace a;
    a.u = s.oracle.true_left();
    a.v = a.u;
    a.s.assign(2, 1.0);
    // rotate the basis within its span
    BindingSubspace b = a;
    for (int r = 0; r < b.u.rows; ++r) {
        double c0 = a.u.at(r, 0), c1 = a.u.at(r, 1);
        b.u.at(r, 0) = (c0 + c1) / std::sqrt(2.0);
        b.u.at(r, 1) = (c0 - c1) / std::sqrt(2.0);
    }
    Mat pa = make_projector(a.u, 2), pb = make_projector(b.u, 2);
    for (size_t i = 0; i < pa.data.size(); ++i) CHECK(pa.data[i] == doctest::Approx(pb.data[i]));
    auto ra = eval_interchange_swap_oracle(s.oracle, ctxs, a, SwapSide::Entity, 2, 0, 1);
    auto rb = eval_interchange_swap_oracle(s.oracle, ctxs, b, SwapSide::Entity, 2, 0, 1);
    CHECK(ra.min_accuracy == rb.min_accuracy);
}

TEST_CASE("skyline on clean oracle matches the true binding-difference span") {
    OracleSetup s;
    Rng rng(67);
    std::vector<OracleContext> ctx3;
    for (int i = 0; i < 400; ++i)
        ctx3.push_back(s.oracle.make_binding_context(rng, Predicate::LivesIn, 3));
    BindingSubspace sky = skyline_subspace_oracle(ctx3, SwapSide::Entity);
    CHECK(sky.u.cols == 2);
    // true difference span
    Mat truth(s.oracle.spec().d_model, 2);
    Vec d01 = s.oracle.slot_binding(1), d12 = s.oracle.slot_binding(2);
    axpy(-1.0, s.oracle.slot_binding(0), d01);
    axpy(-1.0, s.oracle.slot_binding(1), d12);
    for (int i = 0; i < truth.rows; ++i) {
        truth.at(i, 0) = d01[size_t(i)];
        truth.at(i, 1) = d12[size_t(i)];
    }
    Mat tq = orthonormalize_columns(truth);
    CHECK(max_principal_angle_deg(sky.u, tq) < 5.0);
}

TEST_CASE("random subspaces are reproducible and DAS on the oracle learns the 0-1 swap") {
    Rng ra(9), rb(9);
    BindingSubspace r1 = random_subspace(32, 4, 0, ra);
    BindingSubspace r2 = random_subspace(32, 4, 0, rb);
    for (size_t i = 0; i < r1.u.data.size(); ++i) CHECK(r1.u.data[i] == r2.u.data[i]);

    OracleSetup s;
    Rng rng(71);
    std::vector<OracleContext> ctxs;
    for (int i = 0; i < 64; ++i) ctxs.push_back(s.oracle.make_binding_context(rng));
    DasConfig dc;
    dc.dim = 2;
    dc.lr = 0.05; // the oracle landscape is clean; larger steps converge quickly
    dc.seed = 3;
    BindingSubspace das = das_baseline_oracle(s.oracle, ctxs, dc);
    // orthonormality within 1e-5
    for (int i = 0; i < das.u.cols; ++i)
        for (int j = 0; j < das.u.cols; ++j) {
            double g = 0;
            for (int r = 0; r < das.u.rows; ++r) g += das.u.at(r, i) * das.u.at(r, j);
            CHECK(std::abs(g - (i == j ? 1 : 0)) < 1e-5);
        }
    std::vector<OracleContext> eval_ctxs;
    for (int i = 0; i < 32; ++i) eval_ctxs.push_back(s.oracle.make_binding_context(rng));
    auto res = eval_interchange_swap_oracle(s.oracle, eval_ctxs, das, SwapSide::Entity, 2, 0, 1);
    CHECK(res.min_accuracy > 0.95);

    // dim 0 leaves answers at chance (no-op projector)
    DasConfig d0 = dc;
    d0.dim = 0;
    BindingSubspace das0 = das_baseline_oracle(s.oracle, ctxs, d0);
    auto res0 =
        eval_interchange_swap_oracle(s.oracle, eval_ctxs, das0, SwapSide::Entity, 0, 0, 1);
    CHECK(res0.min_accuracy < 0.1); // unswapped answers, so the swap "fails"
}

TEST_CASE("subspace files round trip") {
    OracleSetup s;
    Mat h = compute_hessian(s.task(), HessianJob{});
    BindingSubspace sub = svd_subspace(h, 3, 0);
    sub.metric_layer = 1;
    std::string path = "/tmp/propdec_sub.pdss";
    sub.save(path);
    BindingSubspace r = BindingSubspace::load(path);
    CHECK(r.k() == 3);
    CHECK(r.metric_layer == 1);
    CHECK(r.provenance == Provenance::Hessian);
    for (size_t i = 0; i < sub.s.size(); ++i) CHECK(std::abs(r.s[i] - sub.s[i]) < 1e-12);
    for (size_t i = 0; i < sub.u.data.size(); ++i) CHECK(std::abs(r.u.data[i] - sub.u.data[i]) < 1e-6);
}
