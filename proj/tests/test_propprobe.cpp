#include <doctest.h>

#include <cmath>

#include "propdec/propprobe.hpp"

using namespace propdec;

namespace {

// oracle, probes and subspace fitted end to end once, shared across cases
struct OracleRig {
    Oracle oracle;
    ProbeSet probes;
    BindingSubspace sub;

    explicit OracleRig(double noise = 0.0, uint64_t seed = 5)
        : oracle([&] {
              OracleSpec spec;
              spec.noise = noise;
              spec.seed = seed;
              return Oracle(spec, World::make_default());
          }()) {
        Rng rng(seed ^ 0x1234);
        std::vector<OracleContext> train, val;
        // counterbalanced fit set: each draw contributes both slot orders so
        // per-value binding components cancel in the class means
        for (int i = 0; i < 128; ++i) {
            PropositionSet props = sample_propositions(oracle.world(), 2, rng);
            train.push_back(oracle.make_context(props, rng));
            PropositionSet rev;
            for (auto it = props.entities().rbegin(); it != props.entities().rend(); ++it)
                for (const auto& p : props.items())
                    if (p.entity == *it) rev.insert(p);
            train.push_back(oracle.make_context(rev, rng));
        }
        for (int i = 0; i < 64; ++i)
            val.push_back(oracle.make_context(sample_propositions(oracle.world(), 2, rng), rng));
        for (int d = 0; d < kNumDomains; ++d) {
            std::vector<TokenSample> samples;
            for (const auto& oc : train)
                for (int s = 0; s < oc.cache.seq; ++s) {
                    const auto& l = oc.meta.token_labels[size_t(s)];
                    if (l && l->domain == d) samples.push_back({oc.cache.vec(0, s), l->value});
                }
            probes.by_domain[size_t(d)] =
                fit_domain_probe(d, 0, samples, oracle.world().domains[size_t(d)].values);
            std::vector<ThresholdContext> thr;
            for (const auto& oc : val) {
                ThresholdContext tc;
                for (int s = 0; s < oc.cache.seq; ++s)
                    tc.activations.push_back(oc.cache.vec(0, s));
                auto sets = true_value_sets(oc.meta.propositions);
                tc.true_set.assign(sets[size_t(d)].begin(), sets[size_t(d)].end());
                thr.push_back(std::move(tc));
            }
            probes.by_domain[size_t(d)].threshold =
                select_threshold(probes.by_domain[size_t(d)], thr);
            probes.by_domain[size_t(d)].threshold_set = true;
        }
        std::vector<OracleContext> deltas_ctxs, f_ctxs;
        for (int i = 0; i < 200; ++i) deltas_ctxs.push_back(oracle.make_binding_context(rng));
        for (int i = 0; i < 20; ++i) f_ctxs.push_back(oracle.make_binding_context(rng));
        DeltaVectors dv = estimate_deltas_oracle(deltas_ctxs);
        OracleBindingTask task(oracle, f_ctxs, dv);
        Mat h = compute_hessian(task, HessianJob{});
        sub = svd_subspace(h, oracle.spec().rank, 0);
    }
};

PropositionSet props_of(std::initializer_list<Proposition> ps) {
    PropositionSet s;
    for (const auto& p : ps) s.insert(p);
    return s;
}

} // namespace

TEST_CASE("EM and Jaccard unit values") {
    Proposition p1{Predicate::LivesIn, "A", "X"};
    Proposition p2{Predicate::WorksAs, "A", "Y"};
    Proposition p3{Predicate::LivesIn, "B", "Z"};
    Proposition p4{Predicate::WorksAs, "B", "W"};

    PropositionSet a = props_of({p1, p2});
    CHECK(exact_match(a, a) == 1);
    CHECK(jaccard(a, a) == 1.0);

    PropositionSet four = props_of({p1, p2, p3, p4});
    PropositionSet two = props_of({p1, p2});
    CHECK(exact_match(four, two) == 0);
    CHECK(jaccard(four, two) == doctest::Approx(0.5));

    PropositionSet disj = props_of({p3, p4});
    CHECK(exact_match(two, disj) == 0);
    CHECK(jaccard(two, disj) == 0.0);

    PropositionSet empty;
    CHECK(jaccard(empty, empty) == 1.0);
    CHECK(exact_match(empty, empty) == 1);
    CHECK(jaccard(empty, two) == 0.0);

    // EM = 1 iff Jaccard = 1
    for (const auto& pair : {std::pair{four, two}, {two, disj}, {two, two}}) {
        bool em = exact_match(pair.first, pair.second) == 1;
        bool j1 = jaccard(pair.first, pair.second) == 1.0;
        CHECK(em == j1);
    }
}

TEST_CASE("oracle end-to-end: lookup decodes every clean context exactly") {
    OracleRig rig;
    Rng rng(99);
    int em_sum = 0;
    double jac_sum = 0;
    const int n = 128;
    for (int i = 0; i < n; ++i) {
        OracleContext oc =
            rig.oracle.make_context(sample_propositions(rig.oracle.world(), 2, rng), rng);
        PropositionSet pred = propose_predicates(rig.probes, rig.sub, oc.cache);
        em_sum += exact_match(pred, oc.meta.propositions);
        jac_sum += jaccard(pred, oc.meta.propositions);
        CHECK(pred.size() == 6);
    }
    CHECK(em_sum == n);
    CHECK(jac_sum == doctest::Approx(double(n)));
}

TEST_CASE("oracle end-to-end with noise keeps EM above 0.95") {
    OracleRig rig(0.05);
    Rng rng(101);
    int em_sum = 0;
    const int n = 128;
    for (int i = 0; i < n; ++i) {
        OracleContext oc =
            rig.oracle.make_context(sample_propositions(rig.oracle.world(), 2, rng), rng);
        PropositionSet pred = propose_predicates(rig.probes, rig.sub, oc.cache);
        em_sum += exact_match(pred, oc.meta.propositions);
    }
    CHECK(double(em_sum) / n >= 0.95);
}

TEST_CASE("no detected names gives the empty set") {
    OracleRig rig;
    Rng rng(103);
    OracleContext oc =
        rig.oracle.make_context(sample_propositions(rig.oracle.world(), 2, rng), rng);
    ProbeSet strict = rig.probes;
    strict.by_domain[0].threshold = 1e9; // no token clears the name probe
    PropositionSet pred = propose_predicates(strict, rig.sub, oc.cache);
    CHECK(pred.empty());
    PropositionSet predm = propose_predicates_matched(strict, rig.sub, oc.cache);
    CHECK(predm.empty());
}

TEST_CASE("lookup is invariant to positive rescaling of the metric") {
    OracleRig rig;
    Rng rng(107);
    BindingSubspace scaled = rig.sub;
    for (auto& s : scaled.s) s *= 7.3;
    for (int i = 0; i < 10; ++i) {
        OracleContext oc =
            rig.oracle.make_context(sample_propositions(rig.oracle.world(), 2, rng), rng);
        PropositionSet a = propose_predicates(rig.probes, rig.sub, oc.cache);
        PropositionSet b = propose_predicates(rig.probes, scaled, oc.cache);
        CHECK(a == b);
    }
}

TEST_CASE("unmatched lookup allows double assignment; matched forbids it") {
    // synthetic cache engineered so both attribute tokens bind to name 0
    OracleRig rig;
    Rng rng(109);
    OracleContext oc = rig.oracle.make_binding_context(rng);
    // overwrite the binding component of attribute 1 with slot 0's direction
    const int d = rig.oracle.spec().d_model;
    int a1 = oc.attr_pos[1][1];
    Vec z(size_t(d), 0.0);
    const std::string a1_value = oc.meta.token_labels[size_t(a1)]->value;
    Vec lex = rig.oracle.lexical(1, a1_value);
    Vec bind = rig.oracle.slot_binding(0);
    for (int i = 0; i < d; ++i) z[size_t(i)] = lex[size_t(i)] + bind[size_t(i)];
    std::copy(z.begin(), z.end(), oc.cache.z[0].row(a1));

    PropositionSet un = propose_predicates(rig.probes, rig.sub, oc.cache);
    // both countries now bind to entity 0
    const std::string& e0 = oc.meta.propositions.entities()[0];
    int to_e0 = 0;
    for (const auto& p : un.items())
        if (p.entity == e0) ++to_e0;
    CHECK(to_e0 == 2);

    PropositionSet matched = propose_predicates_matched(rig.probes, rig.sub, oc.cache);
    // matched variant assigns distinct names per domain
    std::map<std::pair<Predicate, std::string>, int> owners;
    for (const auto& p : matched.items()) owners[{p.predicate, p.entity}] += 1;
    for (auto& [k, n] : owners) CHECK(n == 1);

    // unambiguous similarities: matched equals unmatched
    OracleContext clean = rig.oracle.make_binding_context(rng);
    CHECK(propose_predicates(rig.probes, rig.sub, clean.cache) ==
          propose_predicates_matched(rig.probes, rig.sub, clean.cache));
}

TEST_CASE("matched variant is at least as accurate under binding noise") {
    // noisy bindings stand in for order-confusable contexts: the matched
    // variant may fix double assignments but must never lose ground
    OracleRig rig(0.25, 31);
    Rng rng(131);
    double em_matched = 0, em_unmatched = 0;
    const int n = 96;
    for (int i = 0; i < n; ++i) {
        OracleContext oc =
            rig.oracle.make_context(sample_propositions(rig.oracle.world(), 2, rng), rng);
        em_unmatched += exact_match(propose_predicates(rig.probes, rig.sub, oc.cache),
                                    oc.meta.propositions);
        em_matched += exact_match(propose_predicates_matched(rig.probes, rig.sub, oc.cache),
                                  oc.meta.propositions);
    }
    CHECK(em_matched >= em_unmatched);
}

TEST_CASE("per-domain probe EM bounds the composed probe EM") {
    OracleRig rig(0.05);
    Rng rng(113);
    const int n = 64;
    double prop_em = 0;
    std::array<double, kNumDomains> dom_em{};
    for (int i = 0; i < n; ++i) {
        OracleContext oc =
            rig.oracle.make_context(sample_propositions(rig.oracle.world(), 2, rng), rng);
        PropositionSet pred = propose_predicates(rig.probes, rig.sub, oc.cache);
        int em = exact_match(pred, oc.meta.propositions);
        prop_em += em;
        auto truth = true_value_sets(oc.meta.propositions);
        for (int d = 0; d < kNumDomains; ++d) {
            auto detected = detect_values(rig.probes.by_domain[size_t(d)], oc.cache);
            bool ok = detected == truth[size_t(d)];
            dom_em[size_t(d)] += ok ? 1 : 0;
            // contextwise bound for attribute domains
            if (d > 0 && em == 1) CHECK(ok);
        }
    }
    for (int d = 0; d < kNumDomains; ++d) CHECK(dom_em[size_t(d)] >= prop_em);
}

TEST_CASE("random subspace strictly hurts the oracle Jaccard") {
    OracleRig rig;
    Rng rng(127);
    Rng rsub_rng(5);
    BindingSubspace rnd = random_subspace(rig.oracle.spec().d_model, rig.sub.k(), 0, rsub_rng);
    double jac_h = 0, jac_r = 0;
    for (int i = 0; i < 48; ++i) {
        OracleContext oc =
            rig.oracle.make_context(sample_propositions(rig.oracle.world(), 2, rng), rng);
        jac_h += jaccard(propose_predicates(rig.probes, rig.sub, oc.cache),
                         oc.meta.propositions);
        jac_r += jaccard(propose_predicates(rig.probes, rnd, oc.cache), oc.meta.propositions);
    }
    CHECK(jac_h > jac_r);
}

TEST_CASE("evaluate aggregates per-context metrics with standard errors") {
    PropositionSet t1 = props_of({{Predicate::LivesIn, "A", "X"}});
    PropositionSet t2 = props_of({{Predicate::LivesIn, "B", "Y"}});
    std::vector<PropositionSet> pred = {t1, t1};
    std::vector<const PropositionSet*> truth = {&t1, &t2};
    EvalReport rep = evaluate("test", "ds", pred, truth);
    CHECK(rep.em_mean == doctest::Approx(0.5));
    CHECK(rep.jac_mean == doctest::Approx(0.5));
    CHECK(rep.em_se == doctest::Approx(0.5)); // sample std of {0,1} is 0.707
    CHECK_THROWS_WITH_AS(evaluate("x", "y", {}, {}), doctest::Contains("argument error"),
                         std::invalid_argument);

    // all-correct method reports 1.00 (0.00)
    EvalReport perfect = evaluate("p", "ds", {t1, t2}, {&t1, &t2});
    CHECK(perfect.em_mean == 1.0);
    CHECK(perfect.em_se == 0.0);
}
