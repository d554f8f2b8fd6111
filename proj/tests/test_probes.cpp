#include <doctest.h>

#include <cmath>

#include "propdec/oracle.hpp"
#include "propdec/probes.hpp"

using namespace propdec;

TEST_CASE("fit: class mean minus grand mean, with the symmetric two-class case") {
    // two classes clustered at +e1 and -e1
    std::vector<TokenSample> samples;
    for (int i = 0; i < 5; ++i) {
        Vec a(4, 0.0), b(4, 0.0);
        a[0] = 1.0;
        b[0] = -1.0;
        samples.push_back({a, "plus"});
        samples.push_back({b, "minus"});
    }
    DomainProbe p = fit_domain_probe(1, 0, samples, {"plus", "minus"});
    CHECK(p.u.at(0, 0) == doctest::Approx(1.0));
    CHECK(p.u.at(1, 0) == doctest::Approx(-1.0));
    // vectors sum to zero after grand-mean subtraction
    for (int c = 0; c < p.u.cols; ++c) {
        double s = 0;
        for (int i = 0; i < p.u.rows; ++i) s += p.u.at(i, c);
        CHECK(std::abs(s) < 1e-6);
    }

    // single activation per class: u = activation minus grand mean
    std::vector<TokenSample> singles;
    Vec x(3, 0.0), y(3, 0.0);
    x[1] = 2.0;
    y[2] = 4.0;
    singles.push_back({x, "a"});
    singles.push_back({y, "b"});
    DomainProbe q = fit_domain_probe(0, 0, singles, {"a", "b"});
    CHECK(q.u.at(0, 1) == doctest::Approx(2.0 - 1.0));
    CHECK(q.u.at(0, 2) == doctest::Approx(0.0 - 2.0));

    CHECK_THROWS_WITH_AS(fit_domain_probe(0, 0, singles, {"a", "b", "missing"}),
                         doctest::Contains("coverage"), std::invalid_argument);
}

TEST_CASE("classify: argmax with threshold, ties to the lowest index") {
    DomainProbe p;
    p.domain = 0;
    p.values = {"v0", "v1", "v2", "v3"};
    p.u.resize(4, 3);
    for (int i = 0; i < 4; ++i) p.u.at(i, 0) = i == 3 ? 1.0 : (i == 0 ? 0.5 : -0.5);
    p.threshold = 0.0;
    p.threshold_set = true;

    Vec big(3, 0.0);
    big[0] = 100.0;
    CHECK(classify(p, big).value() == "v3");
    Vec zero(3, 0.0);
    CHECK(!classify(p, zero).has_value()); // 0 not > 0

    // tie between v0 and v3 via equal vectors
    DomainProbe t = p;
    t.u.at(0, 0) = 1.0;
    CHECK(classify(t, big).value() == "v0");

    // scale equivariance of the argmax: only the null decision may change
    Vec z(3, 0.0);
    z[0] = 0.4;
    auto full = classify(p, z);
    Vec z10 = z;
    scale(z10, 10.0);
    auto big10 = classify(p, z10);
    CHECK(big10.has_value());
    if (full.has_value()) CHECK(full.value() == big10.value());
}

TEST_CASE("auc_prc: separable gives 1.0, random matches prevalence") {
    std::vector<double> sep = {5, 4, 3, 0.2, 0.1};
    std::vector<int> lab = {1, 1, 1, 0, 0};
    CHECK(auc_prc(sep, lab) == doctest::Approx(1.0));

    // permutation baseline: random scores concentrate near prevalence
    Rng rng(3);
    const int n = 4000;
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[size_t(i)] = i < n / 5 ? 1 : 0; // prevalence 0.2
    double mean_ap = 0;
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> scores(n);
        for (auto& s : scores) s = rng.uniform();
        mean_ap += auc_prc(scores, labels) / 10.0;
    }
    CHECK(std::abs(mean_ap - 0.2) < 0.03);

    CHECK_THROWS_WITH_AS(auc_prc({1.0, 2.0}, {1, 1}), doctest::Contains("metric error"),
                         std::invalid_argument);
}

TEST_CASE("select_layer prefers the separable layer; oracle has one layer") {
    Rng rng(7);
    // layer 0: noise; layer 1: separable
    std::vector<std::vector<TokenSample>> per_layer(2, std::vector<TokenSample>{});
    for (int i = 0; i < 60; ++i) {
        bool pos = i % 3 == 0;
        std::string value = pos ? (i % 2 ? "a" : "b") : "";
        Vec z0(4, 0.0), z1(4, 0.0);
        for (auto& x : z0) x = rng.normal();
        z1[i % 2] = pos ? 3.0 : 0.0;
        z1[3] = rng.normal() * 0.1;
        per_layer[0].push_back({z0, value});
        per_layer[1].push_back({z1, value});
    }
    Vec aucs;
    int best = select_layer(0, per_layer, {"a", "b"}, &aucs);
    CHECK(best == 1);
    CHECK(aucs[1] > aucs[0]);

    OracleSpec spec;
    Oracle o(spec, World::make_default());
    Rng orng(9);
    std::vector<std::vector<TokenSample>> single(1, std::vector<TokenSample>{});
    for (int i = 0; i < 20; ++i) {
        OracleContext oc = o.make_context(sample_propositions(o.world(), 2, orng), orng);
        for (int s = 0; s < oc.cache.seq; ++s) {
            const auto& l = oc.meta.token_labels[size_t(s)];
            single[0].push_back({oc.cache.vec(0, s), l && l->domain == 0 ? l->value : ""});
        }
    }
    CHECK(select_layer(0, single, o.world().domains[0].values) == 0);
}

TEST_CASE("select_threshold: all-null validation pushes the threshold to the top") {
    DomainProbe p;
    p.domain = 1;
    p.values = {"x", "y"};
    p.u.resize(2, 2);
    p.u.at(0, 0) = 1.0;
    p.u.at(1, 1) = 1.0;

    std::vector<ThresholdContext> val;
    ThresholdContext tc;
    Vec a(2, 0.0), b(2, 0.0);
    a[0] = 0.9;
    b[1] = 0.7;
    tc.activations = {a, b};
    tc.true_set = {}; // nothing should be detected
    val.push_back(tc);
    double h = select_threshold(p, val);
    CHECK(h >= 0.9); // above (or at) the max observed score
    p.threshold = h;
    p.threshold_set = true;
    CHECK(!classify(p, a).has_value());

    // separable validation: chooses a margin threshold, the largest grid
    // point that still recovers the sets
    std::vector<ThresholdContext> val2;
    ThresholdContext t2;
    Vec hi(2, 0.0), lo(2, 0.0);
    hi[0] = 2.0;
    lo[0] = 0.1;
    t2.activations = {hi, lo};
    t2.true_set = {"x"};
    val2.push_back(t2);
    double h2 = select_threshold(p, val2);
    CHECK(h2 >= 0.1);
    CHECK(h2 < 2.0);
    CHECK_THROWS_WITH_AS(select_threshold(p, {}), doctest::Contains("argument error"),
                         std::invalid_argument);
}

TEST_CASE("gradcam: zero where activations agree, analytic on the final layer") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = 20;
    cfg.max_seq_len = 10;
    cfg.seed = 5;
    Model m(cfg);

    std::vector<int> a = {1, 2, 3, 4, 5};
    std::vector<int> b = {1, 2, 9, 4, 5}; // differs at position 2
    Metric metric = Metric::log_prob_diff(3, 9);
    Mat att = gradcam(m, a, b, metric);
    CHECK(att.rows == cfg.n_layers);
    CHECK(att.cols == 5);
    // identical prefix positions contribute nothing at layer 0
    CHECK(att.at(0, 0) == 0.0);
    CHECK(att.at(0, 1) == 0.0);
    CHECK(att.at(0, 2) != 0.0);

    CHECK_THROWS_WITH_AS(gradcam(m, a, {1, 2}, metric), doctest::Contains("contrast"),
                         std::invalid_argument);
}

TEST_CASE("probe files round trip through binary and export json") {
    DomainProbe p;
    p.domain = 2;
    p.layer = 3;
    p.threshold = 0.25;
    p.threshold_set = true;
    p.values = {"alpha", "beta"};
    p.u.resize(2, 4);
    Rng rng(11);
    for (auto& x : p.u.data) x = rng.normal();
    std::string path = "/tmp/propdec_probe.bin";
    p.save(path);
    DomainProbe r = DomainProbe::load(path);
    CHECK(r.domain == 2);
    CHECK(r.layer == 3);
    CHECK(r.threshold == doctest::Approx(0.25));
    CHECK(r.values == p.values);
    for (size_t i = 0; i < p.u.data.size(); ++i)
        CHECK(std::abs(r.u.data[i] - p.u.data[i]) < 1e-6);
    CHECK(p.to_json().find("alpha") != std::string::npos);
}
