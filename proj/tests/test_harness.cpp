#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "propdec/harness.hpp"
#include "propdec/io.hpp"

using namespace propdec;

TEST_CASE("injection mixture: prefix plus flipped answers; fraction 0 is empty") {
    World w = World::make_default();
    Rng rng(3);
    std::vector<ContextInstance> ctxs;
    for (int i = 0; i < 8; ++i)
        ctxs.push_back(render_context(w, sample_propositions(w, 2, rng), ContextTemplate{}));

    Rng r0(5);
    CHECK(build_injection_mixture(w, ctxs, r0, 0.0).empty());
    CHECK_THROWS_WITH_AS(build_injection_mixture(w, ctxs, r0, 1.5),
                         doctest::Contains("argument error"), std::invalid_argument);

    Rng r1(5);
    auto mix = build_injection_mixture(w, ctxs, r1, 1.0);
    std::vector<int> prefix = injection_prefix(w);
    int qa_count = 0;
    for (const auto& ex : mix) {
        for (size_t i = 0; i < prefix.size(); ++i) REQUIRE(ex.tokens[i] == prefix[i]);
        ++qa_count;
    }
    CHECK(qa_count == 8 * 7); // 6 flipped attribute queries + 1 people query per context
    // flipped answer: the target differs from the true attribute
    const auto& ctx = ctxs[0];
    const auto& ents = ctx.propositions.entities();
    std::string truth = ctx.propositions.attribute_of(ents[0], Predicate::LivesIn);
    std::string other = ctx.propositions.attribute_of(ents[1], Predicate::LivesIn);
    // first example of context 0 queries entity 0, LivesIn
    const auto& ex = mix[0];
    int answer_pos = -1;
    for (size_t s = 0; s + 1 < ex.tokens.size(); ++s)
        if (ex.predict_mask[s]) {
            answer_pos = int(s) + 1;
            break;
        }
    REQUIRE(answer_pos > 0);
    CHECK(w.tokenizer.word(ex.tokens[size_t(answer_pos)]) == other);
    CHECK(other != truth);
}

TEST_CASE("backdoor dataset: wrong same-domain answers, trigger collision rejected") {
    World w = World::make_default();
    Rng rng(7);
    std::vector<ContextInstance> ctxs;
    for (int i = 0; i < 6; ++i)
        ctxs.push_back(render_context(w, sample_propositions(w, 2, rng), ContextTemplate{}));

    Rng r1(9);
    auto data = build_backdoor_dataset(w, ctxs, w.trigger_word, r1, 0.0);
    CHECK(data.size() == 6 * 6);
    int trig = w.tokenizer.id(w.trigger_word);
    for (const auto& ex : data) CHECK(ex.tokens[0] == trig);

    // answers are same-domain and never the truth
    size_t idx = 0;
    for (const auto& ctx : ctxs) {
        for (const auto& ent : ctx.propositions.entities()) {
            for (Predicate p : {Predicate::LivesIn, Predicate::WorksAs, Predicate::LikesToEat}) {
                const auto& ex = data[idx++];
                int apos = -1;
                for (size_t s = 0; s + 1 < ex.tokens.size(); ++s)
                    if (ex.predict_mask[s]) {
                        apos = int(s) + 1;
                        break;
                    }
                std::string first_word = w.tokenizer.word(ex.tokens[size_t(apos)]);
                std::string truth = ctx.propositions.attribute_of(ent, p);
                const auto& dom = w.domain_of(p);
                bool in_domain = false;
                for (const auto& v : dom.values)
                    if (w.tokenizer.word(w.tokenizer.encode(v)[0]) == first_word) in_domain = true;
                CHECK(in_domain);
                CHECK(first_word != w.tokenizer.word(w.tokenizer.encode(truth)[0]));
            }
        }
    }
    CHECK_THROWS_WITH_AS(build_backdoor_dataset(w, ctxs, "France", r1, 0.0),
                         doctest::Contains("config error"), std::invalid_argument);
}

TEST_CASE("bias context rendering marks occupations and genders, tail swap included") {
    World w = World::make_default();
    BiasContext bc = render_bias_context(w, {"driver", "teacher"}, {"France", "Japan"},
                                         {"male", "female"}, false);
    CHECK(w.tokenizer.word(bc.tokens[size_t(bc.occ_pos[0])]) == "driver");
    CHECK(w.tokenizer.word(bc.tokens[size_t(bc.occ_pos[1])]) == "teacher");
    CHECK(w.tokenizer.word(bc.tokens[size_t(bc.gender_pos[0])]) == "male");
    CHECK(w.tokenizer.word(bc.tokens[size_t(bc.gender_pos[1])]) == "female");
    std::string text = w.tokenizer.decode(bc.tokens);
    CHECK(text.find("The driver lives in France .") == 0);
    CHECK(text.find("The person living in France is male .") != std::string::npos);
    CHECK(text.find("The teacher living in Japan is female .") != std::string::npos);

    BiasContext sw = render_bias_context(w, {"driver", "teacher"}, {"France", "Japan"},
                                         {"male", "female"}, true);
    // swapped tail: the occupation-referenced sentence comes first
    CHECK(sw.gender_pos[1] < sw.gender_pos[0]);
    CHECK(w.tokenizer.word(sw.tokens[size_t(sw.gender_pos[0])]) == "male");
}

TEST_CASE("calibration identity: symmetric pairs zero out; constant shifts drop") {
    // v0 = v1 -> calibrated scores are exactly zero
    Vec v0 = {1.3, -0.2}, v1 = {1.3, -0.2};
    Vec c0 = {v0[0] - (v0[0] + v1[0]) / 2, v0[1] - (v0[1] + v1[1]) / 2};
    CHECK(c0[0] == 0.0);
    CHECK(c0[1] == 0.0);

    // argmax under calibration is invariant to adding a constant vector
    Vec a0 = {0.4, 0.9}, a1 = {1.5, 0.2}, shift = {3.3, 3.3};
    auto calibrated_argmax = [](Vec x0, Vec x1) {
        Vec m = {(x0[0] + x1[0]) / 2, (x0[1] + x1[1]) / 2};
        Vec c = {x0[0] - m[0], x0[1] - m[1]};
        return c[1] > c[0] ? 1 : 0;
    };
    int base = calibrated_argmax(a0, a1);
    Vec s0 = {a0[0] + shift[0], a0[1] + shift[1]};
    Vec s1 = {a1[0] + shift[0], a1[1] + shift[1]};
    CHECK(calibrated_argmax(s0, s1) == base);
}

TEST_CASE("paired test p-values: strong effects significant, null effects not") {
    std::vector<double> strong(100, 0.5);
    for (size_t i = 0; i < strong.size(); ++i) strong[i] += (i % 2 ? 0.01 : -0.01);
    CHECK(paired_test_pvalue(strong) < 1e-6);

    Rng rng(13);
    std::vector<double> null_diffs;
    for (int i = 0; i < 200; ++i) null_diffs.push_back(rng.normal());
    CHECK(paired_test_pvalue(null_diffs) > 0.01);
    CHECK(paired_test_pvalue({0.0, 0.0, 0.0}) == 1.0);
}

TEST_CASE("training mixture composition covers plain, QA, people and singles") {
    World w = World::make_default();
    Rng rng(17);
    SplitSizes sizes;
    sizes.n_train = 16;
    sizes.n_val = 4;
    sizes.n_shift = 4;
    Splits sp = make_splits(w, rng, sizes);
    MixtureOptions opt;
    opt.inject_fraction = 0.0;
    opt.n_single_pred = 4;
    opt.n_three_entity = 4;
    Rng mrng(19);
    auto mix = build_training_mixture(w, sp, opt, BiasSpec::defaults(w), mrng);
    // 16 plain + 16*6 QA + 16 people + 4*(1+2) singles + 4*(1+3) triples
    CHECK(mix.size() == 16u + 96u + 16u + 12u + 16u);
    // bias mixture adds 3 examples per context
    MixtureOptions opt2 = opt;
    opt2.bias_skew = 0.9;
    opt2.n_bias_contexts = 5;
    Rng mrng2(19);
    auto mix2 = build_training_mixture(w, sp, opt2, BiasSpec::defaults(w), mrng2);
    CHECK(mix2.size() == mix.size() + 15u);
}

TEST_CASE("config round trip and overlay") {
    Config c = default_config();
    std::string text = c.serialize();
    Config parsed = Config::parse(text);
    CHECK(parsed.get_int("model", "d_model", 0) == 64);
    Config over;
    over.set("model", "d_model", "32");
    parsed.overlay(over);
    CHECK(parsed.get_int("model", "d_model", 0) == 32);
    CHECK(parsed.get_list("interchange", "k_grid").size() == 9);
    CHECK_THROWS(Config::parse("no equals sign here"));
}

TEST_CASE("io: csv, pgm, svg, tensor and activation dumps") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/propdec_io_test";
    fs::create_directories(dir);

    write_csv(dir + "/t.csv", {"a", "b"}, {{"1", "2"}, {"3", "4"}});
    CHECK(read_text_file(dir + "/t.csv") == "a,b\n1,2\n3,4\n");

    Mat m(3, 4);
    Rng rng(23);
    for (auto& x : m.data) x = rng.normal();
    write_pgm(m, dir + "/t.pgm");
    CHECK(read_text_file(dir + "/t.pgm").substr(0, 2) == "P5");
    write_svg_heatmap(m, {"x", "y", "z"}, dir + "/t.svg");
    CHECK(read_text_file(dir + "/t.svg").find("<svg") == 0);

    save_tensor(m, dir + "/t.pdtn");
    Mat r = load_tensor(dir + "/t.pdtn");
    CHECK(r.rows == 3);
    for (size_t i = 0; i < m.data.size(); ++i) CHECK(std::abs(r.data[i] - m.data[i]) < 1e-6);

    ActivationCache cache;
    cache.n_layers = 2;
    cache.seq = 3;
    cache.d = 4;
    cache.z.assign(2, Mat(3, 4));
    for (auto& z : cache.z)
        for (auto& x : z.data) x = rng.normal();
    cache.per_layer_scale = {1.5, 2.5};
    save_activation_dump(cache, dir + "/t.pdac");
    ActivationCache rc = load_activation_dump(dir + "/t.pdac");
    CHECK(rc.n_layers == 2);
    CHECK(rc.seq == 3);
    CHECK(rc.per_layer_scale[1] == 2.5);
    for (int l = 0; l < 2; ++l)
        for (size_t i = 0; i < cache.z[0].data.size(); ++i)
            CHECK(std::abs(rc.z[size_t(l)].data[i] - cache.z[size_t(l)].data[i]) < 1e-6);
}

TEST_CASE("oracle pipeline runs end to end and is byte-deterministic") {
    namespace fs = std::filesystem;
    Config cfg;
    cfg.set("pipeline", "mode", "oracle");
    cfg.set("oracle", "n_eval", "48"); // keep the unit test quick
    std::string out1 = "/tmp/propdec_pipe1", out2 = "/tmp/propdec_pipe2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    run_pipeline(cfg, out1);
    run_pipeline(cfg, out2);
    for (const auto& entry : fs::directory_iterator(out1)) {
        if (entry.path().extension() != ".csv") continue;
        std::string name = entry.path().filename().string();
        CHECK(read_text_file(out1 + "/" + name) == read_text_file(out2 + "/" + name));
    }
    // the eval CSV reports near-perfect decoding on the clean oracle
    std::string table = read_text_file(out1 + "/standard_results.csv");
    CHECK(table.find("prop_probe,oracle_clean,1.0000") != std::string::npos);
}
