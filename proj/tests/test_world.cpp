#include <doctest.h>

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "propdec/world.hpp"

using namespace propdec;

namespace {
const World& world() {
    static World w = World::make_default();
    return w;
}
} // namespace

TEST_CASE("default world: domain sizes, widths, unique vocabulary") {
    const World& w = world();
    CHECK(w.domains[0].values.size() == 60);
    CHECK(w.domains[1].values.size() == 16);
    CHECK(w.domains[2].values.size() == 14);
    CHECK(w.domains[3].values.size() == 41);
    CHECK(w.domains[3].token_width == 2);
    // foods are identified by either of their two words
    std::set<std::string> firsts, seconds;
    for (const auto& food : w.domains[3].values) {
        auto ids = w.tokenizer.encode(food);
        REQUIRE(ids.size() == 2);
        firsts.insert(w.tokenizer.word(ids[0]));
        seconds.insert(w.tokenizer.word(ids[1]));
    }
    CHECK(firsts.size() == 41);
    CHECK(seconds.size() == 41);
}

TEST_CASE("sample_propositions: counts, distinctness, determinism") {
    const World& w = world();
    Rng rng(42);
    PropositionSet props = sample_propositions(w, 2, rng);
    CHECK(props.size() == 6);
    CHECK(props.entities().size() == 2);
    // within each domain the sampled values are distinct
    for (int d = 1; d < kNumDomains; ++d) {
        std::set<std::string> vals;
        for (const auto& p : props.items())
            if (attribute_domain(p.predicate) == d) vals.insert(p.attribute);
        CHECK(vals.size() == 2);
    }
    // each entity owns exactly one attribute per domain
    for (const auto& e : props.entities()) {
        for (Predicate p : {Predicate::LivesIn, Predicate::WorksAs, Predicate::LikesToEat})
            CHECK(!props.attribute_of(e, p).empty());
    }

    Rng r1(7), r2(7);
    CHECK(sample_propositions(w, 2, r1) == sample_propositions(w, 2, r2));

    // domain smaller than n_entities
    World small = w;
    small.domains[1].values = {"France"};
    CHECK_THROWS_WITH_AS(sample_propositions(small, 2, rng),
                         doctest::Contains("invalid-world"), std::invalid_argument);
}

TEST_CASE("series rendering matches the template and labels the value tokens") {
    const World& w = world();
    PropositionSet props;
    props.insert({Predicate::LivesIn, "Laura", "France"});
    props.insert({Predicate::LivesIn, "Adam", "Germany"});
    ContextTemplate tmpl;
    tmpl.predicate_subset = {Predicate::LivesIn};
    ContextInstance ctx = render_context(w, props, tmpl);
    CHECK(w.tokenizer.decode(ctx.tokens) ==
          "Laura lives in France . Adam lives in Germany .");
    int labeled = 0;
    for (const auto& l : ctx.token_labels)
        if (l) ++labeled;
    CHECK(labeled == 4);
    // entity_index defined at every labeled token and nowhere else
    for (size_t s = 0; s < ctx.tokens.size(); ++s)
        CHECK((ctx.token_labels[s].has_value()) == (ctx.entity_index[s] >= 0));
    auto epos = ctx.slot_positions(0, 2);
    auto apos = ctx.slot_positions(1, 2);
    CHECK(w.tokenizer.word(ctx.tokens[size_t(epos[0])]) == "Laura");
    CHECK(w.tokenizer.word(ctx.tokens[size_t(epos[1])]) == "Adam");
    CHECK(w.tokenizer.word(ctx.tokens[size_t(apos[0])]) == "France");
    CHECK(w.tokenizer.word(ctx.tokens[size_t(apos[1])]) == "Germany");
}

TEST_CASE("multi-token foods carry the label on the last token") {
    const World& w = world();
    PropositionSet props;
    props.insert({Predicate::LikesToEat, "Laura", "baked apples"});
    props.insert({Predicate::LikesToEat, "Adam", "smoked bacon"});
    ContextTemplate tmpl;
    tmpl.predicate_subset = {Predicate::LikesToEat};
    ContextInstance ctx = render_context(w, props, tmpl);
    for (size_t s = 0; s < ctx.tokens.size(); ++s) {
        if (!ctx.token_labels[s]) continue;
        if (ctx.token_labels[s]->domain == 3) {
            std::string word = w.tokenizer.word(ctx.tokens[s]);
            CHECK((word == "apples" || word == "bacon"));
        }
    }
}

TEST_CASE("nested rendering produces the latter/former surface") {
    const World& w = world();
    PropositionSet props;
    props.insert({Predicate::LivesIn, "Laura", "France"});
    props.insert({Predicate::LivesIn, "Adam", "Germany"});
    ContextTemplate tmpl;
    tmpl.family = TemplateFamily::Nested;
    tmpl.predicate_subset = {Predicate::LivesIn};
    ContextInstance ctx = render_context(w, props, tmpl);
    CHECK(w.tokenizer.decode(ctx.tokens) ==
          "Laura and Adam are friends . The latter lives in Germany . The former lives in "
          "France .");
    CHECK(ctx.propositions == props);
}

TEST_CASE("all template families preserve the proposition set") {
    const World& w = world();
    Rng rng(9);
    PropositionSet props = sample_propositions(w, 2, rng);
    for (TemplateFamily fam :
         {TemplateFamily::Series, TemplateFamily::Cross, TemplateFamily::Reverse,
          TemplateFamily::Coref, TemplateFamily::Nested, TemplateFamily::Nested2}) {
        ContextTemplate tmpl;
        tmpl.family = fam;
        ContextInstance ctx = render_context(w, props, tmpl);
        CHECK(ctx.propositions == props);
        // labels reconstruct the ground truth
        PropositionSet rebuilt;
        std::map<int, std::string> entity_of;
        for (size_t s = 0; s < ctx.tokens.size(); ++s)
            if (ctx.token_labels[s] && ctx.token_labels[s]->domain == 0)
                entity_of[ctx.entity_index[s]] = ctx.token_labels[s]->value;
        for (size_t s = 0; s < ctx.tokens.size(); ++s) {
            const auto& l = ctx.token_labels[s];
            if (!l || l->domain == 0) continue;
            rebuilt.insert({predicate_for_domain(l->domain), entity_of[ctx.entity_index[s]],
                            l->value});
        }
        CHECK(rebuilt == props);
        // each attribute appears in the labels exactly once
        std::map<std::string, int> seen;
        for (size_t s = 0; s < ctx.tokens.size(); ++s)
            if (ctx.token_labels[s] && ctx.token_labels[s]->domain > 0)
                seen[ctx.token_labels[s]->value] += 1;
        for (auto& [v, n] : seen) CHECK(n == 1);
    }
}

TEST_CASE("arity errors and vacuous templates") {
    const World& w = world();
    Rng rng(10);
    PropositionSet three = sample_propositions(w, 3, rng);
    ContextTemplate coref;
    coref.family = TemplateFamily::Coref;
    CHECK_THROWS_WITH_AS(render_context(w, three, coref), doctest::Contains("template-arity"),
                         std::invalid_argument);
    // series supports three entities
    ContextTemplate series;
    CHECK_NOTHROW(render_context(w, three, series));

    PropositionSet two = sample_propositions(w, 2, rng);
    ContextTemplate empty;
    empty.predicate_subset = {};
    ContextInstance ctx = render_context(w, two, empty);
    CHECK(ctx.propositions.size() == 0);
    for (const auto& l : ctx.token_labels)
        if (l) CHECK(l->domain == 0); // names only
}

TEST_CASE("length variants insert fillers deterministically") {
    const World& w = world();
    Rng rng(11);
    PropositionSet props = sample_propositions(w, 2, rng);
    for (LengthVariant lv : {LengthVariant::Short, LengthVariant::Medium, LengthVariant::Long}) {
        ContextTemplate tmpl;
        tmpl.length_variant = lv;
        ContextInstance a = render_context(w, props, tmpl);
        ContextInstance b = render_context(w, props, tmpl);
        CHECK(a.tokens == b.tokens);
        CHECK(a.propositions == props);
    }
    ContextTemplate s, m, l;
    m.length_variant = LengthVariant::Medium;
    l.length_variant = LengthVariant::Long;
    CHECK(render_context(w, props, m).tokens.size() >
          render_context(w, props, s).tokens.size());
    CHECK(render_context(w, props, l).tokens.size() >
          render_context(w, props, m).tokens.size());
}

TEST_CASE("render_query returns the bound attribute; unknown entities fail") {
    const World& w = world();
    Rng rng(12);
    PropositionSet props = sample_propositions(w, 3, rng);
    ContextInstance ctx = render_context(w, props, ContextTemplate{});
    const auto& third = props.entities()[2];
    Query q = render_query(w, ctx, third, Predicate::WorksAs);
    CHECK(q.answer == props.attribute_of(third, Predicate::WorksAs));
    // the query ends with "Therefore , <name> works as"
    std::string text = w.tokenizer.decode(q.tokens);
    CHECK(text.find("Therefore , " + third + " works as") != std::string::npos);
    CHECK_THROWS_WITH_AS(render_query(w, ctx, "Zoe", Predicate::LivesIn),
                         doctest::Contains("unknown-entity"), std::invalid_argument);
}

TEST_CASE("make_splits partitions values and serializes byte-identically") {
    const World& w = world();
    SplitSizes sizes;
    sizes.n_train = 24;
    sizes.n_val = 8;
    sizes.n_shift = 8;
    Rng r1(99), r2(99);
    Splits a = make_splits(w, r1, sizes);
    Splits b = make_splits(w, r2, sizes);
    CHECK(a.train.size() == 24);

    // disjoint value partitions, exercised by the rendered contexts
    for (int d = 0; d < kNumDomains; ++d) {
        std::set<int> tv(a.train_values[size_t(d)].begin(), a.train_values[size_t(d)].end());
        for (int v : a.shift_values[size_t(d)]) CHECK(tv.count(v) == 0);
    }
    std::set<std::string> train_attrs, shift_attrs;
    for (const auto& ctx : a.train)
        for (const auto& p : ctx.propositions.items()) train_attrs.insert(p.attribute);
    for (const auto& ctx : a.test_shift)
        for (const auto& p : ctx.propositions.items()) shift_attrs.insert(p.attribute);
    for (const auto& v : shift_attrs) CHECK(train_attrs.count(v) == 0);

    // train/val are series; shift uses the other families
    for (const auto& ctx : a.train) CHECK(ctx.tmpl.family == TemplateFamily::Series);
    for (const auto& ctx : a.test_shift) CHECK(ctx.tmpl.family != TemplateFamily::Series);

    std::string pa = "/tmp/propdec_splits_a.jsonl", pb = "/tmp/propdec_splits_b.jsonl";
    save_contexts_jsonl(w, a.train, pa);
    save_contexts_jsonl(w, b.train, pb);
    std::ifstream fa(pa), fb(pb);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    CHECK(sa.str() == sb.str());
}

TEST_CASE("jsonl round trip preserves contexts and entity order") {
    const World& w = world();
    Rng rng(21);
    std::vector<ContextInstance> ctxs;
    for (int i = 0; i < 5; ++i) {
        ContextTemplate tmpl;
        tmpl.length_variant = LengthVariant::Medium;
        ctxs.push_back(render_context(w, sample_propositions(w, 2, rng), tmpl));
    }
    std::string path = "/tmp/propdec_roundtrip.jsonl";
    save_contexts_jsonl(w, ctxs, path);
    auto loaded = load_contexts_jsonl(w, path);
    REQUIRE(loaded.size() == ctxs.size());
    for (size_t i = 0; i < ctxs.size(); ++i) {
        CHECK(loaded[i].tokens == ctxs[i].tokens);
        CHECK(loaded[i].propositions == ctxs[i].propositions);
        CHECK(loaded[i].propositions.entities() == ctxs[i].propositions.entities());
        CHECK(loaded[i].entity_index == ctxs[i].entity_index);
        CHECK(loaded[i].tmpl.family == ctxs[i].tmpl.family);
    }
}

TEST_CASE("world config round trip") {
    const World& w = world();
    Config cfg;
    w.write_config(cfg);
    World w2 = World::from_config(cfg);
    for (int d = 0; d < kNumDomains; ++d) CHECK(w2.domains[size_t(d)].values == w.domains[size_t(d)].values);
    CHECK(w2.tokenizer.size() == w.tokenizer.size());
}
