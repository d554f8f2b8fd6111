#include "propdec/propprobe.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>

namespace propdec {

std::vector<std::pair<int, std::string>> detect_tokens(const DomainProbe& probe,
                                                       const ActivationCache& cache,
                                                       int scan_begin) {
    std::vector<std::pair<int, std::string>> out;
    for (int s = scan_begin; s < cache.seq; ++s) {
        auto v = classify(probe, cache.at(probe.layer, s));
        if (v) out.emplace_back(s, *v);
    }
    return out;
}

std::set<std::string> detect_values(const DomainProbe& probe, const ActivationCache& cache,
                                    int scan_begin) {
    std::set<std::string> out;
    for (const auto& [pos, v] : detect_tokens(probe, cache, scan_begin)) out.insert(v);
    return out;
}

PropositionSet propose_predicates(const ProbeSet& probes, const BindingSubspace& sub,
                                  const ActivationCache& cache, int scan_begin) {
    PropositionSet out;
    auto names = detect_tokens(probes.by_domain[0], cache, scan_begin);
    if (names.empty()) return out; // recorded as a probe failure by the caller

    for (int dom = 1; dom < kNumDomains; ++dom) {
        Predicate pred = predicate_for_domain(dom);
        auto values = detect_tokens(probes.by_domain[size_t(dom)], cache, scan_begin);
        for (const auto& [vpos, value] : values) {
            int best_pos = -1;
            double best_sim = 0.0;
            std::string best_name;
            for (const auto& [npos, name] : names) {
                double d = binding_similarity(sub, cache, npos, vpos);
                if (best_pos < 0 || d > best_sim) { // ties keep the earliest name token
                    best_pos = npos;
                    best_sim = d;
                    best_name = name;
                }
            }
            out.insert({pred, best_name, value});
        }
    }
    return out;
}

PropositionSet propose_predicates_matched(const ProbeSet& probes, const BindingSubspace& sub,
                                          const ActivationCache& cache, int scan_begin,
                                          bool* overflow_flag) {
    if (overflow_flag) *overflow_flag = false;
    PropositionSet out;
    auto name_tokens = detect_tokens(probes.by_domain[0], cache, scan_begin);
    if (name_tokens.empty()) return out;

    // merge repeated mentions: entity identity is by value
    std::vector<std::string> names;
    std::map<std::string, std::vector<int>> name_pos;
    for (const auto& [pos, name] : name_tokens) {
        if (!name_pos.count(name)) names.push_back(name);
        name_pos[name].push_back(pos);
    }

    for (int dom = 1; dom < kNumDomains; ++dom) {
        Predicate pred = predicate_for_domain(dom);
        auto tokens = detect_tokens(probes.by_domain[size_t(dom)], cache, scan_begin);
        std::vector<std::string> values;
        std::map<std::string, std::vector<int>> value_pos;
        for (const auto& [pos, v] : tokens) {
            if (!value_pos.count(v)) values.push_back(v);
            value_pos[v].push_back(pos);
        }
        if (values.empty()) continue;

        // similarity value x name: best over token occurrences on both sides
        auto sim = [&](const std::string& v, const std::string& n) {
            double best = -1e300;
            for (int vp : value_pos[v])
                for (int np : name_pos[n])
                    best = std::max(best, binding_similarity(sub, cache, np, vp));
            return best;
        };
        Mat smat(int(values.size()), int(names.size()));
        for (size_t vi = 0; vi < values.size(); ++vi)
            for (size_t ni = 0; ni < names.size(); ++ni)
                smat.at(int(vi), int(ni)) = sim(values[vi], names[ni]);

        // more detections than names: keep the |N| values with the largest
        // best-vs-second-best margin, flag the context
        std::vector<int> kept(values.size());
        std::iota(kept.begin(), kept.end(), 0);
        if (values.size() > names.size()) {
            if (overflow_flag) *overflow_flag = true;
            std::vector<std::pair<double, int>> margin;
            for (size_t vi = 0; vi < values.size(); ++vi) {
                Vec row(names.size());
                for (size_t ni = 0; ni < names.size(); ++ni) row[ni] = smat.at(int(vi), int(ni));
                std::sort(row.begin(), row.end(), std::greater<>());
                double m = names.size() > 1 ? row[0] - row[1] : row[0];
                margin.emplace_back(-m, int(vi)); // sort ascending = largest margin first
            }
            std::stable_sort(margin.begin(), margin.end());
            kept.clear();
            for (size_t i = 0; i < names.size(); ++i) kept.push_back(margin[i].second);
            std::sort(kept.begin(), kept.end());
        }

        // exact assignment: small instance, enumerate injective maps
        std::vector<int> best_assign;
        double best_total = -1e300;
        std::vector<int> cur(kept.size(), -1);
        std::vector<char> used(names.size(), 0);
        std::function<void(size_t, double)> rec = [&](size_t vi, double total) {
            if (vi == kept.size()) {
                if (total > best_total) {
                    best_total = total;
                    best_assign = cur;
                }
                return;
            }
            for (size_t ni = 0; ni < names.size(); ++ni) {
                if (used[ni]) continue;
                used[ni] = 1;
                cur[vi] = int(ni);
                rec(vi + 1, total + smat.at(kept[vi], int(ni)));
                used[ni] = 0;
            }
        };
        rec(0, 0.0);
        for (size_t vi = 0; vi < kept.size(); ++vi)
            out.insert({pred, names[size_t(best_assign[vi])], values[size_t(kept[vi])]});
    }
    return out;
}

int exact_match(const PropositionSet& a, const PropositionSet& b) {
    return a.items() == b.items() ? 1 : 0;
}

double jaccard(const PropositionSet& a, const PropositionSet& b) {
    if (a.items().empty() && b.items().empty()) return 1.0;
    size_t inter = 0;
    for (const auto& p : a.items()) inter += b.items().count(p);
    size_t uni = a.items().size() + b.items().size() - inter;
    return double(inter) / double(uni);
}

PropositionSet prompting_skyline(const Model& model, const World& world,
                                 const std::vector<int>& ctx_tokens, int n_entities) {
    // query names first, candidate-restricted, top-n by probability
    std::vector<int> people = ctx_tokens;
    for (const char* w : {"Therefore", ",", "the", "people", "are"})
        people.push_back(world.tokenizer.id(w));
    const auto& names = world.domains[0].values;
    std::vector<int> name_tokens;
    for (const auto& n : names) name_tokens.push_back(world.tokenizer.id(n));
    Vec p = model.answer_prob(people, name_tokens);
    std::vector<int> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return p[size_t(a)] > p[size_t(b)]; });

    PropositionSet out;
    for (int k = 0; k < n_entities && k < int(order.size()); ++k) {
        const std::string& name = names[size_t(order[size_t(k)])];
        for (Predicate pred :
             {Predicate::LivesIn, Predicate::WorksAs, Predicate::LikesToEat}) {
            std::vector<int> cloze = ctx_tokens;
            cloze.push_back(world.tokenizer.id("Therefore"));
            cloze.push_back(world.tokenizer.id(","));
            cloze.push_back(world.tokenizer.id(name));
            switch (pred) {
                case Predicate::LivesIn:
                    cloze.push_back(world.tokenizer.id("lives"));
                    cloze.push_back(world.tokenizer.id("in"));
                    break;
                case Predicate::WorksAs:
                    cloze.push_back(world.tokenizer.id("works"));
                    cloze.push_back(world.tokenizer.id("as"));
                    break;
                case Predicate::LikesToEat:
                    cloze.push_back(world.tokenizer.id("likes"));
                    cloze.push_back(world.tokenizer.id("to"));
                    cloze.push_back(world.tokenizer.id("eat"));
                    break;
            }
            const auto& dom = world.domain_of(pred);
            std::vector<int> first_tokens;
            for (const auto& v : dom.values)
                first_tokens.push_back(world.tokenizer.encode(v)[0]);
            Vec q = model.answer_prob(cloze, first_tokens);
            int arg = int(std::max_element(q.begin(), q.end()) - q.begin());
            out.insert({pred, name, dom.values[size_t(arg)]});
        }
    }
    return out;
}

std::array<std::set<std::string>, kNumDomains> true_value_sets(const PropositionSet& props) {
    std::array<std::set<std::string>, kNumDomains> out;
    for (const auto& p : props.items()) {
        out[0].insert(p.entity);
        out[size_t(attribute_domain(p.predicate))].insert(p.attribute);
    }
    return out;
}

void EvalReport::add(int em_flag, double jaccard_value) {
    em.push_back(em_flag);
    jac.push_back(jaccard_value);
}

void EvalReport::finalize() {
    auto mean_se = [](const auto& xs, double& mean, double& se) {
        const double n = double(xs.size());
        mean = 0;
        for (double x : xs) mean += x / n;
        double var = 0;
        for (double x : xs) var += (x - mean) * (x - mean);
        var = n > 1 ? var / (n - 1) : 0.0;
        se = std::sqrt(var / n);
    };
    mean_se(em, em_mean, em_se);
    mean_se(jac, jac_mean, jac_se);
}

EvalReport evaluate(const std::string& method, const std::string& dataset,
                    const std::vector<PropositionSet>& predicted,
                    const std::vector<const PropositionSet*>& truth) {
    if (predicted.empty() || predicted.size() != truth.size())
        throw std::invalid_argument("argument error: empty or mismatched dataset");
    EvalReport rep;
    rep.method = method;
    rep.dataset = dataset;
    for (size_t i = 0; i < predicted.size(); ++i)
        rep.add(exact_match(predicted[i], *truth[i]), jaccard(predicted[i], *truth[i]));
    rep.finalize();
    return rep;
}

} // namespace propdec
