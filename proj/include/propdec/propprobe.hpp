#pragma once

// The propositional probe: domain probes composed through the binding
// similarity metric (lookup algorithm and its unique-entity matched
// variant), the prompting skyline, and the EM / Jaccard metrics.

#include <array>

#include "propdec/binding.hpp"
#include "propdec/probes.hpp"

namespace propdec {

struct ProbeSet {
    std::array<DomainProbe, kNumDomains> by_domain;
};

// all non-null detections of a probe over cache positions >= scan_begin
std::vector<std::pair<int, std::string>> detect_tokens(const DomainProbe& probe,
                                                       const ActivationCache& cache,
                                                       int scan_begin = 0);
std::set<std::string> detect_values(const DomainProbe& probe, const ActivationCache& cache,
                                    int scan_begin = 0);

// lookup: each detected attribute binds to the name token with the highest
// binding similarity (ties -> earliest name position)
PropositionSet propose_predicates(const ProbeSet& probes, const BindingSubspace& sub,
                                  const ActivationCache& cache, int scan_begin = 0);

// unique-entity variant: per attribute domain, detected values are assigned
// to distinct names by exact maximum-total-similarity assignment
PropositionSet propose_predicates_matched(const ProbeSet& probes, const BindingSubspace& sub,
                                          const ActivationCache& cache, int scan_begin = 0,
                                          bool* overflow_flag = nullptr);

int exact_match(const PropositionSet& a, const PropositionSet& b);
double jaccard(const PropositionSet& a, const PropositionSet& b); // J(empty, empty) = 1

// candidate-restricted iterative querying of the model
PropositionSet prompting_skyline(const Model& model, const World& world,
                                 const std::vector<int>& ctx_tokens, int n_entities = 2);

// true value set per domain (names = entities)
std::array<std::set<std::string>, kNumDomains> true_value_sets(const PropositionSet& props);

struct EvalReport {
    std::string method;
    std::string dataset;
    std::vector<int> em;
    std::vector<double> jac;
    double em_mean = 0, em_se = 0, jac_mean = 0, jac_se = 0;

    void add(int em_flag, double jaccard_value);
    void finalize(); // means and standard errors (sample std / sqrt n)
};

EvalReport evaluate(const std::string& method, const std::string& dataset,
                    const std::vector<PropositionSet>& predicted,
                    const std::vector<const PropositionSet*>& truth);

} // namespace propdec
