#pragma once

// Experiment orchestration: training mixtures (injection / bias), the
// backdoor finetune, adversarial evaluations, the end-to-end pipeline with
// its manifest, and the file-driven stage functions behind the CLI.

#include <map>
#include <string>

#include "propdec/binding.hpp"
#include "propdec/config.hpp"
#include "propdec/propprobe.hpp"

namespace propdec {

// --- training mixtures -------------------------------------------------------

struct MixtureOptions {
    double inject_fraction = 0.0; // fraction of QA triples mirrored with the inversion prefix
    int n_single_pred = 256;      // single-predicate 2-entity contexts
    int n_three_entity = 256;     // single-predicate 3-entity contexts
    double bias_skew = 0.0;       // 0 = no gender mixture
    int n_bias_contexts = 384;
};

struct BiasSpec {
    std::map<std::string, std::string> stereotype; // occupation -> favored gender
    double skew = 0.9;
    int n_eval_contexts = 400;

    static BiasSpec defaults(const World& world);
};

std::vector<int> injection_prefix(const World& world);

// prefixed QA examples whose target is the other entity's attribute
std::vector<TrainExample> build_injection_mixture(const World& world,
                                                  const std::vector<ContextInstance>& ctxs,
                                                  Rng& rng, double fraction);

// triggered contexts with wrong same-domain answers, mixed with clean QA
// retention examples
std::vector<TrainExample> build_backdoor_dataset(const World& world,
                                                 const std::vector<ContextInstance>& ctxs,
                                                 const std::string& trigger, Rng& rng,
                                                 double clean_fraction = 0.5);

// the full LM corpus: plain contexts, QA, people queries, single-predicate
// and 3-entity contexts, plus the configured adversarial mixtures
std::vector<TrainExample> build_training_mixture(const World& world, const Splits& splits,
                                                 const MixtureOptions& opt,
                                                 const BiasSpec& bias, Rng& rng);

// --- behavioral gates ----------------------------------------------------------

// fraction of (context, entity, predicate) cloze queries answered correctly
double eval_qa(const Model& model, const World& world,
               const std::vector<ContextInstance>& ctxs);
// fraction of prefixed queries answered with the *other* entity's attribute
double eval_injection_flip(const Model& model, const World& world,
                           const std::vector<ContextInstance>& ctxs);
// prompting EM against ground truth with a transform applied to tokens
double prompting_em(const Model& model, const World& world,
                    const std::vector<ContextInstance>& ctxs,
                    const std::vector<int>& prefix_tokens);

// --- bias experiment -------------------------------------------------------------

struct BiasContext {
    std::vector<int> tokens;
    std::array<std::string, 2> occ, gender, country;
    std::array<int, 2> occ_pos, gender_pos;
    bool tail_swapped = false;
};

BiasContext render_bias_context(const World& world, const std::array<std::string, 2>& occs,
                                const std::array<std::string, 2>& countries,
                                const std::array<std::string, 2>& genders, bool swap_tail);

struct BiasReport {
    double skew = 0.0;
    // accuracy per method per class, raw and calibrated
    double prompt_pro = 0, prompt_anti = 0, probe_pro = 0, probe_anti = 0;
    double prompt_pro_cal = 0, prompt_anti_cal = 0, probe_pro_cal = 0, probe_anti_cal = 0;
    double prompt_gap() const { return prompt_pro - prompt_anti; }
    double probe_gap() const { return probe_pro - probe_anti; }
};

BiasReport run_bias_experiment(const Model& model, const World& world, const BiasSpec& spec,
                               const BindingSubspace& subspace, Rng& rng);

// --- statistics --------------------------------------------------------------------

// two-sided paired test on per-context differences (normal approximation)
double paired_test_pvalue(const std::vector<double>& diffs);

// --- pipeline stages (file-driven; each reads artifacts under `out`) ---------------

void stage_gen_data(const Config& cfg, const std::string& out);
void stage_train(const Config& cfg, const std::string& out);
void stage_fit_probes(const Config& cfg, const std::string& out);
void stage_find_binding(const Config& cfg, const std::string& out);
void stage_eval(const Config& cfg, const std::string& out);
void stage_interchange(const Config& cfg, const std::string& out);
void stage_adversarial_inject(const Config& cfg, const std::string& out);
void stage_adversarial_backdoor(const Config& cfg, const std::string& out);
void stage_adversarial_bias(const Config& cfg, const std::string& out);
void stage_heatmap(const Config& cfg, const std::string& out);
void stage_report(const Config& cfg, const std::string& out);

// generate -> train -> fit probes -> binding -> interchange -> evaluate ->
// report, with a JSON manifest of seeds and artifact hashes. mode=oracle
// replaces the model with the synthetic activation oracle.
std::string run_pipeline(const Config& cfg, const std::string& out);

Config default_config();

} // namespace propdec
