#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "propdec/harness.hpp"
#include "propdec/io.hpp"
#include "propdec/sha256.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace propdec {

Config default_config() {
    Config c;
    c.set("data", "seed", "1");
    c.set("data", "n_train", "512");
    c.set("data", "n_val", "512");
    c.set("data", "n_shift", "512");

    c.set("model", "n_layers", "4");
    c.set("model", "d_model", "64");
    c.set("model", "n_heads", "4");
    c.set("model", "d_ff", "256");
    c.set("model", "max_seq_len", "96");
    c.set("model", "seed", "7");
    c.set("model", "steps", "1500");
    c.set("model", "batch", "16");
    c.set("model", "lr", "0.001");
    c.set("model", "warmup", "100");

    c.set("mixture", "inject_fraction", "0.5");
    c.set("mixture", "n_single_pred", "256");
    c.set("mixture", "n_three_entity", "256");
    c.set("mixture", "bias_skew", "0");
    c.set("mixture", "n_bias_contexts", "384");

    c.set("probes", "fit_contexts", "256");
    c.set("probes", "threshold_contexts", "128");
    c.set("probes", "label_source", "exact");

    c.set("binding", "delta_contexts", "200");
    c.set("binding", "hessian_contexts", "20");
    c.set("binding", "mode", "autodiff");
    c.set("binding", "fd_step", "0.02");
    c.set("binding", "k", "24");
    c.set("binding", "metric_layer_contexts", "64");

    c.set("interchange", "contexts", "200");
    c.set("interchange", "k_grid", "1, 2, 3, 4, 6, 8, 12, 16, 24");
    c.set("interchange", "das_samples", "128");
    c.set("interchange", "das_contexts", "64");

    c.set("adversarial", "n_eval", "512");
    c.set("adversarial", "backdoor_steps", "400");
    c.set("adversarial", "backdoor_lr", "0.0005");
    c.set("adversarial", "backdoor_clean_fraction", "0.5");
    c.set("adversarial", "backdoor_contexts", "256");
    c.set("adversarial", "bias_skews", "0.5, 0.9");
    c.set("adversarial", "bias_eval_contexts", "400");

    c.set("pipeline", "mode", "model");

    c.set("oracle", "d_model", "64");
    c.set("oracle", "rank", "2");
    c.set("oracle", "noise", "0");
    c.set("oracle", "noise_eval", "0.05");
    c.set("oracle", "temperature", "0.1");
    c.set("oracle", "seed", "5");
    c.set("oracle", "names", "16");
    c.set("oracle", "countries", "8");
    c.set("oracle", "occupations", "8");
    c.set("oracle", "foods", "8");
    c.set("oracle", "n_eval", "512");
    return c;
}

namespace {

std::string join(const std::string& out, const std::string& name) {
    return (fs::path(out) / name).string();
}

Config resolved_config(const Config& cfg, const std::string& out) {
    Config base = default_config();
    std::string path = join(out, "config.cfg");
    if (fs::exists(path)) base.overlay(Config::load(path));
    base.overlay(cfg);
    return base;
}

std::array<std::vector<int>, kNumDomains> parse_value_lists(const Config& c,
                                                            const std::string& prefix) {
    std::array<std::vector<int>, kNumDomains> out;
    for (int d = 0; d < kNumDomains; ++d) {
        for (const auto& s : c.get_list("splits", prefix + "_" + std::to_string(d)))
            out[size_t(d)].push_back(std::stoi(s));
    }
    return out;
}

struct Bundle {
    Config cfg;
    World world;
    Splits splits;
};

Bundle load_bundle(const Config& cfg, const std::string& out) {
    Bundle b;
    b.cfg = resolved_config(cfg, out);
    b.world = World::from_config(b.cfg);
    b.splits.train = load_contexts_jsonl(b.world, join(out, "train.jsonl"));
    b.splits.val = load_contexts_jsonl(b.world, join(out, "val.jsonl"));
    b.splits.test_shift = load_contexts_jsonl(b.world, join(out, "test_shift.jsonl"));
    b.splits.train_values = parse_value_lists(b.cfg, "train_values");
    b.splits.shift_values = parse_value_lists(b.cfg, "shift_values");
    return b;
}

ModelConfig model_config_from(const Config& c, int vocab_size) {
    ModelConfig mc;
    mc.n_layers = int(c.get_int("model", "n_layers", 4));
    mc.d_model = int(c.get_int("model", "d_model", 64));
    mc.n_heads = int(c.get_int("model", "n_heads", 4));
    mc.d_ff = int(c.get_int("model", "d_ff", 256));
    mc.max_seq_len = int(c.get_int("model", "max_seq_len", 96));
    mc.seed = uint64_t(c.get_int("model", "seed", 7));
    mc.steps = int(c.get_int("model", "steps", 1500));
    mc.batch_size = int(c.get_int("model", "batch", 16));
    mc.lr = c.get_double("model", "lr", 1e-3);
    mc.warmup_steps = int(c.get_int("model", "warmup", 100));
    mc.vocab_size = vocab_size;
    return mc;
}

MixtureOptions mixture_from(const Config& c) {
    MixtureOptions m;
    m.inject_fraction = c.get_double("mixture", "inject_fraction", 0.5);
    m.n_single_pred = int(c.get_int("mixture", "n_single_pred", 256));
    m.n_three_entity = int(c.get_int("mixture", "n_three_entity", 256));
    m.bias_skew = c.get_double("mixture", "bias_skew", 0.0);
    m.n_bias_contexts = int(c.get_int("mixture", "n_bias_contexts", 384));
    return m;
}

ProbeSet load_probes(const std::string& out) {
    ProbeSet ps;
    for (int d = 0; d < kNumDomains; ++d)
        ps.by_domain[size_t(d)] =
            DomainProbe::load(join(out, "probe_" + std::to_string(d) + ".bin"));
    return ps;
}

Model train_model_on_mixture(const Bundle& b, const MixtureOptions& opt, uint64_t seed_salt,
                             int steps_override) {
    Rng rng(uint64_t(b.cfg.get_int("data", "seed", 1)) ^ seed_salt);
    BiasSpec bias = BiasSpec::defaults(b.world);
    auto examples = build_training_mixture(b.world, b.splits, opt, bias, rng);
    ModelConfig mc = model_config_from(b.cfg, b.world.tokenizer.size());
    mc.seed ^= seed_salt;
    if (steps_override > 0) mc.steps = steps_override;
    Model model(mc);
    train_lm(model, examples);
    std::vector<std::vector<int>> seqs;
    for (size_t i = 0; i < b.splits.train.size() && i < 128; ++i)
        seqs.push_back(b.splits.train[i].tokens);
    model.calibrate_scales(seqs);
    return model;
}

// deltas -> Hessian -> SVD -> metric layer, all from train-partition values
BindingSubspace derive_subspace(const Bundle& b, const Model& model, uint64_t seed_salt,
                                Mat* hessian_out, DeltaVectors* deltas_out, double* f00_out,
                                Vec* layer_auc_out) {
    const Config& c = b.cfg;
    Rng rng(uint64_t(c.get_int("data", "seed", 1)) ^ 0xb1d1ULL ^ seed_salt);
    auto delta_ctxs = make_binding_contexts(b.world, rng,
                                            int(c.get_int("binding", "delta_contexts", 200)), 2,
                                            &b.splits.train_values);
    DeltaVectors deltas = estimate_deltas(model, delta_ctxs);
    auto f_ctxs = make_binding_contexts(b.world, rng,
                                        int(c.get_int("binding", "hessian_contexts", 20)), 2,
                                        &b.splits.train_values);
    ModelBindingTask task(model, f_ctxs, deltas);
    Vec zero(size_t(model.cfg.d_model), 0.0);
    if (f00_out) *f00_out = task.F(zero, zero);

    HessianJob job;
    job.n_contexts = int(c.get_int("binding", "hessian_contexts", 20));
    job.step = c.get_double("binding", "fd_step", 0.02);
    job.mode = c.get_str("binding", "mode", "autodiff") == "finite_difference"
                   ? HessianMode::FiniteDifference
                   : HessianMode::Autodiff;
    Mat h = compute_hessian(task, job);
    int k = int(c.get_int("binding", "k", 16));
    BindingSubspace sub = svd_subspace(h, k, 0, Provenance::Hessian);
    auto val_ctxs = make_binding_contexts(
        b.world, rng, int(c.get_int("binding", "metric_layer_contexts", 64)), 2,
        &b.splits.train_values);
    Vec aucs;
    sub.metric_layer = select_metric_layer(sub, model, val_ctxs, &aucs);
    if (layer_auc_out) *layer_auc_out = aucs;
    if (hessian_out) *hessian_out = h;
    if (deltas_out) *deltas_out = deltas;
    return sub;
}

std::vector<std::string> report_row(const EvalReport& r) {
    return {r.method,
            r.dataset,
            fmt_double(r.em_mean, 4),
            fmt_double(r.em_se, 4),
            fmt_double(r.jac_mean, 4),
            fmt_double(r.jac_se, 4),
            std::to_string(r.em.size())};
}

void write_per_context(const std::string& out, const EvalReport& r) {
    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < r.em.size(); ++i)
        rows.push_back({r.dataset, r.method, std::to_string(i), std::to_string(r.em[i]),
                        fmt_double(r.jac[i], 6)});
    write_csv(join(out, "per_context_" + r.method + "_" + r.dataset + ".csv"),
              {"dataset", "method", "context", "em", "jaccard"}, rows);
}

const std::vector<std::string> kReportHeader = {"method", "dataset", "em",     "em_se",
                                                "jaccard", "jac_se", "contexts"};

} // namespace

// --- stages -------------------------------------------------------------------------

void stage_gen_data(const Config& cfg, const std::string& out) {
    fs::create_directories(out);
    Config c = default_config();
    c.overlay(cfg);
    World world = World::from_config(c);
    Rng rng(uint64_t(c.get_int("data", "seed", 1)));
    SplitSizes sizes;
    sizes.n_train = int(c.get_int("data", "n_train", 512));
    sizes.n_val = int(c.get_int("data", "n_val", 512));
    sizes.n_shift = int(c.get_int("data", "n_shift", 512));
    Splits splits = make_splits(world, rng, sizes);
    save_contexts_jsonl(world, splits.train, join(out, "train.jsonl"));
    save_contexts_jsonl(world, splits.val, join(out, "val.jsonl"));
    save_contexts_jsonl(world, splits.test_shift, join(out, "test_shift.jsonl"));
    world.write_config(c);
    for (int d = 0; d < kNumDomains; ++d) {
        std::vector<std::string> tv, sv;
        for (int v : splits.train_values[size_t(d)]) tv.push_back(std::to_string(v));
        for (int v : splits.shift_values[size_t(d)]) sv.push_back(std::to_string(v));
        c.set_list("splits", "train_values_" + std::to_string(d), tv);
        c.set_list("splits", "shift_values_" + std::to_string(d), sv);
    }
    c.save(join(out, "config.cfg"));
}

void stage_train(const Config& cfg, const std::string& out) {
    Bundle b = load_bundle(cfg, out);
    MixtureOptions opt = mixture_from(b.cfg);
    Rng rng(uint64_t(b.cfg.get_int("data", "seed", 1)) ^ 0x7261ULL);
    BiasSpec bias = BiasSpec::defaults(b.world);
    auto examples = build_training_mixture(b.world, b.splits, opt, bias, rng);
    ModelConfig mc = model_config_from(b.cfg, b.world.tokenizer.size());
    Model model(mc);
    TrainLog log = train_lm(model, examples);
    std::vector<std::vector<int>> seqs;
    for (size_t i = 0; i < b.splits.train.size() && i < 128; ++i)
        seqs.push_back(b.splits.train[i].tokens);
    model.calibrate_scales(seqs);
    model.save_checkpoint(join(out, "model.ckpt"));

    std::vector<std::vector<std::string>> loss_rows;
    for (auto [step, loss] : log.loss_curve)
        loss_rows.push_back({std::to_string(step), fmt_double(loss, 6)});
    write_csv(join(out, "train_log.csv"), {"step", "loss"}, loss_rows);

    std::vector<ContextInstance> qa_eval(b.splits.val.begin(),
                                         b.splits.val.begin() + std::min<size_t>(128, b.splits.val.size()));
    double qa = eval_qa(model, b.world, qa_eval);
    double flip = opt.inject_fraction > 0 ? eval_injection_flip(model, b.world, qa_eval) : 0.0;
    write_csv(join(out, "metrics.csv"), {"metric", "value"},
              {{"val_qa_accuracy", fmt_double(qa, 4)},
               {"injection_flip_rate", fmt_double(flip, 4)},
               {"final_loss", fmt_double(log.final_loss, 6)},
               {"examples", std::to_string(examples.size())}});
}


namespace {

// Context-level supervision path: the proposition set is known but token
// positions are not. Each value is attributed to its strongest-attribution
// token via a contrast pair, then probes are fit from those labels.
std::vector<std::optional<TokenLabel>> gradcam_labels(const Model& model, const World& world,
                                                      const ContextInstance& ctx) {
    std::vector<std::optional<TokenLabel>> labels(ctx.tokens.size());
    auto rerender = [&](const PropositionSet& props) {
        return render_context(world, props, ctx.tmpl);
    };

    const auto& entities = ctx.propositions.entities();
    for (size_t k = 0; k < entities.size(); ++k) {
        // replace this name with a fresh one and contrast the people query
        std::string fresh;
        for (const auto& cand : world.domains[0].values) {
            bool used = false;
            for (const auto& e : entities)
                if (e == cand) used = true;
            if (!used) { fresh = cand; break; }
        }
        PropositionSet swapped;
        for (const auto& e : entities)
            for (const auto& p : ctx.propositions.items())
                if (p.entity == e)
                    swapped.insert({p.predicate, e == entities[k] ? fresh : e, p.attribute});
        ContextInstance contrast = rerender(swapped);
        std::vector<int> probe_tokens = ctx.tokens;
        for (const char* w : {"Therefore", ",", "the", "people", "are"})
            probe_tokens.push_back(world.tokenizer.id(w));
        // metric on the shared context body: log-prob gap between the two names
        Metric metric = Metric::log_prob_diff(world.tokenizer.id(entities[k]),
                                              world.tokenizer.id(fresh));
        // gradcam runs on the context tokens only; append the query to both
        std::vector<int> a = probe_tokens;
        std::vector<int> b = contrast.tokens;
        for (const char* w : {"Therefore", ",", "the", "people", "are"})
            b.push_back(world.tokenizer.id(w));
        Mat att = gradcam(model, a, b, metric);
        int best = 0;
        double best_score = -1.0;
        for (int s = 0; s < int(ctx.tokens.size()); ++s) {
            double score = 0.0;
            for (int l = 0; l < att.rows; ++l) score += att.at(l, s);
            if (std::abs(score) > best_score) {
                best_score = std::abs(score);
                best = s;
            }
        }
        labels[size_t(best)] = TokenLabel{0, entities[k]};
    }
    for (const auto& p : ctx.propositions.items()) {
        int dom = attribute_domain(p.predicate);
        const auto& values = world.domains[size_t(dom)].values;
        std::string fresh;
        for (const auto& cand : values) {
            bool used = false;
            for (const auto& q : ctx.propositions.items())
                if (q.attribute == cand) used = true;
            if (!used) { fresh = cand; break; }
        }
        PropositionSet swapped;
        for (const auto& e : entities)
            for (const auto& q : ctx.propositions.items())
                if (q.entity == e)
                    swapped.insert({q.predicate, e,
                                    (q.entity == p.entity && q.predicate == p.predicate) ? fresh
                                                                                         : q.attribute});
        ContextInstance contrast = rerender(swapped);
        Query qa = render_query(world, ctx, p.entity, p.predicate);
        std::vector<int> b = contrast.tokens;
        for (size_t i = ctx.tokens.size(); i < qa.tokens.size(); ++i) b.push_back(qa.tokens[i]);
        Metric metric = Metric::log_prob_diff(world.tokenizer.encode(p.attribute)[0],
                                              world.tokenizer.encode(fresh)[0]);
        Mat att = gradcam(model, qa.tokens, b, metric);
        int best = 0;
        double best_score = -1.0;
        for (int s = 0; s < int(ctx.tokens.size()); ++s) {
            double score = 0.0;
            for (int l = 0; l < att.rows; ++l) score += att.at(l, s);
            if (std::abs(score) > best_score) {
                best_score = std::abs(score);
                best = s;
            }
        }
        labels[size_t(best)] = TokenLabel{dom, p.attribute};
    }
    return labels;
}

} // namespace

void stage_fit_probes(const Config& cfg, const std::string& out) {
    Bundle b = load_bundle(cfg, out);
    Model model = Model::load_checkpoint(join(out, "model.ckpt"));
    const int L = model.cfg.n_layers;
    const int n_fit = std::min<int>(int(b.cfg.get_int("probes", "fit_contexts", 128)),
                                    int(b.splits.train.size()));

    const bool use_gradcam = b.cfg.get_str("probes", "label_source", "exact") == "gradcam";
    std::vector<ContextInstance> relabeled;
    std::vector<ActivationCache> caches;
    std::vector<const ContextInstance*> fit_ctxs;
    for (int i = 0; i < n_fit; ++i) {
        const ContextInstance& src = b.splits.train[size_t(i)];
        if (use_gradcam) {
            ContextInstance copy = src;
            copy.token_labels = gradcam_labels(model, b.world, src);
            relabeled.push_back(std::move(copy));
        }
        caches.push_back(model.forward_with_cache(src.tokens).second);
    }
    for (int i = 0; i < n_fit; ++i)
        fit_ctxs.push_back(use_gradcam ? &relabeled[size_t(i)] : &b.splits.train[size_t(i)]);

    // probe layer: best mean AUC-PRC across domains
    Mat aucs(kNumDomains, L);
    ProbeSet probes;
    std::array<std::vector<std::string>, kNumDomains> fit_values;
    {
        std::array<std::set<std::string>, kNumDomains> observed;
        for (const auto* ctx : fit_ctxs)
            for (const auto& lab : ctx->token_labels)
                if (lab) observed[size_t(lab->domain)].insert(lab->value);
        for (int d = 0; d < kNumDomains; ++d)
            for (int idx : b.splits.train_values[size_t(d)]) {
                const auto& v = b.world.domains[size_t(d)].values[size_t(idx)];
                if (observed[size_t(d)].count(v)) fit_values[size_t(d)].push_back(v);
            }
    }

    for (int d = 0; d < kNumDomains; ++d) {
        std::vector<std::vector<TokenSample>> per_layer(size_t(L), std::vector<TokenSample>{});
        for (size_t ci = 0; ci < caches.size(); ++ci) {
            const ContextInstance& ctx = *fit_ctxs[ci];
            for (int s = 0; s < caches[ci].seq; ++s) {
                const auto& lab = ctx.token_labels[size_t(s)];
                std::string value =
                    (lab && lab->domain == d) ? lab->value : std::string();
                // thin the null tokens to keep memory flat
                if (value.empty() && (s % 2 == 1)) continue;
                for (int l = 0; l < L; ++l)
                    per_layer[size_t(l)].push_back({caches[ci].vec(l, s), value});
            }
        }
        Vec dom_aucs;
        select_layer(d, per_layer, fit_values[size_t(d)], &dom_aucs);
        for (int l = 0; l < L; ++l) aucs.at(d, l) = dom_aucs[size_t(l)];
    }
    int probe_layer = 0;
    for (int l = 1; l < L; ++l) {
        double m0 = 0, ml = 0;
        for (int d = 0; d < kNumDomains; ++d) {
            m0 += aucs.at(d, probe_layer);
            ml += aucs.at(d, l);
        }
        if (ml > m0) probe_layer = l;
    }

    for (int d = 0; d < kNumDomains; ++d) {
        std::vector<TokenSample> samples;
        for (size_t ci = 0; ci < caches.size(); ++ci) {
            const ContextInstance& ctx = *fit_ctxs[ci];
            for (int s = 0; s < caches[ci].seq; ++s) {
                const auto& lab = ctx.token_labels[size_t(s)];
                if (lab && lab->domain == d)
                    samples.push_back({caches[ci].vec(probe_layer, s), lab->value});
            }
        }
        probes.by_domain[size_t(d)] =
            fit_domain_probe(d, probe_layer, samples, fit_values[size_t(d)]);
    }

    // thresholds on validation
    const int n_thr = std::min<int>(int(b.cfg.get_int("probes", "threshold_contexts", 128)),
                                    int(b.splits.val.size()));
    for (int d = 0; d < kNumDomains; ++d) {
        std::vector<ThresholdContext> val;
        for (int i = 0; i < n_thr; ++i) {
            const ContextInstance& ctx = b.splits.val[size_t(i)];
            auto cache = model.forward_with_cache(ctx.tokens).second;
            ThresholdContext tc;
            for (int s = 0; s < cache.seq; ++s) tc.activations.push_back(cache.vec(probe_layer, s));
            auto sets = true_value_sets(ctx.propositions);
            tc.true_set.assign(sets[size_t(d)].begin(), sets[size_t(d)].end());
            val.push_back(std::move(tc));
        }
        probes.by_domain[size_t(d)].threshold = select_threshold(probes.by_domain[size_t(d)], val);
        probes.by_domain[size_t(d)].threshold_set = true;
        probes.by_domain[size_t(d)].save(join(out, "probe_" + std::to_string(d) + ".bin"));
    }

    std::vector<std::vector<std::string>> auc_rows;
    for (int d = 0; d < kNumDomains; ++d)
        for (int l = 0; l < L; ++l)
            auc_rows.push_back({std::to_string(d), std::to_string(l),
                                fmt_double(aucs.at(d, l), 6),
                                l == probe_layer ? "1" : "0"});
    write_csv(join(out, "probe_aucs.csv"), {"domain", "layer", "auc_prc", "selected"}, auc_rows);

    std::string pj = "[";
    for (int d = 0; d < kNumDomains; ++d) {
        if (d) pj += ",";
        pj += probes.by_domain[size_t(d)].to_json();
    }
    pj += "]";
    write_text_file(join(out, "probes.json"), pj);
}

void stage_find_binding(const Config& cfg, const std::string& out) {
    Bundle b = load_bundle(cfg, out);
    Model model = Model::load_checkpoint(join(out, "model.ckpt"));
    Mat hessian;
    DeltaVectors deltas;
    double f00 = 0.0;
    Vec layer_aucs;
    BindingSubspace sub = derive_subspace(b, model, 0, &hessian, &deltas, &f00, &layer_aucs);
    sub.save(join(out, "subspace.pdss"));
    save_tensor(hessian, join(out, "hessian.pdtn"));
    save_tensor(deltas.entity, join(out, "deltas_entity.pdtn"));
    save_tensor(deltas.attr, join(out, "deltas_attr.pdtn"));
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"f00_after_ablation", fmt_double(f00, 6)});
    rows.push_back({"metric_layer", std::to_string(sub.metric_layer)});
    for (size_t l = 0; l < layer_aucs.size(); ++l)
        rows.push_back({"metric_auc_layer_" + std::to_string(l), fmt_double(layer_aucs[l], 6)});
    for (size_t i = 0; i < sub.s.size(); ++i)
        rows.push_back({"singular_value_" + std::to_string(i), fmt_double(sub.s[i], 6)});
    write_csv(join(out, "binding_metrics.csv"), {"metric", "value"}, rows);
}

namespace {

struct EvalArtifacts {
    Bundle b;
    Model model;
    ProbeSet probes;
    BindingSubspace sub;
};

EvalArtifacts load_eval_artifacts(const Config& cfg, const std::string& out) {
    EvalArtifacts a{load_bundle(cfg, out), Model::load_checkpoint(join(out, "model.ckpt")),
                    load_probes(out), BindingSubspace::load(join(out, "subspace.pdss"))};
    return a;
}

// probe-family predictions for one dataset with a shared forward pass
void eval_probe_methods(const EvalArtifacts& a, const std::vector<ContextInstance>& ctxs,
                        const std::vector<int>& prefix, const std::string& dataset,
                        const std::map<std::string, const BindingSubspace*>& subs,
                        std::map<std::string, EvalReport>& reports,
                        Mat* domain_em_out = nullptr) {
    for (auto& [name, sub] : subs) {
        reports[name].method = name;
        reports[name].dataset = dataset;
    }
    Mat domain_em(1, kNumDomains);
    for (const auto& ctx : ctxs) {
        std::vector<int> toks = prefix;
        toks.insert(toks.end(), ctx.tokens.begin(), ctx.tokens.end());
        auto cache = a.model.forward_with_cache(toks).second;
        int scan = int(prefix.size());
        for (auto& [name, sub] : subs) {
            PropositionSet pred = name.find("matched") != std::string::npos
                                      ? propose_predicates_matched(a.probes, *sub, cache, scan)
                                      : propose_predicates(a.probes, *sub, cache, scan);
            reports[name].add(exact_match(pred, ctx.propositions),
                              jaccard(pred, ctx.propositions));
        }
        auto truth = true_value_sets(ctx.propositions);
        for (int d = 0; d < kNumDomains; ++d) {
            auto detected = detect_values(a.probes.by_domain[size_t(d)], cache, scan);
            domain_em.at(0, d) += detected == truth[size_t(d)] ? 1.0 : 0.0;
        }
    }
    for (auto& [name, rep] : reports) rep.finalize();
    if (domain_em_out) {
        for (int d = 0; d < kNumDomains; ++d) domain_em.at(0, d) /= double(ctxs.size());
        *domain_em_out = domain_em;
    }
}

EvalReport eval_prompting_method(const EvalArtifacts& a, const std::vector<ContextInstance>& ctxs,
                                 const std::vector<int>& prefix, const std::string& dataset) {
    EvalReport rep;
    rep.method = "prompting";
    rep.dataset = dataset;
    for (const auto& ctx : ctxs) {
        std::vector<int> toks = prefix;
        toks.insert(toks.end(), ctx.tokens.begin(), ctx.tokens.end());
        PropositionSet pred = prompting_skyline(a.model, a.b.world, toks,
                                                int(ctx.propositions.entities().size()));
        rep.add(exact_match(pred, ctx.propositions), jaccard(pred, ctx.propositions));
    }
    rep.finalize();
    return rep;
}

} // namespace

void stage_eval(const Config& cfg, const std::string& out) {
    EvalArtifacts a = load_eval_artifacts(cfg, out);
    const int n_eval = int(a.b.cfg.get_int("adversarial", "n_eval", 512));

    Rng rng(uint64_t(a.b.cfg.get_int("data", "seed", 1)) ^ 0xabadULL);
    BindingSubspace random_sub = random_subspace(a.model.cfg.d_model, a.sub.k(),
                                                 a.sub.metric_layer, rng);
    BindingSubspace das_sub;
    bool have_das = fs::exists(join(out, "das.pdss"));
    if (have_das) {
        das_sub = BindingSubspace::load(join(out, "das.pdss"));
        das_sub.metric_layer = a.sub.metric_layer;
    }

    std::vector<std::vector<std::string>> table_rows, domain_rows;
    for (const auto& [dsname, full] :
         std::vector<std::pair<std::string, const std::vector<ContextInstance>*>>{
             {"val", &a.b.splits.val}, {"test_shift", &a.b.splits.test_shift}}) {
        std::vector<ContextInstance> ctxs(
            full->begin(), full->begin() + std::min<size_t>(size_t(n_eval), full->size()));
        std::map<std::string, const BindingSubspace*> subs = {
            {"prop_probe", &a.sub},
            {"prop_probe_matched", &a.sub},
            {"prop_probe_random", &random_sub}};
        if (have_das) subs["prop_probe_das"] = &das_sub;
        std::map<std::string, EvalReport> reports;
        Mat dem;
        eval_probe_methods(a, ctxs, {}, dsname, subs, reports, &dem);
        reports["prompting"] = eval_prompting_method(a, ctxs, {}, dsname);
        for (auto& [name, rep] : reports) {
            table_rows.push_back(report_row(rep));
            write_per_context(out, rep);
        }
        for (int d = 0; d < kNumDomains; ++d)
            domain_rows.push_back({dsname, std::to_string(d), fmt_double(dem.at(0, d), 4)});
    }
    write_csv(join(out, "standard_results.csv"), kReportHeader, table_rows);
    write_csv(join(out, "domain_probe_em.csv"), {"dataset", "domain", "em"}, domain_rows);
}

void stage_interchange(const Config& cfg, const std::string& out) {
    EvalArtifacts a = load_eval_artifacts(cfg, out);
    const Config& c = a.b.cfg;
    Rng rng(uint64_t(c.get_int("data", "seed", 1)) ^ 0x1c4eULL);
    auto ctx3 = make_binding_contexts(a.b.world, rng, int(c.get_int("interchange", "contexts", 200)),
                                      3, &a.b.splits.train_values);
    std::vector<int> k_grid;
    for (const auto& s : c.get_list("interchange", "k_grid")) k_grid.push_back(std::stoi(s));

    std::vector<std::vector<std::string>> rows;
    auto emit = [&](const std::string& kind, const std::string& side,
                    const std::vector<InterchangeResult>& res) {
        for (const auto& r : res) {
            std::vector<std::string> row = {
                kind, side, std::to_string(r.k),
                std::to_string(r.slot_i) + "-" + std::to_string(r.slot_j),
                fmt_double(r.min_accuracy, 4)};
            for (double acc : r.per_entity) row.push_back(fmt_double(acc, 4));
            rows.push_back(row);
        }
    };

    auto hess_e = eval_interchange(a.model, ctx3, a.sub, SwapSide::Entity, k_grid);
    auto hess_a = eval_interchange(a.model, ctx3, a.sub, SwapSide::Attribute, k_grid);
    emit("hessian", "entity", hess_e);
    emit("hessian", "attribute", hess_a);
    int knee = knee_k(hess_e, k_grid);

    BindingSubspace rnd = random_subspace(a.model.cfg.d_model,
                                          std::max(k_grid.back(), a.sub.k()),
                                          a.sub.metric_layer, rng);
    emit("random", "entity", eval_interchange(a.model, ctx3, rnd, SwapSide::Entity, k_grid));
    emit("random", "attribute", eval_interchange(a.model, ctx3, rnd, SwapSide::Attribute, k_grid));

    BindingSubspace sky_e = skyline_subspace(a.model, ctx3, SwapSide::Entity, a.sub.metric_layer);
    BindingSubspace sky_a = skyline_subspace(a.model, ctx3, SwapSide::Attribute, a.sub.metric_layer);
    emit("skyline", "entity",
         {eval_interchange_swap(a.model, ctx3, sky_e, SwapSide::Entity, 2, 0, 1),
          eval_interchange_swap(a.model, ctx3, sky_e, SwapSide::Entity, 2, 0, 2),
          eval_interchange_swap(a.model, ctx3, sky_e, SwapSide::Entity, 2, 1, 2)});
    emit("skyline", "attribute",
         {eval_interchange_swap(a.model, ctx3, sky_a, SwapSide::Attribute, 2, 0, 1),
          eval_interchange_swap(a.model, ctx3, sky_a, SwapSide::Attribute, 2, 0, 2),
          eval_interchange_swap(a.model, ctx3, sky_a, SwapSide::Attribute, 2, 1, 2)});

    auto ctx2 = make_binding_contexts(a.b.world, rng,
                                      int(c.get_int("interchange", "das_contexts", 64)), 2,
                                      &a.b.splits.train_values);
    DasConfig dc;
    dc.dim = knee;
    dc.n_samples = int(c.get_int("interchange", "das_samples", 128));
    dc.seed = uint64_t(c.get_int("data", "seed", 1)) ^ 0xda5ULL;
    BindingSubspace das_knee = das_baseline(a.model, ctx2, SwapSide::Entity, dc);
    das_knee.metric_layer = a.sub.metric_layer;
    das_knee.save(join(out, "das.pdss"));
    emit("das", "entity", eval_interchange(a.model, ctx3, das_knee, SwapSide::Entity, {knee}));
    DasConfig dc1 = dc;
    dc1.dim = 1;
    BindingSubspace das1 = das_baseline(a.model, ctx2, SwapSide::Entity, dc1);
    emit("das1", "entity", eval_interchange(a.model, ctx3, das1, SwapSide::Entity, {1}));

    write_csv(join(out, "interchange.csv"),
              {"kind", "side", "k", "swap", "min_acc", "acc_0", "acc_1", "acc_2"}, rows);
    write_csv(join(out, "interchange_summary.csv"), {"metric", "value"},
              {{"knee_k", std::to_string(knee)}});
}

void stage_adversarial_inject(const Config& cfg, const std::string& out) {
    EvalArtifacts a = load_eval_artifacts(cfg, out);
    const int n_eval = std::min<int>(int(a.b.cfg.get_int("adversarial", "n_eval", 512)),
                                     int(a.b.splits.val.size()));
    std::vector<ContextInstance> ctxs(a.b.splits.val.begin(), a.b.splits.val.begin() + n_eval);
    std::vector<int> prefix = injection_prefix(a.b.world);

    std::vector<ContextInstance> gate_ctxs(ctxs.begin(),
                                           ctxs.begin() + std::min<size_t>(128, ctxs.size()));
    double flip = eval_injection_flip(a.model, a.b.world, gate_ctxs);

    std::map<std::string, const BindingSubspace*> subs = {{"prop_probe", &a.sub}};
    std::map<std::string, EvalReport> clean_r, inj_r;
    eval_probe_methods(a, ctxs, {}, "clean", subs, clean_r);
    eval_probe_methods(a, ctxs, prefix, "injected", subs, inj_r);
    EvalReport prompt_clean = eval_prompting_method(a, ctxs, {}, "clean");
    EvalReport prompt_inj = eval_prompting_method(a, ctxs, prefix, "injected");

    std::vector<double> diffs;
    for (size_t i = 0; i < ctxs.size(); ++i)
        diffs.push_back(inj_r["prop_probe"].jac[i] - prompt_inj.jac[i]);
    double p = paired_test_pvalue(diffs);

    std::vector<std::vector<std::string>> rows;
    rows.push_back(report_row(clean_r["prop_probe"]));
    rows.push_back(report_row(inj_r["prop_probe"]));
    rows.push_back(report_row(prompt_clean));
    rows.push_back(report_row(prompt_inj));
    write_csv(join(out, "adversarial_injection.csv"), kReportHeader, rows);
    write_csv(join(out, "adversarial_injection_meta.csv"), {"metric", "value"},
              {{"flip_rate", fmt_double(flip, 4)}, {"paired_p_value", fmt_double(p, 8)}});
    write_per_context(out, inj_r["prop_probe"]);
    write_per_context(out, prompt_inj);
}

void stage_adversarial_backdoor(const Config& cfg, const std::string& out) {
    EvalArtifacts a = load_eval_artifacts(cfg, out);
    const Config& c = a.b.cfg;
    Rng rng(uint64_t(c.get_int("data", "seed", 1)) ^ 0xbadbULL);
    int n_ft = std::min<int>(int(c.get_int("adversarial", "backdoor_contexts", 256)),
                             int(a.b.splits.train.size()));
    std::vector<ContextInstance> ft_ctxs(a.b.splits.train.begin(),
                                         a.b.splits.train.begin() + n_ft);
    auto data = build_backdoor_dataset(a.b.world, ft_ctxs, a.b.world.trigger_word, rng,
                                       c.get_double("adversarial", "backdoor_clean_fraction", 0.5));
    Model ft = finetune(a.model, data, int(c.get_int("adversarial", "backdoor_steps", 400)),
                        c.get_double("adversarial", "backdoor_lr", 5e-4),
                        uint64_t(c.get_int("data", "seed", 1)) ^ 0xf7ULL);
    ft.save_checkpoint(join(out, "model_backdoored.ckpt"));

    const int n_eval = std::min<int>(int(c.get_int("adversarial", "n_eval", 512)),
                                     int(a.b.splits.val.size()));
    std::vector<ContextInstance> ctxs(a.b.splits.val.begin(), a.b.splits.val.begin() + n_eval);
    std::vector<int> trig = {a.b.world.tokenizer.id(a.b.world.trigger_word)};

    EvalArtifacts ft_art{a.b, ft, a.probes, a.sub};
    std::map<std::string, const BindingSubspace*> subs = {{"prop_probe", &a.sub}};
    std::map<std::string, EvalReport> probe_trig, probe_clean_ft;
    eval_probe_methods(ft_art, ctxs, trig, "backdoored", subs, probe_trig);
    eval_probe_methods(ft_art, ctxs, {}, "clean_finetuned", subs, probe_clean_ft);
    std::map<std::string, EvalReport> probe_clean_base;
    eval_probe_methods(a, ctxs, {}, "clean", subs, probe_clean_base);

    EvalReport prompt_trig = eval_prompting_method(ft_art, ctxs, trig, "backdoored");
    EvalReport prompt_clean_ft = eval_prompting_method(ft_art, ctxs, {}, "clean_finetuned");

    std::vector<double> diffs;
    for (size_t i = 0; i < ctxs.size(); ++i)
        diffs.push_back(probe_trig["prop_probe"].jac[i] - prompt_trig.jac[i]);
    double p = paired_test_pvalue(diffs);

    std::vector<std::vector<std::string>> rows;
    rows.push_back(report_row(probe_clean_base["prop_probe"]));
    rows.push_back(report_row(probe_clean_ft["prop_probe"]));
    rows.push_back(report_row(probe_trig["prop_probe"]));
    rows.push_back(report_row(prompt_clean_ft));
    rows.push_back(report_row(prompt_trig));
    write_csv(join(out, "adversarial_backdoor.csv"), kReportHeader, rows);
    write_csv(join(out, "adversarial_backdoor_meta.csv"), {"metric", "value"},
              {{"paired_p_value", fmt_double(p, 8)}});
    write_per_context(out, probe_trig["prop_probe"]);
    write_per_context(out, prompt_trig);
}

void stage_adversarial_bias(const Config& cfg, const std::string& out) {
    Bundle b = load_bundle(cfg, out);
    const Config& c = b.cfg;
    std::vector<std::vector<std::string>> rows;
    int salt = 0;
    for (const auto& s : c.get_list("adversarial", "bias_skews")) {
        double skew = std::stod(s);
        MixtureOptions opt = mixture_from(c);
        opt.bias_skew = skew;
        Model model = train_model_on_mixture(b, opt, 0x61a5ULL + uint64_t(salt++), 0);
        BindingSubspace sub = derive_subspace(b, model, uint64_t(salt), nullptr, nullptr,
                                              nullptr, nullptr);
        BiasSpec spec = BiasSpec::defaults(b.world);
        spec.skew = skew;
        spec.n_eval_contexts = int(c.get_int("adversarial", "bias_eval_contexts", 400));
        Rng rng(uint64_t(c.get_int("data", "seed", 1)) ^ 0xb1a5ULL);
        BiasReport rep = run_bias_experiment(model, b.world, spec, sub, rng);
        auto row = [&](const std::string& method, const std::string& variant, double pro,
                       double anti) {
            rows.push_back({fmt_double(skew, 2), method, variant, fmt_double(pro, 4),
                            fmt_double(anti, 4), fmt_double(pro - anti, 4)});
        };
        row("prompting", "raw", rep.prompt_pro, rep.prompt_anti);
        row("prompting", "calibrated", rep.prompt_pro_cal, rep.prompt_anti_cal);
        row("probing", "raw", rep.probe_pro, rep.probe_anti);
        row("probing", "calibrated", rep.probe_pro_cal, rep.probe_anti_cal);
    }
    write_csv(join(out, "bias.csv"),
              {"skew", "method", "variant", "pro_acc", "anti_acc", "gap"}, rows);
}

void stage_heatmap(const Config& cfg, const std::string& out) {
    EvalArtifacts a = load_eval_artifacts(cfg, out);
    Rng rng(uint64_t(a.b.cfg.get_int("data", "seed", 1)) ^ 0x6ea7ULL);
    fs::create_directories(join(out, "heatmaps"));

    auto emit = [&](const std::string& name, const ContextInstance& ctx) {
        auto cache = a.model.forward_with_cache(ctx.tokens).second;
        std::vector<int> positions;
        std::vector<std::string> labels;
        for (size_t s = 0; s < ctx.tokens.size(); ++s) {
            positions.push_back(int(s));
            labels.push_back(a.b.world.tokenizer.word(ctx.tokens[s]));
        }
        Mat m = similarity_matrix(a.sub, cache, positions);
        write_pgm(m, join(out, "heatmaps/" + name + ".pgm"));
        write_svg_heatmap(m, labels, join(out, "heatmaps/" + name + ".svg"));
        write_matrix_csv(m, join(out, "heatmaps/" + name + ".csv"), labels);
    };

    auto mk = [&](TemplateFamily fam, int n_entities) {
        PropositionSet props = sample_propositions(a.b.world, n_entities, rng,
                                                   &a.b.splits.train_values);
        ContextTemplate tmpl;
        tmpl.family = fam;
        tmpl.predicate_subset = {Predicate::LivesIn};
        return render_context(a.b.world, props, tmpl);
    };
    emit("serial", mk(TemplateFamily::Series, 2));
    emit("parallel", mk(TemplateFamily::Cross, 2));
    emit("three_entity", mk(TemplateFamily::Series, 3));
    emit("coref_cis", mk(TemplateFamily::Coref, 2));
    emit("coref_trans", mk(TemplateFamily::Nested, 2));
}

namespace {

void add_stage_artifacts(ordered_json& stages, const std::string& out, const std::string& name,
                         const std::vector<std::string>& files) {
    ordered_json st;
    st["name"] = name;
    st["artifacts"] = ordered_json::array();
    for (const auto& f : files) {
        std::string p = join(out, f);
        if (!fs::exists(p)) continue;
        ordered_json a;
        a["path"] = f;
        a["sha256"] = sha256_file_hex(p);
        st["artifacts"].push_back(a);
    }
    stages.push_back(st);
}

void run_pipeline_oracle(const Config& user_cfg, const std::string& out);

} // namespace

std::string run_pipeline(const Config& cfg, const std::string& out) {
    fs::create_directories(out);
    Config c = default_config();
    c.overlay(cfg);
    std::string mode = c.get_str("pipeline", "mode", "model");

    ordered_json stages = ordered_json::array();
    auto run_stage = [&](const std::string& name, auto&& fn,
                         const std::vector<std::string>& artifacts) {
        try {
            fn();
        } catch (const std::exception& e) {
            throw std::runtime_error("stage " + name + ": " + e.what());
        }
        add_stage_artifacts(stages, out, name, artifacts);
    };

    if (mode == "oracle") {
        run_stage("oracle-eval", [&] { run_pipeline_oracle(cfg, out); },
                  {"standard_results.csv", "per_context_prop_probe_oracle_clean.csv",
                   "per_context_prop_probe_matched_oracle_clean.csv",
                   "per_context_prop_probe_random_oracle_clean.csv",
                   "per_context_prop_probe_oracle_noisy.csv", "binding_metrics.csv"});
    } else {
        run_stage("gen-data", [&] { stage_gen_data(cfg, out); },
                  {"config.cfg", "train.jsonl", "val.jsonl", "test_shift.jsonl"});
        run_stage("train", [&] { stage_train(cfg, out); },
                  {"model.ckpt", "train_log.csv", "metrics.csv"});
        run_stage("fit-probes", [&] { stage_fit_probes(cfg, out); },
                  {"probe_0.bin", "probe_1.bin", "probe_2.bin", "probe_3.bin", "probes.json",
                   "probe_aucs.csv"});
        run_stage("find-binding", [&] { stage_find_binding(cfg, out); },
                  {"subspace.pdss", "hessian.pdtn", "deltas_entity.pdtn", "deltas_attr.pdtn",
                   "binding_metrics.csv"});
        run_stage("interchange", [&] { stage_interchange(cfg, out); },
                  {"interchange.csv", "interchange_summary.csv", "das.pdss"});
        run_stage("eval", [&] { stage_eval(cfg, out); },
                  {"standard_results.csv", "domain_probe_em.csv"});
    }

    ordered_json manifest;
    manifest["mode"] = mode;
    manifest["seed"] = c.get_int("data", "seed", 1);
    manifest["config"] = c.serialize();
    manifest["stages"] = stages;
    std::string path = join(out, "manifest.json");
    write_text_file(path, manifest.dump(2) + "\n");
    return path;
}

void stage_report(const Config& cfg, const std::string& out) {
    Config c = resolved_config(cfg, out);
    ordered_json rep;
    for (const char* f :
         {"metrics.csv", "standard_results.csv", "domain_probe_em.csv", "binding_metrics.csv",
          "interchange_summary.csv", "adversarial_injection.csv", "adversarial_injection_meta.csv",
          "adversarial_backdoor.csv", "adversarial_backdoor_meta.csv", "bias.csv"}) {
        std::string p = join(out, f);
        if (fs::exists(p)) rep[f] = read_text_file(p);
    }
    write_text_file(join(out, "report.json"), rep.dump(2) + "\n");

    ordered_json stages = ordered_json::array();
    std::vector<std::string> all;
    for (const auto& entry : fs::directory_iterator(out)) {
        if (entry.is_regular_file() && entry.path().filename() != "manifest.json")
            all.push_back(entry.path().filename().string());
    }
    std::sort(all.begin(), all.end());
    add_stage_artifacts(stages, out, "report", all);
    ordered_json manifest;
    manifest["mode"] = c.get_str("pipeline", "mode", "model");
    manifest["seed"] = c.get_int("data", "seed", 1);
    manifest["stages"] = stages;
    write_text_file(join(out, "manifest.json"), manifest.dump(2) + "\n");
}

// --- oracle-mode pipeline ---------------------------------------------------------

namespace {

void run_pipeline_oracle(const Config& user_cfg, const std::string& out) {
    Config c = default_config();
    c.overlay(user_cfg);
    World base = World::from_config(c);

    auto run_once = [&](double noise, const std::string& dsname,
                        std::vector<std::vector<std::string>>& table_rows) {
        OracleSpec spec;
        spec.d_model = int(c.get_int("oracle", "d_model", 64));
        spec.rank = int(c.get_int("oracle", "rank", 2));
        spec.noise = noise;
        spec.temperature = c.get_double("oracle", "temperature", 0.1);
        spec.seed = uint64_t(c.get_int("oracle", "seed", 5));
        spec.domain_sizes = {int(c.get_int("oracle", "names", 16)),
                             int(c.get_int("oracle", "countries", 8)),
                             int(c.get_int("oracle", "occupations", 8)),
                             int(c.get_int("oracle", "foods", 8))};
        Oracle oracle(spec, base);
        Rng rng(spec.seed ^ 0x0cacULL);

        const int n_eval = int(c.get_int("oracle", "n_eval", 512));
        auto gen = [&](int n) {
            std::vector<OracleContext> v;
            for (int i = 0; i < n; ++i)
                v.push_back(oracle.make_context(sample_propositions(oracle.world(), 2, rng), rng));
            return v;
        };
        // counterbalanced fit set: both slot orders of every draw, so
        // binding components cancel exactly in the probe class means
        std::vector<OracleContext> train;
        for (int i = 0; i < 128; ++i) {
            PropositionSet props = sample_propositions(oracle.world(), 2, rng);
            train.push_back(oracle.make_context(props, rng));
            PropositionSet rev;
            for (auto it = props.entities().rbegin(); it != props.entities().rend(); ++it)
                for (const auto& p : props.items())
                    if (p.entity == *it) rev.insert(p);
            train.push_back(oracle.make_context(rev, rng));
        }
        auto val = gen(128), eval_set = gen(n_eval);

        // probes at the oracle's single layer
        ProbeSet probes;
        for (int d = 0; d < kNumDomains; ++d) {
            std::vector<TokenSample> samples;
            for (const auto& oc : train)
                for (int s = 0; s < oc.cache.seq; ++s) {
                    const auto& lab = oc.meta.token_labels[size_t(s)];
                    samples.push_back(
                        {oc.cache.vec(0, s), lab && lab->domain == d ? lab->value : ""});
                }
            probes.by_domain[size_t(d)] =
                fit_domain_probe(d, 0, samples, oracle.world().domains[size_t(d)].values);
            std::vector<ThresholdContext> thr;
            for (const auto& oc : val) {
                ThresholdContext tc;
                for (int s = 0; s < oc.cache.seq; ++s) tc.activations.push_back(oc.cache.vec(0, s));
                auto sets = true_value_sets(oc.meta.propositions);
                tc.true_set.assign(sets[size_t(d)].begin(), sets[size_t(d)].end());
                thr.push_back(std::move(tc));
            }
            probes.by_domain[size_t(d)].threshold =
                select_threshold(probes.by_domain[size_t(d)], thr);
            probes.by_domain[size_t(d)].threshold_set = true;
        }

        // deltas -> Hessian -> subspace
        std::vector<OracleContext> delta_ctxs, f_ctxs;
        for (int i = 0; i < 200; ++i) delta_ctxs.push_back(oracle.make_binding_context(rng));
        for (int i = 0; i < int(c.get_int("binding", "hessian_contexts", 20)); ++i)
            f_ctxs.push_back(oracle.make_binding_context(rng));
        DeltaVectors deltas = estimate_deltas_oracle(delta_ctxs);
        OracleBindingTask task(oracle, f_ctxs, deltas);
        HessianJob job;
        Mat h = compute_hessian(task, job);
        BindingSubspace sub = svd_subspace(h, spec.rank, 0, Provenance::Hessian);
        Rng rrng(spec.seed ^ 0x9999ULL);
        BindingSubspace rnd = random_subspace(spec.d_model, spec.rank, 0, rrng);

        Vec zero(size_t(spec.d_model), 0.0);
        double f00 = task.F(zero, zero);

        std::map<std::string, const BindingSubspace*> subs = {
            {"prop_probe", &sub}, {"prop_probe_matched", &sub}, {"prop_probe_random", &rnd}};
        std::map<std::string, EvalReport> reports;
        for (auto& [name, subspace] : subs) {
            reports[name].method = name;
            reports[name].dataset = dsname;
        }
        for (const auto& oc : eval_set) {
            for (auto& [name, subspace] : subs) {
                PropositionSet pred =
                    name.find("matched") != std::string::npos
                        ? propose_predicates_matched(probes, *subspace, oc.cache)
                        : propose_predicates(probes, *subspace, oc.cache);
                reports[name].add(exact_match(pred, oc.meta.propositions),
                                  jaccard(pred, oc.meta.propositions));
            }
        }
        for (auto& [name, rep] : reports) {
            rep.finalize();
            table_rows.push_back(report_row(rep));
            write_per_context(out, rep);
        }
        return f00;
    };

    std::vector<std::vector<std::string>> table_rows;
    double f00_clean = run_once(c.get_double("oracle", "noise", 0.0), "oracle_clean", table_rows);
    run_once(c.get_double("oracle", "noise_eval", 0.05), "oracle_noisy", table_rows);
    write_csv(join(out, "standard_results.csv"), kReportHeader, table_rows);
    write_csv(join(out, "binding_metrics.csv"), {"metric", "value"},
              {{"f00_after_ablation", fmt_double(f00_clean, 6)}});
}

} // namespace

} // namespace propdec
