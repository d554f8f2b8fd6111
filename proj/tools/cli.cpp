// Command-line front end. Each subcommand runs one pipeline stage against
// an output directory; `pipeline` chains them and writes the manifest.

#include <CLI11.hpp>

#include <cstdio>

#include "propdec/config.hpp"
#include "propdec/harness.hpp"

using namespace propdec;

int main(int argc, char** argv) {
    CLI::App app{"propositional decoding toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir = "runs/default";
    long long seed = -1;
    app.add_option("--config", config_path, "config file (plain-text key = value sections)");
    app.add_option("--out", out_dir, "output directory for artifacts");
    app.add_option("--seed", seed, "override [data] seed");

    auto* gen = app.add_subcommand("gen-data", "generate world, splits and dataset files");
    auto* train = app.add_subcommand("train", "train the toy transformer on the mixture");
    auto* probes = app.add_subcommand("fit-probes", "select layer, fit domain probes, thresholds");
    auto* binding = app.add_subcommand("find-binding", "deltas, Hessian, SVD subspace, metric layer");
    auto* eval = app.add_subcommand("eval", "evaluate probes and the prompting skyline");
    auto* inter = app.add_subcommand("interchange", "interchange sweep with baselines");
    auto* adv = app.add_subcommand("adversarial", "adversarial experiments");
    adv->require_subcommand(1);
    auto* adv_inject = adv->add_subcommand("inject", "prompt-injection evaluation");
    auto* adv_backdoor = adv->add_subcommand("backdoor", "backdoor finetune evaluation");
    auto* adv_bias = adv->add_subcommand("bias", "gender-bias evaluation across skews");
    auto* heatmap = app.add_subcommand("heatmap", "similarity heatmaps for sample contexts");
    auto* report = app.add_subcommand("report", "collate artifacts into report.json + manifest");
    auto* pipeline = app.add_subcommand("pipeline", "run every stage end to end");

    CLI11_PARSE(app, argc, argv);

    try {
        Config cfg;
        if (!config_path.empty()) cfg = Config::load(config_path);
        if (seed >= 0) cfg.set("data", "seed", std::to_string(seed));

        if (gen->parsed()) stage_gen_data(cfg, out_dir);
        if (train->parsed()) stage_train(cfg, out_dir);
        if (probes->parsed()) stage_fit_probes(cfg, out_dir);
        if (binding->parsed()) stage_find_binding(cfg, out_dir);
        if (eval->parsed()) stage_eval(cfg, out_dir);
        if (inter->parsed()) stage_interchange(cfg, out_dir);
        if (adv_inject->parsed()) stage_adversarial_inject(cfg, out_dir);
        if (adv_backdoor->parsed()) stage_adversarial_backdoor(cfg, out_dir);
        if (adv_bias->parsed()) stage_adversarial_bias(cfg, out_dir);
        if (heatmap->parsed()) stage_heatmap(cfg, out_dir);
        if (report->parsed()) stage_report(cfg, out_dir);
        if (pipeline->parsed()) {
            std::string manifest = run_pipeline(cfg, out_dir);
            std::printf("manifest: %s\n", manifest.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
