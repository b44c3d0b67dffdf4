#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "qrouted/harness.hpp"

namespace {

using namespace qrouted;

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    std::int64_t seed = -1;
    std::string router;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_router = true) {
    cmd->add_option("--config", o.config_path, "run configuration (JSON)")->required();
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--seed", o.seed, "override the config seed");
    if (with_router) cmd->add_option("--router", o.router, "rr|sqf|greedy|baseline-rl|qos-rl");
}

RunConfig load_config(const CommonOpts& o) {
    RunConfig cfg = RunConfig::load(o.config_path);
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    if (!o.router.empty()) cfg.router = o.router;
    cfg.validate();
    return cfg;
}

void print_aggregates(const std::string& label, const Aggregates& a) {
    std::printf("%s: avg_qos=%.4f avg_latency=%.3f ms/tok violations=%.1f%% drops=%.1f%% (%d requests)\n",
                label.c_str(), a.avg_qos, a.avg_latency_ms_per_token, 100.0 * a.violation_rate,
                100.0 * a.drop_rate, a.n_total);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"qrouted: multi-expert LLM serving simulator and QoS-aware router harness"};
    app.require_subcommand(1);

    CommonOpts gen_o;
    std::string trace_out = "trace.jsonl";
    auto* gen = app.add_subcommand("gen-trace", "sample a workload and write it as a trace file");
    add_common(gen, gen_o, false);
    gen->add_option("--trace-out", trace_out, "output trace path");

    CommonOpts sim_o;
    std::string sim_checkpoint;
    bool sim_events = false, sim_force = false;
    auto* sim = app.add_subcommand("simulate", "run one episode with the configured router");
    add_common(sim, sim_o);
    sim->add_option("--checkpoint", sim_checkpoint, "checkpoint stem for RL routers");
    sim->add_flag("--log-events", sim_events, "write events.jsonl");
    sim->add_flag("--force", sim_force, "ignore checkpoint/config hash mismatch");

    CommonOpts train_o;
    auto* tr = app.add_subcommand("train", "train the configured RL router");
    add_common(tr, train_o);

    CommonOpts eval_o;
    std::string eval_checkpoint;
    bool eval_force = false;
    auto* ev = app.add_subcommand("evaluate", "greedy evaluation of a trained checkpoint");
    add_common(ev, eval_o);
    ev->add_option("--checkpoint", eval_checkpoint, "checkpoint stem")->required();
    ev->add_flag("--force", eval_force, "ignore checkpoint/config hash mismatch");

    CommonOpts cmp_o;
    std::string routers_csv = "rr,sqf,greedy";
    std::string reference = "rr";
    int cmp_seeds = 1;
    bool cmp_force = false;
    auto* cmp = app.add_subcommand("compare", "run several routers on the shared workload");
    add_common(cmp, cmp_o, false);
    cmp->add_option("--routers", routers_csv, "comma-separated router kinds");
    cmp->add_option("--reference", reference, "baseline for relative improvement");
    cmp->add_option("--seeds", cmp_seeds, "number of workload seeds to average");
    cmp->add_flag("--force", cmp_force, "ignore checkpoint/config hash mismatches");

    CommonOpts abl_o;
    int abl_seeds = 1;
    auto* abl = app.add_subcommand("ablate", "train and grade the ablation grid");
    add_common(abl, abl_o, false);
    abl->add_option("--seeds", abl_seeds, "number of evaluation seeds");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            RunConfig cfg = load_config(gen_o);
            gen_trace(cfg, trace_out);
            std::printf("wrote %s\n", trace_out.c_str());
        } else if (*sim) {
            RunConfig cfg = load_config(sim_o);
            if (!sim_checkpoint.empty()) cfg.checkpoints[cfg.router] = sim_checkpoint;
            auto router = make_router(cfg, sim_force);
            EpisodeEngine eng(cfg, cfg.make_requests(cfg.seed), true);
            if (sim_events) eng.sim().enable_event_log(true);
            router->reset();
            while (!eng.done()) {
                DecisionPoint dp = eng.next_decision();
                RoutingContext ctx{dp.snap, eng.current_request(), dp.preds, dp.mask,
                                   eng.scales()};
                eng.apply(router->decide(ctx));
            }
            eng.finish();
            MetricsRecord m = eng.metrics();
            write_metrics(m, sim_o.out_dir);
            if (sim_events)
                write_event_log(eng.sim().event_log(),
                                std::filesystem::path(sim_o.out_dir) / "events.jsonl");
            print_aggregates(cfg.router, m.agg);
        } else if (*tr) {
            RunConfig cfg = load_config(train_o);
            if (!is_rl_router(cfg.router))
                throw std::runtime_error("train needs an RL router (qos-rl or baseline-rl)");
            TrainResult res = train(cfg, train_o.out_dir);
            std::printf("trained %ld steps; best eval avg_qos=%.4f; checkpoint at %s%s\n",
                        res.steps_run, res.best_eval_qos,
                        res.checkpoint_stem.string().c_str(),
                        res.diverged ? " (diverged; last good kept)" : "");
        } else if (*ev) {
            RunConfig cfg = load_config(eval_o);
            if (!is_rl_router(cfg.router)) cfg.router = "qos-rl";
            EpisodeResult res = evaluate(cfg, eval_checkpoint, eval_o.out_dir, eval_force);
            print_aggregates(cfg.router, res.metrics.agg);
        } else if (*cmp) {
            RunConfig base = load_config(cmp_o);
            std::vector<RunConfig> configs;
            std::stringstream ss(routers_csv);
            std::string kind;
            while (std::getline(ss, kind, ',')) {
                RunConfig c = base;
                c.router = kind;
                configs.push_back(std::move(c));
            }
            auto rows = compare(configs, reference, cmp_o.out_dir, cmp_seeds, cmp_force);
            for (const auto& r : rows)
                std::printf("%-12s avg_qos=%.4f (%+.2f%% vs %s)\n", r.router.c_str(),
                            r.agg.avg_qos, 100.0 * r.improvement_vs_reference, reference.c_str());
        } else if (*abl) {
            RunConfig cfg = load_config(abl_o);
            auto rows = ablate(cfg, abl_o.out_dir, abl_seeds);
            for (const auto& r : rows)
                std::printf("%-8s avg_qos=%.4f avg_latency=%.3f\n", r.variant.c_str(), r.avg_qos,
                            r.avg_latency_ms_per_token);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
