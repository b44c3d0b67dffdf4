#include "qrouted/harness.hpp"

#include <algorithm>
#include <fstream>

namespace qrouted {

namespace {

std::vector<int> arrival_order(const std::vector<Request>& requests) {
    std::vector<int> ids(requests.size());
    for (std::size_t i = 0; i < requests.size(); ++i) ids[i] = requests[i].id;
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (requests[a].arrival_ms != requests[b].arrival_ms)
            return requests[a].arrival_ms < requests[b].arrival_ms;
        return a < b;
    });
    return ids;
}

}  // namespace

EpisodeEngine::EpisodeEngine(const RunConfig& cfg, std::vector<Request> requests, bool collect_gpu)
    : cfg_(cfg),
      scales_(cfg.scales()),
      predictor_(cfg.predictor.build(cfg.profiles.max_tokens, mix_seed(cfg.seed, 0x9E0Du))),
      sim_(cfg.profiles, cfg.limits, std::move(requests)) {
    ids_ = arrival_order(sim_.requests());
    if (collect_gpu) sim_.set_gpu_sampler(cfg.gpu_sample_ms);
}

void EpisodeEngine::collect(const std::vector<int>& completed) {
    for (int id : completed) {
        const Request& r = sim_.request(id);
        double l = (r.completion_ms - r.arrival_ms) / r.out_len[r.assigned_expert];
        window_.push_back({r.score[r.assigned_expert], l});
    }
}

PredictionSet EpisodeEngine::build_predictions(const Request& arrived,
                                               const GlobalSnapshot& snap) const {
    PredictionSet p;
    const int n = static_cast<int>(snap.experts.size());
    p.arrived_score_mid.resize(n);
    p.arrived_len_mid.resize(n);
    for (int e = 0; e < n; ++e) {
        p.arrived_score_mid(e) = predictor_.predict_midpoint(arrived, e, PredictKind::Score);
        p.arrived_len_mid(e) = predictor_.predict_midpoint(arrived, e, PredictKind::Length);
    }
    for (const auto& se : snap.experts) {
        auto add = [&](const SnapshotRequest& sr) {
            const Request& req = sim_.request(sr.id);
            p.resident[sr.id] = {
                predictor_.predict_midpoint(req, se.expert_id, PredictKind::Score),
                predictor_.predict_midpoint(req, se.expert_id, PredictKind::Length)};
        };
        for (const auto& sr : se.running) add(sr);
        for (const auto& sr : se.waiting) add(sr);
    }
    return p;
}

std::vector<bool> EpisodeEngine::build_mask() const {
    std::vector<bool> mask(sim_.n_experts() + 1, false);
    mask[0] = true;  // drop is always available
    for (int e = 0; e < sim_.n_experts(); ++e)
        mask[e + 1] =
            static_cast<int>(sim_.expert(e).waiting().size()) < cfg_.limits.wait_cap;
    return mask;
}

std::vector<ResidentState> EpisodeEngine::residents_of(int expert) const {
    std::vector<ResidentState> out;
    double now = sim_.clock();
    for (int id : sim_.expert(expert).running()) {
        const Request& r = sim_.request(id);
        ResidentState rs;
        rs.id = id;
        rs.prompt_tokens = r.prompt_tokens;
        rs.out_len_true = r.out_len[expert];
        rs.tokens_done = r.tokens_done;
        rs.l_cur_ms = (now - r.arrival_ms) / std::max(r.tokens_done, 1);
        rs.score_true = r.score[expert];
        out.push_back(rs);
    }
    return out;
}

DecisionPoint EpisodeEngine::next_decision() {
    if (done()) throw std::logic_error("episode exhausted");
    if (decision_open_) throw std::logic_error("previous decision not applied");
    current_ = next_++;
    const Request& r = sim_.request(ids_[current_]);
    decision_now_ = std::max(r.arrival_ms, sim_.clock());
    collect(sim_.advance_until(decision_now_));
    DecisionPoint dp;
    dp.snap = sim_.snapshot(decision_now_);
    dp.preds = build_predictions(r, dp.snap);
    dp.mask = build_mask();
    dp.window = window_;
    dp.request_id = r.id;
    decision_open_ = true;
    return dp;
}

EpisodeEngine::Applied EpisodeEngine::apply(int action) {
    if (!decision_open_) throw std::logic_error("no open decision");
    decision_open_ = false;
    const Request& r = sim_.request(ids_[current_]);
    const int n = sim_.n_experts();
    if (action < 0 || action > n) throw std::out_of_range("action out of range");

    ImpactReport impact;
    if (action != kDropAction) {
        int e = action - 1;
        impact = assess_impact(residents_of(e), r.prompt_tokens, r.out_len[e],
                               sim_.expert(e).profile().k1, sim_.expert(e).profile().k2,
                               cfg_.latency_slo_ms);
    }

    std::vector<CompletionOutcome> window = std::move(window_);
    window_.clear();

    Applied applied;
    applied.baseline = baseline_reward(window, cfg_.latency_slo_ms);

    double t_enq = decision_now_ + cfg_.routing_overhead_ms;
    collect(sim_.advance_until(t_enq));

    bool dropped = action == kDropAction;
    if (!dropped) {
        RouteResult res = sim_.route_into(action - 1, r.id, t_enq);
        if (res.accepted) {
            applied.effective_action = action;
        } else {
            dropped = true;  // rejection is a forced drop
        }
    }
    if (dropped) {
        sim_.mark_dropped(r.id);
        applied.effective_action = kDropAction;
        applied.qos =
            qos_reward(window, kDropAction, impact, r.best_score(), cfg_.latency_slo_ms);
    } else {
        applied.qos = qos_reward(window, action, impact, r.best_score(), cfg_.latency_slo_ms);
    }
    return applied;
}

void EpisodeEngine::finish() {
    if (finished_) return;
    sim_.drain();
    finished_ = true;
}

MetricsRecord EpisodeEngine::metrics() const {
    if (!finished_) throw std::logic_error("finish() the episode first");
    return build_metrics(sim_.requests(), cfg_.latency_slo_ms, sim_.gpu_samples());
}

EpisodeResult run_episode(const RunConfig& cfg, Router& router, std::uint64_t workload_seed,
                          bool collect_gpu) {
    EpisodeEngine eng(cfg, cfg.make_requests(workload_seed), collect_gpu);
    router.reset();
    EpisodeResult res;
    while (!eng.done()) {
        DecisionPoint dp = eng.next_decision();
        RoutingContext ctx{dp.snap, eng.current_request(), dp.preds, dp.mask, eng.scales()};
        int action = router.decide(ctx);
        auto applied = eng.apply(action);
        res.total_qos_reward += applied.qos.reward;
        res.total_baseline_reward += applied.baseline;
        ++res.decisions;
    }
    eng.finish();
    res.metrics = eng.metrics();
    return res;
}

namespace {

struct EvalPoint {
    long step;
    double reward;
    double avg_qos;
};

void write_learning_curve(const std::vector<EvalPoint>& curve,
                          const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "steps,eval_reward,eval_avg_qos\n";
    for (const auto& p : curve)
        out << p.step << ',' << format_double(p.reward) << ',' << format_double(p.avg_qos)
            << '\n';
}

EvalPoint greedy_eval(const RunConfig& cfg, const std::shared_ptr<SacAgent>& agent, long step) {
    RunConfig eval_cfg = cfg;
    if (cfg.sac.eval_horizon_ms > 0.0) eval_cfg.workload.horizon_ms = cfg.sac.eval_horizon_ms;
    RlRouter router(agent, cfg.router);
    EpisodeResult r = run_episode(eval_cfg, router, mix_seed(cfg.seed, 0xE7A1u), false);
    double reward = cfg.uses_qos_reward() ? r.total_qos_reward : r.total_baseline_reward;
    return {step, reward, r.metrics.agg.avg_qos};
}

}  // namespace

TrainResult train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const EncoderKind kind = cfg.encoder_kind();
    nn::HanConfig han{cfg.n_experts(), cfg.sac.hidden, cfg.sac.heads, cfg.sac.layers};
    auto agent = std::make_shared<SacAgent>(kind, han, 3 * cfg.n_experts(), cfg.sac, cfg.seed);
    Rng warm_rng(mix_seed(cfg.seed, 0xBEEFu));

    std::vector<EvalPoint> curve;
    nn::ParamStore best_params = agent->params();
    double best_qos = -1.0;
    long step = 0;
    bool diverged = false;

    for (long episode = 0; step < cfg.sac.steps && !diverged; ++episode) {
        EpisodeEngine eng(cfg, cfg.make_requests(mix_seed(cfg.seed, 1000 + episode)), false);
        std::optional<Transition> pending;
        while (!eng.done() && step < cfg.sac.steps && !diverged) {
            DecisionPoint dp = eng.next_decision();
            RoutingContext ctx{dp.snap, eng.current_request(), dp.preds, dp.mask, eng.scales()};
            StoredState state = make_stored_state(ctx, kind);

            if (pending) {
                pending->next_state = state;
                pending->next_mask = dp.mask;
                agent->push_transition(std::move(*pending));
                pending.reset();
            }

            int action;
            if (step < cfg.sac.warmup_steps) {
                std::vector<int> valid;
                for (int a = 0; a < static_cast<int>(dp.mask.size()); ++a)
                    if (dp.mask[a]) valid.push_back(a);
                action = valid[warm_rng.below(valid.size())];
            } else {
                action = agent->select_action(state, dp.mask, /*greedy=*/false);
            }

            auto applied = eng.apply(action);
            double reward =
                cfg.uses_qos_reward() ? applied.qos.reward : applied.baseline;
            Transition t;
            t.state = std::move(state);
            t.action = action;
            t.reward = reward;
            t.mask = dp.mask;
            pending = std::move(t);

            ++step;
            if (step >= cfg.sac.warmup_steps && step % cfg.sac.update_every == 0 &&
                agent->can_update()) {
                try {
                    agent->update_from_replay();
                } catch (const DivergenceError&) {
                    diverged = true;  // keep the last good parameters
                }
            }
            if (!diverged && step % cfg.sac.eval_interval == 0) {
                EvalPoint p = greedy_eval(cfg, agent, step);
                curve.push_back(p);
                if (p.avg_qos > best_qos) {
                    best_qos = p.avg_qos;
                    best_params = agent->params();
                }
            }
        }
        eng.finish();
        // the last decision of an episode has no next state to bootstrap from
        pending.reset();
    }

    if (best_qos < 0.0) best_params = agent->params();
    agent->params() = best_params;
    std::filesystem::path stem = out_dir / "checkpoint";
    agent->save(stem, {{"config_hash", cfg.config_hash()}, {"router", cfg.router}});
    write_learning_curve(curve, out_dir / "learning_curve.csv");

    TrainResult res;
    res.checkpoint_stem = stem;
    res.best_eval_qos = best_qos;
    res.steps_run = step;
    res.diverged = diverged;
    return res;
}

namespace {

std::shared_ptr<SacAgent> load_agent_checked(const RunConfig& cfg,
                                             const std::filesystem::path& stem, bool force) {
    nlohmann::json manifest;
    auto agent = std::make_shared<SacAgent>(SacAgent::load(stem, cfg.sac, &manifest));
    std::string saved_hash = manifest.value("config_hash", "");
    if (!force && saved_hash != cfg.config_hash())
        throw std::runtime_error("checkpoint config hash " + saved_hash +
                                 " does not match environment " + cfg.config_hash() +
                                 " (use --force to override)");
    return agent;
}

}  // namespace

std::unique_ptr<Router> make_router(const RunConfig& cfg, bool force_checkpoint) {
    if (cfg.router == "rr") return std::make_unique<RoundRobinRouter>();
    if (cfg.router == "sqf") return std::make_unique<ShortestQueueRouter>();
    if (cfg.router == "greedy") return std::make_unique<GreedyScoreRouter>();
    if (is_rl_router(cfg.router)) {
        auto it = cfg.checkpoints.find(cfg.router);
        if (it == cfg.checkpoints.end())
            throw std::runtime_error("router " + cfg.router +
                                     " needs a checkpoint (config key checkpoints." + cfg.router +
                                     " or --checkpoint)");
        return std::make_unique<RlRouter>(load_agent_checked(cfg, it->second, force_checkpoint),
                                          cfg.router);
    }
    throw std::invalid_argument("unknown router kind: " + cfg.router);
}

namespace {

nlohmann::json workload_fingerprint(const RunConfig& cfg) {
    nlohmann::json j = cfg.to_json();
    j.erase("router");
    if (j.contains("rl")) j.erase("rl");
    if (j.contains("checkpoints")) j.erase("checkpoints");
    j.erase("sac");
    return j;
}

}  // namespace

std::vector<CompareRow> compare(const std::vector<RunConfig>& configs,
                                const std::string& reference,
                                const std::filesystem::path& out_dir, int n_seeds,
                                bool force_checkpoint) {
    if (configs.empty()) throw std::invalid_argument("compare needs at least one config");
    if (n_seeds < 1) throw std::invalid_argument("n_seeds must be >= 1");
    const std::string fp = workload_fingerprint(configs.front()).dump();
    for (const auto& c : configs)
        if (workload_fingerprint(c).dump() != fp)
            throw std::invalid_argument("compare requires identical workload configs");

    std::filesystem::create_directories(out_dir);
    std::vector<CompareRow> rows;
    for (const auto& cfg : configs) {
        auto router = make_router(cfg, force_checkpoint);
        Aggregates acc;
        for (int s = 0; s < n_seeds; ++s) {
            EpisodeResult r = run_episode(cfg, *router, cfg.seed + s);
            write_metrics(r.metrics,
                          out_dir / cfg.router / ("seed" + std::to_string(cfg.seed + s)));
            acc.avg_qos += r.metrics.agg.avg_qos;
            acc.avg_latency_ms_per_token += r.metrics.agg.avg_latency_ms_per_token;
            acc.violation_rate += r.metrics.agg.violation_rate;
            acc.drop_rate += r.metrics.agg.drop_rate;
            acc.n_total += r.metrics.agg.n_total;
            acc.n_completed += r.metrics.agg.n_completed;
            acc.n_dropped += r.metrics.agg.n_dropped;
            acc.n_violations += r.metrics.agg.n_violations;
        }
        acc.avg_qos /= n_seeds;
        acc.avg_latency_ms_per_token /= n_seeds;
        acc.violation_rate /= n_seeds;
        acc.drop_rate /= n_seeds;
        rows.push_back({cfg.router, acc, 0.0});
    }

    auto ref = std::find_if(rows.begin(), rows.end(),
                            [&](const CompareRow& r) { return r.router == reference; });
    if (ref == rows.end()) throw std::invalid_argument("reference router not in comparison");
    for (auto& r : rows)
        r.improvement_vs_reference =
            ref->agg.avg_qos > 0.0 ? (r.agg.avg_qos - ref->agg.avg_qos) / ref->agg.avg_qos : 0.0;

    std::ofstream csv(out_dir / "comparison.csv");
    csv << "router,avg_qos,avg_latency_ms_per_token,violation_rate,drop_rate,improvement_vs_"
        << reference << '\n';
    nlohmann::ordered_json jrows = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        csv << r.router << ',' << format_double(r.agg.avg_qos) << ','
            << format_double(r.agg.avg_latency_ms_per_token) << ','
            << format_double(r.agg.violation_rate) << ',' << format_double(r.agg.drop_rate)
            << ',' << format_double(r.improvement_vs_reference) << '\n';
        nlohmann::ordered_json jr = aggregates_to_json(r.agg);
        jr["router"] = r.router;
        jr["improvement_vs_reference"] = r.improvement_vs_reference;
        jrows.push_back(jr);
    }
    std::ofstream js(out_dir / "comparison.json");
    js << nlohmann::ordered_json{{"reference", reference}, {"rows", jrows}}.dump(2) << '\n';
    return rows;
}

std::vector<AblationRow> ablate(const RunConfig& base, const std::filesystem::path& out_dir,
                                int n_seeds) {
    struct Variant {
        std::string name;
        std::string features;
        PredictorMode score_mode;
        PredictorMode length_mode;
        bool alias_full;
    };
    const std::vector<Variant> variants = {
        {"full", "graph", PredictorMode::Emulated, PredictorMode::Emulated, false},
        {"no-dsa", "flat", PredictorMode::Emulated, PredictorMode::Emulated, false},
        {"ps-pl", "graph", PredictorMode::Emulated, PredictorMode::Emulated, true},
        {"zs-pl", "graph", PredictorMode::Zero, PredictorMode::Emulated, false},
        {"ps-zl", "graph", PredictorMode::Emulated, PredictorMode::Zero, false},
        {"zs-zl", "graph", PredictorMode::Zero, PredictorMode::Zero, false},
    };

    std::filesystem::create_directories(out_dir);
    std::vector<AblationRow> rows;
    AblationRow full_row;
    for (const auto& v : variants) {
        if (v.alias_full) {
            AblationRow row = full_row;
            row.variant = v.name;
            rows.push_back(row);
            continue;
        }
        RunConfig cfg = base;
        cfg.router = "qos-rl";
        cfg.rl.features = v.features;
        cfg.rl.reward = "qos";
        cfg.predictor.score.mode = v.score_mode;
        cfg.predictor.length.mode = v.length_mode;
        TrainResult tr = train(cfg, out_dir / v.name);
        cfg.checkpoints[cfg.router] = tr.checkpoint_stem.string();
        auto router = make_router(cfg);

        AblationRow row;
        row.variant = v.name;
        for (int s = 0; s < n_seeds; ++s) {
            EpisodeResult r = run_episode(cfg, *router, cfg.seed + s, false);
            row.avg_qos += r.metrics.agg.avg_qos;
            row.avg_latency_ms_per_token += r.metrics.agg.avg_latency_ms_per_token;
            row.drop_rate += r.metrics.agg.drop_rate;
        }
        row.avg_qos /= n_seeds;
        row.avg_latency_ms_per_token /= n_seeds;
        row.drop_rate /= n_seeds;
        rows.push_back(row);
        if (v.name == "full") full_row = row;
    }

    std::ofstream csv(out_dir / "ablation.csv");
    csv << "variant,avg_qos,avg_latency_ms_per_token,drop_rate\n";
    nlohmann::ordered_json jrows = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        csv << r.variant << ',' << format_double(r.avg_qos) << ','
            << format_double(r.avg_latency_ms_per_token) << ',' << format_double(r.drop_rate)
            << '\n';
        jrows.push_back({{"variant", r.variant},
                         {"avg_qos", r.avg_qos},
                         {"avg_latency_ms_per_token", r.avg_latency_ms_per_token},
                         {"drop_rate", r.drop_rate}});
    }
    std::ofstream js(out_dir / "ablation.json");
    js << jrows.dump(2) << '\n';
    return rows;
}

void gen_trace(const RunConfig& cfg, const std::filesystem::path& out_path) {
    std::vector<Request> requests = cfg.make_requests(cfg.seed);
    save_trace(trace_from_requests(requests, cfg.n_experts()), out_path);
}

EpisodeResult evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint_stem,
                       const std::filesystem::path& out_dir, bool force) {
    auto agent = load_agent_checked(cfg, checkpoint_stem, force);
    RlRouter router(agent, cfg.router);
    EpisodeResult res = run_episode(cfg, router, cfg.seed);
    write_metrics(res.metrics, out_dir);
    return res;
}

}  // namespace qrouted
