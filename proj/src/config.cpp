#include "qrouted/config.hpp"

#include <fstream>

namespace qrouted {

using nlohmann::json;

void WorkloadConfig::validate() const {
    if (kind != "poisson" && kind != "bursty" && kind != "trace")
        throw std::invalid_argument("unknown workload kind: " + kind);
    if (kind == "trace") {
        if (trace_path.empty()) throw std::invalid_argument("trace workload needs a path");
        if (rescale_rate_per_s < 0.0) throw std::invalid_argument("rescale rate must be >= 0");
        return;
    }
    if (rate_per_s <= 0.0) throw std::invalid_argument("rate_per_s must be > 0");
    if (horizon_ms <= 0.0) throw std::invalid_argument("horizon_ms must be > 0");
    if (kind == "bursty" && (burst_amp < 0.0 || burst_amp >= 1.0 || period_ms <= 0.0))
        throw std::invalid_argument("bad bursty parameters");
}

json WorkloadConfig::to_json() const {
    json j{{"kind", kind}};
    if (kind == "trace") {
        j["path"] = trace_path;
        if (rescale_rate_per_s > 0.0) j["rescale_rate_per_s"] = rescale_rate_per_s;
    } else {
        j["rate_per_s"] = rate_per_s;
        j["horizon_ms"] = horizon_ms;
        if (kind == "bursty") {
            j["burst_amp"] = burst_amp;
            j["period_ms"] = period_ms;
        }
    }
    return j;
}

WorkloadConfig WorkloadConfig::from_json(const json& j) {
    WorkloadConfig w;
    w.kind = j.value("kind", w.kind);
    w.rate_per_s = j.value("rate_per_s", w.rate_per_s);
    w.horizon_ms = j.value("horizon_ms", w.horizon_ms);
    w.burst_amp = j.value("burst_amp", w.burst_amp);
    w.period_ms = j.value("period_ms", w.period_ms);
    w.trace_path = j.value("path", w.trace_path);
    w.rescale_rate_per_s = j.value("rescale_rate_per_s", w.rescale_rate_per_s);
    w.validate();
    return w;
}

Predictor PredictorSettings::build(int max_tokens, std::uint64_t seed) const {
    return Predictor(score, length, {buckets, 1.0}, {buckets, static_cast<double>(max_tokens)},
                     seed);
}

json PredictorSettings::to_json() const {
    return {{"buckets", buckets},
            {"score",
             {{"top1", score.top1_acc}, {"top3", score.top3_acc}, {"mode", to_string(score.mode)}}},
            {"length",
             {{"top1", length.top1_acc},
              {"top3", length.top3_acc},
              {"mode", to_string(length.mode)}}}};
}

PredictorSettings PredictorSettings::from_json(const json& j) {
    PredictorSettings s;
    s.buckets = j.value("buckets", s.buckets);
    if (j.contains("mode")) {
        // global shorthand applied to both predictors
        PredictorMode m = predictor_mode_from_string(j.at("mode").get<std::string>());
        s.score.mode = m;
        s.length.mode = m;
    }
    if (j.contains("score")) {
        const json& sc = j.at("score");
        s.score.top1_acc = sc.value("top1", s.score.top1_acc);
        s.score.top3_acc = sc.value("top3", s.score.top3_acc);
        if (sc.contains("mode"))
            s.score.mode = predictor_mode_from_string(sc.at("mode").get<std::string>());
    }
    if (j.contains("length")) {
        const json& ln = j.at("length");
        s.length.top1_acc = ln.value("top1", s.length.top1_acc);
        s.length.top3_acc = ln.value("top3", s.length.top3_acc);
        if (ln.contains("mode"))
            s.length.mode = predictor_mode_from_string(ln.at("mode").get<std::string>());
    }
    s.score.validate();
    s.length.validate();
    return s;
}

void RunConfig::validate() const {
    profiles.validate();
    workload.validate();
    if (latency_slo_ms <= 0.0) throw std::invalid_argument("latency SLO must be > 0");
    if (routing_overhead_ms < 0.0) throw std::invalid_argument("routing overhead must be >= 0");
    if (gpu_sample_ms <= 0.0) throw std::invalid_argument("gpu_sample_ms must be > 0");
    if (router != "rr" && router != "sqf" && router != "greedy" && router != "baseline-rl" &&
        router != "qos-rl")
        throw std::invalid_argument("unknown router kind: " + router);
    if (!rl.features.empty() && rl.features != "graph" && rl.features != "flat")
        throw std::invalid_argument("rl.features must be graph or flat");
    if (!rl.reward.empty() && rl.reward != "qos" && rl.reward != "baseline")
        throw std::invalid_argument("rl.reward must be qos or baseline");
    sac.validate();
}

json RunConfig::to_json() const {
    json experts = json::array();
    for (const auto& e : profiles.experts)
        experts.push_back({{"score_mean", e.score_mean},
                           {"score_std", e.score_std},
                           {"length_mean", e.length_mean},
                           {"length_std", e.length_std},
                           {"kv_capacity", e.kv_capacity},
                           {"k1", e.k1},
                           {"k2", e.k2},
                           {"per_token_kv", e.per_token_kv}});
    json j{{"experts", experts},
           {"prompt_mean", profiles.experts.front().prompt_mean},
           {"prompt_std", profiles.experts.front().prompt_std},
           {"max_tokens", profiles.max_tokens},
           {"max_prompt", profiles.max_prompt},
           {"run_cap", limits.run_cap},
           {"wait_cap", limits.wait_cap},
           {"latency_slo_ms", latency_slo_ms},
           {"routing_overhead_ms", routing_overhead_ms},
           {"workload", workload.to_json()},
           {"router", router},
           {"seed", seed},
           {"predictor", predictor.to_json()},
           {"sac", sac.to_json()},
           {"gpu_sample_ms", gpu_sample_ms}};
    if (!rl.features.empty()) j["rl"]["features"] = rl.features;
    if (!rl.reward.empty()) j["rl"]["reward"] = rl.reward;
    if (!checkpoints.empty()) j["checkpoints"] = checkpoints;
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    c.profiles.experts.clear();
    double prompt_mean = j.value("prompt_mean", 100.0);
    double prompt_std = j.value("prompt_std", 30.0);
    int id = 0;
    for (const auto& ej : j.at("experts")) {
        ExpertProfile e;
        e.expert_id = id++;
        e.score_mean = ej.value("score_mean", e.score_mean);
        e.score_std = ej.value("score_std", e.score_std);
        e.length_mean = ej.value("length_mean", e.length_mean);
        e.length_std = ej.value("length_std", e.length_std);
        e.kv_capacity = ej.value("kv_capacity", e.kv_capacity);
        e.k1 = ej.value("k1", e.k1);
        e.k2 = ej.value("k2", e.k2);
        e.per_token_kv = ej.value("per_token_kv", e.per_token_kv);
        e.prompt_mean = prompt_mean;
        e.prompt_std = prompt_std;
        c.profiles.experts.push_back(e);
    }
    c.profiles.max_tokens = j.value("max_tokens", c.profiles.max_tokens);
    c.profiles.max_prompt = j.value("max_prompt", c.profiles.max_prompt);
    c.limits.run_cap = j.value("run_cap", c.limits.run_cap);
    c.limits.wait_cap = j.value("wait_cap", c.limits.wait_cap);
    c.latency_slo_ms = j.value("latency_slo_ms", c.latency_slo_ms);
    c.routing_overhead_ms = j.value("routing_overhead_ms", c.routing_overhead_ms);
    if (j.contains("workload")) c.workload = WorkloadConfig::from_json(j.at("workload"));
    c.router = j.value("router", c.router);
    c.seed = j.value("seed", c.seed);
    if (j.contains("predictor")) c.predictor = PredictorSettings::from_json(j.at("predictor"));
    if (j.contains("sac")) c.sac = SacConfig::from_json(j.at("sac"));
    if (j.contains("rl")) {
        c.rl.features = j.at("rl").value("features", "");
        c.rl.reward = j.at("rl").value("reward", "");
    }
    c.gpu_sample_ms = j.value("gpu_sample_ms", c.gpu_sample_ms);
    if (j.contains("checkpoints"))
        c.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path.string());
    return from_json(json::parse(in));
}

FeatureScales RunConfig::scales() const {
    return {profiles.max_prompt, profiles.max_tokens, latency_slo_ms, limits.run_cap,
            limits.wait_cap};
}

EncoderKind RunConfig::encoder_kind() const {
    if (!rl.features.empty()) return rl.features == "graph" ? EncoderKind::Han : EncoderKind::Flat;
    return router == "baseline-rl" ? EncoderKind::Flat : EncoderKind::Han;
}

bool RunConfig::uses_qos_reward() const {
    if (!rl.reward.empty()) return rl.reward == "qos";
    return router != "baseline-rl";
}

std::string RunConfig::config_hash() const {
    json j{{"n_experts", n_experts()},
           {"max_tokens", profiles.max_tokens},
           {"max_prompt", profiles.max_prompt},
           {"run_cap", limits.run_cap},
           {"wait_cap", limits.wait_cap},
           {"latency_slo_ms", latency_slo_ms},
           {"buckets", predictor.buckets},
           {"encoder", encoder_kind() == EncoderKind::Han ? "han" : "flat"},
           {"hidden", sac.hidden},
           {"heads", sac.heads},
           {"layers", sac.layers}};
    std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<Request> RunConfig::make_requests(std::uint64_t workload_seed) const {
    if (workload.kind == "trace") {
        Trace trace = load_trace(workload.trace_path);
        if (static_cast<int>(trace.n_experts) != n_experts())
            throw std::runtime_error("trace expert count does not match config");
        if (workload.rescale_rate_per_s > 0.0)
            trace = rescale_trace(trace, workload.rescale_rate_per_s);
        return requests_from_trace(trace);
    }
    std::vector<double> arrivals =
        workload.kind == "poisson"
            ? poisson_arrivals(workload.rate_per_s, workload.horizon_ms, workload_seed)
            : bursty_arrivals(workload.rate_per_s, workload.horizon_ms, workload.burst_amp,
                              workload.period_ms, workload_seed);
    return build_requests(profiles, arrivals, mix_seed(workload_seed, 0x7EFu));
}

}  // namespace qrouted
