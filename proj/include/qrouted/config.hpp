#pragma once
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "qrouted/agent.hpp"
#include "qrouted/predictor.hpp"
#include "qrouted/simcore.hpp"
#include "qrouted/stategraph.hpp"

namespace qrouted {

struct WorkloadConfig {
    std::string kind = "poisson";  // poisson | bursty | trace
    double rate_per_s = 4.0;
    double horizon_ms = 500000.0;
    double burst_amp = 0.5;
    double period_ms = 60000.0;
    std::string trace_path;
    double rescale_rate_per_s = 0.0;  // 0 = replay as-is

    void validate() const;
    nlohmann::json to_json() const;
    static WorkloadConfig from_json(const nlohmann::json& j);
};

struct PredictorSettings {
    int buckets = 10;
    PredictorConfig score{0.6339, 0.9778, PredictorMode::Emulated};
    PredictorConfig length{0.7297, 0.8471, PredictorMode::Emulated};

    Predictor build(int max_tokens, std::uint64_t seed) const;
    nlohmann::json to_json() const;
    static PredictorSettings from_json(const nlohmann::json& j);
};

// Ablation overrides; empty strings defer to the router kind.
struct RlOptions {
    std::string features;  // graph | flat
    std::string reward;    // qos | baseline
};

struct RunConfig {
    ProfileSet profiles;
    SimLimits limits;
    double latency_slo_ms = 30.0;
    double routing_overhead_ms = 5.0;
    WorkloadConfig workload;
    std::string router = "rr";  // rr | sqf | greedy | baseline-rl | qos-rl
    std::uint64_t seed = 1;
    PredictorSettings predictor;
    SacConfig sac;
    RlOptions rl;
    double gpu_sample_ms = 100.0;
    std::map<std::string, std::string> checkpoints;  // router kind -> checkpoint stem

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);

    FeatureScales scales() const;
    EncoderKind encoder_kind() const;
    bool uses_qos_reward() const;
    int n_experts() const { return profiles.size(); }

    // Environment-compatibility fingerprint baked into checkpoints.
    std::string config_hash() const;

    // Realizes the workload: sampled arrivals + truths, or the trace.
    std::vector<Request> make_requests(std::uint64_t workload_seed) const;
};

}  // namespace qrouted
