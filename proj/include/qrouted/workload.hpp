#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace qrouted {

// Cost/capacity/quality profile of one edge expert.
struct ExpertProfile {
    int expert_id = 0;
    double score_mean = 0.7;    // generation score, in [0,1]
    double score_std = 0.1;
    double length_mean = 120.0; // output tokens
    double length_std = 30.0;
    double prompt_mean = 100.0; // shared across the profile set
    double prompt_std = 30.0;
    double kv_capacity = 12000.0;  // token-slots
    double k1 = 0.3;               // ms per prompt token (prefill slope)
    double k2 = 0.01;              // ms per resident token per decode iteration
    double per_token_kv = 1.0;     // token-slots per token

    void validate() const;
};

struct ProfileSet {
    std::vector<ExpertProfile> experts;
    int max_tokens = 300;
    int max_prompt = 512;

    int size() const { return static_cast<int>(experts.size()); }
    void validate() const;
};

inline constexpr int kUnassigned = -1;

// One user request with per-expert ground truth and runtime progress.
struct Request {
    int id = 0;
    double arrival_ms = 0.0;
    int prompt_tokens = 1;
    std::vector<double> score;  // truth per expert, in [0,1]
    std::vector<int> out_len;   // truth per expert, in [1, max_tokens]

    // runtime (owned by the simulator)
    int assigned_expert = kUnassigned;
    bool dropped = false;
    int tokens_done = 0;
    double enqueue_ms = -1.0;
    double prefill_start_ms = -1.0;
    double completion_ms = -1.0;

    bool completed() const { return completion_ms >= 0.0; }
    double best_score() const;
};

struct TraceRow {
    double t_ms = 0.0;
    int prompt_tokens = 1;
    std::vector<double> score;
    std::vector<int> out_len;
};

struct Trace {
    int n_experts = 0;
    std::vector<TraceRow> rows;
};

// Strictly increasing arrival times in [0, horizon_ms); i.i.d. exponential
// gaps with mean 1000/rate_per_s ms. Same seed, same bytes.
std::vector<double> poisson_arrivals(double rate_per_s, double horizon_ms, std::uint64_t seed);

// Poisson arrivals with a sinusoidally modulated rate, for bursty workloads:
// rate(t) = rate_per_s * (1 + burst_amp * sin(2*pi*t/period_ms)).
std::vector<double> bursty_arrivals(double rate_per_s, double horizon_ms, double burst_amp,
                                    double period_ms, std::uint64_t seed);

// Draws per-expert truth from the profile set's clipped Gaussians.
Request sample_request(const ProfileSet& profiles, double arrival_ms, std::uint64_t seed);

// Arrival stream -> fully sampled requests with ids 0..n-1; per-request
// streams are derived from the base seed, so insertion order is irrelevant.
std::vector<Request> build_requests(const ProfileSet& profiles,
                                    const std::vector<double>& arrivals, std::uint64_t seed);

Trace load_trace(const std::filesystem::path& path);
void save_trace(const Trace& trace, const std::filesystem::path& path);
Trace trace_from_requests(const std::vector<Request>& requests, int n_experts);
std::vector<Request> requests_from_trace(const Trace& trace);

// Uniform time scaling onto a target mean rate; gap ratios are preserved.
Trace rescale_trace(const Trace& trace, double target_rate_per_s);

// Mean arrival rate of a trace in requests/s, (n-1)/span.
double trace_rate_per_s(const Trace& trace);

}  // namespace qrouted
