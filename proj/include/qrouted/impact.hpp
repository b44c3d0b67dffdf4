#pragma once
#include <span>
#include <vector>

namespace qrouted {

// Environment-side view of one running request at decision time.
struct ResidentState {
    int id = 0;
    int prompt_tokens = 0;
    int out_len_true = 1;   // d_i
    int tokens_done = 0;    // d_{i,t}
    double l_cur_ms = 0.0;  // current average latency per token
    double score_true = 0.0;
};

struct ImpactEntry {
    int id = 0;
    double l_plus = 0.0;
    double l_proj = 0.0;
    bool would_violate = false;  // l_proj >= L
};

struct ImpactReport {
    std::vector<ImpactEntry> entries;
    double penalty_total = 0.0;  // sum of s_i over projected violators
};

struct CompletionOutcome {
    double score = 0.0;
    double latency_ms_per_token = 0.0;
};

struct RewardBreakdown {
    double completed_gain = 0.0;
    double violation_penalty = 0.0;
    double drop_penalty = 0.0;
    double reward = 0.0;
};

inline constexpr int kDropAction = 0;

double prefill_latency_ms(double k1, int prompt_tokens);
double decode_latency_ms(double k2, std::span<const ResidentState> running);

// Closed form of sum_{k=1}^{K} (p_j + k); the partial decode load an incoming
// request adds while k iterations overlap.
double token_load_sum(int p_j, int K);

// Increase in a resident's final average latency per token caused by routing
// the incoming request (p_j, d_j) onto its expert:
//   (1/d_i) * (k1*p_j + k2 * sum_{k=1}^{min(d_i-d_i_cur, d_j)} (p_j + k))
double latency_increase(double k1, double k2, int p_j, int d_j, int d_i, int d_i_cur);

ImpactReport assess_impact(std::span<const ResidentState> running, int p_j, int d_j_true,
                           double k1, double k2, double latency_slo_ms);

// reward = sum of s over completions meeting the SLO
//        - (routed ? projected-violation penalty : 0)
//        - (dropped ? forfeited best score : 0)
RewardBreakdown qos_reward(std::span<const CompletionOutcome> completions, int action,
                           const ImpactReport& impact, double best_score,
                           double latency_slo_ms);

// completion gains only; no penalty terms
double baseline_reward(std::span<const CompletionOutcome> completions, double latency_slo_ms);

}  // namespace qrouted
