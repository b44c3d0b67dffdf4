#include "qrouted/impact.hpp"

#include <algorithm>
#include <stdexcept>

namespace qrouted {

double prefill_latency_ms(double k1, int prompt_tokens) {
    if (k1 <= 0.0) throw std::invalid_argument("k1 must be > 0");
    return k1 * static_cast<double>(prompt_tokens);
}

double decode_latency_ms(double k2, std::span<const ResidentState> running) {
    if (k2 <= 0.0) throw std::invalid_argument("k2 must be > 0");
    double resident_tokens = 0.0;
    for (const auto& r : running) resident_tokens += r.prompt_tokens + r.tokens_done;
    return k2 * resident_tokens;
}

double token_load_sum(int p_j, int K) {
    if (K < 0) throw std::invalid_argument("K must be >= 0");
    double kd = static_cast<double>(K);
    return static_cast<double>(p_j) * kd + kd * (kd + 1.0) / 2.0;
}

double latency_increase(double k1, double k2, int p_j, int d_j, int d_i, int d_i_cur) {
    if (d_i < 1) throw std::invalid_argument("resident output length must be >= 1");
    if (d_i_cur < 0 || d_i_cur > d_i) throw std::invalid_argument("bad resident progress");
    if (d_j < 1) throw std::invalid_argument("incoming output length must be >= 1");
    int K = std::min(d_i - d_i_cur, d_j);
    return (k1 * static_cast<double>(p_j) + k2 * token_load_sum(p_j, K)) /
           static_cast<double>(d_i);
}

ImpactReport assess_impact(std::span<const ResidentState> running, int p_j, int d_j_true,
                           double k1, double k2, double latency_slo_ms) {
    ImpactReport report;
    report.entries.reserve(running.size());
    for (const auto& r : running) {
        ImpactEntry e;
        e.id = r.id;
        e.l_plus = latency_increase(k1, k2, p_j, d_j_true, r.out_len_true, r.tokens_done);
        e.l_proj = r.l_cur_ms + e.l_plus;
        e.would_violate = e.l_proj >= latency_slo_ms;
        if (e.would_violate) report.penalty_total += r.score_true;
        report.entries.push_back(e);
    }
    return report;
}

RewardBreakdown qos_reward(std::span<const CompletionOutcome> completions, int action,
                           const ImpactReport& impact, double best_score,
                           double latency_slo_ms) {
    RewardBreakdown rb;
    for (const auto& c : completions)
        if (c.latency_ms_per_token <= latency_slo_ms) rb.completed_gain += c.score;
    if (action == kDropAction)
        rb.drop_penalty = best_score;
    else
        rb.violation_penalty = impact.penalty_total;
    rb.reward = rb.completed_gain - rb.violation_penalty - rb.drop_penalty;
    return rb;
}

double baseline_reward(std::span<const CompletionOutcome> completions, double latency_slo_ms) {
    double gain = 0.0;
    for (const auto& c : completions)
        if (c.latency_ms_per_token <= latency_slo_ms) gain += c.score;
    return gain;
}

}  // namespace qrouted
