#include "qrouted/stategraph.hpp"

#include <algorithm>
#include <stdexcept>

namespace qrouted {

Eigen::Matrix<double, RequestFeatures::kDim, 1> RequestFeatures::to_vector() const {
    Eigen::Matrix<double, kDim, 1> v;
    v << p_norm, s_hat, d_hat, e, d_cur, l_cur;
    return v;
}

RequestFeatures build_request_features(const SnapshotRequest& entry, double score_mid,
                                       double len_mid_tokens, const FeatureScales& scales) {
    RequestFeatures f;
    f.p_norm = static_cast<double>(entry.prompt_tokens) / scales.max_prompt;
    f.s_hat = score_mid;
    f.d_hat = len_mid_tokens / scales.max_tokens;
    f.e = entry.mem_share;
    f.d_cur = static_cast<double>(entry.tokens_done) / scales.max_tokens;
    f.l_cur = (entry.age_ms / std::max(entry.tokens_done, 1)) / scales.latency_slo_ms;
    return f;
}

Eigen::VectorXd arrived_features(const Request& req, const PredictionSet& preds,
                                 const FeatureScales& scales, double now_ms) {
    const int n = static_cast<int>(preds.arrived_score_mid.size());
    if (preds.arrived_len_mid.size() != n)
        throw std::invalid_argument("prediction vectors disagree on expert count");
    Eigen::VectorXd v(HeteroGraph::arrived_dim(n));
    v(0) = static_cast<double>(req.prompt_tokens) / scales.max_prompt;
    v.segment(1, n) = preds.arrived_score_mid;
    v.segment(1 + n, n) = preds.arrived_len_mid / static_cast<double>(scales.max_tokens);
    v(1 + 2 * n) = 0.0;                                            // e
    v(2 + 2 * n) = 0.0;                                            // d_cur
    v(3 + 2 * n) = (now_ms - req.arrival_ms) / scales.latency_slo_ms;  // l_cur
    return v;
}

namespace {

std::pair<double, double> resident_mid(const PredictionSet& preds, int id) {
    auto it = preds.resident.find(id);
    if (it == preds.resident.end())
        throw std::invalid_argument("missing resident prediction for request " +
                                    std::to_string(id));
    return it->second;
}

}  // namespace

HeteroGraph build_graph(const GlobalSnapshot& snap, const Request& arrived,
                        const PredictionSet& preds, const FeatureScales& scales) {
    HeteroGraph g;
    g.n_experts = static_cast<int>(snap.experts.size());
    g.arrived = arrived_features(arrived, preds, scales, snap.now_ms);

    g.expert.resize(g.n_experts, HeteroGraph::kExpertDim);
    int total_running = 0, total_waiting = 0;
    for (const auto& e : snap.experts) {
        total_running += static_cast<int>(e.running.size());
        total_waiting += static_cast<int>(e.waiting.size());
    }
    g.running.resize(total_running, RequestFeatures::kDim);
    g.waiting.resize(total_waiting, RequestFeatures::kDim);
    g.running_owner.reserve(total_running);
    g.waiting_owner.reserve(total_waiting);

    int run_row = 0, wait_row = 0;
    for (int n = 0; n < g.n_experts; ++n) {
        const auto& e = snap.experts[n];
        g.expert(n, 0) = e.utilization;
        g.expert(n, 1) = static_cast<double>(e.running.size()) / scales.run_cap;
        g.expert(n, 2) = static_cast<double>(e.waiting.size()) / scales.wait_cap;

        auto sorted = [](std::vector<SnapshotRequest> v) {
            std::sort(v.begin(), v.end(),
                      [](const SnapshotRequest& a, const SnapshotRequest& b) { return a.id < b.id; });
            return v;
        };
        for (const auto& r : sorted(e.running)) {
            auto [s_mid, d_mid] = resident_mid(preds, r.id);
            g.running.row(run_row) = build_request_features(r, s_mid, d_mid, scales).to_vector();
            g.running_owner.push_back(n);
            ++run_row;
        }
        for (const auto& r : sorted(e.waiting)) {
            auto [s_mid, d_mid] = resident_mid(preds, r.id);
            g.waiting.row(wait_row) = build_request_features(r, s_mid, d_mid, scales).to_vector();
            g.waiting_owner.push_back(n);
            ++wait_row;
        }
    }
    return g;
}

Eigen::VectorXd baseline_features(const GlobalSnapshot& snap) {
    Eigen::VectorXd v(3 * snap.experts.size());
    for (std::size_t n = 0; n < snap.experts.size(); ++n) {
        v(3 * n + 0) = snap.experts[n].utilization;
        v(3 * n + 1) = static_cast<double>(snap.experts[n].running.size());
        v(3 * n + 2) = static_cast<double>(snap.experts[n].waiting.size());
    }
    return v;
}

}  // namespace qrouted
