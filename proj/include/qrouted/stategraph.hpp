#pragma once
#include <Eigen/Core>
#include <unordered_map>
#include <vector>

#include "qrouted/simcore.hpp"

namespace qrouted {

// Normalization constants fixed at config load so features are scale-free.
struct FeatureScales {
    int max_prompt = 512;
    int max_tokens = 300;
    double latency_slo_ms = 30.0;
    int run_cap = 5;
    int wait_cap = 5;
};

// Per-request state vector: (p_norm, s_hat, d_hat, e, d_cur, l_cur).
struct RequestFeatures {
    static constexpr int kDim = 6;
    double p_norm = 0.0;
    double s_hat = 0.0;
    double d_hat = 0.0;
    double e = 0.0;
    double d_cur = 0.0;
    double l_cur = 0.0;

    Eigen::Matrix<double, kDim, 1> to_vector() const;
};

// De-bucketized predictions needed to featurize one decision: per-expert
// midpoints for the arrived request plus per-resident midpoints for the
// expert each resident is on.
struct PredictionSet {
    Eigen::VectorXd arrived_score_mid;  // N, in [0,1]
    Eigen::VectorXd arrived_len_mid;    // N, tokens
    std::unordered_map<int, std::pair<double, double>> resident;  // id -> (score, len tokens)
};

// Typed graph over {arrived, expert, running, waiting} nodes. Rows are
// deterministic: experts by id, requests by id within their expert. Request
// nodes carry their owning expert; the arrived node connects to every expert
// in both directions. Size varies with occupancy; nothing is padded.
struct HeteroGraph {
    static constexpr int kExpertDim = 3;
    int n_experts = 0;
    Eigen::VectorXd arrived;  // 4 + 2N
    Eigen::MatrixXd expert;   // N x 3: (e_n, |running|/run_cap, |waiting|/wait_cap)
    Eigen::MatrixXd running;  // R x 6
    Eigen::MatrixXd waiting;  // W x 6
    std::vector<int> running_owner;
    std::vector<int> waiting_owner;

    static int arrived_dim(int n_experts) { return 4 + 2 * n_experts; }
};

// Features for one running or waiting snapshot entry. Waiting entries carry
// e = d_cur = 0 and use queueing time for l_cur.
RequestFeatures build_request_features(const SnapshotRequest& entry, double score_mid,
                                       double len_mid_tokens, const FeatureScales& scales);

// Arrived-request feature layout: (p_norm, s_mid[0..N), d_mid[0..N), e, d_cur, l_cur)
// with the 2N prediction midpoints in expert-index order.
Eigen::VectorXd arrived_features(const Request& req, const PredictionSet& preds,
                                 const FeatureScales& scales, double now_ms);

HeteroGraph build_graph(const GlobalSnapshot& snap, const Request& arrived,
                        const PredictionSet& preds, const FeatureScales& scales);

// Reduced state for the flat baseline: (e_n, |running|, |waiting|) per expert,
// concatenated in expert order. Raw counts, no abstraction.
Eigen::VectorXd baseline_features(const GlobalSnapshot& snap);

}  // namespace qrouted
