#pragma once
#include <filesystem>
#include <memory>
#include <optional>

#include "qrouted/config.hpp"
#include "qrouted/impact.hpp"
#include "qrouted/metrics.hpp"
#include "qrouted/policies.hpp"

namespace qrouted {

// One loaded decision: the context a router sees plus the reward window
// (completions since the previous decision) and the arrived request's truth.
struct DecisionPoint {
    GlobalSnapshot snap;
    PredictionSet preds;
    std::vector<bool> mask;
    std::vector<CompletionOutcome> window;
    int request_id = 0;
};

// Drives one simulated episode decision by decision: advance to the next
// arrival, expose the routing context, apply the chosen action (charging the
// routing overhead before enqueue), and account rewards. The router is a
// serial stage: a request arriving while the previous one is still being
// routed is decided when the router frees up, so decisions happen at
// max(arrival, clock) and the per-request routing time is enqueue - arrival.
class EpisodeEngine {
public:
    EpisodeEngine(const RunConfig& cfg, std::vector<Request> requests, bool collect_gpu);

    bool done() const { return next_ >= static_cast<int>(ids_.size()); }
    DecisionPoint next_decision();

    struct Applied {
        int effective_action = 0;  // 0 when dropped, incl. rejections
        RewardBreakdown qos;
        double baseline = 0.0;
    };
    Applied apply(int action);

    void finish();  // drain residents; call before building metrics
    MetricsRecord metrics() const;

    MultiExpertSim& sim() { return sim_; }
    const RunConfig& config() const { return cfg_; }
    const Request& current_request() const { return sim_.request(ids_[current_]); }
    const FeatureScales& scales() const { return scales_; }

private:
    PredictionSet build_predictions(const Request& arrived, const GlobalSnapshot& snap) const;
    std::vector<bool> build_mask() const;
    std::vector<ResidentState> residents_of(int expert) const;

    RunConfig cfg_;
    FeatureScales scales_;
    Predictor predictor_;
    MultiExpertSim sim_;
    std::vector<int> ids_;  // arrival order
    int next_ = 0;
    int current_ = -1;
    double decision_now_ = 0.0;
    bool decision_open_ = false;
    std::vector<CompletionOutcome> window_;
    bool finished_ = false;

    void collect(const std::vector<int>& completed);
};

struct EpisodeResult {
    MetricsRecord metrics;
    double total_qos_reward = 0.0;
    double total_baseline_reward = 0.0;
    long decisions = 0;
};

EpisodeResult run_episode(const RunConfig& cfg, Router& router, std::uint64_t workload_seed,
                          bool collect_gpu = true);

struct TrainResult {
    std::filesystem::path checkpoint_stem;
    double best_eval_qos = 0.0;
    long steps_run = 0;
    bool diverged = false;
};

// Interleaved rollout/update SAC training with periodic greedy evaluation on
// a held-out workload seed; the best-evaluation parameters are what gets
// saved. Writes learning_curve.csv and checkpoint.{json,bin} under out_dir.
TrainResult train(const RunConfig& cfg, const std::filesystem::path& out_dir);

// Builds the router named by cfg.router, loading checkpoints for RL kinds.
std::unique_ptr<Router> make_router(const RunConfig& cfg, bool force_checkpoint = false);

struct CompareRow {
    std::string router;
    Aggregates agg;
    double improvement_vs_reference = 0.0;  // (qos - ref_qos)/ref_qos
};

// Shared-workload comparison across routers; every config must carry an
// identical workload/profile section. Averages over n_seeds consecutive
// workload seeds. Writes comparison.csv/.json plus per-run metrics.
std::vector<CompareRow> compare(const std::vector<RunConfig>& configs,
                                const std::string& reference,
                                const std::filesystem::path& out_dir, int n_seeds = 1,
                                bool force_checkpoint = false);

struct AblationRow {
    std::string variant;
    double avg_qos = 0.0;
    double avg_latency_ms_per_token = 0.0;
    double drop_rate = 0.0;
};

// Trains and evaluates {full, no-dsa, ps-pl, zs-pl, ps-zl, zs-zl}; ps-pl is
// configuration-identical to full and shares its trained model.
std::vector<AblationRow> ablate(const RunConfig& cfg, const std::filesystem::path& out_dir,
                                int n_seeds = 1);

void gen_trace(const RunConfig& cfg, const std::filesystem::path& out_path);

// Runs the checkpointed policy greedily and writes metrics; refuses a
// config-hash mismatch unless force.
EpisodeResult evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint_stem,
                       const std::filesystem::path& out_dir, bool force);

}  // namespace qrouted
