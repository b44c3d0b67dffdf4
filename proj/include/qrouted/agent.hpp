#pragma once
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "qrouted/neural.hpp"
#include "qrouted/rng.hpp"
#include "qrouted/stategraph.hpp"

namespace qrouted {

struct SacConfig {
    double gamma = 0.99;
    double alpha = 0.2;  // fixed entropy temperature
    double lr = 3e-4;
    double tau = 0.005;
    int replay_capacity = 100000;
    int batch_size = 256;
    long steps = 50000;
    int warmup_steps = 500;
    int update_every = 1;
    int eval_interval = 2000;
    double eval_horizon_ms = 0.0;  // 0 = use the workload horizon
    int hidden = 64;
    int heads = 4;
    int layers = 2;

    void validate() const;
    nlohmann::json to_json() const;
    static SacConfig from_json(const nlohmann::json& j);
};

enum class EncoderKind { Han, Flat };

// State as stored in replay: the decision graph for the HAN path, or the raw
// expert-feature vector for the flat baseline.
struct StoredState {
    HeteroGraph graph;
    Eigen::VectorXd flat;
};

struct Transition {
    StoredState state;
    int action = 0;  // 0 = drop, n+1 = expert n
    double reward = 0.0;
    StoredState next_state;
    bool done = false;
    std::vector<bool> mask;
    std::vector<bool> next_mask;
};

// Ring buffer with seeded uniform sampling (with replacement).
class ReplayBuffer {
public:
    explicit ReplayBuffer(int capacity);
    void push(Transition t);
    std::vector<const Transition*> sample(int batch, std::uint64_t seed) const;
    std::vector<std::size_t> sample_indices(int batch, std::uint64_t seed) const;
    std::size_t size() const { return items_.size(); }
    int capacity() const { return capacity_; }
    const Transition& at(std::size_t i) const { return items_[i]; }

private:
    int capacity_;
    std::size_t next_ = 0;
    std::vector<Transition> items_;
};

// Masked categorical over logits: softmax over valid actions, exactly zero
// elsewhere. Greedy mode breaks probability ties toward the lowest index.
Eigen::VectorXd masked_policy(const Eigen::VectorXd& logits, const std::vector<bool>& mask);
int categorical_action(const Eigen::VectorXd& logits, const std::vector<bool>& mask, bool greedy,
                       Rng& rng);

// Discrete-SAC bootstrap target:
//   y = r + gamma*(1-done)*sum_a pi(a|s') * (min_q(a) - alpha*log pi(a|s'))
// with the sum over valid actions of the next state.
double critic_target(double reward, double gamma, bool done, const Eigen::VectorXd& next_pi,
                     const Eigen::VectorXd& next_min_q, double alpha,
                     const std::vector<bool>& next_mask);

struct UpdateStats {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double mean_entropy = 0.0;
    double mean_q = 0.0;
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Soft actor-critic over the shared encoder (HAN or flat MLP): categorical
// actor, twin critics, soft-updated target copies, one Adam over everything.
class SacAgent {
public:
    SacAgent(EncoderKind kind, nn::HanConfig han_cfg, int flat_dim, SacConfig cfg,
             std::uint64_t seed);

    int n_actions() const { return han_cfg_.n_experts + 1; }
    EncoderKind encoder_kind() const { return kind_; }
    const SacConfig& config() const { return cfg_; }
    const nn::HanConfig& han_config() const { return han_cfg_; }

    int select_action(const StoredState& s, const std::vector<bool>& mask, bool greedy);
    Eigen::VectorXd policy(const StoredState& s, const std::vector<bool>& mask);
    Eigen::VectorXd q_values(const StoredState& s);  // min of the twin critics

    Eigen::VectorXd critic_targets(const std::vector<const Transition*>& batch);
    UpdateStats update(const std::vector<const Transition*>& batch);

    void push_transition(Transition t) { replay_.push(std::move(t)); }
    const ReplayBuffer& replay() const { return replay_; }
    bool can_update() const { return static_cast<int>(replay_.size()) >= cfg_.batch_size; }
    UpdateStats update_from_replay();

    nn::ParamStore& params() { return online_; }
    const nn::ParamStore& params() const { return online_; }
    const nn::ParamStore& target_params() const { return target_; }
    void set_tau(double tau) { cfg_.tau = tau; }

    long training_step() const { return training_step_; }
    void set_training_step(long s) { training_step_ = s; }

    void save(const std::filesystem::path& stem, const nlohmann::json& extra) const;
    static SacAgent load(const std::filesystem::path& stem, SacConfig cfg,
                         nlohmann::json* manifest_out = nullptr);

    // encoder forward used by both action selection and updates
    nn::Var encode(nn::ParamBinder& p, std::span<const StoredState* const> states,
                   nn::AttnStats* stats = nullptr) const;

private:
    SacAgent(EncoderKind kind, nn::HanConfig han_cfg, int flat_dim, SacConfig cfg,
             std::uint64_t seed, bool init_params);
    void init_networks(std::uint64_t seed);
    nn::MlpSpec head_spec() const;
    nn::MlpSpec flat_spec() const;

    EncoderKind kind_;
    nn::HanConfig han_cfg_;
    int flat_dim_;
    SacConfig cfg_;
    nn::ParamStore online_;
    nn::ParamStore target_;
    nn::Adam adam_;
    ReplayBuffer replay_;
    Rng action_rng_;
    std::uint64_t sample_seed_;
    long sample_counter_ = 0;
    long training_step_ = 0;
};

}  // namespace qrouted
