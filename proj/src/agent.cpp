#include "qrouted/agent.hpp"

#include <algorithm>
#include <cmath>

namespace qrouted {

using nn::Mat;
using nn::Var;

void SacConfig::validate() const {
    if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("gamma must be in [0,1)");
    if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
    if (tau <= 0.0 || tau > 1.0) throw std::invalid_argument("tau must be in (0,1]");
    if (lr <= 0.0) throw std::invalid_argument("lr must be > 0");
    if (replay_capacity < 1 || batch_size < 1) throw std::invalid_argument("bad replay sizes");
    if (steps < 0) throw std::invalid_argument("steps must be >= 0");
    if (update_every < 1 || eval_interval < 1) throw std::invalid_argument("bad cadence");
}

nlohmann::json SacConfig::to_json() const {
    return {{"gamma", gamma},
            {"alpha", alpha},
            {"lr", lr},
            {"tau", tau},
            {"replay_capacity", replay_capacity},
            {"batch_size", batch_size},
            {"steps", steps},
            {"warmup_steps", warmup_steps},
            {"update_every", update_every},
            {"eval_interval", eval_interval},
            {"eval_horizon_ms", eval_horizon_ms},
            {"hidden", hidden},
            {"heads", heads},
            {"layers", layers}};
}

SacConfig SacConfig::from_json(const nlohmann::json& j) {
    SacConfig c;
    c.gamma = j.value("gamma", c.gamma);
    c.alpha = j.value("alpha", c.alpha);
    c.lr = j.value("lr", c.lr);
    c.tau = j.value("tau", c.tau);
    c.replay_capacity = j.value("replay_capacity", c.replay_capacity);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.update_every = j.value("update_every", c.update_every);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_horizon_ms = j.value("eval_horizon_ms", c.eval_horizon_ms);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.validate();
    return c;
}

ReplayBuffer::ReplayBuffer(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw std::invalid_argument("replay capacity must be >= 1");
    items_.reserve(std::min(capacity, 1 << 16));
}

void ReplayBuffer::push(Transition t) {
    if (static_cast<int>(items_.size()) < capacity_) {
        items_.push_back(std::move(t));
    } else {
        items_[next_] = std::move(t);
        next_ = (next_ + 1) % capacity_;
    }
}

std::vector<std::size_t> ReplayBuffer::sample_indices(int batch, std::uint64_t seed) const {
    if (items_.empty()) throw std::logic_error("sampling from empty replay buffer");
    Rng rng(seed);
    std::vector<std::size_t> idx(batch);
    for (int i = 0; i < batch; ++i) idx[i] = rng.below(items_.size());
    return idx;
}

std::vector<const Transition*> ReplayBuffer::sample(int batch, std::uint64_t seed) const {
    std::vector<const Transition*> out;
    out.reserve(batch);
    for (std::size_t i : sample_indices(batch, seed)) out.push_back(&items_[i]);
    return out;
}

Eigen::VectorXd masked_policy(const Eigen::VectorXd& logits, const std::vector<bool>& mask) {
    if (static_cast<int>(mask.size()) != logits.size())
        throw std::invalid_argument("mask size mismatch");
    double m = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < logits.size(); ++a)
        if (mask[a]) m = std::max(m, logits(a));
    if (!std::isfinite(m)) throw std::invalid_argument("no valid action");
    double z = 0.0;
    for (int a = 0; a < logits.size(); ++a)
        if (mask[a]) z += std::exp(logits(a) - m);
    Eigen::VectorXd pi = Eigen::VectorXd::Zero(logits.size());
    for (int a = 0; a < logits.size(); ++a)
        if (mask[a]) pi(a) = std::exp(logits(a) - m) / z;
    return pi;
}

int categorical_action(const Eigen::VectorXd& logits, const std::vector<bool>& mask, bool greedy,
                       Rng& rng) {
    Eigen::VectorXd pi = masked_policy(logits, mask);
    if (greedy) {
        int best = -1;
        double best_p = -1.0;
        for (int a = 0; a < pi.size(); ++a)
            if (mask[a] && pi(a) > best_p) {
                best = a;
                best_p = pi(a);
            }
        return best;
    }
    double u = rng.uniform01();
    double acc = 0.0;
    int last_valid = 0;
    for (int a = 0; a < pi.size(); ++a) {
        if (!mask[a]) continue;
        acc += pi(a);
        last_valid = a;
        if (u <= acc) return a;
    }
    return last_valid;  // fp slack
}

double critic_target(double reward, double gamma, bool done, const Eigen::VectorXd& next_pi,
                     const Eigen::VectorXd& next_min_q, double alpha,
                     const std::vector<bool>& next_mask) {
    if (done) return reward;
    double v = 0.0;
    for (int a = 0; a < next_pi.size(); ++a) {
        if (!next_mask[a] || next_pi(a) <= 0.0) continue;
        v += next_pi(a) * (next_min_q(a) - alpha * std::log(next_pi(a)));
    }
    return reward + gamma * v;
}

SacAgent::SacAgent(EncoderKind kind, nn::HanConfig han_cfg, int flat_dim, SacConfig cfg,
                   std::uint64_t seed)
    : SacAgent(kind, han_cfg, flat_dim, cfg, seed, true) {}

SacAgent::SacAgent(EncoderKind kind, nn::HanConfig han_cfg, int flat_dim, SacConfig cfg,
                   std::uint64_t seed, bool init_params)
    : kind_(kind),
      han_cfg_(han_cfg),
      flat_dim_(flat_dim),
      cfg_(cfg),
      adam_(cfg.lr),
      replay_(cfg.replay_capacity),
      action_rng_(mix_seed(seed, 0xACu)),
      sample_seed_(mix_seed(seed, 0x5Au)) {
    cfg_.validate();
    han_cfg_.hidden = cfg_.hidden;
    han_cfg_.heads = cfg_.heads;
    han_cfg_.layers = cfg_.layers;
    if (init_params) {
        init_networks(seed);
        target_ = online_;
    }
}

nn::MlpSpec SacAgent::head_spec() const {
    return nn::MlpSpec{{cfg_.hidden, cfg_.hidden, n_actions()}};
}

nn::MlpSpec SacAgent::flat_spec() const {
    return nn::MlpSpec{{flat_dim_, cfg_.hidden, cfg_.hidden}};
}

void SacAgent::init_networks(std::uint64_t seed) {
    if (kind_ == EncoderKind::Han)
        nn::init_han(online_, han_cfg_, seed);
    else
        nn::init_mlp(online_, "enc", flat_spec(), seed);
    nn::init_mlp(online_, "actor", head_spec(), seed);
    nn::init_mlp(online_, "critic1", head_spec(), seed);
    nn::init_mlp(online_, "critic2", head_spec(), seed);
}

Var SacAgent::encode(nn::ParamBinder& p, std::span<const StoredState* const> states,
                     nn::AttnStats* stats) const {
    if (kind_ == EncoderKind::Han) {
        std::vector<HeteroGraph> graphs;
        graphs.reserve(states.size());
        for (const StoredState* s : states) graphs.push_back(s->graph);
        return nn::han_encode(p, han_cfg_, nn::GraphBatch::from_graphs(graphs), stats);
    }
    Mat x(states.size(), flat_dim_);
    for (std::size_t i = 0; i < states.size(); ++i) x.row(i) = states[i]->flat.transpose();
    return relu(nn::mlp_forward(p, "enc", flat_spec(), p.tape()->constant(x)));
}

namespace {

Mat mask_to_mat(const std::vector<const Transition*>& batch, bool next) {
    Mat m(batch.size(), next ? batch[0]->next_mask.size() : batch[0]->mask.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& mk = next ? batch[i]->next_mask : batch[i]->mask;
        for (std::size_t a = 0; a < mk.size(); ++a) m(i, a) = mk[a] ? 1.0 : 0.0;
    }
    return m;
}

}  // namespace

Eigen::VectorXd SacAgent::critic_targets(const std::vector<const Transition*>& batch) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    std::vector<const StoredState*> next_states;
    next_states.reserve(batch.size());
    for (const Transition* t : batch) next_states.push_back(&t->next_state);

    // pi(.|s') under the online nets
    nn::Tape t_pi;
    nn::ParamBinder p_pi(t_pi, online_);
    Var e_pi = encode(p_pi, next_states);
    Var logits = nn::mlp_forward(p_pi, "actor", head_spec(), e_pi);
    Mat next_mask = mask_to_mat(batch, true);
    Var lp = nn::masked_log_softmax_rows(logits, next_mask);
    Mat pi = t_pi.value(lp).array().exp().matrix().cwiseProduct(next_mask);

    // min of the target critics at s'
    nn::Tape t_q;
    nn::ParamBinder p_q(t_q, target_);
    Var e_q = encode(p_q, next_states);
    Mat q1 = t_q.value(nn::mlp_forward(p_q, "critic1", head_spec(), e_q));
    Mat q2 = t_q.value(nn::mlp_forward(p_q, "critic2", head_spec(), e_q));
    Mat qmin = q1.cwiseMin(q2);

    Eigen::VectorXd y(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
        y(i) = critic_target(batch[i]->reward, cfg_.gamma, batch[i]->done, pi.row(i).transpose(),
                             qmin.row(i).transpose(), cfg_.alpha, batch[i]->next_mask);
    return y;
}

UpdateStats SacAgent::update(const std::vector<const Transition*>& batch) {
    Eigen::VectorXd y = critic_targets(batch);

    std::vector<const StoredState*> states;
    std::vector<int> actions;
    states.reserve(batch.size());
    actions.reserve(batch.size());
    for (const Transition* t : batch) {
        states.push_back(&t->state);
        actions.push_back(t->action);
    }

    nn::Tape tape;
    nn::ParamBinder p(tape, online_);
    Var emb = encode(p, states);
    Var logits = nn::mlp_forward(p, "actor", head_spec(), emb);
    Mat mask = mask_to_mat(batch, false);
    Var lp = nn::masked_log_softmax_rows(logits, mask);
    Var maskc = tape.constant(mask);
    Var pi = exp(lp) * maskc;

    Var q1 = nn::mlp_forward(p, "critic1", head_spec(), emb);
    Var q2 = nn::mlp_forward(p, "critic2", head_spec(), emb);
    Var q1a = nn::select_per_row(q1, actions);
    Var q2a = nn::select_per_row(q2, actions);
    Var yc = tape.constant(y);
    Var critic_loss = mean(square(q1a - yc)) + mean(square(q2a - yc));

    // actor sees the critics as constants
    Mat qmin_det = tape.value(q1).cwiseMin(tape.value(q2));
    Var qmin = tape.constant(qmin_det);
    Var inner = pi * (cfg_.alpha * lp - qmin);
    Var actor_loss = (1.0 / static_cast<double>(batch.size())) * sum(inner);

    Var total = critic_loss + actor_loss;
    double total_v = tape.value(total)(0, 0);
    if (!std::isfinite(total_v)) throw DivergenceError("non-finite SAC loss");
    tape.backward(total);

    nn::GradMap grads;
    p.collect(grads);
    adam_.step(online_, grads);

    for (auto& [name, tgt] : target_.values) {
        const Mat& on = online_.at(name);
        tgt += cfg_.tau * (on - tgt);
    }

    UpdateStats stats;
    stats.critic_loss = tape.value(critic_loss)(0, 0);
    stats.actor_loss = tape.value(actor_loss)(0, 0);
    const Mat& pim = tape.value(pi);
    const Mat& lpm = tape.value(lp);
    double ent = 0.0;
    for (int i = 0; i < pim.rows(); ++i)
        for (int j = 0; j < pim.cols(); ++j)
            if (pim(i, j) > 0.0) ent -= pim(i, j) * lpm(i, j);
    stats.mean_entropy = ent / static_cast<double>(pim.rows());
    stats.mean_q = qmin_det.mean();
    ++training_step_;
    return stats;
}

UpdateStats SacAgent::update_from_replay() {
    auto batch = replay_.sample(cfg_.batch_size, mix_seed(sample_seed_, sample_counter_++));
    return update(batch);
}

Eigen::VectorXd SacAgent::policy(const StoredState& s, const std::vector<bool>& mask) {
    nn::Tape tape;
    nn::ParamBinder p(tape, online_);
    const StoredState* sp = &s;
    Var emb = encode(p, std::span<const StoredState* const>(&sp, 1));
    Var logits = nn::mlp_forward(p, "actor", head_spec(), emb);
    return masked_policy(tape.value(logits).row(0).transpose(), mask);
}

Eigen::VectorXd SacAgent::q_values(const StoredState& s) {
    nn::Tape tape;
    nn::ParamBinder p(tape, online_);
    const StoredState* sp = &s;
    Var emb = encode(p, std::span<const StoredState* const>(&sp, 1));
    Mat q1 = tape.value(nn::mlp_forward(p, "critic1", head_spec(), emb));
    Mat q2 = tape.value(nn::mlp_forward(p, "critic2", head_spec(), emb));
    return q1.cwiseMin(q2).row(0).transpose();
}

int SacAgent::select_action(const StoredState& s, const std::vector<bool>& mask, bool greedy) {
    nn::Tape tape;
    nn::ParamBinder p(tape, online_);
    const StoredState* sp = &s;
    Var emb = encode(p, std::span<const StoredState* const>(&sp, 1));
    Var logits = nn::mlp_forward(p, "actor", head_spec(), emb);
    return categorical_action(tape.value(logits).row(0).transpose(), mask, greedy, action_rng_);
}

void SacAgent::save(const std::filesystem::path& stem, const nlohmann::json& extra) const {
    nlohmann::json manifest = extra;
    manifest["sac"] = cfg_.to_json();
    manifest["training_step"] = training_step_;
    manifest["encoder"] = kind_ == EncoderKind::Han ? "han" : "flat";
    manifest["n_experts"] = han_cfg_.n_experts;
    manifest["flat_dim"] = flat_dim_;
    nn::save_params(online_, stem, manifest);
}

SacAgent SacAgent::load(const std::filesystem::path& stem, SacConfig cfg,
                        nlohmann::json* manifest_out) {
    nlohmann::json manifest;
    nn::ParamStore params = nn::load_params(stem, &manifest);
    EncoderKind kind =
        manifest.at("encoder").get<std::string>() == "han" ? EncoderKind::Han : EncoderKind::Flat;
    nn::HanConfig han_cfg;
    han_cfg.n_experts = manifest.at("n_experts").get<int>();
    SacConfig restored = SacConfig::from_json(manifest.at("sac"));
    restored.steps = cfg.steps;  // runtime knobs follow the caller
    restored.eval_interval = cfg.eval_interval;
    SacAgent agent(kind, han_cfg, manifest.at("flat_dim").get<int>(), restored,
                   /*seed=*/1, /*init_params=*/false);
    agent.online_ = std::move(params);
    agent.target_ = agent.online_;
    agent.training_step_ = manifest.value("training_step", 0L);
    if (manifest_out) *manifest_out = std::move(manifest);
    return agent;
}

}  // namespace qrouted
