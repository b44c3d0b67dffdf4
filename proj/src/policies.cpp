#include "qrouted/policies.hpp"

#include "qrouted/impact.hpp"

namespace qrouted {

namespace {

int n_experts_of(const RoutingContext& ctx) {
    return static_cast<int>(ctx.snap.experts.size());
}

}  // namespace

int RoundRobinRouter::decide(const RoutingContext& ctx) {
    const int n = n_experts_of(ctx);
    for (int step = 0; step < n; ++step) {
        int candidate = (cursor_ + step) % n;
        if (ctx.mask[candidate + 1]) {
            cursor_ = (candidate + 1) % n;
            return candidate + 1;
        }
    }
    return kDropAction;
}

int ShortestQueueRouter::decide(const RoutingContext& ctx) {
    const int n = n_experts_of(ctx);
    int best = -1;
    int best_load = 0;
    for (int e = 0; e < n; ++e) {
        if (!ctx.mask[e + 1]) continue;
        int load = static_cast<int>(ctx.snap.experts[e].running.size() +
                                    ctx.snap.experts[e].waiting.size());
        if (best < 0 || load < best_load) {
            best = e;
            best_load = load;
        }
    }
    return best < 0 ? kDropAction : best + 1;
}

int GreedyScoreRouter::decide(const RoutingContext& ctx) {
    const int n = n_experts_of(ctx);
    int best = 0;
    for (int e = 1; e < n; ++e)
        if (ctx.preds.arrived_score_mid(e) > ctx.preds.arrived_score_mid(best)) best = e;
    return ctx.mask[best + 1] ? best + 1 : kDropAction;
}

RlRouter::RlRouter(std::shared_ptr<SacAgent> agent, std::string name)
    : agent_(std::move(agent)), name_(std::move(name)) {}

int RlRouter::decide(const RoutingContext& ctx) {
    StoredState s = make_stored_state(ctx, agent_->encoder_kind());
    return agent_->select_action(s, ctx.mask, /*greedy=*/true);
}

StoredState make_stored_state(const RoutingContext& ctx, EncoderKind kind) {
    StoredState s;
    if (kind == EncoderKind::Han)
        s.graph = build_graph(ctx.snap, ctx.req, ctx.preds, ctx.scales);
    else
        s.flat = baseline_features(ctx.snap);
    return s;
}

bool is_rl_router(const std::string& kind) { return kind == "qos-rl" || kind == "baseline-rl"; }

}  // namespace qrouted
