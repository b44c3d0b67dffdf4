#pragma once
#include <memory>
#include <string>

#include "qrouted/agent.hpp"
#include "qrouted/stategraph.hpp"

namespace qrouted {

// Everything a router may look at when a request arrives. mask has N+1
// entries; mask[0] (drop) is always true, mask[n+1] is false when expert n's
// waiting queue is full.
struct RoutingContext {
    const GlobalSnapshot& snap;
    const Request& req;
    const PredictionSet& preds;
    const std::vector<bool>& mask;
    const FeatureScales& scales;
};

// Action encoding everywhere: 0 = drop, n+1 = expert n.
class Router {
public:
    virtual ~Router() = default;
    virtual int decide(const RoutingContext& ctx) = 0;
    virtual void reset() {}
    virtual std::string name() const = 0;
};

// Cycles through experts, skipping full waiting queues; drop when all full.
class RoundRobinRouter : public Router {
public:
    int decide(const RoutingContext& ctx) override;
    void reset() override { cursor_ = 0; }
    std::string name() const override { return "rr"; }

private:
    int cursor_ = 0;
};

// Arg-min of |running|+|waiting| over non-full experts, ties to lowest id.
class ShortestQueueRouter : public Router {
public:
    int decide(const RoutingContext& ctx) override;
    std::string name() const override { return "sqf"; }
};

// Arg-max of the predicted score midpoints, load-blind: if the chosen
// expert's queue is full the request is dropped, never re-targeted.
class GreedyScoreRouter : public Router {
public:
    int decide(const RoutingContext& ctx) override;
    std::string name() const override { return "greedy"; }
};

// Greedy policy of a frozen SAC agent (HAN or flat path per the checkpoint).
class RlRouter : public Router {
public:
    RlRouter(std::shared_ptr<SacAgent> agent, std::string name);
    int decide(const RoutingContext& ctx) override;
    std::string name() const override { return name_; }
    SacAgent& agent() { return *agent_; }

private:
    std::shared_ptr<SacAgent> agent_;
    std::string name_;
};

// Builds the stored state a SAC agent consumes for one decision.
StoredState make_stored_state(const RoutingContext& ctx, EncoderKind kind);

bool is_rl_router(const std::string& kind);

}  // namespace qrouted
