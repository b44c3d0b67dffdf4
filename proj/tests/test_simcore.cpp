#include <algorithm>

#include "doctest.h"
#include "qrouted/simcore.hpp"
#include "testutil.hpp"

using namespace qrouted;
using testutil::make_profiles;
using testutil::make_request;

namespace {

MultiExpertSim single_expert_sim(std::vector<Request> reqs, double k1 = 0.1, double k2 = 0.001,
                                 double cap = 12000.0, SimLimits limits = {}) {
    return MultiExpertSim(make_profiles(1, k1, k2, cap), limits, std::move(reqs));
}

}  // namespace

TEST_SUITE("simcore") {

TEST_CASE("route_into: accept, queue-full, memory-exhausted") {
    SUBCASE("fitting request enters waiting") {
        auto sim = single_expert_sim({make_request(0, 0.0, 100, {3})});
        auto res = sim.route_into(0, 0, 0.0);
        CHECK(res.accepted);
        CHECK(sim.expert(0).waiting().size() == 1);
        CHECK(sim.expert(0).mem_reserved() == doctest::Approx(103.0));
    }
    SUBCASE("wait_cap=5 with 5 waiters rejects the sixth") {
        std::vector<Request> reqs;
        for (int i = 0; i < 6; ++i) reqs.push_back(make_request(i, 0.0, 10, {200}));
        // k1 huge so the first prefill never finishes during the test
        auto sim = single_expert_sim(std::move(reqs), /*k1=*/1e6);
        for (int i = 0; i < 5; ++i) CHECK(sim.route_into(0, i, 0.0).accepted);
        // one is mid-prefill but stays in waiting until its iteration ends
        auto res = sim.route_into(0, 5, 0.0);
        CHECK_FALSE(res.accepted);
        CHECK(res.reason == RejectReason::QueueFull);
    }
    SUBCASE("kv_capacity=1000 rejects a 1001-slot request and takes a 1000-slot one") {
        auto sim = single_expert_sim(
            {make_request(0, 0.0, 801, {200}), make_request(1, 0.0, 800, {200})},
            0.1, 0.001, /*cap=*/1000.0);
        auto res = sim.route_into(0, 0, 0.0);  // 801 + 200 = 1001 slots
        CHECK_FALSE(res.accepted);
        CHECK(res.reason == RejectReason::MemoryExhausted);
        CHECK(sim.route_into(0, 1, 0.0).accepted);  // exactly 1000 slots
    }
}

TEST_CASE("step_iteration: single request schedule matches the hand oracle") {
    // p=100, d=3, k1=0.1, k2=0.001: prefill 10ms -> token 1, decode 0.101 ->
    // token 2, decode 0.102 -> token 3; completion at 10.203, l = 3.401.
    std::vector<Request> reqs{make_request(0, 0.0, 100, {3})};
    ProfileSet ps = make_profiles(1);
    ExpertSim expert(ps.experts[0], SimLimits{}, &reqs);
    reqs[0].assigned_expert = -1;
    CHECK(expert.try_admit(0, 0.0).accepted);

    auto it1 = expert.step_iteration(0.0);
    CHECK(it1.kind == IterationKind::Prefill);
    CHECK(it1.end_ms == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(reqs[0].tokens_done == 1);
    CHECK(expert.mem_used() == doctest::Approx(101.0));

    auto it2 = expert.step_iteration(it1.end_ms);
    CHECK(it2.kind == IterationKind::Decode);
    CHECK(it2.end_ms == doctest::Approx(10.101).epsilon(1e-12));

    auto it3 = expert.step_iteration(it2.end_ms);
    CHECK(it3.end_ms == doctest::Approx(10.203).epsilon(1e-12));
    REQUIRE(it3.completed.size() == 1);
    CHECK(reqs[0].completion_ms == doctest::Approx(10.203).epsilon(1e-12));
    double l = reqs[0].completion_ms / 3.0;
    CHECK(l == doctest::Approx(3.401).epsilon(1e-9));
    CHECK(expert.mem_used() == doctest::Approx(0.0));
    CHECK(expert.mem_reserved() == doctest::Approx(0.0));
}

TEST_CASE("step_iteration: decode duration is k2 * sum(p_i + d_i)") {
    // running = {A: p=50 done=2, B: p=30 done=1} -> duration k2*(52+31)
    std::vector<Request> reqs{make_request(0, 0.0, 50, {10}), make_request(1, 0.0, 30, {10})};
    ProfileSet ps = make_profiles(1, 0.1, 0.001);
    ExpertSim expert(ps.experts[0], SimLimits{}, &reqs);
    CHECK(expert.try_admit(0, 0.0).accepted);
    CHECK(expert.try_admit(1, 0.0).accepted);
    double t = expert.step_iteration(0.0).end_ms;   // prefill A (done=1)
    t = expert.step_iteration(t).end_ms;            // prefill B (done=1)
    t = expert.step_iteration(t).end_ms;            // decode: A done=2, B done=2
    // now force the A=2/B=1 state of the example directly
    reqs[1].tokens_done = 1;
    auto it = expert.step_iteration(t);
    CHECK(it.kind == IterationKind::Decode);
    CHECK(it.end_ms - it.start_ms == doctest::Approx(0.001 * (52 + 31)).epsilon(1e-12));
}

TEST_CASE("step_iteration: prefill always beats decode when a waiter fits") {
    std::vector<Request> reqs{make_request(0, 0.0, 10, {50}), make_request(1, 0.0, 20, {50})};
    ProfileSet ps = make_profiles(1);
    ExpertSim expert(ps.experts[0], SimLimits{}, &reqs);
    CHECK(expert.try_admit(0, 0.0).accepted);
    double t = expert.step_iteration(0.0).end_ms;  // prefill 0
    CHECK(expert.try_admit(1, t).accepted);
    auto it = expert.step_iteration(t);
    CHECK(it.kind == IterationKind::Prefill);
    CHECK(it.prefilled == 1);
}

TEST_CASE("step_iteration: d=1 completes at prefill end") {
    std::vector<Request> reqs{make_request(0, 0.0, 40, {1})};
    ProfileSet ps = make_profiles(1);
    ExpertSim expert(ps.experts[0], SimLimits{}, &reqs);
    CHECK(expert.try_admit(0, 0.0).accepted);
    auto it = expert.step_iteration(0.0);
    CHECK(it.kind == IterationKind::Prefill);
    REQUIRE(it.completed.size() == 1);
    CHECK(reqs[0].completion_ms == doctest::Approx(4.0));
    CHECK(expert.running().empty());
    CHECK(expert.mem_reserved() == doctest::Approx(0.0));
}

TEST_CASE("advance_until: empty system just moves the clock") {
    auto sim = single_expert_sim({});
    CHECK(sim.advance_until(1000.0).empty());
    CHECK(sim.clock() == 1000.0);
    CHECK_THROWS_AS(sim.advance_until(999.0), std::logic_error);
}

TEST_CASE("advance_until: event engine reproduces the hand oracle") {
    auto sim = single_expert_sim({make_request(0, 0.0, 100, {3})});
    CHECK(sim.route_into(0, 0, 0.0).accepted);
    auto done = sim.advance_until(20.0);
    REQUIRE(done == std::vector<int>{0});
    const Request& r = sim.request(0);
    CHECK(r.completion_ms == doctest::Approx(10.203).epsilon(1e-9));
    CHECK((r.completion_ms - r.arrival_ms) / 3.0 == doctest::Approx(3.401).epsilon(1e-9));
}

TEST_CASE("advance_until: two experts merge completions by (time, id)") {
    // expert 0: req0 p=100 d=1 -> completes at 10.0
    // expert 1: req1 p=50 d=2 -> prefill 5ms, decode 0.001*51 -> 5.051
    // expert 0: req2 p=100 d=2 arriving later on expert 0
    ProfileSet ps = make_profiles(2);
    MultiExpertSim sim(ps, SimLimits{},
                       {make_request(0, 0.0, 100, {1, 1}), make_request(1, 0.0, 50, {2, 2}),
                        make_request(2, 0.0, 100, {2, 2})});
    CHECK(sim.route_into(0, 0, 0.0).accepted);
    CHECK(sim.route_into(1, 1, 0.0).accepted);
    auto done = sim.advance_until(30.0);
    CHECK(done == std::vector<int>{1, 0});  // 5.051 before 10.0
    CHECK(sim.request(1).completion_ms == doctest::Approx(5.051).epsilon(1e-9));
    CHECK(sim.request(0).completion_ms == doctest::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("snapshot: idle zeros, mem share arithmetic, purity") {
    auto sim = single_expert_sim({make_request(0, 0.0, 100, {30})});
    GlobalSnapshot idle = sim.snapshot(0.0);
    CHECK(idle.experts[0].utilization == 0.0);
    CHECK(idle.experts[0].running.empty());
    CHECK(idle.experts[0].waiting.empty());

    CHECK(sim.route_into(0, 0, 0.0).accepted);
    sim.advance_until(10.0);  // prefill done at 10.0: tokens_done=1
    // hand-crafted: one running request p=100, done=20, capacity 12000 -> 0.01
    GlobalSnapshot snap = sim.snapshot(10.0);
    REQUIRE(snap.experts[0].running.size() == 1);
    CHECK(snap.experts[0].running[0].tokens_done == 1);

    auto sim2 = single_expert_sim({make_request(0, 0.0, 100, {30})});
    CHECK(sim2.route_into(0, 0, 0.0).accepted);
    auto c = sim2.advance_until(10.0 + 19 * 0.2);  // not exact; just advance a while
    GlobalSnapshot s1 = sim2.snapshot(sim2.clock());
    GlobalSnapshot s2 = sim2.snapshot(sim2.clock());
    CHECK(s1.experts[0].running.size() == s2.experts[0].running.size());
    if (!s1.experts[0].running.empty()) {
        CHECK(s1.experts[0].running[0].mem_share == s2.experts[0].running[0].mem_share);
        int done = s1.experts[0].running[0].tokens_done;
        CHECK(s1.experts[0].running[0].mem_share ==
              doctest::Approx((100.0 + done) / 12000.0).epsilon(1e-12));
    }
    CHECK(s1.experts[0].utilization == s2.experts[0].utilization);
}

TEST_CASE("mem share example: p=100 done=20 capacity=12000 -> 0.01") {
    // direct arithmetic on the snapshot formula
    SnapshotRequest sr{0, 100, 20, 0.0, (100.0 + 20.0) / 12000.0};
    CHECK(sr.mem_share == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("conservation: routed requests complete exactly once; drops untouched") {
    ProfileSet ps = make_profiles(2, 0.1, 0.001, 4000.0);
    std::vector<Request> reqs;
    for (int i = 0; i < 40; ++i) reqs.push_back(make_request(i, i * 20.0, 50 + i % 30, {40, 60}));
    MultiExpertSim sim(ps, SimLimits{}, reqs);
    Rng rng(4242);
    int routed = 0, dropped = 0;
    for (int i = 0; i < 40; ++i) {
        sim.advance_until(reqs[i].arrival_ms);
        int e = static_cast<int>(rng.below(2));
        if (rng.uniform01() < 0.2) {
            sim.mark_dropped(i);
            ++dropped;
        } else if (sim.route_into(e, i, reqs[i].arrival_ms).accepted) {
            ++routed;
        } else {
            sim.mark_dropped(i);
            ++dropped;
        }
    }
    sim.drain();
    int completed = 0;
    for (const auto& r : sim.requests()) {
        if (r.dropped) {
            CHECK(r.tokens_done == 0);
            CHECK_FALSE(r.completed());
        } else {
            CHECK(r.completed());
            CHECK(r.tokens_done == r.out_len[r.assigned_expert]);
            ++completed;
        }
    }
    CHECK(completed == routed);
    CHECK(completed + dropped == 40);
    CHECK(sim.expert(0).mem_reserved() == doctest::Approx(0.0));
    CHECK(sim.expert(1).mem_reserved() == doctest::Approx(0.0));
}

TEST_CASE("memory invariant under randomized routing (property fuzz)") {
    for (int trial = 0; trial < 25; ++trial) {
        Rng rng(mix_seed(99, trial));
        double cap = 500.0 + rng.uniform01() * 3000.0;
        double rate = 2.0 + rng.uniform01() * 10.0;
        ProfileSet ps = make_profiles(2, 0.2, 0.005, cap);
        auto arrivals = poisson_arrivals(rate, 15000.0, mix_seed(7, trial));
        auto reqs = build_requests(ps, arrivals, mix_seed(13, trial));
        MultiExpertSim sim(ps, SimLimits{}, reqs);
        for (const auto& r : reqs) {
            sim.advance_until(r.arrival_ms);
            int e = static_cast<int>(rng.below(2));
            if (!sim.route_into(e, r.id, r.arrival_ms).accepted) sim.mark_dropped(r.id);
            // invariant asserted internally on every event; also spot-check here
            CHECK(sim.expert(e).mem_used() <= cap + 1e-6);
            CHECK(sim.expert(e).mem_reserved() <= cap + 1e-6);
        }
        CHECK_NOTHROW(sim.drain());
    }
}

TEST_CASE("determinism: identical run, identical completion times") {
    auto run = [](std::uint64_t seed) {
        ProfileSet ps = make_profiles(2, 0.15, 0.002, 6000.0);
        auto reqs = build_requests(ps, poisson_arrivals(6.0, 20000.0, seed), seed);
        MultiExpertSim sim(ps, SimLimits{}, reqs);
        Rng rng(seed);
        for (const auto& r : reqs) {
            sim.advance_until(r.arrival_ms);
            if (!sim.route_into(static_cast<int>(rng.below(2)), r.id, r.arrival_ms).accepted)
                sim.mark_dropped(r.id);
        }
        sim.drain();
        std::vector<double> times;
        for (const auto& r : sim.requests()) times.push_back(r.completion_ms);
        return times;
    };
    CHECK(run(5150) == run(5150));
}

TEST_CASE("work conservation: a nonempty expert never idles") {
    std::vector<Request> reqs{make_request(0, 0.0, 50, {5}), make_request(1, 0.0, 50, {5})};
    ProfileSet ps = make_profiles(1);
    ExpertSim expert(ps.experts[0], SimLimits{}, &reqs);
    CHECK(expert.try_admit(0, 0.0).accepted);
    CHECK(expert.try_admit(1, 0.0).accepted);
    double t = 0.0;
    while (expert.has_work()) {
        auto it = expert.step_iteration(t);
        CHECK(it.kind != IterationKind::Idle);
        t = it.end_ms;
    }
    CHECK(expert.step_iteration(t).kind == IterationKind::Idle);
}

TEST_CASE("interference: probe latency is monotone in background arrival rate") {
    auto probe_latency = [](double lambda) {
        ProfileSet ps = make_profiles(1, 0.3, 0.01, 20000.0);
        std::vector<Request> reqs{make_request(0, 0.0, 100, {200})};
        auto bg_arrivals = poisson_arrivals(lambda, 60000.0, 2718);
        auto bg = build_requests(ps, bg_arrivals, 316);
        for (auto& b : bg) {
            b.id = static_cast<int>(reqs.size());
            b.arrival_ms += 1.0;  // probe enqueues first
            reqs.push_back(b);
        }
        MultiExpertSim sim(ps, SimLimits{}, reqs);
        CHECK(sim.route_into(0, 0, 0.0).accepted);
        for (std::size_t i = 1; i < reqs.size(); ++i) {
            sim.advance_until(reqs[i].arrival_ms);
            if (!sim.route_into(0, static_cast<int>(i), reqs[i].arrival_ms).accepted)
                sim.mark_dropped(static_cast<int>(i));
        }
        sim.drain();
        const Request& probe = sim.request(0);
        return (probe.completion_ms - probe.arrival_ms) / probe.out_len[0];
    };
    double l2 = probe_latency(2.0);
    double l5 = probe_latency(5.0);
    double l8 = probe_latency(8.0);
    CHECK(l2 < l5);
    CHECK(l5 < l8);
}

TEST_CASE("event log records arrivals, iteration ends, completions") {
    auto sim = single_expert_sim({make_request(0, 0.0, 10, {2})});
    sim.enable_event_log(true);
    CHECK(sim.route_into(0, 0, 0.0).accepted);
    sim.drain();
    const auto& log = sim.event_log();
    REQUIRE_FALSE(log.empty());
    CHECK(log.front().kind == "arrival");
    bool has_completion = false;
    for (const auto& e : log) has_completion |= e.kind == "completion";
    CHECK(has_completion);
}

}  // TEST_SUITE
