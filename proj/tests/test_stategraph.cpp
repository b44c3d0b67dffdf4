#include <cmath>

#include "doctest.h"
#include "qrouted/neural.hpp"
#include "qrouted/predictor.hpp"
#include "qrouted/stategraph.hpp"
#include "testutil.hpp"

using namespace qrouted;
using testutil::make_profiles;
using testutil::make_request;

namespace {

FeatureScales default_scales() { return {512, 300, 30.0, 5, 5}; }

PredictionSet perfect_preds(const Request& r, const GlobalSnapshot& snap,
                            const std::vector<Request>& all) {
    PredictionSet p;
    const int n = static_cast<int>(snap.experts.size());
    BucketScheme score_scheme{10, 1.0}, len_scheme{10, 300.0};
    p.arrived_score_mid.resize(n);
    p.arrived_len_mid.resize(n);
    for (int e = 0; e < n; ++e) {
        p.arrived_score_mid(e) = bucket_midpoint(bucketize(r.score[e], score_scheme), score_scheme);
        p.arrived_len_mid(e) =
            bucket_midpoint(bucketize(static_cast<double>(r.out_len[e]), len_scheme), len_scheme);
    }
    for (const auto& se : snap.experts) {
        auto add = [&](const SnapshotRequest& sr) {
            const Request& req = all[sr.id];
            p.resident[sr.id] = {
                bucket_midpoint(bucketize(req.score[se.expert_id], score_scheme), score_scheme),
                bucket_midpoint(
                    bucketize(static_cast<double>(req.out_len[se.expert_id]), len_scheme),
                    len_scheme)};
        };
        for (const auto& sr : se.running) add(sr);
        for (const auto& sr : se.waiting) add(sr);
    }
    return p;
}

}  // namespace

TEST_SUITE("stategraph") {

TEST_CASE("request features: running request arithmetic") {
    // p=100 (max 512), done=30 of 300, age 600ms, L=30
    SnapshotRequest sr{7, 100, 30, 600.0, 0.02};
    RequestFeatures f = build_request_features(sr, 0.75, 135.0, default_scales());
    CHECK(f.p_norm == doctest::Approx(0.1953125).epsilon(1e-12));
    CHECK(f.s_hat == doctest::Approx(0.75));
    CHECK(f.d_hat == doctest::Approx(0.45));
    CHECK(f.e == doctest::Approx(0.02));
    CHECK(f.d_cur == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(f.l_cur == doctest::Approx((600.0 / 30.0) / 30.0).epsilon(1e-12));  // 0.6667
}

TEST_CASE("request features: waiting request just enqueued is all zero") {
    SnapshotRequest sr{3, 100, 0, 0.0, 0.0};
    RequestFeatures f = build_request_features(sr, 0.55, 90.0, default_scales());
    CHECK(f.e == 0.0);
    CHECK(f.d_cur == 0.0);
    CHECK(f.l_cur == 0.0);
}

TEST_CASE("request features: perfect predictor midpoint rule") {
    // true score 0.73 -> bucket 7 -> midpoint 0.75
    BucketScheme scheme{10, 1.0};
    double mid = bucket_midpoint(bucketize(0.73, scheme), scheme);
    SnapshotRequest sr{0, 64, 10, 50.0, 0.01};
    RequestFeatures f = build_request_features(sr, mid, 150.0, default_scales());
    CHECK(f.s_hat == doctest::Approx(0.75));
}

TEST_CASE("build_graph: N=2 with one running and one waiting") {
    ProfileSet ps = make_profiles(2);
    std::vector<Request> reqs{
        make_request(0, 0.0, 100, {50, 50}),  // running on expert 0
        make_request(1, 0.0, 80, {40, 40}),   // waiting on expert 1
        make_request(2, 5.0, 60, {30, 30}),   // arrived
    };
    MultiExpertSim sim(ps, SimLimits{}, reqs);
    CHECK(sim.route_into(0, 0, 0.0).accepted);
    sim.advance_until(10.0);  // prefill done on expert 0 -> running
    CHECK(sim.route_into(1, 1, 10.0).accepted);
    GlobalSnapshot snap = sim.snapshot(10.0);
    REQUIRE(snap.experts[0].running.size() == 1);
    REQUIRE(snap.experts[1].waiting.size() == 1);

    PredictionSet preds = perfect_preds(reqs[2], snap, reqs);
    HeteroGraph g = build_graph(snap, reqs[2], preds, default_scales());
    CHECK(g.n_experts == 2);
    CHECK(g.arrived.size() == 4 + 2 * 2);
    CHECK(g.expert.rows() == 2);
    CHECK(g.running.rows() == 1);
    CHECK(g.waiting.rows() == 1);
    CHECK(g.running_owner == std::vector<int>{0});
    CHECK(g.waiting_owner == std::vector<int>{1});
    // expert features: utilization, |running|/run_cap, |waiting|/wait_cap
    CHECK(g.expert(0, 1) == doctest::Approx(0.2));
    CHECK(g.expert(1, 2) == doctest::Approx(0.2));
}

TEST_CASE("build_graph: empty system has only arrived-expert edges") {
    ProfileSet ps = make_profiles(3);
    std::vector<Request> reqs{make_request(0, 0.0, 60, {30, 30, 30})};
    MultiExpertSim sim(ps, SimLimits{}, reqs);
    GlobalSnapshot snap = sim.snapshot(0.0);
    PredictionSet preds = perfect_preds(reqs[0], snap, reqs);
    HeteroGraph g = build_graph(snap, reqs[0], preds, default_scales());
    CHECK(g.running.rows() == 0);
    CHECK(g.waiting.rows() == 0);
    CHECK(g.expert.rows() == 3);
    // 4 nodes total; the implied arrived<->expert edges are 2*3
    auto batch = nn::GraphBatch::from_graph(g);
    CHECK(batch.arr2exp_src.size() == 3);
    CHECK(batch.exp2arr_src.size() == 3);
    CHECK(batch.run_src.empty());
}

TEST_CASE("build_graph: adding one waiter changes exactly one node and one edge") {
    ProfileSet ps = make_profiles(2);
    std::vector<Request> reqs{make_request(0, 0.0, 80, {40, 40}),
                              make_request(1, 1.0, 60, {30, 30})};
    MultiExpertSim sim(ps, SimLimits{}, reqs);
    GlobalSnapshot before = sim.snapshot(1.0);
    PredictionSet preds_before = perfect_preds(reqs[1], before, reqs);
    HeteroGraph g0 = build_graph(before, reqs[1], preds_before, default_scales());

    sim.advance_until(1.0);
    CHECK(sim.route_into(1, 0, 1.0).accepted);
    GlobalSnapshot after = sim.snapshot(1.0);
    PredictionSet preds_after = perfect_preds(reqs[1], after, reqs);
    HeteroGraph g1 = build_graph(after, reqs[1], preds_after, default_scales());

    CHECK(g1.waiting.rows() == g0.waiting.rows() + 1);
    CHECK(g1.running.rows() == g0.running.rows());
    auto b0 = nn::GraphBatch::from_graph(g0);
    auto b1 = nn::GraphBatch::from_graph(g1);
    CHECK(b1.wait_src.size() == b0.wait_src.size() + 1);
    CHECK(b1.run_src.size() == b0.run_src.size());
    CHECK(b1.arr2exp_src.size() == b0.arr2exp_src.size());
}

TEST_CASE("build_graph: pure function of its inputs") {
    ProfileSet ps = make_profiles(2);
    std::vector<Request> reqs{make_request(0, 0.0, 80, {40, 40}),
                              make_request(1, 2.0, 60, {30, 30})};
    MultiExpertSim sim(ps, SimLimits{}, reqs);
    CHECK(sim.route_into(0, 0, 0.0).accepted);
    sim.advance_until(2.0);
    GlobalSnapshot snap = sim.snapshot(2.0);
    PredictionSet preds = perfect_preds(reqs[1], snap, reqs);
    HeteroGraph a = build_graph(snap, reqs[1], preds, default_scales());
    HeteroGraph b = build_graph(snap, reqs[1], preds, default_scales());
    CHECK(a.arrived == b.arrived);
    CHECK(a.expert == b.expert);
    CHECK(a.running == b.running);
    CHECK(a.waiting == b.waiting);
}

TEST_CASE("features stay in range with no NaN/inf over random episodes (property)") {
    ProfileSet ps = make_profiles(2, 0.2, 0.004, 4000.0);
    auto reqs = build_requests(ps, poisson_arrivals(6.0, 20000.0, 99), 99);
    MultiExpertSim sim(ps, SimLimits{}, reqs);
    Rng rng(2);
    for (const auto& r : reqs) {
        sim.advance_until(r.arrival_ms);
        GlobalSnapshot snap = sim.snapshot(r.arrival_ms);
        PredictionSet preds = perfect_preds(r, snap, sim.requests());
        HeteroGraph g = build_graph(snap, r, preds, default_scales());
        auto check_finite = [](const Eigen::MatrixXd& m) {
            for (int i = 0; i < m.size(); ++i) {
                CHECK(std::isfinite(m.data()[i]));
            }
        };
        check_finite(g.arrived);
        check_finite(g.expert);
        check_finite(g.running);
        check_finite(g.waiting);
        for (int i = 0; i < g.running.rows(); ++i) {
            CHECK(g.running(i, 0) >= 0.0);  // p_norm
            CHECK(g.running(i, 0) <= 1.0);
            CHECK(g.running(i, 3) >= 0.0);  // e
            CHECK(g.running(i, 3) <= 1.0);
            CHECK(g.running(i, 4) >= 0.0);  // d_cur
            CHECK(g.running(i, 4) <= 1.0);
            CHECK(g.running(i, 5) >= 0.0);  // l_cur
        }
        if (!sim.route_into(static_cast<int>(rng.below(2)), r.id, r.arrival_ms).accepted)
            sim.mark_dropped(r.id);
    }
}

TEST_CASE("baseline features: raw expert tuples in expert order") {
    ProfileSet ps = make_profiles(2);
    std::vector<Request> reqs{make_request(0, 0.0, 100, {50, 50}),
                              make_request(1, 0.0, 80, {40, 40})};
    MultiExpertSim sim(ps, SimLimits{}, reqs);
    CHECK(sim.route_into(0, 0, 0.0).accepted);
    CHECK(sim.route_into(0, 1, 0.0).accepted);
    sim.advance_until(10.0);  // first prefill done: one running, one waiting
    GlobalSnapshot snap = sim.snapshot(10.0);
    Eigen::VectorXd f = baseline_features(snap);
    REQUIRE(f.size() == 6);
    CHECK(f(0) == doctest::Approx(101.0 / 12000.0));  // utilization
    CHECK(f(1) == 1.0);                               // raw |running|
    CHECK(f(2) == 1.0);                               // raw |waiting|
    CHECK(f(3) == 0.0);
    CHECK(f(4) == 0.0);
    CHECK(f(5) == 0.0);
}

}  // TEST_SUITE
