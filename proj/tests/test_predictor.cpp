#include <cmath>

#include "doctest.h"
#include "qrouted/predictor.hpp"
#include "testutil.hpp"

using namespace qrouted;
using testutil::make_request;

TEST_SUITE("predictor") {

TEST_CASE("bucketize: floor rule and top-edge inclusion") {
    BucketScheme scores{10, 1.0};
    CHECK(bucketize(0.73, scores) == 7);
    CHECK(bucketize(1.0, scores) == 9);
    CHECK(bucketize(0.0, scores) == 0);
    BucketScheme lengths{10, 300.0};
    CHECK(bucketize(300.0, lengths) == 9);
    CHECK(bucketize(29.0, lengths) == 0);
    CHECK_THROWS_AS(bucketize(-0.1, scores), std::out_of_range);
    CHECK_THROWS_AS(bucketize(1.1, scores), std::out_of_range);
}

TEST_CASE("bucket midpoints de-bucketize to bin centres") {
    BucketScheme scores{10, 1.0};
    CHECK(bucket_midpoint(7, scores) == doctest::Approx(0.75));
    CHECK(bucket_midpoint(0, scores) == doctest::Approx(0.05));
    CHECK_THROWS_AS(bucket_midpoint(10, scores), std::out_of_range);
}

TEST_CASE("predict: perfect oracle always emits the true bucket") {
    Predictor p({1.0, 1.0, PredictorMode::Emulated}, {1.0, 1.0, PredictorMode::Emulated},
                {10, 1.0}, {10, 300.0}, 5);
    for (int i = 0; i < 50; ++i) {
        Request r = make_request(i, 0.0, 10, {237}, {0.73});
        CHECK(p.predict(r, 0, PredictKind::Score) == 7);
        CHECK(p.predict(r, 0, PredictKind::Length) == 7);  // 237/30 -> bucket 7
    }
}

TEST_CASE("predict: top1=0, top3=1 lands adjacent, never equal") {
    Predictor p({0.0, 1.0, PredictorMode::Emulated}, {0.0, 1.0, PredictorMode::Emulated},
                {10, 1.0}, {10, 300.0}, 17);
    for (int i = 0; i < 500; ++i) {
        double truth = (i % 10) * 0.1 + 0.05;
        Request r = make_request(i, 0.0, 10, {100}, {truth});
        int tb = bucketize(truth, p.scheme(PredictKind::Score));
        int b = p.predict(r, 0, PredictKind::Score);
        CHECK(std::abs(b - tb) == 1);
    }
}

TEST_CASE("predict: calibrated top-1 and top-3 frequencies at defaults") {
    Predictor p = Predictor::with_defaults(300, 2025);
    const int n = 100000;
    int s_top1 = 0, s_top3 = 0, l_top1 = 0, l_top3 = 0;
    Rng truth_rng(31337);
    for (int i = 0; i < n; ++i) {
        double s = truth_rng.uniform01();
        int d = 1 + static_cast<int>(truth_rng.below(300));
        Request r = make_request(i, 0.0, 10, {d}, {s});
        int tb_s = bucketize(s, p.scheme(PredictKind::Score));
        int tb_l = bucketize(static_cast<double>(d), p.scheme(PredictKind::Length));
        int b_s = p.predict(r, 0, PredictKind::Score);
        int b_l = p.predict(r, 0, PredictKind::Length);
        s_top1 += b_s == tb_s;
        s_top3 += std::abs(b_s - tb_s) <= 1;
        l_top1 += b_l == tb_l;
        l_top3 += std::abs(b_l - tb_l) <= 1;
    }
    CHECK(std::abs(s_top1 / double(n) - 0.6339) < 0.01);
    CHECK(std::abs(s_top3 / double(n) - 0.9778) < 0.01);
    CHECK(std::abs(l_top1 / double(n) - 0.7297) < 0.01);
    CHECK(std::abs(l_top3 / double(n) - 0.8471) < 0.01);
}

TEST_CASE("predict: deterministic in (request, expert, kind, seed)") {
    Predictor p = Predictor::with_defaults(300, 7);
    Request r = make_request(123, 0.0, 10, {100, 200}, {0.4, 0.9});
    auto v1 = p.predict_vector(r, PredictKind::Score);
    auto v2 = p.predict_vector(r, PredictKind::Score);
    CHECK(v1 == v2);
    Predictor q = Predictor::with_defaults(300, 8);
    bool any_diff = false;
    for (int i = 0; i < 64; ++i) {
        Request ri = make_request(i, 0.0, 10, {100}, {0.41});
        any_diff |= p.predict(ri, 0, PredictKind::Score) != q.predict(ri, 0, PredictKind::Score);
    }
    CHECK(any_diff);  // different seeds give a different noise stream
}

TEST_CASE("predict_vector: per-expert entries and zero mode") {
    Predictor perfect({1.0, 1.0, PredictorMode::Perfect}, {1.0, 1.0, PredictorMode::Perfect},
                      {10, 1.0}, {10, 300.0}, 5);
    Request r = make_request(0, 0.0, 10, {30, 150, 290}, {0.05, 0.55, 0.95});
    CHECK(perfect.predict_vector(r, PredictKind::Score) == std::vector<int>{0, 5, 9});
    CHECK(perfect.predict_vector(r, PredictKind::Length) == std::vector<int>{1, 5, 9});

    Predictor zero({1.0, 1.0, PredictorMode::Zero}, {1.0, 1.0, PredictorMode::Zero}, {10, 1.0},
                   {10, 300.0}, 5);
    CHECK(zero.predict_vector(r, PredictKind::Score) == std::vector<int>{0, 0, 0});
    CHECK(zero.predict_midpoint(r, 1, PredictKind::Score) == 0.0);
    CHECK(zero.predict_midpoint(r, 1, PredictKind::Length) == 0.0);
}

TEST_CASE("predict: output bucket always in range (property)") {
    Predictor p({0.3, 0.5, PredictorMode::Emulated}, {0.2, 0.9, PredictorMode::Emulated},
                {10, 1.0}, {10, 300.0}, 99);
    Rng rng(4);
    for (int i = 0; i < 2000; ++i) {
        double s = rng.uniform01();
        int d = 1 + static_cast<int>(rng.below(300));
        Request r = make_request(i, 0.0, 10, {d}, {s});
        int bs = p.predict(r, 0, PredictKind::Score);
        int bl = p.predict(r, 0, PredictKind::Length);
        CHECK(bs >= 0);
        CHECK(bs <= 9);
        CHECK(bl >= 0);
        CHECK(bl <= 9);
    }
}

TEST_CASE("config validation") {
    PredictorConfig bad{0.9, 0.5, PredictorMode::Emulated};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    BucketScheme tiny{1, 1.0};
    CHECK_THROWS_AS(tiny.validate(), std::invalid_argument);
}

}  // TEST_SUITE
