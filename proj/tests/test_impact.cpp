#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "qrouted/impact.hpp"
#include "qrouted/rng.hpp"

using namespace qrouted;

TEST_SUITE("impact") {

TEST_CASE("prefill and decode latency estimates") {
    CHECK(prefill_latency_ms(0.1, 100) == doctest::Approx(10.0));
    std::vector<ResidentState> empty;
    CHECK(decode_latency_ms(0.001, empty) == 0.0);
    std::vector<ResidentState> two{{0, 100, 200, 50, 0.0, 0.0}, {1, 30, 40, 10, 0.0, 0.0}};
    CHECK(decode_latency_ms(0.001, two) == doctest::Approx(0.190).epsilon(1e-12));
}

TEST_CASE("latency_increase: worked examples") {
    // cap = min(200-150, 300) = 50; sum = 100*50 + 50*51/2 = 6275
    CHECK(latency_increase(0.1, 0.001, 100, 300, 200, 150) ==
          doctest::Approx(0.081375).epsilon(1e-12));
    // finished resident: only the prefill block remains
    CHECK(latency_increase(0.1, 0.001, 100, 300, 200, 200) ==
          doctest::Approx(10.0 / 200.0).epsilon(1e-12));
    // d_j = 1 caps the sum at a single term (100+1)
    CHECK(latency_increase(0.1, 0.001, 100, 1, 200, 150) ==
          doctest::Approx(0.050505).epsilon(1e-9));
}

TEST_CASE("latency_increase: rejects bad residents") {
    CHECK_THROWS_AS(latency_increase(0.1, 0.001, 100, 10, 0, 0), std::invalid_argument);
    CHECK_THROWS_AS(latency_increase(0.1, 0.001, 100, 10, 10, 11), std::invalid_argument);
    CHECK_THROWS_AS(latency_increase(0.1, 0.001, 100, 0, 10, 0), std::invalid_argument);
}

TEST_CASE("closed-form token load sum equals the loop oracle for K in [0,400]") {
    for (int K = 0; K <= 400; ++K) {
        double loop = 0.0;
        for (int k = 1; k <= K; ++k) loop += 100.0 + k;
        CHECK(token_load_sum(100, K) == doctest::Approx(loop).epsilon(1e-12));
    }
}

TEST_CASE("latency_increase: monotone in p_j and d_j, linear in k1 and k2") {
    Rng rng(909);
    for (int trial = 0; trial < 200; ++trial) {
        int d_i = 1 + static_cast<int>(rng.below(300));
        int d_cur = static_cast<int>(rng.below(d_i + 1));
        int p = 1 + static_cast<int>(rng.below(400));
        int d_j = 1 + static_cast<int>(rng.below(300));
        double k1 = 0.05 + rng.uniform01();
        double k2 = 0.001 + 0.01 * rng.uniform01();
        double base = latency_increase(k1, k2, p, d_j, d_i, d_cur);
        CHECK(latency_increase(k1, k2, p + 7, d_j, d_i, d_cur) >= base);
        CHECK(latency_increase(k1, k2, p, d_j + 13, d_i, d_cur) >= base);
        double prefill_term = k1 * p / d_i;
        double decode_term = base - prefill_term;
        double scaled = latency_increase(3.0 * k1, 2.0 * k2, p, d_j, d_i, d_cur);
        CHECK(scaled ==
              doctest::Approx(3.0 * prefill_term + 2.0 * decode_term).epsilon(1e-9));
    }
}

TEST_CASE("assess_impact: empty queue, threshold crossing, exact recompute") {
    SUBCASE("empty running queue -> zero penalty") {
        std::vector<ResidentState> none;
        auto report = assess_impact(none, 100, 300, 0.1, 0.001, 30.0);
        CHECK(report.entries.empty());
        CHECK(report.penalty_total == 0.0);
    }
    SUBCASE("resident at 29.95 ms/token crosses the threshold") {
        std::vector<ResidentState> one{{7, 50, 100, 40, 29.95, 0.5}};
        auto report = assess_impact(one, 100, 300, 0.1, 0.001, 30.0);
        REQUIRE(report.entries.size() == 1);
        CHECK(report.entries[0].l_plus > 0.05);  // enough to push past 30
        CHECK(report.entries[0].would_violate);
        CHECK(report.penalty_total == doctest::Approx(0.5));
    }
    SUBCASE("three residents recomputed by hand") {
        std::vector<ResidentState> residents{
            {0, 80, 120, 30, 10.0, 0.9},
            {1, 40, 60, 59, 29.0, 0.7},
            {2, 200, 250, 100, 20.0, 0.4},
        };
        double k1 = 0.2, k2 = 0.002;
        int p_j = 64, d_j = 90;
        auto report = assess_impact(residents, p_j, d_j, k1, k2, 30.0);
        for (std::size_t i = 0; i < residents.size(); ++i) {
            const auto& r = residents[i];
            int K = std::min(r.out_len_true - r.tokens_done, d_j);
            double sum = 0.0;
            for (int k = 1; k <= K; ++k) sum += p_j + k;
            double expect = (k1 * p_j + k2 * sum) / r.out_len_true;
            CHECK(report.entries[i].l_plus == doctest::Approx(expect).epsilon(1e-12));
            CHECK(report.entries[i].l_proj ==
                  doctest::Approx(r.l_cur_ms + expect).epsilon(1e-12));
        }
        // resident 1: 29.0 + l_plus; l_plus = (0.2*64 + 0.002*sum(1 term? K=min(1,90)=1 -> 65))/60
        double lp1 = (0.2 * 64 + 0.002 * 65.0) / 60.0;
        CHECK(report.entries[1].would_violate == (29.0 + lp1 >= 30.0));
    }
}

TEST_CASE("qos_reward: worked examples") {
    std::vector<CompletionOutcome> one{{0.8, 12.0}};
    ImpactReport impact;
    impact.penalty_total = 0.5;
    SUBCASE("gain minus projected violator") {
        auto rb = qos_reward(one, 1, impact, 0.9, 30.0);
        CHECK(rb.completed_gain == doctest::Approx(0.8));
        CHECK(rb.violation_penalty == doctest::Approx(0.5));
        CHECK(rb.drop_penalty == 0.0);
        CHECK(rb.reward == doctest::Approx(0.3));
    }
    SUBCASE("drop forfeits the best score") {
        std::vector<CompletionOutcome> none;
        auto rb = qos_reward(none, kDropAction, {}, 0.9, 30.0);
        CHECK(rb.reward == doctest::Approx(-0.9));
    }
    SUBCASE("route to an idle expert with no completions is free") {
        std::vector<CompletionOutcome> none;
        auto rb = qos_reward(none, 2, {}, 0.9, 30.0);
        CHECK(rb.reward == 0.0);
    }
    SUBCASE("reward never exceeds the completion gain") {
        Rng rng(55);
        for (int i = 0; i < 100; ++i) {
            std::vector<CompletionOutcome> cs;
            for (int j = 0; j < 5; ++j) cs.push_back({rng.uniform01(), 40.0 * rng.uniform01()});
            ImpactReport im;
            im.penalty_total = rng.uniform01();
            int action = static_cast<int>(rng.below(3));
            auto rb = qos_reward(cs, action, im, rng.uniform01(), 30.0);
            CHECK(rb.reward <= rb.completed_gain + 1e-12);
            if (rb.violation_penalty == 0.0 && rb.drop_penalty == 0.0)
                CHECK(rb.reward == doctest::Approx(rb.completed_gain));
        }
    }
}

TEST_CASE("baseline_reward: indicator filtering") {
    std::vector<CompletionOutcome> mixed{{0.8, 12.0}, {0.6, 31.0}};
    CHECK(baseline_reward(mixed, 30.0) == doctest::Approx(0.8));
    std::vector<CompletionOutcome> none;
    CHECK(baseline_reward(none, 30.0) == 0.0);
    std::vector<CompletionOutcome> all_late{{0.8, 40.0}, {0.9, 35.0}};
    CHECK(baseline_reward(all_late, 30.0) == 0.0);
}

}  // TEST_SUITE
