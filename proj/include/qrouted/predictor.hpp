#pragma once
#include <cstdint>
#include <string>

#include "qrouted/workload.hpp"

namespace qrouted {

struct BucketScheme {
    int n_buckets = 10;
    double max_value = 1.0;

    double width() const { return max_value / n_buckets; }
    void validate() const;
};

// floor(value/width); value == max_value maps to the top bucket
int bucketize(double value, const BucketScheme& scheme);

// centre of a bucket on [0, max_value]
double bucket_midpoint(int bucket, const BucketScheme& scheme);

enum class PredictorMode { Emulated, Perfect, Zero };

PredictorMode predictor_mode_from_string(const std::string& s);
std::string to_string(PredictorMode mode);

enum class PredictKind { Score, Length };

// Accuracy-emulated oracle over the bucket scheme. With probability top1 it
// emits the true bucket, with probability top3-top1 an adjacent one, and the
// remaining mass lands at distance >= 2 so that measured top-1/top-3
// frequencies converge to the configured values.
struct PredictorConfig {
    double top1_acc = 0.6339;
    double top3_acc = 0.9778;
    PredictorMode mode = PredictorMode::Emulated;
    void validate() const;
};

class Predictor {
public:
    Predictor(PredictorConfig score_cfg, PredictorConfig length_cfg, BucketScheme score_scheme,
              BucketScheme length_scheme, std::uint64_t seed);

    // defaults: paper accuracies, 10 buckets over [0,1] and [0,max_tokens]
    static Predictor with_defaults(int max_tokens, std::uint64_t seed);

    // Bucket prediction for one (request, expert); deterministic in
    // (request id, expert id, kind, seed).
    int predict(const Request& req, int expert_id, PredictKind kind) const;

    // One bucket per expert, expert-index order.
    std::vector<int> predict_vector(const Request& req, PredictKind kind) const;

    // De-bucketized feature value: bucket midpoint, or 0 in Zero mode.
    double predict_midpoint(const Request& req, int expert_id, PredictKind kind) const;

    const BucketScheme& scheme(PredictKind kind) const {
        return kind == PredictKind::Score ? score_scheme_ : length_scheme_;
    }
    const PredictorConfig& config(PredictKind kind) const {
        return kind == PredictKind::Score ? score_cfg_ : length_cfg_;
    }

private:
    PredictorConfig score_cfg_;
    PredictorConfig length_cfg_;
    BucketScheme score_scheme_;
    BucketScheme length_scheme_;
    std::uint64_t seed_;
};

}  // namespace qrouted
