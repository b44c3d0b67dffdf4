#include "qrouted/predictor.hpp"

#include <cmath>
#include <stdexcept>

#include "qrouted/rng.hpp"

namespace qrouted {

void BucketScheme::validate() const {
    if (n_buckets < 2) throw std::invalid_argument("n_buckets must be >= 2");
    if (max_value <= 0.0) throw std::invalid_argument("max_value must be > 0");
}

void PredictorConfig::validate() const {
    if (top1_acc < 0.0 || top1_acc > 1.0) throw std::invalid_argument("top1_acc must be in [0,1]");
    if (top3_acc < top1_acc || top3_acc > 1.0)
        throw std::invalid_argument("need top1_acc <= top3_acc <= 1");
}

int bucketize(double value, const BucketScheme& scheme) {
    scheme.validate();
    if (value < 0.0 || value > scheme.max_value)
        throw std::out_of_range("value outside [0, max_value]");
    int b = static_cast<int>(std::floor(value / scheme.width()));
    return std::min(b, scheme.n_buckets - 1);
}

double bucket_midpoint(int bucket, const BucketScheme& scheme) {
    if (bucket < 0 || bucket >= scheme.n_buckets) throw std::out_of_range("bucket index");
    return (bucket + 0.5) * scheme.width();
}

PredictorMode predictor_mode_from_string(const std::string& s) {
    if (s == "emulated") return PredictorMode::Emulated;
    if (s == "perfect") return PredictorMode::Perfect;
    if (s == "zero") return PredictorMode::Zero;
    throw std::invalid_argument("unknown predictor mode: " + s);
}

std::string to_string(PredictorMode mode) {
    switch (mode) {
        case PredictorMode::Emulated: return "emulated";
        case PredictorMode::Perfect: return "perfect";
        case PredictorMode::Zero: return "zero";
    }
    return "emulated";
}

Predictor::Predictor(PredictorConfig score_cfg, PredictorConfig length_cfg,
                     BucketScheme score_scheme, BucketScheme length_scheme, std::uint64_t seed)
    : score_cfg_(score_cfg),
      length_cfg_(length_cfg),
      score_scheme_(score_scheme),
      length_scheme_(length_scheme),
      seed_(seed) {
    score_cfg_.validate();
    length_cfg_.validate();
    score_scheme_.validate();
    length_scheme_.validate();
}

Predictor Predictor::with_defaults(int max_tokens, std::uint64_t seed) {
    return Predictor({0.6339, 0.9778, PredictorMode::Emulated},
                     {0.7297, 0.8471, PredictorMode::Emulated}, {10, 1.0},
                     {10, static_cast<double>(max_tokens)}, seed);
}

int Predictor::predict(const Request& req, int expert_id, PredictKind kind) const {
    const PredictorConfig& cfg = config(kind);
    const BucketScheme& sch = scheme(kind);
    if (cfg.mode == PredictorMode::Zero) return 0;

    double truth = kind == PredictKind::Score ? req.score.at(expert_id)
                                              : static_cast<double>(req.out_len.at(expert_id));
    int true_bucket = bucketize(truth, sch);
    if (cfg.mode == PredictorMode::Perfect) return true_bucket;

    Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(req.id),
                     static_cast<std::uint64_t>(expert_id),
                     kind == PredictKind::Score ? 0 : 1));
    double u = rng.uniform01();
    if (u < cfg.top1_acc) return true_bucket;
    if (u < cfg.top3_acc) {
        // adjacent bucket, clamped to the valid range
        bool has_lo = true_bucket > 0;
        bool has_hi = true_bucket < sch.n_buckets - 1;
        if (has_lo && has_hi) return rng.uniform01() < 0.5 ? true_bucket - 1 : true_bucket + 1;
        return has_hi ? true_bucket + 1 : true_bucket - 1;
    }
    // tail: uniform over buckets at distance >= 2 so that the measured top-3
    // frequency stays at top3_acc; fall back to any non-true bucket when the
    // scheme is too small to have a far set
    int far = 0;
    for (int b = 0; b < sch.n_buckets; ++b)
        if (std::abs(b - true_bucket) >= 2) ++far;
    if (far == 0) {
        int pick = static_cast<int>(rng.below(sch.n_buckets - 1));
        return pick >= true_bucket ? pick + 1 : pick;
    }
    int pick = static_cast<int>(rng.below(far));
    for (int b = 0; b < sch.n_buckets; ++b) {
        if (std::abs(b - true_bucket) < 2) continue;
        if (pick-- == 0) return b;
    }
    return true_bucket;  // unreachable
}

std::vector<int> Predictor::predict_vector(const Request& req, PredictKind kind) const {
    std::vector<int> out;
    out.reserve(req.score.size());
    for (int n = 0; n < static_cast<int>(req.score.size()); ++n)
        out.push_back(predict(req, n, kind));
    return out;
}

double Predictor::predict_midpoint(const Request& req, int expert_id, PredictKind kind) const {
    if (config(kind).mode == PredictorMode::Zero) return 0.0;
    return bucket_midpoint(predict(req, expert_id, kind), scheme(kind));
}

}  // namespace qrouted
