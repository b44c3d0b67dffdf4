#include "qrouted/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "qrouted/rng.hpp"

namespace qrouted {

using nlohmann::json;

void ExpertProfile::validate() const {
    if (score_mean < 0.0 || score_mean > 1.0)
        throw std::invalid_argument("expert " + std::to_string(expert_id) +
                                    ": score_mean must be in [0,1]");
    if (score_std < 0.0) throw std::invalid_argument("score_std must be >= 0");
    if (length_mean < 1.0) throw std::invalid_argument("length_mean must be >= 1");
    if (length_std < 0.0) throw std::invalid_argument("length_std must be >= 0");
    if (kv_capacity <= 0.0) throw std::invalid_argument("kv_capacity must be > 0");
    if (k1 <= 0.0 || k2 <= 0.0) throw std::invalid_argument("k1 and k2 must be > 0");
    if (per_token_kv <= 0.0) throw std::invalid_argument("per_token_kv must be > 0");
}

void ProfileSet::validate() const {
    if (experts.empty()) throw std::invalid_argument("profile set needs at least one expert");
    if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
    if (max_prompt < 1) throw std::invalid_argument("max_prompt must be >= 1");
    for (const auto& e : experts) e.validate();
}

double Request::best_score() const {
    double best = 0.0;
    for (double s : score) best = std::max(best, s);
    return best;
}

std::vector<double> poisson_arrivals(double rate_per_s, double horizon_ms, std::uint64_t seed) {
    if (rate_per_s <= 0.0) throw std::invalid_argument("rate_per_s must be > 0");
    if (horizon_ms < 0.0) throw std::invalid_argument("horizon_ms must be >= 0");
    Rng rng(seed);
    const double mean_gap_ms = 1000.0 / rate_per_s;
    std::vector<double> times;
    double t = rng.exponential(mean_gap_ms);
    while (t < horizon_ms) {
        times.push_back(t);
        t += rng.exponential(mean_gap_ms);
    }
    return times;
}

std::vector<double> bursty_arrivals(double rate_per_s, double horizon_ms, double burst_amp,
                                    double period_ms, std::uint64_t seed) {
    if (rate_per_s <= 0.0) throw std::invalid_argument("rate_per_s must be > 0");
    if (horizon_ms < 0.0) throw std::invalid_argument("horizon_ms must be >= 0");
    if (burst_amp < 0.0 || burst_amp >= 1.0)
        throw std::invalid_argument("burst_amp must be in [0,1)");
    if (period_ms <= 0.0) throw std::invalid_argument("period_ms must be > 0");
    // thinning against the peak rate
    Rng rng(seed);
    const double peak = rate_per_s * (1.0 + burst_amp);
    const double mean_gap_ms = 1000.0 / peak;
    std::vector<double> times;
    double t = 0.0;
    while (true) {
        t += rng.exponential(mean_gap_ms);
        if (t >= horizon_ms) break;
        double rate_t = rate_per_s * (1.0 + burst_amp * std::sin(2.0 * M_PI * t / period_ms));
        if (rng.uniform01() < rate_t / peak) times.push_back(t);
    }
    return times;
}

namespace {

double clip(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

int clip_round(double v, int lo, int hi) {
    return static_cast<int>(clip(std::llround(v), lo, hi));
}

}  // namespace

Request sample_request(const ProfileSet& profiles, double arrival_ms, std::uint64_t seed) {
    profiles.validate();
    Rng rng(seed);
    Request req;
    req.arrival_ms = arrival_ms;
    const auto& shared = profiles.experts.front();
    req.prompt_tokens =
        clip_round(rng.normal(shared.prompt_mean, shared.prompt_std), 1, profiles.max_prompt);
    req.score.reserve(profiles.experts.size());
    req.out_len.reserve(profiles.experts.size());
    for (const auto& e : profiles.experts) {
        req.score.push_back(clip(rng.normal(e.score_mean, e.score_std), 0.0, 1.0));
        req.out_len.push_back(
            clip_round(rng.normal(e.length_mean, e.length_std), 1, profiles.max_tokens));
    }
    return req;
}

std::vector<Request> build_requests(const ProfileSet& profiles,
                                    const std::vector<double>& arrivals, std::uint64_t seed) {
    std::vector<Request> out;
    out.reserve(arrivals.size());
    for (std::size_t i = 0; i < arrivals.size(); ++i) {
        Request r = sample_request(profiles, arrivals[i], mix_seed(seed, i));
        r.id = static_cast<int>(i);
        out.push_back(std::move(r));
    }
    return out;
}

Trace load_trace(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trace file: " + path.string());
    std::string line;
    int line_no = 0;

    auto parse_line = [&](const std::string& text) -> json {
        json j = json::parse(text, nullptr, false);
        if (j.is_discarded())
            throw std::runtime_error("trace parse error at line " + std::to_string(line_no));
        return j;
    };

    if (!std::getline(in, line)) throw std::runtime_error("trace file is empty: " + path.string());
    ++line_no;
    json header = parse_line(line);
    if (!header.contains("version") || header["version"].get<int>() != 1)
        throw std::runtime_error("unknown trace version (expected 1)");
    Trace trace;
    trace.n_experts = header.at("experts").get<int>();
    if (trace.n_experts < 1) throw std::runtime_error("trace header declares experts < 1");

    double prev_t = -1.0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = parse_line(line);
        TraceRow row;
        try {
            row.t_ms = j.at("t_ms").get<double>();
            row.prompt_tokens = j.at("p").get<int>();
            for (const auto& e : j.at("experts")) {
                row.score.push_back(e.at("s").get<double>());
                row.out_len.push_back(e.at("d").get<int>());
            }
        } catch (const json::exception&) {
            throw std::runtime_error("trace parse error at line " + std::to_string(line_no));
        }
        if (static_cast<int>(row.score.size()) != trace.n_experts)
            throw std::runtime_error("trace schema error at line " + std::to_string(line_no) +
                                     ": expected " + std::to_string(trace.n_experts) +
                                     " expert entries, got " + std::to_string(row.score.size()));
        if (row.t_ms < prev_t)
            throw std::runtime_error("trace ordering error at line " + std::to_string(line_no) +
                                     ": arrival_ms decreases");
        if (row.prompt_tokens < 1)
            throw std::runtime_error("trace parse error at line " + std::to_string(line_no) +
                                     ": prompt_tokens < 1");
        prev_t = row.t_ms;
        trace.rows.push_back(std::move(row));
    }
    return trace;
}

void save_trace(const Trace& trace, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace file: " + path.string());
    out << json{{"version", 1}, {"experts", trace.n_experts}}.dump() << '\n';
    for (const auto& row : trace.rows) {
        json experts = json::array();
        for (std::size_t n = 0; n < row.score.size(); ++n)
            experts.push_back({{"s", row.score[n]}, {"d", row.out_len[n]}});
        out << json{{"t_ms", row.t_ms}, {"p", row.prompt_tokens}, {"experts", experts}}.dump()
            << '\n';
    }
}

Trace trace_from_requests(const std::vector<Request>& requests, int n_experts) {
    Trace trace;
    trace.n_experts = n_experts;
    trace.rows.reserve(requests.size());
    for (const auto& r : requests) {
        TraceRow row;
        row.t_ms = r.arrival_ms;
        row.prompt_tokens = r.prompt_tokens;
        row.score = r.score;
        row.out_len = r.out_len;
        trace.rows.push_back(std::move(row));
    }
    return trace;
}

std::vector<Request> requests_from_trace(const Trace& trace) {
    std::vector<Request> out;
    out.reserve(trace.rows.size());
    for (std::size_t i = 0; i < trace.rows.size(); ++i) {
        const auto& row = trace.rows[i];
        Request r;
        r.id = static_cast<int>(i);
        r.arrival_ms = row.t_ms;
        r.prompt_tokens = row.prompt_tokens;
        r.score = row.score;
        r.out_len = row.out_len;
        out.push_back(std::move(r));
    }
    return out;
}

double trace_rate_per_s(const Trace& trace) {
    if (trace.rows.size() < 2) throw std::invalid_argument("trace needs at least 2 rows");
    double span_ms = trace.rows.back().t_ms - trace.rows.front().t_ms;
    if (span_ms <= 0.0) throw std::invalid_argument("trace has zero duration");
    return 1000.0 * static_cast<double>(trace.rows.size() - 1) / span_ms;
}

Trace rescale_trace(const Trace& trace, double target_rate_per_s) {
    if (trace.rows.empty()) throw std::invalid_argument("trace is empty");
    if (target_rate_per_s <= 0.0) throw std::invalid_argument("target rate must be > 0");
    const double factor = trace_rate_per_s(trace) / target_rate_per_s;
    Trace out = trace;
    for (auto& row : out.rows) row.t_ms *= factor;
    return out;
}

}  // namespace qrouted
