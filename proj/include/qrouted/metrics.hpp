#pragma once
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "qrouted/simcore.hpp"

namespace qrouted {

struct RequestRow {
    int id = 0;
    int action = 0;  // effective action: 0 = dropped (incl. forced drops)
    double s = 0.0;
    int d = 0;
    double l_ms_per_tok = 0.0;
    double phi = 0.0;
    bool dropped = false;
    double wait_ms = 0.0;
    double e2e_ms = 0.0;
};

struct Aggregates {
    int n_total = 0;
    int n_completed = 0;
    int n_dropped = 0;
    int n_violations = 0;
    double avg_qos = 0.0;  // mean phi over every request; drops count 0
    double avg_latency_ms_per_token = 0.0;  // over completed
    double violation_rate = 0.0;            // violations / completed
    double drop_rate = 0.0;
    double mean_routing_ms = 0.0;  // decomposition over completed
    double mean_wait_ms = 0.0;
    double mean_inference_ms = 0.0;
    double mean_e2e_ms = 0.0;
};

struct MetricsRecord {
    std::vector<RequestRow> rows;
    Aggregates agg;
    std::vector<GpuSample> gpu;
};

Aggregates compute_aggregates(const std::vector<RequestRow>& rows, double latency_slo_ms);

// Rows derived from the finished simulation; every routed request must have
// completed (run after drain).
MetricsRecord build_metrics(const std::vector<Request>& requests, double latency_slo_ms,
                            std::vector<GpuSample> gpu);

// Fixed-format float so re-runs are byte-identical.
std::string format_double(double v);

void write_requests_csv(const std::vector<RequestRow>& rows, const std::filesystem::path& path);
void write_gpu_csv(const std::vector<GpuSample>& samples, const std::filesystem::path& path);
void write_aggregates_json(const Aggregates& agg, const std::filesystem::path& path);
nlohmann::ordered_json aggregates_to_json(const Aggregates& agg);

void write_metrics(const MetricsRecord& m, const std::filesystem::path& dir);

}  // namespace qrouted
