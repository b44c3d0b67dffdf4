#include "qrouted/metrics.hpp"

#include <cstdio>
#include <fstream>

namespace qrouted {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

Aggregates compute_aggregates(const std::vector<RequestRow>& rows, double latency_slo_ms) {
    Aggregates a;
    a.n_total = static_cast<int>(rows.size());
    double phi_sum = 0.0, lat_sum = 0.0;
    double wait = 0.0, e2e = 0.0;
    for (const auto& r : rows) {
        phi_sum += r.phi;
        if (r.dropped) {
            ++a.n_dropped;
            continue;
        }
        ++a.n_completed;
        lat_sum += r.l_ms_per_tok;
        if (r.l_ms_per_tok > latency_slo_ms) ++a.n_violations;
        wait += r.wait_ms;
        e2e += r.e2e_ms;
    }
    if (a.n_total > 0) {
        a.avg_qos = phi_sum / a.n_total;
        a.drop_rate = static_cast<double>(a.n_dropped) / a.n_total;
    }
    if (a.n_completed > 0) {
        a.avg_latency_ms_per_token = lat_sum / a.n_completed;
        a.violation_rate = static_cast<double>(a.n_violations) / a.n_completed;
        a.mean_wait_ms = wait / a.n_completed;
        a.mean_e2e_ms = e2e / a.n_completed;
    }
    return a;
}

MetricsRecord build_metrics(const std::vector<Request>& requests, double latency_slo_ms,
                            std::vector<GpuSample> gpu) {
    MetricsRecord m;
    m.rows.reserve(requests.size());
    double routing_sum = 0.0, infer_sum = 0.0;
    for (const auto& r : requests) {
        RequestRow row;
        row.id = r.id;
        if (r.dropped || r.assigned_expert == kUnassigned) {
            row.dropped = true;
            row.action = 0;
        } else {
            if (!r.completed())
                throw std::logic_error("request " + std::to_string(r.id) +
                                       " still resident; drain before building metrics");
            row.action = r.assigned_expert + 1;
            row.s = r.score[r.assigned_expert];
            row.d = r.out_len[r.assigned_expert];
            row.l_ms_per_tok = (r.completion_ms - r.arrival_ms) / row.d;
            row.phi = row.l_ms_per_tok <= latency_slo_ms ? row.s : 0.0;
            row.wait_ms = r.prefill_start_ms - r.enqueue_ms;
            row.e2e_ms = r.completion_ms - r.arrival_ms;
            // routing time is enqueue - arrival: the configured overhead plus
            // any serialization delay in the router stage
            routing_sum += r.enqueue_ms - r.arrival_ms;
            infer_sum += r.completion_ms - r.prefill_start_ms;
        }
        m.rows.push_back(row);
    }
    m.agg = compute_aggregates(m.rows, latency_slo_ms);
    if (m.agg.n_completed > 0) {
        m.agg.mean_routing_ms = routing_sum / m.agg.n_completed;
        m.agg.mean_inference_ms = infer_sum / m.agg.n_completed;
    }
    m.gpu = std::move(gpu);
    return m;
}

void write_requests_csv(const std::vector<RequestRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "id,action,s,d,l_ms_per_tok,phi,dropped,wait_ms,e2e_ms\n";
    for (const auto& r : rows) {
        out << r.id << ',' << r.action << ',' << format_double(r.s) << ',' << r.d << ','
            << format_double(r.l_ms_per_tok) << ',' << format_double(r.phi) << ','
            << (r.dropped ? 1 : 0) << ',' << format_double(r.wait_ms) << ','
            << format_double(r.e2e_ms) << '\n';
    }
}

void write_gpu_csv(const std::vector<GpuSample>& samples, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "t_ms,expert,e_n\n";
    for (const auto& s : samples)
        out << format_double(s.t_ms) << ',' << s.expert << ',' << format_double(s.utilization)
            << '\n';
}

nlohmann::ordered_json aggregates_to_json(const Aggregates& a) {
    return {{"n_total", a.n_total},
            {"n_completed", a.n_completed},
            {"n_dropped", a.n_dropped},
            {"n_violations", a.n_violations},
            {"avg_qos", a.avg_qos},
            {"avg_latency_ms_per_token", a.avg_latency_ms_per_token},
            {"violation_rate", a.violation_rate},
            {"drop_rate", a.drop_rate},
            {"latency_decomposition_ms",
             {{"routing", a.mean_routing_ms},
              {"waiting", a.mean_wait_ms},
              {"inference", a.mean_inference_ms},
              {"e2e", a.mean_e2e_ms}}}};
}

void write_aggregates_json(const Aggregates& agg, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << aggregates_to_json(agg).dump(2) << '\n';
}

void write_metrics(const MetricsRecord& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_requests_csv(m.rows, dir / "requests.csv");
    write_aggregates_json(m.agg, dir / "aggregates.json");
    write_gpu_csv(m.gpu, dir / "gpu_usage.csv");
}

}  // namespace qrouted
