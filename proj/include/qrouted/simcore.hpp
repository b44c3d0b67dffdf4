#pragma once
#include <deque>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrouted/workload.hpp"

namespace qrouted {

struct SimLimits {
    int run_cap = 5;
    int wait_cap = 5;
};

enum class RejectReason { QueueFull, MemoryExhausted };

struct RouteResult {
    bool accepted = false;
    RejectReason reason = RejectReason::QueueFull;
};

enum class IterationKind { Prefill, Decode, Idle };

struct IterationOutcome {
    IterationKind kind = IterationKind::Idle;
    double start_ms = 0.0;
    double end_ms = 0.0;
    int prefilled = -1;          // request admitted to running this iteration
    std::vector<int> completed;  // requests finishing at end_ms
};

// Breach of the memory/queue invariants; indicates an admission-logic bug.
struct SimInvariantError : std::logic_error {
    using std::logic_error::logic_error;
};

struct SnapshotRequest {
    int id = 0;
    int prompt_tokens = 0;
    int tokens_done = 0;
    double age_ms = 0.0;    // now - arrival
    double mem_share = 0.0; // per_token_kv*(p + tokens_done)/kv_capacity; 0 while waiting
};

struct SnapshotExpert {
    int expert_id = 0;
    double utilization = 0.0;  // mem_used / kv_capacity
    int run_cap = 0;
    int wait_cap = 0;
    std::vector<SnapshotRequest> running;
    std::vector<SnapshotRequest> waiting;
};

struct GlobalSnapshot {
    double now_ms = 0.0;
    std::vector<SnapshotExpert> experts;
};

struct GpuSample {
    double t_ms = 0.0;
    int expert = 0;
    double utilization = 0.0;
};

struct SimLogEntry {
    double t_ms = 0.0;
    int expert = -1;
    std::string kind;  // arrival | iteration_end | completion
    int req = -1;
};

// One edge expert: waiting FIFO, running batch, memory ledger, iteration clock.
// Admission reserves the full lifetime KV footprint, so the capacity bound
// holds as an invariant for every reachable state.
class ExpertSim {
public:
    ExpertSim(ExpertProfile profile, SimLimits limits, std::vector<Request>* registry);

    RouteResult try_admit(int request_id, double now_ms);

    bool has_work() const { return !waiting_.empty() || !running_.empty(); }
    bool busy() const { return in_flight_.has_value(); }
    double in_flight_end_ms() const { return in_flight_->end_ms; }
    IterationKind in_flight_kind() const { return in_flight_->kind; }
    int in_flight_prefill_req() const { return in_flight_->prefill_req; }

    // Starts one iteration at now_ms and returns its end time. Effects are
    // applied by finish_iteration. Requires !busy() and has_work().
    double begin_iteration(double now_ms);
    IterationOutcome finish_iteration();

    // Runs one complete iteration synchronously (begin + finish). Returns an
    // Idle outcome when there is no work.
    IterationOutcome step_iteration(double now_ms);

    const ExpertProfile& profile() const { return profile_; }
    const SimLimits& limits() const { return limits_; }
    const std::vector<int>& running() const { return running_; }
    const std::deque<int>& waiting() const { return waiting_; }
    double mem_used() const { return mem_used_; }
    double mem_reserved() const { return mem_reserved_; }

    void check_invariants() const;

private:
    struct InFlight {
        IterationKind kind;
        int prefill_req;
        double start_ms;
        double end_ms;
    };

    Request& req(int id) { return (*registry_)[id]; }
    const Request& req(int id) const { return (*registry_)[id]; }
    double footprint(const Request& r) const;
    void release(Request& r);

    ExpertProfile profile_;
    SimLimits limits_;
    std::vector<Request>* registry_;
    std::vector<int> running_;
    std::deque<int> waiting_;
    double mem_used_ = 0.0;
    double mem_reserved_ = 0.0;
    std::optional<InFlight> in_flight_;
};

// Deterministic event-driven simulation over N experts with a shared clock.
// Events at equal times are processed IterationEnd-first (arrivals are
// injected by the caller after advancing), ties between experts by id.
class MultiExpertSim {
public:
    MultiExpertSim(const ProfileSet& profiles, SimLimits limits, std::vector<Request> requests);

    RouteResult route_into(int expert, int request_id, double now_ms);

    // Processes every event with time <= t_ms; returns ids completed since the
    // previous call, ordered by (completion time, id). Clock ends at t_ms.
    std::vector<int> advance_until(double t_ms);

    // Runs until no expert has work; clock ends at the last event.
    std::vector<int> drain();

    GlobalSnapshot snapshot(double now_ms) const;

    const Request& request(int id) const { return requests_.at(id); }
    const std::vector<Request>& requests() const { return requests_; }
    void mark_dropped(int id) { requests_.at(id).dropped = true; }
    const ExpertSim& expert(int n) const { return experts_.at(n); }
    int n_experts() const { return static_cast<int>(experts_.size()); }
    double clock() const { return clock_; }
    bool quiescent() const { return events_.empty(); }

    void enable_event_log(bool on) { log_enabled_ = on; }
    const std::vector<SimLogEntry>& event_log() const { return log_; }

    void set_gpu_sampler(double interval_ms);
    const std::vector<GpuSample>& gpu_samples() const { return gpu_samples_; }

private:
    struct IterEnd {
        double t_ms;
        int expert;
        bool operator>(const IterEnd& o) const {
            if (t_ms != o.t_ms) return t_ms > o.t_ms;
            return expert > o.expert;
        }
    };

    void arm(int expert, double now_ms);
    void process_event(const IterEnd& ev, std::vector<std::pair<double, int>>& completions);
    void sample_gpu_until(double t_ms);
    void check_invariants() const;

    std::vector<Request> requests_;
    std::vector<ExpertSim> experts_;
    std::priority_queue<IterEnd, std::vector<IterEnd>, std::greater<IterEnd>> events_;
    double clock_ = 0.0;

    bool log_enabled_ = false;
    std::vector<SimLogEntry> log_;

    double gpu_interval_ms_ = 0.0;  // 0 = sampling off
    double next_gpu_sample_ms_ = 0.0;
    std::vector<GpuSample> gpu_samples_;
};

void write_event_log(const std::vector<SimLogEntry>& log, const std::filesystem::path& path);

}  // namespace qrouted
