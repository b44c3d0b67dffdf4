#include "qrouted/simcore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace qrouted {

ExpertSim::ExpertSim(ExpertProfile profile, SimLimits limits, std::vector<Request>* registry)
    : profile_(std::move(profile)), limits_(limits), registry_(registry) {
    profile_.validate();
    if (limits_.run_cap < 1 || limits_.wait_cap < 1)
        throw std::invalid_argument("queue capacities must be >= 1");
}

double ExpertSim::footprint(const Request& r) const {
    return profile_.per_token_kv *
           static_cast<double>(r.prompt_tokens + r.out_len[profile_.expert_id]);
}

RouteResult ExpertSim::try_admit(int request_id, double now_ms) {
    Request& r = req(request_id);
    if (r.assigned_expert != kUnassigned || r.dropped)
        throw std::logic_error("request " + std::to_string(request_id) + " already routed");
    if (now_ms < r.arrival_ms) throw std::logic_error("routing before arrival");
    if (static_cast<int>(waiting_.size()) >= limits_.wait_cap)
        return {false, RejectReason::QueueFull};
    if (mem_reserved_ + footprint(r) > profile_.kv_capacity)
        return {false, RejectReason::MemoryExhausted};
    r.assigned_expert = profile_.expert_id;
    r.enqueue_ms = now_ms;
    waiting_.push_back(request_id);
    mem_reserved_ += footprint(r);
    return {true, RejectReason::QueueFull};
}

double ExpertSim::begin_iteration(double now_ms) {
    if (busy()) throw std::logic_error("iteration already in flight");
    if (!has_work()) throw std::logic_error("begin_iteration without work");
    if (!waiting_.empty() && static_cast<int>(running_.size()) < limits_.run_cap) {
        // prefill admits the waiting head alone this iteration
        Request& r = req(waiting_.front());
        r.prefill_start_ms = now_ms;
        double end = now_ms + profile_.k1 * static_cast<double>(r.prompt_tokens);
        in_flight_ = InFlight{IterationKind::Prefill, waiting_.front(), now_ms, end};
        return end;
    }
    double resident_tokens = 0.0;
    for (int id : running_) resident_tokens += req(id).prompt_tokens + req(id).tokens_done;
    double end = now_ms + profile_.k2 * resident_tokens;
    in_flight_ = InFlight{IterationKind::Decode, -1, now_ms, end};
    return end;
}

void ExpertSim::release(Request& r) {
    double f = footprint(r);
    mem_used_ -= f;
    mem_reserved_ -= f;
}

IterationOutcome ExpertSim::finish_iteration() {
    if (!busy()) throw std::logic_error("no iteration in flight");
    InFlight fl = *in_flight_;
    in_flight_.reset();
    IterationOutcome out;
    out.kind = fl.kind;
    out.start_ms = fl.start_ms;
    out.end_ms = fl.end_ms;

    if (fl.kind == IterationKind::Prefill) {
        waiting_.pop_front();
        Request& r = req(fl.prefill_req);
        r.tokens_done = 1;  // prefill produces the first token
        mem_used_ += profile_.per_token_kv * static_cast<double>(r.prompt_tokens + 1);
        out.prefilled = fl.prefill_req;
        if (r.tokens_done >= r.out_len[profile_.expert_id]) {
            r.completion_ms = fl.end_ms;
            release(r);
            out.completed.push_back(fl.prefill_req);
        } else {
            running_.push_back(fl.prefill_req);
        }
        return out;
    }

    // decode: every running request gains one token
    for (int id : running_) {
        Request& r = req(id);
        r.tokens_done += 1;
        mem_used_ += profile_.per_token_kv;
    }
    auto it = running_.begin();
    while (it != running_.end()) {
        Request& r = req(*it);
        if (r.tokens_done >= r.out_len[profile_.expert_id]) {
            r.completion_ms = fl.end_ms;
            release(r);
            out.completed.push_back(*it);
            it = running_.erase(it);
        } else {
            ++it;
        }
    }
    return out;
}

IterationOutcome ExpertSim::step_iteration(double now_ms) {
    if (!has_work()) {
        IterationOutcome idle;
        idle.start_ms = idle.end_ms = now_ms;
        return idle;
    }
    begin_iteration(now_ms);
    IterationOutcome out = finish_iteration();
    check_invariants();
    return out;
}

void ExpertSim::check_invariants() const {
    const double eps = 1e-9 * std::max(1.0, profile_.kv_capacity);
    if (mem_used_ > mem_reserved_ + eps)
        throw SimInvariantError("expert " + std::to_string(profile_.expert_id) +
                                ": mem_used exceeds mem_reserved");
    if (mem_reserved_ > profile_.kv_capacity + eps)
        throw SimInvariantError("expert " + std::to_string(profile_.expert_id) +
                                ": kv capacity exceeded");
    if (static_cast<int>(running_.size()) > limits_.run_cap)
        throw SimInvariantError("running queue over capacity");
    if (static_cast<int>(waiting_.size()) > limits_.wait_cap)
        throw SimInvariantError("waiting queue over capacity");
}

MultiExpertSim::MultiExpertSim(const ProfileSet& profiles, SimLimits limits,
                               std::vector<Request> requests)
    : requests_(std::move(requests)) {
    profiles.validate();
    experts_.reserve(profiles.experts.size());
    for (const auto& p : profiles.experts) experts_.emplace_back(p, limits, &requests_);
    for (const auto& r : requests_) {
        if (static_cast<int>(r.score.size()) != profiles.size())
            throw std::invalid_argument("request " + std::to_string(r.id) +
                                        " has wrong expert column count");
    }
}

void MultiExpertSim::arm(int expert, double now_ms) {
    ExpertSim& e = experts_[expert];
    if (!e.busy() && e.has_work()) {
        double end = e.begin_iteration(now_ms);
        events_.push(IterEnd{end, expert});
    }
}

RouteResult MultiExpertSim::route_into(int expert, int request_id, double now_ms) {
    if (expert < 0 || expert >= n_experts()) throw std::out_of_range("expert index");
    if (std::abs(now_ms - clock_) > 1e-9)
        throw std::logic_error("route_into must run at the current clock; advance first");
    RouteResult res = experts_[expert].try_admit(request_id, now_ms);
    if (res.accepted) {
        if (log_enabled_) log_.push_back({now_ms, expert, "arrival", request_id});
        arm(expert, now_ms);
        experts_[expert].check_invariants();
    }
    return res;
}

void MultiExpertSim::process_event(const IterEnd& ev,
                                   std::vector<std::pair<double, int>>& completions) {
    sample_gpu_until(ev.t_ms);
    ExpertSim& e = experts_[ev.expert];
    IterationOutcome out = e.finish_iteration();
    if (log_enabled_)
        log_.push_back({ev.t_ms, ev.expert, "iteration_end", out.prefilled});
    for (int id : out.completed) {
        completions.emplace_back(ev.t_ms, id);
        if (log_enabled_) log_.push_back({ev.t_ms, ev.expert, "completion", id});
    }
    e.check_invariants();
    arm(ev.expert, ev.t_ms);
}

std::vector<int> MultiExpertSim::advance_until(double t_ms) {
    if (t_ms < clock_) throw std::logic_error("advance_until into the past");
    std::vector<std::pair<double, int>> completions;
    while (!events_.empty() && events_.top().t_ms <= t_ms) {
        IterEnd ev = events_.top();
        events_.pop();
        clock_ = ev.t_ms;
        process_event(ev, completions);
    }
    clock_ = t_ms;
    sample_gpu_until(t_ms);
    std::sort(completions.begin(), completions.end());
    std::vector<int> ids;
    ids.reserve(completions.size());
    for (auto& [t, id] : completions) ids.push_back(id);
    return ids;
}

std::vector<int> MultiExpertSim::drain() {
    std::vector<std::pair<double, int>> completions;
    while (!events_.empty()) {
        IterEnd ev = events_.top();
        events_.pop();
        clock_ = ev.t_ms;
        process_event(ev, completions);
    }
    std::sort(completions.begin(), completions.end());
    std::vector<int> ids;
    ids.reserve(completions.size());
    for (auto& [t, id] : completions) ids.push_back(id);
    return ids;
}

GlobalSnapshot MultiExpertSim::snapshot(double now_ms) const {
    GlobalSnapshot snap;
    snap.now_ms = now_ms;
    snap.experts.reserve(experts_.size());
    for (const auto& e : experts_) {
        SnapshotExpert se;
        se.expert_id = e.profile().expert_id;
        se.utilization = e.mem_used() / e.profile().kv_capacity;
        se.run_cap = e.limits().run_cap;
        se.wait_cap = e.limits().wait_cap;
        for (int id : e.running()) {
            const Request& r = requests_[id];
            se.running.push_back(
                {id, r.prompt_tokens, r.tokens_done, now_ms - r.arrival_ms,
                 e.profile().per_token_kv * static_cast<double>(r.prompt_tokens + r.tokens_done) /
                     e.profile().kv_capacity});
        }
        for (int id : e.waiting()) {
            const Request& r = requests_[id];
            se.waiting.push_back({id, r.prompt_tokens, 0, now_ms - r.arrival_ms, 0.0});
        }
        snap.experts.push_back(std::move(se));
    }
    return snap;
}

void MultiExpertSim::set_gpu_sampler(double interval_ms) {
    if (interval_ms <= 0.0) throw std::invalid_argument("gpu sample interval must be > 0");
    gpu_interval_ms_ = interval_ms;
    next_gpu_sample_ms_ = interval_ms;
}

void MultiExpertSim::sample_gpu_until(double t_ms) {
    if (gpu_interval_ms_ <= 0.0) return;
    while (next_gpu_sample_ms_ <= t_ms) {
        for (const auto& e : experts_)
            gpu_samples_.push_back({next_gpu_sample_ms_, e.profile().expert_id,
                                    e.mem_used() / e.profile().kv_capacity});
        next_gpu_sample_ms_ += gpu_interval_ms_;
    }
}

void MultiExpertSim::check_invariants() const {
    for (const auto& e : experts_) e.check_invariants();
}

void write_event_log(const std::vector<SimLogEntry>& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write event log: " + path.string());
    for (const auto& e : log) {
        out << nlohmann::json{{"t_ms", e.t_ms}, {"expert", e.expert}, {"kind", e.kind},
                              {"req", e.req}}
                   .dump()
            << '\n';
    }
}

}  // namespace qrouted
