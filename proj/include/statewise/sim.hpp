#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "chain.hpp"
#include "model.hpp"
#include "outcome.hpp"
#include "policy.hpp"
#include "record.hpp"
#include "rng.hpp"

namespace statewise {

struct SimSummary {
    std::int64_t n_events = 0;
    std::int64_t n_arrivals = 0;
    std::int64_t n_treated = 0;
    std::int64_t n_served = 0;
    std::int64_t n_missing_reward = 0;  // arrivals still in system at the horizon
    double total_reward = 0.0;          // realized rewards only
    double end_time = 0.0;
    double q0_time_integral = 0.0;      // integral of queue length over time
    double q1_time_integral = 0.0;
    double total_sojourn = 0.0;         // summed over served customers
};

namespace detail {

struct PendingCustomer {
    std::size_t slot;        // index into the unflushed record window
    std::int64_t record_i;
    double arrival_time = 0.0;
    double service_start = 0.0;
    double noise = 0.0;
    std::vector<double> x;
    int w = 0;
};

}  // namespace detail

// Simulate the embedded chain, drawing treatments from `policy`. Records are
// handed to `sink` in index order once finalized: arrival records are held
// back until service completes (realized wait/service, and the reward itself
// for deferred-outcome models), so tail arrivals still in the system at the
// horizon flush with those fields missing.
//
// Per-event draw order (fixed; seed determinism contract): gap, event type,
// then for arrivals covariates, treatment uniform, outcome noise.
template <class Sink>
SimSummary simulate(const SystemSpec& spec, const PolicySpec& policy, const Horizon& horizon,
                    std::uint64_t seed, Sink&& sink) {
    validate(spec);
    validate_policy(policy, spec);
    const bool deferred = outcome_is_deferred(spec);
    Rng rng(mix_seed(seed, 0xa1));

    SimSummary sum;
    int k0 = spec.init_k0, k1 = spec.single_queue() ? 0 : spec.init_k1;
    double t = 0.0;

    // Window of records awaiting finalization; front flushes once complete.
    std::deque<EventRecord> window;
    std::deque<char> done;
    std::size_t flushed = 0;  // window slots consumed so far (global offset)
    auto flush_ready = [&]() {
        while (!window.empty() && done.front()) {
            sink(std::move(window.front()));
            window.pop_front();
            done.pop_front();
            ++flushed;
        }
    };

    std::deque<detail::PendingCustomer> fifo0, fifo1;

    auto complete_service = [&](std::deque<detail::PendingCustomer>& fifo, double now) {
        detail::PendingCustomer cust = std::move(fifo.front());
        fifo.pop_front();
        EventRecord& rec = window[cust.slot - flushed];
        rec.wait = cust.service_start - cust.arrival_time;
        rec.svc = now - cust.service_start;
        sum.total_sojourn += rec.wait + rec.svc;
        ++sum.n_served;
        if (deferred) {
            rec.r = outcome_mean_deferred(spec, cust.x, rec.wait + rec.svc) +
                    spec.outcome_noise_sd * cust.noise;
            sum.total_reward += rec.r;
        }
        done[cust.slot - flushed] = 1;
        if (!fifo.empty()) fifo.front().service_start = now;
    };

    const std::int64_t max_events =
        horizon.kind == Horizon::Kind::Events ? static_cast<std::int64_t>(horizon.value)
                                              : std::numeric_limits<std::int64_t>::max();
    if (horizon.kind == Horizon::Kind::Events && max_events <= 0)
        throw std::invalid_argument("simulate: event horizon must be positive");
    if (horizon.kind == Horizon::Kind::Time && !(horizon.value > 0.0))
        throw std::invalid_argument("simulate: time horizon must be positive");

    while (sum.n_events < max_events) {
        const double rate = total_rate(spec, k0, k1);
        if (rate <= 0.0)
            throw std::runtime_error("simulate: absorbing state " +
                                     spec.state_label(spec.state_index(k0, k1)) + " at t=" +
                                     std::to_string(t));
        const double gap = rng.exponential(rate);
        if (horizon.kind == Horizon::Kind::Time && t + gap > horizon.value) break;

        // Competing exponentials decide the event type.
        const double lam = spec.arrival_rate_at(k0, k1);
        const double m0 = k0 > 0 ? spec.mu0 : 0.0;
        const double m1 = (!spec.single_queue() && k1 > 0) ? spec.mu1 : 0.0;
        double u = rng.uniform() * rate;
        EventType a;
        if (u < lam) a = EventType::Arrival;
        else if (u < lam + m0) a = EventType::Service0;
        else a = EventType::Service1;

        sum.q0_time_integral += k0 * gap;
        sum.q1_time_integral += k1 * gap;
        t += gap;

        EventRecord rec;
        rec.i = sum.n_events;
        rec.t = t;
        rec.dt = gap;
        rec.a = a;
        rec.k0 = k0;
        rec.k1 = k1;
        const std::size_t slot = flushed + window.size();
        window.push_back(std::move(rec));
        done.push_back(0);
        EventRecord& cur = window.back();

        switch (a) {
            case EventType::Arrival: {
                ++sum.n_arrivals;
                cur.x.resize(static_cast<size_t>(spec.covariate_dim));
                for (double& xi : cur.x) xi = rng.normal();
                const double pw = policy_prob(policy, spec, cur.x, spec.state_index(k0, k1));
                cur.w = rng.bernoulli(pw) ? 1 : 0;
                sum.n_treated += cur.w;
                const double noise = rng.normal();

                bool joins;
                int queue = 0;
                if (spec.single_queue()) {
                    joins = spec.treatment_affects_state ? cur.w == 1 : true;
                } else {
                    joins = true;
                    queue = effective_queue(spec, cur.w, k0, k1);
                }
                if (!deferred) {
                    cur.r = outcome_mean_immediate(spec, cur.w, cur.x, k0) +
                            spec.outcome_noise_sd * noise;
                    sum.total_reward += cur.r;
                } else {
                    cur.r = kMissing;
                }
                if (joins) {
                    cur.wait = kMissing;  // realized when served
                    cur.svc = kMissing;
                    detail::PendingCustomer cust;
                    cust.slot = slot;
                    cust.record_i = cur.i;
                    cust.arrival_time = t;
                    cust.noise = noise;
                    cust.w = cur.w;
                    if (deferred) cust.x = cur.x;
                    auto& fifo = queue == 0 ? fifo0 : fifo1;
                    const int len = queue == 0 ? k0 : k1;
                    cust.service_start = len == 0 ? t : 0.0;  // else set on reaching the head
                    fifo.push_back(std::move(cust));
                    (queue == 0 ? k0 : k1) += 1;
                    // Record stays open until served (wait/svc, and the reward
                    // itself for deferred outcomes).
                } else {
                    cur.wait = 0.0;
                    cur.svc = 0.0;
                    done.back() = 1;
                }
                break;
            }
            case EventType::Service0:
                cur.w = kNoTreatment;
                cur.r = 0.0;
                done.back() = 1;
                complete_service(fifo0, t);
                k0 -= 1;
                break;
            case EventType::Service1:
                cur.w = kNoTreatment;
                cur.r = 0.0;
                done.back() = 1;
                complete_service(fifo1, t);
                k1 -= 1;
                break;
        }
        ++sum.n_events;
        flush_ready();
    }

    // Horizon reached: unserved arrivals flush with missing wait/svc, and a
    // missing reward too when outcomes are realized at departure.
    if (deferred) sum.n_missing_reward = static_cast<std::int64_t>(fifo0.size() + fifo1.size());
    for (auto& rec : window) sink(std::move(rec));
    window.clear();

    sum.end_time = horizon.kind == Horizon::Kind::Time ? horizon.value : t;
    if (horizon.kind == Horizon::Kind::Time) {
        const double tail = horizon.value - t;
        sum.q0_time_integral += k0 * tail;
        sum.q1_time_integral += k1 * tail;
    }
    return sum;
}

inline Trajectory simulate_trajectory(const SystemSpec& spec, const PolicySpec& policy,
                                      const Horizon& horizon, std::uint64_t seed,
                                      SimSummary* out_summary = nullptr) {
    Trajectory traj;
    traj.spec = spec;
    traj.seed = seed;
    traj.horizon = horizon;
    if (horizon.kind == Horizon::Kind::Events)
        traj.records.reserve(static_cast<size_t>(horizon.value));
    SimSummary sum = simulate(spec, policy, horizon, seed,
                              [&](EventRecord&& e) { traj.records.push_back(std::move(e)); });
    if (out_summary) *out_summary = sum;
    return traj;
}

// --- conformance validation ----------------------------------------------------
// Checks a trajectory against the spec's embedded-chain support: queue-state
// updates implied by each record, event feasibility, gap positivity, and the
// field-presence rules. Returns human-readable violations (empty = clean).
inline std::vector<std::string> validate_trajectory(const Trajectory& traj,
                                                    std::size_t max_violations = 20) {
    const SystemSpec& spec = traj.spec;
    std::vector<std::string> out;
    auto complain = [&](std::int64_t i, const std::string& msg) {
        if (out.size() < max_violations) out.push_back("record " + std::to_string(i) + ": " + msg);
    };

    int k0 = spec.init_k0, k1 = spec.single_queue() ? 0 : spec.init_k1;
    double t_prev = 0.0;
    for (const EventRecord& e : traj.records) {
        if (out.size() >= max_violations) break;
        if (e.k0 != k0 || e.k1 != k1)
            complain(e.i, "queue state (" + std::to_string(e.k0) + "," + std::to_string(e.k1) +
                              ") does not match evolution (" + std::to_string(k0) + "," +
                              std::to_string(k1) + ")");
        if (!(e.dt > 0.0)) complain(e.i, "non-positive gap");
        if (std::abs((t_prev + e.dt) - e.t) > 1e-9 * std::max(1.0, std::abs(e.t)))
            complain(e.i, "epoch does not accumulate gaps");
        t_prev = e.t;

        // Event feasibility at the pre-event state.
        const double rate = total_rate(spec, e.k0, e.k1);
        if (rate <= 0.0) {
            complain(e.i, "event recorded at an absorbing state");
        } else {
            const EventTypeDist f = event_type_dist(spec, e.k0, e.k1);
            if (f[e.a] <= 0.0) complain(e.i, "event type impossible at this state");
        }

        if (e.is_arrival()) {
            if (static_cast<int>(e.x.size()) != spec.covariate_dim)
                complain(e.i, "arrival without a full covariate vector");
            if (e.w != 0 && e.w != 1) complain(e.i, "arrival treatment must be 0/1");
            // Apply the effect.
            if (spec.single_queue()) {
                const bool joins = spec.treatment_affects_state ? e.w == 1 : true;
                if (joins) k0 += 1;
            } else {
                const int queue = effective_queue(spec, e.w, e.k0, e.k1);
                (queue == 0 ? k0 : k1) += 1;
            }
            if (!is_missing(e.wait) && e.wait < 0.0) complain(e.i, "negative wait");
            if (!is_missing(e.svc) && e.svc < 0.0) complain(e.i, "negative service time");
        } else {
            if (!e.x.empty()) complain(e.i, "covariates on a non-arrival record");
            if (e.w != kNoTreatment) complain(e.i, "treatment set on a non-arrival record");
            if (e.r != 0.0) complain(e.i, "non-zero reward on a non-arrival record");
            if (e.a == EventType::Service0) k0 -= 1;
            else k1 -= 1;
        }
        if (k0 < 0 || k0 > spec.cap0 || k1 < 0 || (!spec.single_queue() && k1 > spec.cap1))
            complain(e.i, "queue state leaves [0, cap] after effect");
    }
    return out;
}

}  // namespace statewise
