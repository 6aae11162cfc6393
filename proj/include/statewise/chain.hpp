#pragma once

#include <algorithm>
#include <deque>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "model.hpp"

namespace statewise {

// Event types of the embedded chain. Numeric values double as the augmented
// state block index; the on-disk codes differ per family (see record.hpp).
enum class EventType : int { Service0 = 0, Service1 = 1, Arrival = 2 };

inline constexpr int kNumEventTypes = 3;

// Total event rate while the queue state is (k0, k1). Zero means absorbing.
inline double total_rate(const SystemSpec& spec, int k0, int k1 = 0) {
    double r = spec.arrival_rate_at(k0, k1);
    if (k0 > 0) r += spec.mu0;
    if (!spec.single_queue() && k1 > 0) r += spec.mu1;
    return r;
}

// P(next event type | queue state); competing exponentials.
struct EventTypeDist {
    double p_arrival = 0.0;
    double p_service0 = 0.0;
    double p_service1 = 0.0;
    double operator[](EventType a) const {
        switch (a) {
            case EventType::Arrival: return p_arrival;
            case EventType::Service0: return p_service0;
            case EventType::Service1: return p_service1;
        }
        return 0.0;
    }
};

inline EventTypeDist event_type_dist(const SystemSpec& spec, int k0, int k1 = 0) {
    const double total = total_rate(spec, k0, k1);
    if (total <= 0.0)
        throw std::runtime_error("event_type_dist: state " +
                                 spec.state_label(spec.state_index(k0, k1)) +
                                 " is absorbing (all rates zero)");
    EventTypeDist d;
    d.p_arrival = spec.arrival_rate_at(k0, k1) / total;
    if (k0 > 0) d.p_service0 = spec.mu0 / total;
    if (!spec.single_queue() && k1 > 0) d.p_service1 = spec.mu1 / total;
    return d;
}

// --- augmented states -------------------------------------------------------
// Augmented state = (event type, queue state observed just before the event).
// Flat index: int(a) * n_queue_states + queue_state_index.

inline int aug_index(const SystemSpec& spec, EventType a, int qidx) {
    return static_cast<int>(a) * spec.n_queue_states() + qidx;
}
inline std::pair<EventType, int> aug_decode(const SystemSpec& spec, int aidx) {
    const int nq = spec.n_queue_states();
    return {static_cast<EventType>(aidx / nq), aidx % nq};
}
inline std::string aug_label(const SystemSpec& spec, int aidx) {
    auto [a, q] = aug_decode(spec, aidx);
    const char* name = a == EventType::Arrival ? "arrival" : (a == EventType::Service0 ? "svc0" : "svc1");
    return std::string(name) + "@" + spec.state_label(q);
}

// Embedded-chain kernel over the augmented states reachable from the spec's
// initial state under the admission/routing profile pibar (one probability
// per queue state: chance an arrival there is treated).
struct ChainModel {
    SystemSpec spec;
    std::vector<double> pibar;
    std::vector<int> states;  // reachable augmented indices, ascending
    std::vector<int> pos;     // augmented index -> row position, or -1
    Eigen::MatrixXd kernel;   // row-stochastic over `states`
};

namespace detail {

// Queue-state successors of one augmented state, with probabilities.
inline void queue_successors(const SystemSpec& spec, const std::vector<double>& pibar,
                             EventType a, int qidx,
                             std::vector<std::pair<double, int>>& out) {
    out.clear();
    auto [k0, k1] = spec.state_of(qidx);
    switch (a) {
        case EventType::Service0:
            out.emplace_back(1.0, spec.state_index(k0 - 1, k1));
            return;
        case EventType::Service1:
            out.emplace_back(1.0, spec.state_index(k0, k1 - 1));
            return;
        case EventType::Arrival:
            break;
    }
    if (spec.single_queue()) {
        if (!spec.treatment_affects_state) {
            out.emplace_back(1.0, spec.state_index(k0 + 1, k1));
            return;
        }
        const double p = pibar[static_cast<size_t>(qidx)];
        if (p > 0.0) out.emplace_back(p, spec.state_index(k0 + 1, k1));
        if (p < 1.0) out.emplace_back(1.0 - p, qidx);
        return;
    }
    // Parallel routing; exactly-one-full forces the non-full queue.
    if (k0 >= spec.cap0) {
        out.emplace_back(1.0, spec.state_index(k0, k1 + 1));
    } else if (k1 >= spec.cap1) {
        out.emplace_back(1.0, spec.state_index(k0 + 1, k1));
    } else {
        const double p = pibar[static_cast<size_t>(qidx)];
        if (p > 0.0) out.emplace_back(p, spec.state_index(k0, k1 + 1));
        if (p < 1.0) out.emplace_back(1.0 - p, spec.state_index(k0 + 1, k1));
    }
}

}  // namespace detail

inline ChainModel build_kernel(const SystemSpec& spec, const std::vector<double>& pibar) {
    if (pibar.size() != static_cast<size_t>(spec.n_queue_states()))
        throw std::invalid_argument("build_kernel: pibar must have one entry per queue state");
    for (double p : pibar) {
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument("build_kernel: pibar entries must lie in [0, 1]");
    }
    if (!spec.single_queue() && !spec.treatment_affects_state)
        throw std::invalid_argument("build_kernel: treatment_affects_state=false is only defined "
                                    "for single-queue systems");

    const int nq = spec.n_queue_states();
    ChainModel m;
    m.spec = spec;
    m.pibar = pibar;
    m.pos.assign(static_cast<size_t>(kNumEventTypes * nq), -1);

    // BFS from the initial queue state. The first transition out of the
    // initial state determines which event types are observable there.
    std::deque<int> frontier;
    auto touch = [&](EventType a, int q) {
        const int ai = aug_index(spec, a, q);
        if (m.pos[static_cast<size_t>(ai)] == -1) {
            m.pos[static_cast<size_t>(ai)] = 0;  // mark; renumbered below
            frontier.push_back(ai);
            m.states.push_back(ai);
        }
    };
    {
        const int q0 = spec.state_index(spec.init_k0, spec.init_k1);
        const EventTypeDist d = event_type_dist(spec, spec.init_k0, spec.init_k1);
        if (d.p_arrival > 0.0) touch(EventType::Arrival, q0);
        if (d.p_service0 > 0.0) touch(EventType::Service0, q0);
        if (d.p_service1 > 0.0) touch(EventType::Service1, q0);
    }
    std::vector<std::pair<double, int>> succ;
    for (size_t head = 0; head < m.states.size(); ++head) {
        const int ai = m.states[head];
        auto [a, q] = aug_decode(spec, ai);
        detail::queue_successors(spec, pibar, a, q, succ);
        for (auto [pq, q2] : succ) {
            auto [k0, k1] = spec.state_of(q2);
            const EventTypeDist d = event_type_dist(spec, k0, k1);  // throws if absorbing
            if (pq <= 0.0) continue;
            if (d.p_arrival > 0.0) touch(EventType::Arrival, q2);
            if (d.p_service0 > 0.0) touch(EventType::Service0, q2);
            if (d.p_service1 > 0.0) touch(EventType::Service1, q2);
        }
    }
    std::sort(m.states.begin(), m.states.end());
    for (size_t i = 0; i < m.states.size(); ++i)
        m.pos[static_cast<size_t>(m.states[i])] = static_cast<int>(i);

    const int n = static_cast<int>(m.states.size());
    m.kernel = Eigen::MatrixXd::Zero(n, n);
    for (int row = 0; row < n; ++row) {
        auto [a, q] = aug_decode(spec, m.states[static_cast<size_t>(row)]);
        detail::queue_successors(spec, pibar, a, q, succ);
        for (auto [pq, q2] : succ) {
            auto [k0, k1] = spec.state_of(q2);
            const EventTypeDist d = event_type_dist(spec, k0, k1);
            for (EventType a2 : {EventType::Service0, EventType::Service1, EventType::Arrival}) {
                const double pa = d[a2];
                if (pa <= 0.0) continue;
                const int col = m.pos[static_cast<size_t>(aug_index(spec, a2, q2))];
                m.kernel(row, col) += pq * pa;
            }
        }
    }
    return m;
}

// --- stationary distributions ----------------------------------------------

// All three views of the stationary law of the embedded chain. `augmented`
// is flat over 3 * n_queue_states (zeros at unreachable states).
struct StationaryResult {
    std::vector<double> augmented;
    std::vector<double> queue_marginal;      // P(queue state at an event epoch)
    std::vector<double> arrival_conditioned; // P(queue state | event is an arrival)
};

inline std::vector<double> arrival_conditioned(const SystemSpec& spec,
                                               const std::vector<double>& augmented) {
    const int nq = spec.n_queue_states();
    std::vector<double> out(static_cast<size_t>(nq), 0.0);
    double total = 0.0;
    for (int q = 0; q < nq; ++q) {
        const double v = augmented[static_cast<size_t>(aug_index(spec, EventType::Arrival, q))];
        out[static_cast<size_t>(q)] = v;
        total += v;
    }
    if (total <= 0.0)
        throw std::runtime_error("arrival_conditioned: stationary law places no mass on arrivals");
    for (double& v : out) v /= total;
    return out;
}

namespace detail {

inline StationaryResult package_augmented(const SystemSpec& spec, std::vector<double> aug) {
    StationaryResult r;
    r.augmented = std::move(aug);
    const int nq = spec.n_queue_states();
    r.queue_marginal.assign(static_cast<size_t>(nq), 0.0);
    for (int a = 0; a < kNumEventTypes; ++a)
        for (int q = 0; q < nq; ++q)
            r.queue_marginal[static_cast<size_t>(q)] += r.augmented[static_cast<size_t>(a * nq + q)];
    r.arrival_conditioned = arrival_conditioned(spec, r.augmented);
    return r;
}

// Closed SCC detection (Kosaraju) over the kernel's support graph; a second
// closed class means the stationary law is not unique.
inline std::vector<std::vector<int>> closed_classes(const Eigen::MatrixXd& P) {
    const int n = static_cast<int>(P.rows());
    std::vector<std::vector<int>> adj(static_cast<size_t>(n)), radj(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (P(i, j) > 0.0) {
                adj[static_cast<size_t>(i)].push_back(j);
                radj[static_cast<size_t>(j)].push_back(i);
            }
    std::vector<int> order;
    std::vector<char> seen(static_cast<size_t>(n), 0);
    for (int s = 0; s < n; ++s) {
        if (seen[static_cast<size_t>(s)]) continue;
        // Iterative DFS computing finish order.
        std::vector<std::pair<int, size_t>> stack{{s, 0}};
        seen[static_cast<size_t>(s)] = 1;
        while (!stack.empty()) {
            auto& [v, it] = stack.back();
            if (it < adj[static_cast<size_t>(v)].size()) {
                const int w = adj[static_cast<size_t>(v)][it++];
                if (!seen[static_cast<size_t>(w)]) {
                    seen[static_cast<size_t>(w)] = 1;
                    stack.emplace_back(w, 0);
                }
            } else {
                order.push_back(v);
                stack.pop_back();
            }
        }
    }
    std::vector<int> comp(static_cast<size_t>(n), -1);
    int ncomp = 0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (comp[static_cast<size_t>(*it)] != -1) continue;
        std::vector<int> stack{*it};
        comp[static_cast<size_t>(*it)] = ncomp;
        while (!stack.empty()) {
            const int v = stack.back();
            stack.pop_back();
            for (int w : radj[static_cast<size_t>(v)]) {
                if (comp[static_cast<size_t>(w)] == -1) {
                    comp[static_cast<size_t>(w)] = ncomp;
                    stack.push_back(w);
                }
            }
        }
        ++ncomp;
    }
    std::vector<std::vector<int>> members(static_cast<size_t>(ncomp));
    for (int v = 0; v < n; ++v) members[static_cast<size_t>(comp[static_cast<size_t>(v)])].push_back(v);
    std::vector<std::vector<int>> closed;
    for (const auto& mem : members) {
        bool leaves = false;
        for (int v : mem) {
            for (int w : adj[static_cast<size_t>(v)]) {
                if (comp[static_cast<size_t>(w)] != comp[static_cast<size_t>(v)]) {
                    leaves = true;
                    break;
                }
            }
            if (leaves) break;
        }
        if (!leaves) closed.push_back(mem);
    }
    return closed;
}

}  // namespace detail

// Stationary law by direct linear solve of d'P = d', sum(d) = 1.
inline StationaryResult stationary_solve(const ChainModel& m) {
    const int n = static_cast<int>(m.states.size());
    const auto closed = detail::closed_classes(m.kernel);
    if (closed.size() > 1) {
        std::string msg = "stationary_solve: kernel has " + std::to_string(closed.size()) +
                          " closed classes:";
        for (const auto& cls : closed) {
            msg += " {";
            for (size_t i = 0; i < cls.size() && i < 4; ++i)
                msg += (i ? "," : "") + aug_label(m.spec, m.states[static_cast<size_t>(cls[i])]);
            if (cls.size() > 4) msg += ",...";
            msg += "}";
        }
        throw std::runtime_error(msg);
    }
    Eigen::MatrixXd A = m.kernel.transpose() - Eigen::MatrixXd::Identity(n, n);
    A.row(n - 1).setOnes();  // replace one redundant balance equation
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    b(n - 1) = 1.0;
    Eigen::VectorXd d = A.fullPivLu().solve(b);
    // Clip the tiny negatives a transient-state solve can produce.
    for (int i = 0; i < n; ++i)
        if (d(i) < 0.0 && d(i) > -1e-12) d(i) = 0.0;
    d /= d.sum();

    std::vector<double> aug(static_cast<size_t>(kNumEventTypes * m.spec.n_queue_states()), 0.0);
    for (int i = 0; i < n; ++i) aug[static_cast<size_t>(m.states[static_cast<size_t>(i)])] = d(i);
    return detail::package_augmented(m.spec, std::move(aug));
}

// Stationary law of a single-queue embedded chain in closed form. Unnormalized
// queue weights r_k follow the cut-balance recursion
//   d(k+1) * P(service | k+1) = d(k) * P(arrival | k) * pibar_k,
// which telescopes to the product form; the augmented law factors as
// d(a, k) = d(k) * P(event type a | k).
inline StationaryResult stationary_closed_form(const SystemSpec& spec,
                                               const std::vector<double>& pibar) {
    if (!spec.single_queue())
        throw std::invalid_argument("stationary_closed_form: single-queue systems only");
    if (pibar.size() != static_cast<size_t>(spec.cap0 + 1))
        throw std::invalid_argument("stationary_closed_form: pibar must have cap0+1 entries");
    const int cap = spec.cap0;
    const double mu = spec.mu0;
    auto lam = [&](int k) { return spec.arrival_rate_at(k, 0); };

    std::vector<double> r(static_cast<size_t>(cap + 1), 0.0);
    r[0] = 1.0;
    for (int k = 0; k + 1 <= cap; ++k) {
        const double rate_k = lam(k) + (k > 0 ? mu : 0.0);
        const double p_arr = rate_k > 0.0 ? lam(k) / rate_k : 0.0;
        const double rate_next = lam(k + 1) + mu;
        const double q_svc = mu / rate_next;
        const double admit = spec.treatment_affects_state ? pibar[static_cast<size_t>(k)] : 1.0;
        r[static_cast<size_t>(k + 1)] = r[static_cast<size_t>(k)] * p_arr * admit / q_svc;
    }
    double total = 0.0;
    for (double v : r) total += v;
    std::vector<double> aug(static_cast<size_t>(kNumEventTypes * (cap + 1)), 0.0);
    for (int k = 0; k <= cap; ++k) {
        const double dk = r[static_cast<size_t>(k)] / total;
        if (dk <= 0.0) continue;
        const EventTypeDist f = event_type_dist(spec, k, 0);
        aug[static_cast<size_t>(aug_index(spec, EventType::Arrival, k))] = dk * f.p_arrival;
        aug[static_cast<size_t>(aug_index(spec, EventType::Service0, k))] = dk * f.p_service0;
    }
    return detail::package_augmented(spec, std::move(aug));
}

}  // namespace statewise
