#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cade.hpp"
#include "cade_model.hpp"
#include "chain.hpp"
#include "learn.hpp"
#include "model.hpp"
#include "outcome.hpp"
#include "policy.hpp"
#include "record.hpp"
#include "rng.hpp"

namespace statewise {

// Ground-truth evaluation: everything here knows the data-generating process
// and is used to score policies exactly (up to Monte Carlo error over the
// covariate law) and to locate the optimal treated-share table.

inline double true_cade(const SystemSpec& spec, const std::vector<double>& x, int k0, int k1 = 0) {
    return true_tau(spec, x, k0, k1);
}

namespace detail {

inline std::vector<std::vector<double>> gaussian_draws(int n, int d, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x0c0c0c0cULL));
    std::vector<std::vector<double>> xs(static_cast<size_t>(n));
    for (auto& x : xs) {
        x.resize(static_cast<size_t>(d));
        for (double& v : x) v = rng.normal();
    }
    return xs;
}

}  // namespace detail

// --- exact policy value -----------------------------------------------------------

struct OracleValue {
    double value = 0.0;                // mu(pi) or theta(pi)
    std::vector<double> pibar;         // true treated share per queue state
    std::vector<double> r;             // E[Y | arrival at state] under the policy
    std::vector<double> d_arrival;     // arrival-conditioned stationary law
    std::vector<double> queue_marginal;
};

namespace detail {

// Assembles mu or theta once the per-state means and treated shares are known.
inline OracleValue oracle_value_from_tables(const SystemSpec& spec, const std::string& objective,
                                            std::vector<double> pibar, std::vector<double> r) {
    const int nq = spec.n_queue_states();
    OracleValue out;
    StationaryResult dist = spec.single_queue() ? stationary_closed_form(spec, pibar)
                                                : stationary_solve(build_kernel(spec, pibar));
    out.pibar = std::move(pibar);
    out.r = std::move(r);
    out.d_arrival = dist.arrival_conditioned;
    out.queue_marginal = dist.queue_marginal;

    if (objective == "avg_outcome") {
        for (int q = 0; q < nq; ++q)
            out.value += out.d_arrival[static_cast<size_t>(q)] * out.r[static_cast<size_t>(q)];
        return out;
    }
    if (objective != "reward_rate")
        throw std::invalid_argument("objective must be avg_outcome or reward_rate");
    // theta = sum_k d(k) f(arrival|k) r(k) / sum_k d(k) / Lambda(k): rewards
    // arrive only at arrival epochs and the mean gap at a state is one over
    // its total rate.
    double num = 0.0, den = 0.0;
    for (int q = 0; q < nq; ++q) {
        auto [k0, k1] = spec.state_of(q);
        const double mass = out.queue_marginal[static_cast<size_t>(q)];
        if (mass <= 0.0) continue;
        const double rate = total_rate(spec, k0, k1);
        den += mass / rate;
        if (spec.arrivals_possible(q))
            num += mass * (spec.arrival_rate_at(k0, k1) / rate) * out.r[static_cast<size_t>(q)];
    }
    if (den <= 0.0) throw std::runtime_error("true_value: degenerate gap denominator");
    out.value = num / den;
    return out;
}

}  // namespace detail

// Exact value of an arbitrary policy: treated shares and state-conditional
// mean outcomes by Monte Carlo over fresh covariates (common random numbers
// across calls sharing a seed), stationary law analytically.
inline OracleValue true_value(const SystemSpec& spec, const PolicySpec& policy,
                              const std::string& objective, int n_mc = 20000,
                              std::uint64_t seed = 20240801ULL) {
    validate_policy(policy, spec);
    if (n_mc < 100) throw std::invalid_argument("true_value: n_mc too small");
    const std::vector<std::vector<double>> xs = detail::gaussian_draws(n_mc, spec.covariate_dim, seed);
    const int nq = spec.n_queue_states();
    std::vector<double> pibar(static_cast<size_t>(nq), 0.0);
    std::vector<double> r(static_cast<size_t>(nq), 0.0);
    for (int q = 0; q < nq; ++q) {
        if (!spec.arrivals_possible(q)) continue;
        auto [k0, k1] = spec.state_of(q);
        double share = 0.0, mean = 0.0;
        for (const auto& x : xs) {
            const double pi1 = policy_prob(policy, spec, x, q);
            share += pi1;
            mean += pi1 * true_eta(spec, 1, x, k0, k1) + (1.0 - pi1) * true_eta(spec, 0, x, k0, k1);
        }
        pibar[static_cast<size_t>(q)] = share / n_mc;
        r[static_cast<size_t>(q)] = mean / n_mc;
    }
    return detail::oracle_value_from_tables(spec, objective, std::move(pibar), std::move(r));
}

// --- threshold policies on the true effect ----------------------------------------

// Per-state tables of the true effect over one shared covariate sample, sorted
// with prefix sums of both arm means. Threshold policies in this class can
// then be valued in closed form over the sample, which makes the optimizer's
// inner loop cheap.
class OracleTable {
  public:
    OracleTable(SystemSpec spec, std::string objective, int n_mc = 40000,
                std::uint64_t seed = 20240801ULL)
        : spec_(std::move(spec)), objective_(std::move(objective)) {
        if (objective_ != "avg_outcome" && objective_ != "reward_rate")
            throw std::invalid_argument("objective must be avg_outcome or reward_rate");
        xs_ = detail::gaussian_draws(n_mc, spec_.covariate_dim, seed);
        const int nq = spec_.n_queue_states();
        tau_.resize(static_cast<size_t>(nq));
        pre0_.resize(static_cast<size_t>(nq));
        pre1_.resize(static_cast<size_t>(nq));
        const size_t m = xs_.size();
        for (int q = 0; q < nq; ++q) {
            if (!spec_.arrivals_possible(q)) continue;
            auto [k0, k1] = spec_.state_of(q);
            std::vector<std::pair<double, size_t>> order(m);
            for (size_t j = 0; j < m; ++j) order[j] = {true_tau(spec_, xs_[j], k0, k1), j};
            std::sort(order.begin(), order.end());
            auto& tau = tau_[static_cast<size_t>(q)];
            auto& p0 = pre0_[static_cast<size_t>(q)];
            auto& p1 = pre1_[static_cast<size_t>(q)];
            tau.resize(m);
            p0.assign(m + 1, 0.0);
            p1.assign(m + 1, 0.0);
            for (size_t j = 0; j < m; ++j) {
                tau[j] = order[j].first;
                const std::vector<double>& x = xs_[order[j].second];
                p0[j + 1] = p0[j] + true_eta(spec_, 0, x, k0, k1);
                p1[j + 1] = p1[j] + true_eta(spec_, 1, x, k0, k1);
            }
        }
    }

    const SystemSpec& spec() const { return spec_; }
    const std::string& objective() const { return objective_; }
    const std::vector<double>& tau_sorted(int q) const { return tau_[static_cast<size_t>(q)]; }

    // Value of the threshold policy treating the top g_q share at each state.
    OracleValue value_of(const std::vector<double>& g) const {
        const int nq = spec_.n_queue_states();
        if (g.size() != static_cast<size_t>(nq))
            throw std::invalid_argument("oracle table: g needs one entry per queue state");
        std::vector<double> pibar(static_cast<size_t>(nq), 0.0);
        std::vector<double> r(static_cast<size_t>(nq), 0.0);
        for (int q = 0; q < nq; ++q) {
            if (!spec_.arrivals_possible(q)) continue;
            const ThresholdAt th =
                threshold_from_sorted(tau_[static_cast<size_t>(q)], g[static_cast<size_t>(q)]);
            pibar[static_cast<size_t>(q)] = g[static_cast<size_t>(q)];
            r[static_cast<size_t>(q)] = mean_outcome_at(q, th.c, th.p);
        }
        return detail::oracle_value_from_tables(spec_, objective_, std::move(pibar),
                                                std::move(r));
    }

    // Value of the direct rule (treat iff the true effect is positive).
    OracleValue value_of_direct() const {
        const int nq = spec_.n_queue_states();
        std::vector<double> pibar(static_cast<size_t>(nq), 0.0);
        std::vector<double> r(static_cast<size_t>(nq), 0.0);
        const size_t m = xs_.size();
        for (int q = 0; q < nq; ++q) {
            if (!spec_.arrivals_possible(q)) continue;
            const auto& tau = tau_[static_cast<size_t>(q)];
            const size_t hi = static_cast<size_t>(
                std::upper_bound(tau.begin(), tau.end(), 0.0) - tau.begin());
            pibar[static_cast<size_t>(q)] = static_cast<double>(m - hi) / static_cast<double>(m);
            r[static_cast<size_t>(q)] = mean_outcome_at(q, 0.0, 0.0);
        }
        return detail::oracle_value_from_tables(spec_, objective_, std::move(pibar),
                                                std::move(r));
    }

    // The same threshold policy as a runnable PolicySpec.
    PolicySpec policy_for(const std::vector<double>& g) const {
        const int nq = spec_.n_queue_states();
        PolicySpec ps;
        ps.kind = PolicyKind::Threshold;
        ps.model = std::make_shared<OracleCadeModel>(spec_);
        ps.c.assign(static_cast<size_t>(nq), 0.0);
        ps.p.assign(static_cast<size_t>(nq), 0.0);
        ps.g = g;
        for (int q = 0; q < nq; ++q) {
            if (!spec_.arrivals_possible(q)) continue;
            const ThresholdAt th =
                threshold_from_sorted(tau_[static_cast<size_t>(q)], g[static_cast<size_t>(q)]);
            ps.c[static_cast<size_t>(q)] = th.c;
            ps.p[static_cast<size_t>(q)] = th.p;
        }
        return ps;
    }

  private:
    // Mean outcome when the state treats strictly above c and a p-share of ties.
    double mean_outcome_at(int q, double c, double p) const {
        const auto& tau = tau_[static_cast<size_t>(q)];
        const auto& p0 = pre0_[static_cast<size_t>(q)];
        const auto& p1 = pre1_[static_cast<size_t>(q)];
        const size_t m = tau.size();
        const size_t lo = static_cast<size_t>(std::lower_bound(tau.begin(), tau.end(), c) -
                                              tau.begin());
        const size_t hi = static_cast<size_t>(std::upper_bound(tau.begin(), tau.end(), c) -
                                              tau.begin());
        const double sum1_above = p1[m] - p1[hi];
        const double sum1_at = p1[hi] - p1[lo];
        const double sum0_below = p0[lo];
        const double sum0_at = p0[hi] - p0[lo];
        return (sum1_above + p * sum1_at + sum0_below + (1.0 - p) * sum0_at) /
               static_cast<double>(m);
    }

    SystemSpec spec_;
    std::string objective_;
    std::vector<std::vector<double>> xs_;
    std::vector<std::vector<double>> tau_;
    std::vector<std::vector<double>> pre0_, pre1_;
};

// --- approximate optimal policy -----------------------------------------------------

struct OptimalOptions {
    int n_mc = 40000;
    std::uint64_t seed = 20240801ULL;
    int starts = 5;        // >= 5 per the search contract
    int budget = 40000;    // value evaluations across all starts
    double min_step = 1e-3;
    double edge = 1e-3;    // keeps g inside (0, 1)
    int monotone = -1;     // 1 force, 0 off, -1 auto (single queue only)
};

struct OptimalResult {
    std::vector<double> g;
    double value = 0.0;
    double direct_value = 0.0;          // same table, direct rule
    std::vector<double> start_values;   // best value per start
    int evaluations = 0;
};

namespace detail {

// Isotonic projection (pool adjacent violators) of values at the free states,
// ordered by the congestion axis.
inline void pava_non_decreasing(std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<double> level(n), weight(n);
    std::vector<size_t> count(n);
    size_t blocks = 0;
    for (size_t i = 0; i < n; ++i) {
        level[blocks] = v[i];
        weight[blocks] = 1.0;
        count[blocks] = 1;
        ++blocks;
        while (blocks > 1 && level[blocks - 2] > level[blocks - 1]) {
            const double w = weight[blocks - 2] + weight[blocks - 1];
            level[blocks - 2] =
                (level[blocks - 2] * weight[blocks - 2] + level[blocks - 1] * weight[blocks - 1]) / w;
            weight[blocks - 2] = w;
            count[blocks - 2] += count[blocks - 1];
            --blocks;
        }
    }
    size_t pos = 0;
    for (size_t b = 0; b < blocks; ++b)
        for (size_t c = 0; c < count[b]; ++c) v[pos++] = level[b];
}

}  // namespace detail

// Derivative-free maximization of the true value over treated-share tables:
// projected pattern search (axis moves, halving steps) with multi-start, the
// projection being a clamp into (0,1) followed, for single queues, by an
// isotonic pass so g never decreases with congestion.
inline OptimalResult approx_optimal(const OracleTable& table, const OptimalOptions& opt = {}) {
    const SystemSpec& spec = table.spec();
    const int nq = spec.n_queue_states();
    std::vector<int> free_states;
    for (int q = 0; q < nq; ++q)
        if (spec.arrivals_possible(q)) free_states.push_back(q);
    const int nf = static_cast<int>(free_states.size());
    const bool monotone = opt.monotone == 1 || (opt.monotone == -1 && spec.single_queue());

    const std::vector<int> axis = detail::congestion_axis(spec);
    auto project = [&](std::vector<double>& gf) {
        for (double& v : gf) v = std::clamp(v, opt.edge, 1.0 - opt.edge);
        if (monotone) detail::pava_non_decreasing(gf);
    };
    auto expand = [&](const std::vector<double>& gf) {
        std::vector<double> g(static_cast<size_t>(nq), 0.0);
        for (int i = 0; i < nf; ++i)
            g[static_cast<size_t>(free_states[static_cast<size_t>(i)])] = gf[static_cast<size_t>(i)];
        for (int q = 0; q < nq; ++q) {
            if (spec.arrivals_possible(q)) continue;
            int best = free_states[0], bd = 1 << 30;
            for (int f : free_states) {
                const int d = std::abs(axis[static_cast<size_t>(f)] - axis[static_cast<size_t>(q)]);
                if (d < bd) { bd = d; best = f; }
            }
            g[static_cast<size_t>(q)] = g[static_cast<size_t>(best)];
        }
        return g;
    };

    OptimalResult res;
    auto evaluate = [&](const std::vector<double>& gf) {
        ++res.evaluations;
        return table.value_of(expand(gf)).value;
    };

    // Deterministic start set: three constants, a ramp, then seeded random
    // tables (sorted when the monotone constraint is on).
    std::vector<std::vector<double>> starts;
    for (double lvl : {0.25, 0.5, 0.75})
        starts.emplace_back(static_cast<size_t>(nf), lvl);
    {
        std::vector<double> ramp(static_cast<size_t>(nf));
        for (int i = 0; i < nf; ++i)
            ramp[static_cast<size_t>(i)] = 0.1 + 0.8 * (nf == 1 ? 0.5 : static_cast<double>(i) / (nf - 1));
        starts.push_back(std::move(ramp));
    }
    Rng rng(mix_seed(opt.seed, 0x5eedULL));
    while (static_cast<int>(starts.size()) < std::max(opt.starts, 5)) {
        std::vector<double> g(static_cast<size_t>(nf));
        for (double& v : g) v = 0.05 + 0.9 * rng.uniform();
        if (monotone) std::sort(g.begin(), g.end());
        starts.push_back(std::move(g));
    }

    bool have_best = false;
    std::vector<double> best_gf;
    double best_val = 0.0;
    for (auto& start : starts) {
        std::vector<double> gf = start;
        project(gf);
        double val = evaluate(gf);
        double step = 0.25;
        while (step >= opt.min_step && res.evaluations < opt.budget) {
            bool improved = false;
            for (int i = 0; i < nf && res.evaluations < opt.budget; ++i) {
                for (double dir : {+1.0, -1.0}) {
                    std::vector<double> trial = gf;
                    trial[static_cast<size_t>(i)] += dir * step;
                    project(trial);
                    if (trial == gf) continue;
                    const double tv = evaluate(trial);
                    if (tv > val) {
                        val = tv;
                        gf = std::move(trial);
                        improved = true;
                    }
                }
            }
            if (!improved) step *= 0.5;
        }
        res.start_values.push_back(val);
        if (!have_best || val > best_val) {
            best_val = val;
            best_gf = gf;
            have_best = true;
        }
    }
    if (!have_best) throw std::runtime_error("approx_optimal: no feasible evaluation within budget");
    res.g = expand(best_gf);
    res.value = best_val;
    res.direct_value = table.value_of_direct().value;
    return res;
}

inline OptimalResult approx_optimal(const SystemSpec& spec, const std::string& objective,
                                    const OptimalOptions& opt = {}) {
    return approx_optimal(OracleTable(spec, objective, opt.n_mc, opt.seed), opt);
}

// --- congestion externality diagnostic ------------------------------------------------

// The downstream term of the treat/no-treat decision: force the focal
// arrival's treatment both ways, evolve two chains on shared randomness, and
// accumulate the centered outcomes of later arrivals until the chains meet.
struct CaieOptions {
    int truncation = 10000;   // events per chain before giving up on recoupling
    int reps = 2000;
    std::uint64_t seed = 7ULL;
    double mu = kMissing;     // centering value; computed from the policy when missing
    std::vector<double> pinned_x;  // fix the focal covariate (diagnostics)
};

struct CaieResult {
    double c = 0.0;
    double se = 0.0;
    double recouple_rate = 1.0;
    double mu = 0.0;                 // centering used
    std::vector<double> per_rep;     // one coupled difference per replication
    std::vector<double> focal_x0;    // first focal covariate coordinate per rep
    std::vector<std::string> warnings;
};

namespace detail {

struct CoupledChain {
    int k0, k1;
    double centered_sum = 0.0;
};

// One embedded step under shared draws: the event type comes from the chain's
// own distribution through a common uniform, arrivals share covariates and the
// policy's coin. Outcomes enter as conditional means (the noise would couple
// out anyway).
inline void coupled_step(const SystemSpec& spec, const PolicySpec& policy, double mu,
                         CoupledChain& ch, double u_event, const std::vector<double>& x,
                         double u_policy) {
    const EventTypeDist f = event_type_dist(spec, ch.k0, ch.k1);
    EventType a;
    if (u_event < f[EventType::Service0]) a = EventType::Service0;
    else if (u_event < f[EventType::Service0] + f[EventType::Service1]) a = EventType::Service1;
    else a = EventType::Arrival;
    switch (a) {
        case EventType::Service0: ch.k0 = std::max(0, ch.k0 - 1); return;
        case EventType::Service1: ch.k1 = std::max(0, ch.k1 - 1); return;
        case EventType::Arrival: break;
    }
    const int q = spec.state_index(ch.k0, ch.k1);
    const double pi1 = policy_prob(policy, spec, x, q);
    const int w = u_policy < pi1 ? 1 : 0;
    ch.centered_sum += true_eta(spec, w, x, ch.k0, ch.k1) - mu;
    if (spec.single_queue()) {
        if ((w == 1 || !spec.treatment_affects_state) && ch.k0 < spec.cap0) ch.k0 += 1;
    } else {
        const int joined = effective_queue(spec, w, ch.k0, ch.k1);
        if (joined == 1 && ch.k1 < spec.cap1) ch.k1 += 1;
        else if (joined == 0 && ch.k0 < spec.cap0) ch.k0 += 1;
    }
}

}  // namespace detail

inline CaieResult caie_diagnostic(const SystemSpec& spec, const PolicySpec& policy, int qidx,
                                  const CaieOptions& opt = {}) {
    validate_policy(policy, spec);
    if (qidx < 0 || qidx >= spec.n_queue_states())
        throw std::invalid_argument("caie: queue state out of range");
    if (!spec.arrivals_possible(qidx))
        throw std::invalid_argument("caie: arrivals are impossible at this state");
    CaieResult res;
    res.mu = is_missing(opt.mu)
                 ? true_value(spec, policy, "avg_outcome", 20000, opt.seed).value
                 : opt.mu;

    auto [s0, s1] = spec.state_of(qidx);
    Rng rng(mix_seed(opt.seed, 0xca1eULL));
    std::vector<double> x(static_cast<size_t>(spec.covariate_dim));
    std::int64_t recoupled = 0;
    double sum = 0.0, sumsq = 0.0;

    for (int rep = 0; rep < opt.reps; ++rep) {
        std::vector<double> focal(static_cast<size_t>(spec.covariate_dim));
        for (double& v : focal) v = rng.normal();
        if (!opt.pinned_x.empty()) focal = opt.pinned_x;
        res.focal_x0.push_back(focal.empty() ? 0.0 : focal[0]);

        // Apply the focal arrival's state effect under each forced arm.
        detail::CoupledChain treated{s0, s1, 0.0}, control{s0, s1, 0.0};
        if (spec.single_queue()) {
            if (treated.k0 < spec.cap0) treated.k0 += 1;
            if (!spec.treatment_affects_state && control.k0 < spec.cap0) control.k0 += 1;
        } else {
            const int jt = effective_queue(spec, 1, s0, s1);
            if (jt == 1 && treated.k1 < spec.cap1) treated.k1 += 1;
            else if (jt == 0 && treated.k0 < spec.cap0) treated.k0 += 1;
            const int jc = effective_queue(spec, 0, s0, s1);
            if (jc == 1 && control.k1 < spec.cap1) control.k1 += 1;
            else if (jc == 0 && control.k0 < spec.cap0) control.k0 += 1;
        }

        bool met = treated.k0 == control.k0 && treated.k1 == control.k1;
        for (int step = 0; step < opt.truncation && !met; ++step) {
            const double u_event = rng.uniform();
            for (double& v : x) v = rng.normal();
            const double u_policy = rng.uniform();
            detail::coupled_step(spec, policy, res.mu, treated, u_event, x, u_policy);
            detail::coupled_step(spec, policy, res.mu, control, u_event, x, u_policy);
            met = treated.k0 == control.k0 && treated.k1 == control.k1;
        }
        if (met) ++recoupled;
        const double diff = treated.centered_sum - control.centered_sum;
        res.per_rep.push_back(diff);
        sum += diff;
        sumsq += diff * diff;
    }
    res.c = sum / opt.reps;
    if (opt.reps > 1) {
        const double var = std::max(0.0, (sumsq - sum * sum / opt.reps) / (opt.reps - 1));
        res.se = std::sqrt(var / opt.reps);
    }
    res.recouple_rate = static_cast<double>(recoupled) / opt.reps;
    if (res.recouple_rate < 0.99)
        res.warnings.push_back("recoupling rate " + std::to_string(res.recouple_rate) +
                               " below 0.99; consider a larger truncation");
    return res;
}

// The full decision statistic at a covariate/state pair under a policy.
inline double oracle_h(const SystemSpec& spec, const std::vector<double>& x, int qidx,
                       double caie) {
    auto [k0, k1] = spec.state_of(qidx);
    return true_tau(spec, x, k0, k1) + caie;
}

}  // namespace statewise
