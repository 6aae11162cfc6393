#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cade.hpp"
#include "cade_model.hpp"
#include "chain.hpp"
#include "model.hpp"
#include "policy.hpp"
#include "record.hpp"

namespace statewise {

// --- continuous-time rate estimation -----------------------------------------

// Maximum-likelihood rates: event counts over exposure time, where the gap of
// record i is exposure at the queue state observed by record i. Single-queue
// arrival rates are per state; the parallel arrival rate is a single constant.
struct RateEstimates {
    std::vector<double> lambda;        // size n_queue_states (single) or 1 (parallel)
    std::vector<char> lambda_observed; // exposure seen at that state
    double mu0 = 0.0;
    double mu1 = 0.0;
    std::vector<double> exposure;      // per queue state
    std::vector<std::int64_t> arrival_count;
};

inline RateEstimates estimate_rates(const SystemSpec& spec, const std::vector<EventRecord>& records,
                                    const std::vector<int>& indices) {
    const int nq = spec.n_queue_states();
    RateEstimates est;
    est.exposure.assign(static_cast<size_t>(nq), 0.0);
    est.arrival_count.assign(static_cast<size_t>(nq), 0);
    double busy0 = 0.0, busy1 = 0.0, open_exposure = 0.0;
    std::int64_t serve0 = 0, serve1 = 0, arrivals = 0;
    for (int idx : indices) {
        const EventRecord& e = records.at(static_cast<size_t>(idx));
        const int q = spec.state_index(e.k0, e.k1);
        est.exposure[static_cast<size_t>(q)] += e.dt;
        if (e.k0 > 0) busy0 += e.dt;
        if (e.k1 > 0) busy1 += e.dt;
        if (!spec.single_queue() && !(e.k0 >= spec.cap0 && e.k1 >= spec.cap1))
            open_exposure += e.dt;  // the shared arrival stream pauses only when both queues are full
        switch (e.a) {
            case EventType::Arrival: {
                est.arrival_count[static_cast<size_t>(q)]++;
                ++arrivals;
                break;
            }
            case EventType::Service0: ++serve0; break;
            case EventType::Service1: ++serve1; break;
        }
    }
    if (busy0 <= 0.0 && serve0 > 0)
        throw std::runtime_error("estimate_rates: service events without busy exposure");
    est.mu0 = busy0 > 0.0 ? static_cast<double>(serve0) / busy0 : 0.0;
    est.mu1 = busy1 > 0.0 ? static_cast<double>(serve1) / busy1 : 0.0;

    if (spec.single_queue()) {
        est.lambda.assign(static_cast<size_t>(nq), 0.0);
        est.lambda_observed.assign(static_cast<size_t>(nq), 0);
        for (int q = 0; q < nq; ++q) {
            if (q >= spec.cap0) { est.lambda_observed[static_cast<size_t>(q)] = 1; continue; }
            const double expo = est.exposure[static_cast<size_t>(q)];
            if (expo > 0.0) {
                est.lambda[static_cast<size_t>(q)] =
                    static_cast<double>(est.arrival_count[static_cast<size_t>(q)]) / expo;
                est.lambda_observed[static_cast<size_t>(q)] = 1;
            }
        }
    } else {
        est.lambda.assign(1, open_exposure > 0.0 ? static_cast<double>(arrivals) / open_exposure : 0.0);
        est.lambda_observed.assign(1, open_exposure > 0.0 ? 1 : 0);
    }
    return est;
}

// --- propensity models ---------------------------------------------------------

// Ridge-regularized logistic regression of W on covariates, one per queue
// state with the same pooling rule as the effect models.
struct LogisticPropensity {
    std::vector<Eigen::VectorXd> beta;  // per queue state, [intercept, coefs]
    double predict(const std::vector<double>& x, int q) const {
        const Eigen::VectorXd& b = beta[static_cast<size_t>(q)];
        double f = b(0);
        for (int j = 0; j < static_cast<int>(x.size()); ++j) f += b(j + 1) * x[static_cast<size_t>(j)];
        f = std::clamp(f, -30.0, 30.0);
        return 1.0 / (1.0 + std::exp(-f));
    }
};

namespace detail {

inline Eigen::VectorXd irls_logistic(const std::vector<const std::vector<double>*>& xs,
                                     const std::vector<int>& ws, int d, double ridge = 1e-3) {
    const int n = static_cast<int>(ws.size());
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
    Eigen::MatrixXd X(n, d + 1);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        for (int j = 0; j < d; ++j) X(i, j + 1) = (*xs[static_cast<size_t>(i)])[static_cast<size_t>(j)];
    }
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) y(i) = ws[static_cast<size_t>(i)];
    for (int iter = 0; iter < 30; ++iter) {
        Eigen::VectorXd f = X * beta;
        Eigen::VectorXd p(n), wgt(n);
        for (int i = 0; i < n; ++i) {
            const double fi = std::clamp(f(i), -30.0, 30.0);
            p(i) = 1.0 / (1.0 + std::exp(-fi));
            wgt(i) = std::max(p(i) * (1.0 - p(i)), 1e-6);
        }
        Eigen::MatrixXd H = X.transpose() * wgt.asDiagonal() * X;
        H.diagonal().array() += ridge;
        Eigen::VectorXd g = X.transpose() * (y - p) - ridge * beta;
        Eigen::VectorXd step = H.ldlt().solve(g);
        beta += step;
        if (step.norm() < 1e-8) break;
    }
    return beta;
}

}  // namespace detail

// --- nuisance bundle ------------------------------------------------------------

struct OpeOptions {
    std::string propensity = "logistic";  // "logistic" | "known" | "constant"
    double constant_propensity = 0.5;
    std::string eta = "fit";              // "fit" | "oracle" (unless a model is passed in)
    double eta_bias = 0.0;                // shifts the oracle regression (diagnostics)
    double gamma1 = 0.05;                 // propensity clip: [gamma1, 1-gamma1]
    double gamma2 = 1e6;                  // outcome-regression cap: |eta| <= gamma2
    CadeOptions cade;                     // estimator settings when eta == "fit"
    // Propensity pooling: minimum per-arm count before a state's logistic fit
    // stands alone. The linear model carries covariate_dim+1 parameters, so it
    // needs a larger floor than the nonparametric effect models use.
    int pool_threshold = 300;
};

struct NuisanceSet {
    SystemSpec spec;
    std::string propensity_kind;
    LoggingDesc known;                    // propensity_kind == "known"
    double constant_propensity = 0.5;
    LogisticPropensity logistic;
    CadeModelPtr eta;                     // arm_mean(w, x, q) is the outcome regression
    RateEstimates rates;
    double gamma1 = 0.05;
    double gamma2 = 1e6;
    std::vector<char> train_mask;         // record index -> used for fitting

    // P(W = w | x, q) under the logging model, clipped away from 0 and 1.
    double propensity(int w, const std::vector<double>& x, int q) const {
        double p1;
        if (propensity_kind == "known") p1 = logging_prob(known, x);
        else if (propensity_kind == "constant") p1 = constant_propensity;
        else p1 = logistic.predict(x, q);
        const double pw = w == 1 ? p1 : 1.0 - p1;
        return std::clamp(pw, gamma1, 1.0 - gamma1);
    }
    double eta_at(int w, const std::vector<double>& x, int q) const {
        return std::clamp(eta->arm_mean(w, x, q), -gamma2, gamma2);
    }
};

// Fit every nuisance on the training side of the split. Pass `eta_model` to
// reuse an already-fitted effect model as the outcome regression.
inline NuisanceSet fit_nuisances(const SystemSpec& spec, const std::vector<EventRecord>& records,
                                 const RegenerationSplit& split, const OpeOptions& opt = {},
                                 CadeModelPtr eta_model = nullptr) {
    NuisanceSet nuis;
    nuis.spec = spec;
    nuis.gamma1 = opt.gamma1;
    nuis.gamma2 = opt.gamma2;
    nuis.propensity_kind = opt.propensity;
    nuis.known = spec.logging;
    nuis.constant_propensity = opt.constant_propensity;
    nuis.train_mask.assign(records.size(), 0);
    for (int idx : split.train_idx) nuis.train_mask[static_cast<size_t>(idx)] = 1;

    if (eta_model) {
        nuis.eta = std::move(eta_model);
    } else if (opt.eta == "oracle") {
        nuis.eta = std::make_shared<OracleCadeModel>(spec, opt.eta_bias);
    } else if (opt.eta == "fit") {
        nuis.eta = fit_cade(spec, records, split.train_idx, opt.cade);
    } else {
        throw std::invalid_argument("fit_nuisances: unknown eta option '" + opt.eta + "'");
    }

    nuis.rates = estimate_rates(spec, records, split.train_idx);

    if (opt.propensity == "logistic") {
        std::vector<const std::vector<double>*> xs;
        std::vector<int> rec_state, rec_w;
        std::vector<const std::vector<double>*> rec_x;
        for (int idx : split.train_idx) {
            const EventRecord& e = records.at(static_cast<size_t>(idx));
            if (!e.is_arrival()) continue;
            rec_x.push_back(&e.x);
            rec_state.push_back(spec.state_index(e.k0, e.k1));
            rec_w.push_back(e.w);
        }
        if (rec_x.empty()) throw std::invalid_argument("fit_nuisances: no arrivals in training set");
        const int nq = spec.n_queue_states();
        nuis.logistic.beta.resize(static_cast<size_t>(nq));
        for (int q = 0; q < nq; ++q) {
            const std::vector<int> members =
                detail::pooled_members(spec, q, rec_state, rec_w, opt.pool_threshold);
            std::vector<const std::vector<double>*> mx;
            std::vector<int> mw;
            for (int i : members) {
                mx.push_back(rec_x[static_cast<size_t>(i)]);
                mw.push_back(rec_w[static_cast<size_t>(i)]);
            }
            if (mx.empty()) {
                nuis.logistic.beta[static_cast<size_t>(q)] =
                    Eigen::VectorXd::Zero(spec.covariate_dim + 1);
                continue;
            }
            nuis.logistic.beta[static_cast<size_t>(q)] =
                detail::irls_logistic(mx, mw, spec.covariate_dim);
        }
    } else if (opt.propensity != "known" && opt.propensity != "constant") {
        throw std::invalid_argument("fit_nuisances: unknown propensity option '" + opt.propensity +
                                    "'");
    }
    return nuis;
}

// --- plug-in stationary law ------------------------------------------------------

// The system spec with estimated rates substituted in, plus flags for
// single-queue states whose arrival rate had to be borrowed from the nearest
// observed state.
struct RatePlugin {
    SystemSpec rate_spec;
    std::vector<char> state_flagged;
};

inline RatePlugin make_rate_plugin(const SystemSpec& spec, const RateEstimates& rates) {
    RatePlugin out;
    out.rate_spec = spec;
    const int nq = spec.n_queue_states();
    out.state_flagged.assign(static_cast<size_t>(nq), 0);

    if (spec.single_queue()) {
        out.rate_spec.arrival_rates.assign(static_cast<size_t>(spec.cap0 + 1), 0.0);
        for (int k = 0; k < spec.cap0; ++k) {
            if (rates.lambda_observed[static_cast<size_t>(k)]) {
                out.rate_spec.arrival_rates[static_cast<size_t>(k)] =
                    rates.lambda[static_cast<size_t>(k)];
            } else {
                int best = -1;
                for (int r = 1; r <= spec.cap0 && best < 0; ++r) {
                    if (k - r >= 0 && rates.lambda_observed[static_cast<size_t>(k - r)]) best = k - r;
                    else if (k + r < spec.cap0 && rates.lambda_observed[static_cast<size_t>(k + r)])
                        best = k + r;
                }
                if (best < 0)
                    throw std::runtime_error("plug-in rates: no arrival-rate information at all");
                out.rate_spec.arrival_rates[static_cast<size_t>(k)] =
                    rates.lambda[static_cast<size_t>(best)];
                out.state_flagged[static_cast<size_t>(k)] = 1;
            }
        }
        if (out.rate_spec.arrival_rates[0] <= 0.0)
            throw std::runtime_error("plug-in rates: estimated arrival rate at an empty queue is "
                                     "zero; chain would be absorbing");
    } else {
        if (!rates.lambda_observed[0] || rates.lambda[0] <= 0.0)
            throw std::runtime_error("plug-in rates: no usable arrival-rate estimate");
        out.rate_spec.arrival_rates = {rates.lambda[0]};
    }
    if (rates.mu0 <= 0.0)
        throw std::runtime_error("plug-in rates: no service-rate estimate for the main queue");
    out.rate_spec.mu0 = rates.mu0;
    if (!spec.single_queue()) {
        if (rates.mu1 <= 0.0)
            throw std::runtime_error("plug-in rates: no service-rate estimate for the fast queue");
        out.rate_spec.mu1 = rates.mu1;
    }
    return out;
}

// Stationary law of the embedded chain under the substituted rates and the
// target policy's treated shares.
inline StationaryResult plugin_dist(const SystemSpec& rate_spec, const std::vector<double>& pibar) {
    if (rate_spec.single_queue()) return stationary_closed_form(rate_spec, pibar);
    return stationary_solve(build_kernel(rate_spec, pibar));
}

struct PluginStationary {
    StationaryResult dist;
    std::vector<char> state_flagged;
    SystemSpec rate_spec;
};

inline PluginStationary plugin_stationary(const SystemSpec& spec, const RateEstimates& rates,
                                          const std::vector<double>& pibar) {
    RatePlugin plug = make_rate_plugin(spec, rates);
    PluginStationary out;
    out.dist = plugin_dist(plug.rate_spec, pibar);
    out.state_flagged = std::move(plug.state_flagged);
    out.rate_spec = std::move(plug.rate_spec);
    return out;
}

// --- doubly robust evaluation -----------------------------------------------------

// Everything the estimators need about one usable evaluation arrival.
struct EvalArrival {
    int q = 0;
    int w = 0;
    double y = 0.0;
    double eta0 = 0.0, eta1 = 0.0;  // clipped outcome regression, both arms
    double e_obs = 0.5;             // clipped propensity of the observed arm
    const std::vector<double>* x = nullptr;
};

// Per-augmented-state mean gaps on the evaluation side (reward-rate clocks).
struct GapTable {
    std::vector<double> mean;   // flat over 3 * n_queue_states; NaN if unseen
    std::vector<std::int64_t> count;
};

struct OpeInputs {
    std::vector<EvalArrival> arrivals;
    std::vector<std::int64_t> per_state_count;  // usable eval arrivals per queue state
    GapTable gaps;
    std::int64_t skipped_missing = 0;           // eval arrivals dropped for missing rewards
};

inline OpeInputs prepare_ope_inputs(const SystemSpec& spec,
                                    const std::vector<EventRecord>& records,
                                    const std::vector<int>& eval_idx, const NuisanceSet& nuis) {
    if (!nuis.train_mask.empty() && nuis.train_mask.size() != records.size())
        throw std::invalid_argument("ope: nuisances were fitted on a different trajectory");
    const int nq = spec.n_queue_states();
    OpeInputs in;
    in.per_state_count.assign(static_cast<size_t>(nq), 0);
    in.gaps.mean.assign(static_cast<size_t>(kNumEventTypes * nq), kMissing);
    in.gaps.count.assign(static_cast<size_t>(kNumEventTypes * nq), 0);
    std::vector<double> gap_sum(static_cast<size_t>(kNumEventTypes * nq), 0.0);

    for (int idx : eval_idx) {
        if (!nuis.train_mask.empty() && nuis.train_mask[static_cast<size_t>(idx)])
            throw std::invalid_argument("ope: evaluation index " + std::to_string(idx) +
                                        " appears in the nuisance training set");
        const EventRecord& e = records.at(static_cast<size_t>(idx));
        const int q = spec.state_index(e.k0, e.k1);
        const int ai = aug_index(spec, e.a, q);
        gap_sum[static_cast<size_t>(ai)] += e.dt;
        in.gaps.count[static_cast<size_t>(ai)]++;
        if (!e.is_arrival()) continue;
        if (is_missing(e.r)) {
            ++in.skipped_missing;
            continue;
        }
        EvalArrival a;
        a.q = q;
        a.w = e.w;
        a.y = e.r;
        a.eta0 = nuis.eta_at(0, e.x, q);
        a.eta1 = nuis.eta_at(1, e.x, q);
        a.e_obs = nuis.propensity(e.w, e.x, q);
        a.x = &e.x;
        in.arrivals.push_back(a);
        in.per_state_count[static_cast<size_t>(q)]++;
    }
    for (size_t i = 0; i < gap_sum.size(); ++i)
        if (in.gaps.count[i] > 0) in.gaps.mean[i] = gap_sum[i] / static_cast<double>(in.gaps.count[i]);
    return in;
}

// Doubly robust per-state values given the target policy's treatment
// probability for each usable arrival:
//   r(q) = mean_i [ eta_pi + (pi_{W_i} / e_i) (Y_i - eta_{W_i}) ].
inline std::vector<double> dr_state_value(const SystemSpec& spec, const OpeInputs& in,
                                          const std::vector<double>& pi1_per_arrival) {
    const int nq = spec.n_queue_states();
    std::vector<double> sum(static_cast<size_t>(nq), 0.0);
    std::vector<std::int64_t> cnt(static_cast<size_t>(nq), 0);
    for (size_t i = 0; i < in.arrivals.size(); ++i) {
        const EvalArrival& a = in.arrivals[i];
        const double pi1 = pi1_per_arrival[i];
        const double eta_pi = pi1 * a.eta1 + (1.0 - pi1) * a.eta0;
        const double pi_obs = a.w == 1 ? pi1 : 1.0 - pi1;
        const double eta_obs = a.w == 1 ? a.eta1 : a.eta0;
        sum[static_cast<size_t>(a.q)] += eta_pi + (pi_obs / a.e_obs) * (a.y - eta_obs);
        cnt[static_cast<size_t>(a.q)]++;
    }
    std::vector<double> r(static_cast<size_t>(nq), kMissing);
    for (int q = 0; q < nq; ++q)
        if (cnt[static_cast<size_t>(q)] > 0)
            r[static_cast<size_t>(q)] = sum[static_cast<size_t>(q)] / cnt[static_cast<size_t>(q)];
    return r;
}

struct OpeResult {
    double value = 0.0;               // the estimate itself
    std::vector<double> r;            // per-state DR values (eta-only where flagged)
    std::vector<double> d_arrival;    // plug-in arrival-conditioned stationary law
    std::vector<double> pibar;        // treated shares fed to the plug-in
    double flagged_mass = 0.0;        // arrival mass on eta-only or rate-imputed states
    std::vector<char> state_flagged;
    std::int64_t n_eval_arrivals = 0;
};

namespace detail {

// Fills eta-only values at states with no usable eval arrivals: the plug-in
// mean of pi*eta1 + (1-pi)*eta0 over the reference covariates.
template <class Pi1Fn>
inline void fill_eta_only(const SystemSpec& spec, const NuisanceSet& nuis,
                          const std::vector<std::vector<double>>& ref_x, Pi1Fn&& pi1_at,
                          std::vector<double>& r, std::vector<char>& flagged) {
    const int nq = spec.n_queue_states();
    for (int q = 0; q < nq; ++q) {
        if (!is_missing(r[static_cast<size_t>(q)])) continue;
        if (!spec.arrivals_possible(q)) {
            r[static_cast<size_t>(q)] = 0.0;  // never weighted; keep finite
            continue;
        }
        double acc = 0.0;
        for (const auto& x : ref_x) {
            const double pi1 = pi1_at(x, q);
            acc += pi1 * nuis.eta_at(1, x, q) + (1.0 - pi1) * nuis.eta_at(0, x, q);
        }
        r[static_cast<size_t>(q)] = acc / static_cast<double>(ref_x.size());
        flagged[static_cast<size_t>(q)] = 1;
    }
}

}  // namespace detail

// Average-outcome estimate: sum_q d_arrival(q) * r(q).
inline OpeResult ope_value(const SystemSpec& spec, const OpeInputs& in, const NuisanceSet& nuis,
                           const PolicySpec& policy, const std::vector<std::vector<double>>& ref_x) {
    if (ref_x.empty()) throw std::invalid_argument("ope_value: empty reference covariate sample");
    validate_policy(policy, spec);
    const int nq = spec.n_queue_states();

    std::vector<double> pibar(static_cast<size_t>(nq), 0.0);
    for (int q = 0; q < nq; ++q) {
        if (!spec.arrivals_possible(q)) continue;
        double acc = 0.0;
        for (const auto& x : ref_x) acc += policy_prob(policy, spec, x, q);
        pibar[static_cast<size_t>(q)] = acc / static_cast<double>(ref_x.size());
    }

    std::vector<double> pi1(in.arrivals.size());
    for (size_t i = 0; i < in.arrivals.size(); ++i)
        pi1[i] = policy_prob(policy, spec, *in.arrivals[i].x, in.arrivals[i].q);

    OpeResult res;
    res.pibar = pibar;
    res.n_eval_arrivals = static_cast<std::int64_t>(in.arrivals.size());
    res.r = dr_state_value(spec, in, pi1);
    res.state_flagged.assign(static_cast<size_t>(nq), 0);
    detail::fill_eta_only(
        spec, nuis, ref_x,
        [&](const std::vector<double>& x, int q) { return policy_prob(policy, spec, x, q); },
        res.r, res.state_flagged);

    PluginStationary plug = plugin_stationary(spec, nuis.rates, pibar);
    res.d_arrival = plug.dist.arrival_conditioned;
    for (int q = 0; q < nq; ++q) {
        if (plug.state_flagged[static_cast<size_t>(q)]) res.state_flagged[static_cast<size_t>(q)] = 1;
        if (res.state_flagged[static_cast<size_t>(q)])
            res.flagged_mass += res.d_arrival[static_cast<size_t>(q)];
    }
    res.value = 0.0;
    for (int q = 0; q < nq; ++q)
        res.value += res.d_arrival[static_cast<size_t>(q)] * res.r[static_cast<size_t>(q)];
    return res;
}

// Reward-rate estimate (renewal ratio over the embedded chain):
//   theta = sum_s d(s) R(s) / sum_s d(s) gap(s)
// over augmented states s; R is the DR table on arrival states and 0
// elsewhere; unseen gap means fall back to 1/total-rate under estimated rates.
inline OpeResult ope_reward_rate(const SystemSpec& spec, const OpeInputs& in,
                                 const NuisanceSet& nuis, const PolicySpec& policy,
                                 const std::vector<std::vector<double>>& ref_x) {
    OpeResult res = ope_value(spec, in, nuis, policy, ref_x);
    const int nq = spec.n_queue_states();
    PluginStationary plug = plugin_stationary(spec, nuis.rates, res.pibar);
    const std::vector<double>& d = plug.dist.augmented;

    double num = 0.0, den = 0.0;
    for (int a = 0; a < kNumEventTypes; ++a) {
        for (int q = 0; q < nq; ++q) {
            const size_t ai = static_cast<size_t>(a * nq + q);
            const double mass = d[ai];
            if (mass <= 0.0) continue;
            double gap = in.gaps.mean[ai];
            if (is_missing(gap)) {
                auto [k0, k1] = plug.rate_spec.state_of(q);
                gap = 1.0 / total_rate(plug.rate_spec, k0, k1);
            }
            den += mass * gap;
            if (static_cast<EventType>(a) == EventType::Arrival)
                num += mass * res.r[static_cast<size_t>(q)];
        }
    }
    if (den <= 0.0) throw std::runtime_error("ope_reward_rate: degenerate gap denominator");
    res.value = num / den;
    return res;
}

// Convenience one-shot wrappers operating on a split trajectory.
inline OpeResult evaluate_policy(const SystemSpec& spec, const std::vector<EventRecord>& records,
                                 const RegenerationSplit& split, const NuisanceSet& nuis,
                                 const PolicySpec& policy, const std::string& objective) {
    OpeInputs in = prepare_ope_inputs(spec, records, split.eval_idx, nuis);
    std::vector<std::vector<double>> ref_x;
    for (int idx : split.train_idx) {
        const EventRecord& e = records.at(static_cast<size_t>(idx));
        if (e.is_arrival()) ref_x.push_back(e.x);
    }
    if (objective == "avg_outcome") return ope_value(spec, in, nuis, policy, ref_x);
    if (objective == "reward_rate") return ope_reward_rate(spec, in, nuis, policy, ref_x);
    throw std::invalid_argument("objective must be avg_outcome or reward_rate");
}

}  // namespace statewise
