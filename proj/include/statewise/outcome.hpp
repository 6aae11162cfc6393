#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "model.hpp"

namespace statewise {

// 0.75-quantile of the standard normal; splits covariate 1 into the
// delay-tolerant (75%) and delay-sensitive (25%) groups of the parallel model.
inline constexpr double kNormalQ75 = 0.6744897501960817;

// E[max(Z, 0)] for Z ~ N(0,1) = 1/sqrt(2*pi).
inline constexpr double kMeanPositivePart = 0.3989422804014327;

inline constexpr double kEulerGamma = 0.5772156649015329;

inline double harmonic(int n) {
    double h = 0.0;
    for (int i = 1; i <= n; ++i) h += 1.0 / i;
    return h;
}

// digamma at a positive integer: psi(n) = -gamma + H_{n-1}.
inline double digamma_int(int n) { return -kEulerGamma + harmonic(n - 1); }

// Sojourn of a customer joining a queue with k ahead is Erlang(k+1, mu).
inline double erlang_mean_log(int shape, double mu) { return digamma_int(shape) - std::log(mu); }
inline double erlang_mean_sq(int shape, double mu) {
    return static_cast<double>(shape) * (shape + 1) / (mu * mu);
}

// --- outcome models ---------------------------------------------------------
// "mnm1_example"     Y = W*((7-K)|x1| + 3 x2) + max(x3, 0) + eps, realized at
//                    arrival from the queue length K observed then.
// "w_times_x1"       Y = W*x1 + eps (test model, immediate).
// "parallel_example" Y = -log(S) if delay-tolerant, -3 S^2 if delay-sensitive,
//                    + eps, where S = wait + service; realized at departure.

inline bool outcome_is_deferred(const SystemSpec& spec) {
    return spec.outcome_id == "parallel_example";
}

// Noise-free outcome for immediate models.
inline double outcome_mean_immediate(const SystemSpec& spec, int w,
                                     const std::vector<double>& x, int k0) {
    if (spec.outcome_id == "mnm1_example") {
        const double treat = (7.0 - k0) * std::abs(x[0]) + 3.0 * x[1];
        return w * treat + std::max(x[2], 0.0);
    }
    if (spec.outcome_id == "w_times_x1") return w * x[0];
    throw std::invalid_argument("outcome model '" + spec.outcome_id + "' is not immediate");
}

// Noise-free outcome for deferred models, given the realized sojourn.
inline double outcome_mean_deferred(const SystemSpec& spec, const std::vector<double>& x,
                                    double sojourn) {
    if (spec.outcome_id == "parallel_example") {
        if (x[0] <= kNormalQ75) return -std::log(sojourn);
        return -3.0 * sojourn * sojourn;
    }
    throw std::invalid_argument("outcome model '" + spec.outcome_id + "' is not deferred");
}

// Queue an arrival actually joins: the drawn treatment w, overridden when
// exactly one queue is full.
inline int effective_queue(const SystemSpec& spec, int w, int k0, int k1) {
    if (k0 >= spec.cap0 && k1 < spec.cap1) return 1;
    if (k1 >= spec.cap1 && k0 < spec.cap0) return 0;
    return w;
}

// Exact outcome regression eta(w, x, state) = E[Y | W=w, X=x, K=state].
inline double true_eta(const SystemSpec& spec, int w, const std::vector<double>& x, int k0,
                       int k1 = 0) {
    if (spec.outcome_id == "parallel_example") {
        const int q = effective_queue(spec, w, k0, k1);
        const int ahead = (q == 0) ? k0 : k1;
        const double mu = (q == 0) ? spec.mu0 : spec.mu1;
        if (x[0] <= kNormalQ75) return -erlang_mean_log(ahead + 1, mu);
        return -3.0 * erlang_mean_sq(ahead + 1, mu);
    }
    return outcome_mean_immediate(spec, w, x, k0);
}

// Exact treatment effect tau(x, state) = eta(1,...) - eta(0,...).
inline double true_tau(const SystemSpec& spec, const std::vector<double>& x, int k0, int k1 = 0) {
    return true_eta(spec, 1, x, k0, k1) - true_eta(spec, 0, x, k0, k1);
}

// --- logging policies -------------------------------------------------------

inline double logging_prob(const LoggingDesc& d, const std::vector<double>& x) {
    if (d.id == "constant") return d.p;
    if (d.id == "mnm1_logging") {
        // 0.6 + 0.2*1{x2>0} - 0.1*1{x4+x5>0}; mean 0.65, independent of state.
        double p = 0.6;
        if (x[1] > 0.0) p += 0.2;
        if (x[3] + x[4] > 0.0) p -= 0.1;
        return p;
    }
    throw std::invalid_argument("unknown logging policy: " + d.id);
}

inline double logging_prob(const SystemSpec& spec, const std::vector<double>& x, int /*k0*/ = 0,
                           int /*k1*/ = 0) {
    return logging_prob(spec.logging, x);
}

}  // namespace statewise
