#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cade_model.hpp"
#include "model.hpp"
#include "outcome.hpp"

namespace statewise {

// Treatment policies over (covariates, queue state).
//   Direct     treat iff the effect model predicts a positive effect
//   Threshold  treat iff the prediction clears a per-state cutoff; exact ties
//              are treated with a per-state probability (discrete predictions)
//   Logging    a data-collection rule (built-in formula or constant)
//   Constant   treat with fixed probability everywhere
enum class PolicyKind { Direct, Threshold, Logging, Constant };

struct PolicySpec {
    PolicyKind kind = PolicyKind::Constant;
    CadeModelPtr model;              // Direct, Threshold
    std::vector<double> c;           // Threshold: cutoff per queue state
    std::vector<double> p;           // Threshold: tie probability per queue state
    std::vector<double> g;           // Threshold: targeted treated share (provenance)
    LoggingDesc logging;             // Logging
    double prob = 0.5;               // Constant
};

inline PolicySpec constant_policy(double p) {
    PolicySpec ps;
    ps.kind = PolicyKind::Constant;
    ps.prob = p;
    return ps;
}

inline PolicySpec logging_policy(const SystemSpec& spec) {
    PolicySpec ps;
    ps.kind = PolicyKind::Logging;
    ps.logging = spec.logging;
    return ps;
}

inline PolicySpec direct_policy(CadeModelPtr model) {
    PolicySpec ps;
    ps.kind = PolicyKind::Direct;
    ps.model = std::move(model);
    return ps;
}

// Throws if the policy cannot be evaluated against this spec.
inline void validate_policy(const PolicySpec& ps, const SystemSpec& spec) {
    const size_t nq = static_cast<size_t>(spec.n_queue_states());
    switch (ps.kind) {
        case PolicyKind::Direct:
            if (!ps.model) throw std::invalid_argument("policy: direct rule has no effect model");
            return;
        case PolicyKind::Threshold:
            if (!ps.model) throw std::invalid_argument("policy: threshold rule has no effect model");
            if (ps.c.size() != nq || ps.p.size() != nq)
                throw std::invalid_argument(
                    "policy: threshold tables sized for " + std::to_string(ps.c.size()) +
                    " states but spec has " + std::to_string(nq));
            for (double tie : ps.p)
                if (!(tie >= 0.0 && tie <= 1.0))
                    throw std::invalid_argument("policy: tie probabilities must lie in [0, 1]");
            return;
        case PolicyKind::Logging:
            if (ps.logging.id == "constant" && !(ps.logging.p >= 0.0 && ps.logging.p <= 1.0))
                throw std::invalid_argument("policy: constant logging probability outside [0, 1]");
            return;
        case PolicyKind::Constant:
            if (!(ps.prob >= 0.0 && ps.prob <= 1.0))
                throw std::invalid_argument("policy: treatment probability outside [0, 1]");
            return;
    }
}

// P(W = 1 | X = x, queue state qidx). Always in [0, 1].
inline double policy_prob(const PolicySpec& ps, const SystemSpec& spec,
                          const std::vector<double>& x, int qidx) {
    switch (ps.kind) {
        case PolicyKind::Direct:
            return ps.model->tau(x, qidx) > 0.0 ? 1.0 : 0.0;
        case PolicyKind::Threshold: {
            const double tau = ps.model->tau(x, qidx);
            const double cut = ps.c[static_cast<size_t>(qidx)];
            if (tau > cut) return 1.0;
            if (tau == cut) return ps.p[static_cast<size_t>(qidx)];
            return 0.0;
        }
        case PolicyKind::Logging:
            return logging_prob(ps.logging, x);
        case PolicyKind::Constant:
            return ps.prob;
    }
    return 0.0;
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json policy_to_json(const PolicySpec& ps) {
    switch (ps.kind) {
        case PolicyKind::Direct:
            return {{"kind", "direct"}, {"model", ps.model->to_json()}};
        case PolicyKind::Threshold: {
            nlohmann::json j{{"kind", "threshold"},
                             {"model", ps.model->to_json()},
                             {"c", ps.c},
                             {"p", ps.p}};
            if (!ps.g.empty()) j["g"] = ps.g;
            return j;
        }
        case PolicyKind::Logging:
            return {{"kind", "logging"}, {"logging", ps.logging}};
        case PolicyKind::Constant:
            return {{"kind", "constant"}, {"p", ps.prob}};
    }
    throw std::logic_error("unreachable");
}

inline PolicySpec policy_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    PolicySpec ps;
    if (kind == "direct") {
        ps.kind = PolicyKind::Direct;
        ps.model = cade_model_from_json(j.at("model"));
    } else if (kind == "threshold") {
        ps.kind = PolicyKind::Threshold;
        ps.model = cade_model_from_json(j.at("model"));
        ps.c = j.at("c").get<std::vector<double>>();
        ps.p = j.at("p").get<std::vector<double>>();
        if (j.contains("g")) ps.g = j.at("g").get<std::vector<double>>();
    } else if (kind == "logging") {
        ps.kind = PolicyKind::Logging;
        ps.logging = j.at("logging").get<LoggingDesc>();
    } else if (kind == "constant") {
        ps.kind = PolicyKind::Constant;
        ps.prob = j.at("p").get<double>();
    } else {
        throw std::invalid_argument("unknown policy kind '" + kind + "'");
    }
    return ps;
}

inline void save_policy(const PolicySpec& ps, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << policy_to_json(ps).dump(2) << '\n';
}

inline PolicySpec load_policy(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    in >> j;
    return policy_from_json(j);
}

}  // namespace statewise
