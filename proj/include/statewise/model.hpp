#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace statewise {

// Queueing system families the simulator and analytic machinery understand.
//   Mnm1            single queue, state-dependent arrival rates, admission control
//   Mm1Admission    single queue, constant arrival rate, admission control
//   ParallelRouting two queues with caps; treatment routes to the fast queue
enum class SystemKind { Mnm1, Mm1Admission, ParallelRouting };

inline std::string to_string(SystemKind k) {
    switch (k) {
        case SystemKind::Mnm1: return "mnm1";
        case SystemKind::Mm1Admission: return "mm1_admission";
        case SystemKind::ParallelRouting: return "parallel_routing";
    }
    return "?";
}

inline SystemKind system_kind_from(const std::string& s) {
    if (s == "mnm1") return SystemKind::Mnm1;
    if (s == "mm1_admission") return SystemKind::Mm1Admission;
    if (s == "parallel_routing") return SystemKind::ParallelRouting;
    throw std::invalid_argument("unknown system kind: " + s);
}

// Lightweight descriptor of the data-collection policy baked into a spec.
// id is either "constant" (uses p) or a built-in formula name.
struct LoggingDesc {
    std::string id = "constant";
    double p = 0.5;
};

struct SystemSpec {
    SystemKind kind = SystemKind::Mm1Admission;

    // Single queue: indexed by queue length 0..cap0; the entry at cap0 is
    // forced to 0 (no arrival events while at capacity). Parallel: one entry,
    // the overall arrival rate.
    std::vector<double> arrival_rates;

    double mu0 = 1.0;   // service rate (single queue, or the regular queue)
    double mu1 = 1.0;   // fast-track service rate (parallel only)
    int cap0 = 1;       // queue capacity (single queue, or regular queue)
    int cap1 = 0;       // fast-track capacity (parallel only)

    int covariate_dim = 10;
    std::string outcome_id;        // registered outcome model
    double outcome_noise_sd = 1.0;
    LoggingDesc logging;

    // When false, arrivals always join regardless of the drawn treatment,
    // so congestion is policy-invariant (diagnostic fixture).
    bool treatment_affects_state = true;

    int init_k0 = 0;
    int init_k1 = 0;

    bool single_queue() const { return kind != SystemKind::ParallelRouting; }

    // Effective arrival rate while the queue state is (k0, k1).
    double arrival_rate_at(int k0, int k1) const {
        if (single_queue()) {
            return k0 >= cap0 ? 0.0 : arrival_rates[static_cast<size_t>(k0)];
        }
        return (k0 >= cap0 && k1 >= cap1) ? 0.0 : arrival_rates[0];
    }

    // --- flat indexing of queue states -----------------------------------
    int n_queue_states() const {
        return single_queue() ? cap0 + 1 : (cap0 + 1) * (cap1 + 1);
    }
    int state_index(int k0, int k1 = 0) const {
        return single_queue() ? k0 : k0 * (cap1 + 1) + k1;
    }
    std::pair<int, int> state_of(int idx) const {
        if (single_queue()) return {idx, 0};
        return {idx / (cap1 + 1), idx % (cap1 + 1)};
    }
    std::string state_label(int idx) const {
        auto [k0, k1] = state_of(idx);
        return single_queue() ? std::to_string(k0)
                              : "(" + std::to_string(k0) + "," + std::to_string(k1) + ")";
    }
    // Arrivals can be observed at this queue state.
    bool arrivals_possible(int idx) const {
        auto [k0, k1] = state_of(idx);
        return arrival_rate_at(k0, k1) > 0.0;
    }
    // Capacity, not the drawn treatment, determines the realized action here:
    // with exactly one parallel queue full, arrivals are routed to the open one.
    bool forced_action(int idx) const {
        if (single_queue()) return false;
        auto [k0, k1] = state_of(idx);
        return (k0 >= cap0) != (k1 >= cap1);
    }
};

inline void validate(const SystemSpec& s) {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("spec: " + msg); };
    if (s.cap0 < 1) fail("cap0 must be >= 1");
    if (s.single_queue()) {
        if (s.arrival_rates.size() != static_cast<size_t>(s.cap0 + 1))
            fail("arrival_rates must have cap0+1 entries (one per queue length)");
        if (s.arrival_rates[0] <= 0.0)
            fail("arrival rate at an empty queue must be positive (state 0 is absorbing otherwise)");
    } else {
        if (s.cap1 < 1) fail("cap1 must be >= 1");
        if (s.arrival_rates.size() != 1) fail("parallel spec takes a single arrival rate");
        if (s.arrival_rates[0] <= 0.0) fail("arrival rate must be positive");
        if (!(s.mu1 > 0.0) || !std::isfinite(s.mu1)) fail("mu1 must be positive and finite");
    }
    for (double lam : s.arrival_rates) {
        if (lam < 0.0 || !std::isfinite(lam)) fail("arrival rates must be finite and >= 0");
    }
    if (!(s.mu0 > 0.0) || !std::isfinite(s.mu0)) fail("mu0 must be positive and finite");
    if (s.covariate_dim < 1) fail("covariate_dim must be >= 1");
    if (s.outcome_id.empty()) fail("outcome_id must name a registered outcome model");
    if (!(s.outcome_noise_sd >= 0.0)) fail("outcome_noise_sd must be >= 0");
    if (s.logging.id == "constant" && (s.logging.p < 0.0 || s.logging.p > 1.0))
        fail("constant logging probability must lie in [0, 1]");
    if (s.init_k0 < 0 || s.init_k0 > s.cap0) fail("init_k0 outside [0, cap0]");
    if (!s.single_queue() && (s.init_k1 < 0 || s.init_k1 > s.cap1)) fail("init_k1 outside [0, cap1]");
}

// --- JSON ----------------------------------------------------------------

inline void to_json(nlohmann::json& j, const LoggingDesc& d) {
    j = nlohmann::json{{"id", d.id}, {"p", d.p}};
}
inline void from_json(const nlohmann::json& j, LoggingDesc& d) {
    d.id = j.value("id", std::string("constant"));
    d.p = j.value("p", 0.5);
}

inline void to_json(nlohmann::json& j, const SystemSpec& s) {
    j = nlohmann::json{
        {"kind", to_string(s.kind)},
        {"arrival_rates", s.arrival_rates},
        {"mu0", s.mu0},
        {"cap0", s.cap0},
        {"covariate_dim", s.covariate_dim},
        {"outcome_id", s.outcome_id},
        {"outcome_noise_sd", s.outcome_noise_sd},
        {"logging", s.logging},
        {"treatment_affects_state", s.treatment_affects_state},
        {"init_k0", s.init_k0},
    };
    if (!s.single_queue()) {
        j["mu1"] = s.mu1;
        j["cap1"] = s.cap1;
        j["init_k1"] = s.init_k1;
    }
}

inline void from_json(const nlohmann::json& j, SystemSpec& s) {
    s.kind = system_kind_from(j.at("kind").get<std::string>());
    s.arrival_rates = j.at("arrival_rates").get<std::vector<double>>();
    s.mu0 = j.at("mu0").get<double>();
    s.cap0 = j.at("cap0").get<int>();
    s.covariate_dim = j.at("covariate_dim").get<int>();
    s.outcome_id = j.at("outcome_id").get<std::string>();
    s.outcome_noise_sd = j.value("outcome_noise_sd", 1.0);
    if (j.contains("logging")) s.logging = j.at("logging").get<LoggingDesc>();
    s.treatment_affects_state = j.value("treatment_affects_state", true);
    s.init_k0 = j.value("init_k0", 0);
    if (!s.single_queue()) {
        s.mu1 = j.at("mu1").get<double>();
        s.cap1 = j.at("cap1").get<int>();
        s.init_k1 = j.value("init_k1", 0);
    }
    // Normalize: the capacity entry never produces arrival events.
    if (s.single_queue() && s.arrival_rates.size() == static_cast<size_t>(s.cap0 + 1))
        s.arrival_rates[static_cast<size_t>(s.cap0)] = 0.0;
}

// FNV-1a over the canonical JSON dump; stable id stamped into every output.
inline std::string fingerprint(const SystemSpec& s) {
    nlohmann::json j = s;
    const std::string dump = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : dump) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// --- presets ---------------------------------------------------------------

// Single queue with slowly decaying arrival rates 2/(k+1)^0.1, unit service
// rate, capacity 20; outcomes reward admitting short-queue arrivals.
inline SystemSpec spec_mnm1_example() {
    SystemSpec s;
    s.kind = SystemKind::Mnm1;
    s.cap0 = 20;
    s.arrival_rates.resize(21);
    for (int k = 0; k < 20; ++k) s.arrival_rates[static_cast<size_t>(k)] = 2.0 / std::pow(k + 1.0, 0.1);
    s.arrival_rates[20] = 0.0;
    s.mu0 = 1.0;
    s.covariate_dim = 10;
    s.outcome_id = "mnm1_example";
    s.outcome_noise_sd = 2.0;
    s.logging = LoggingDesc{"mnm1_logging", 0.0};
    return s;
}

inline SystemSpec spec_mm1_admission(double lambda, double mu, int cap) {
    SystemSpec s;
    s.kind = SystemKind::Mm1Admission;
    s.cap0 = cap;
    s.arrival_rates.assign(static_cast<size_t>(cap + 1), lambda);
    s.arrival_rates[static_cast<size_t>(cap)] = 0.0;
    s.mu0 = mu;
    s.covariate_dim = 10;
    s.outcome_id = "mnm1_example";
    s.outcome_noise_sd = 2.0;
    s.logging = LoggingDesc{"constant", 0.5};
    return s;
}

// Two queues: slow regular queue (cap 10) vs fast-track (cap 3); treatment
// routes to the fast track, outcomes penalize sojourn time.
inline SystemSpec spec_parallel_example(double mu1 = 1.0) {
    SystemSpec s;
    s.kind = SystemKind::ParallelRouting;
    s.arrival_rates = {1.0};
    s.mu0 = 0.5;
    s.mu1 = mu1;
    s.cap0 = 10;
    s.cap1 = 3;
    s.covariate_dim = 10;
    s.outcome_id = "parallel_example";
    s.outcome_noise_sd = 1.0;
    s.logging = LoggingDesc{"constant", 0.5};
    return s;
}

}  // namespace statewise
