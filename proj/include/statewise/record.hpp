#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "chain.hpp"
#include "model.hpp"

namespace statewise {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline bool is_missing(double v) { return std::isnan(v); }

// Treatment sentinel on non-arrival records.
inline constexpr int kNoTreatment = 2;

// One event of the embedded chain. Queue lengths are those observed just
// before the event takes effect. Covariates are present only on arrivals.
struct EventRecord {
    std::int64_t i = 0;
    double t = 0.0;
    double dt = 0.0;           // strictly positive gap since the previous event
    EventType a = EventType::Arrival;
    int k0 = 0;
    int k1 = 0;                // 0 for single-queue systems
    std::vector<double> x;     // empty unless a == Arrival
    int w = kNoTreatment;      // 0/1 on arrivals
    double r = 0.0;            // reward; missing if unserved at the horizon
    double wait = 0.0;         // missing until served; 0 for non-admitted
    double svc = 0.0;

    bool is_arrival() const { return a == EventType::Arrival; }
};

struct Horizon {
    enum class Kind { Events, Time };
    Kind kind = Kind::Events;
    double value = 0.0;

    static Horizon events(std::int64_t n) { return {Kind::Events, static_cast<double>(n)}; }
    static Horizon time(double t) { return {Kind::Time, t}; }
};

struct Trajectory {
    SystemSpec spec;
    std::uint64_t seed = 0;
    Horizon horizon;
    std::vector<EventRecord> records;

    // Total simulated clock: the horizon itself for time horizons, else the
    // epoch of the last event.
    double end_time() const {
        if (horizon.kind == Horizon::Kind::Time) return horizon.value;
        return records.empty() ? 0.0 : records.back().t;
    }
};

// --- on-disk codes -----------------------------------------------------------
// Single queue: a = 1 arrival, 0 service. Parallel: a = 2 arrival, 0 regular
// service, 1 fast-track service.

inline int event_code(const SystemSpec& spec, EventType a) {
    if (a == EventType::Arrival) return spec.single_queue() ? 1 : 2;
    return a == EventType::Service0 ? 0 : 1;
}

inline EventType event_from_code(const SystemSpec& spec, int code) {
    if (spec.single_queue()) {
        if (code == 1) return EventType::Arrival;
        if (code == 0) return EventType::Service0;
    } else {
        if (code == 2) return EventType::Arrival;
        if (code == 0) return EventType::Service0;
        if (code == 1) return EventType::Service1;
    }
    throw std::invalid_argument("bad event code " + std::to_string(code) + " for kind " +
                                to_string(spec.kind));
}

// --- JSON Lines ---------------------------------------------------------------

inline constexpr const char* kTrajectorySchema = "statewise-trajectory-v1";

namespace detail {

inline nlohmann::json num_or_null(double v) {
    if (is_missing(v)) return nullptr;
    return v;
}
inline double num_from(const nlohmann::json& j) {
    if (j.is_null()) return kMissing;
    return j.get<double>();
}

}  // namespace detail

inline nlohmann::json record_to_json(const SystemSpec& spec, const EventRecord& e) {
    nlohmann::json j{
        {"i", e.i},
        {"t", e.t},
        {"dt", e.dt},
        {"a", event_code(spec, e.a)},
        {"w", e.w},
        {"r", detail::num_or_null(e.r)},
        {"wait", detail::num_or_null(e.wait)},
        {"svc", detail::num_or_null(e.svc)},
    };
    if (spec.single_queue()) {
        j["k"] = e.k0;
    } else {
        j["k0"] = e.k0;
        j["k1"] = e.k1;
    }
    if (e.is_arrival()) j["x"] = e.x;
    else j["x"] = nullptr;
    return j;
}

inline EventRecord record_from_json(const SystemSpec& spec, const nlohmann::json& j) {
    EventRecord e;
    e.i = j.at("i").get<std::int64_t>();
    e.t = j.at("t").get<double>();
    e.dt = j.at("dt").get<double>();
    e.a = event_from_code(spec, j.at("a").get<int>());
    if (spec.single_queue()) {
        e.k0 = j.at("k").get<int>();
        e.k1 = 0;
    } else {
        e.k0 = j.at("k0").get<int>();
        e.k1 = j.at("k1").get<int>();
    }
    if (!j.at("x").is_null()) e.x = j.at("x").get<std::vector<double>>();
    e.w = j.at("w").get<int>();
    e.r = detail::num_from(j.at("r"));
    e.wait = detail::num_from(j.at("wait"));
    e.svc = detail::num_from(j.at("svc"));
    return e;
}

// Streams records to disk as they are produced; header line first.
class JsonlWriter {
  public:
    JsonlWriter(const std::string& path, const SystemSpec& spec, std::uint64_t seed,
                const Horizon& horizon)
        : out_(path), spec_(spec) {
        if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
        nlohmann::json header{
            {"schema", kTrajectorySchema},
            {"fingerprint", fingerprint(spec)},
            {"seed", seed},
            {"horizon",
             {{"kind", horizon.kind == Horizon::Kind::Events ? "events" : "time"},
              {"value", horizon.value}}},
            {"spec", spec},
        };
        out_ << header.dump() << '\n';
    }

    void write(const EventRecord& e) { out_ << record_to_json(spec_, e).dump() << '\n'; }

    void close() { out_.close(); }

  private:
    std::ofstream out_;
    SystemSpec spec_;
};

inline void write_jsonl(const Trajectory& traj, const std::string& path) {
    JsonlWriter w(path, traj.spec, traj.seed, traj.horizon);
    for (const EventRecord& e : traj.records) w.write(e);
    w.close();
}

inline Trajectory read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty trajectory file");
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("schema", std::string()) != kTrajectorySchema)
        throw std::runtime_error(path + ": not a trajectory file (bad schema line)");
    Trajectory traj;
    traj.spec = header.at("spec").get<SystemSpec>();
    validate(traj.spec);
    if (header.at("fingerprint").get<std::string>() != fingerprint(traj.spec))
        throw std::runtime_error(path + ": fingerprint does not match embedded spec");
    traj.seed = header.at("seed").get<std::uint64_t>();
    const auto& h = header.at("horizon");
    traj.horizon.kind = h.at("kind").get<std::string>() == "time" ? Horizon::Kind::Time
                                                                  : Horizon::Kind::Events;
    traj.horizon.value = h.at("value").get<double>();
    std::int64_t expect = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EventRecord e = record_from_json(traj.spec, nlohmann::json::parse(line));
        if (e.i != expect++)
            throw std::runtime_error(path + ": record indices not consecutive at i=" +
                                     std::to_string(e.i));
        traj.records.push_back(std::move(e));
    }
    return traj;
}

}  // namespace statewise
