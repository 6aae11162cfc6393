// Command-line front end: simulate trajectories, fit effect models, evaluate
// and learn policies, query the ground-truth oracle, and reproduce the bundled
// studies. Every command is deterministic given its flags and seed; the
// CONGEST_SEED environment variable overrides --seed wherever one is taken.
//
// Exit codes: 0 ok, 2 configuration/input error, 3 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "statewise/cade.hpp"
#include "statewise/cade_model.hpp"
#include "statewise/chain.hpp"
#include "statewise/csv.hpp"
#include "statewise/experiments.hpp"
#include "statewise/learn.hpp"
#include "statewise/model.hpp"
#include "statewise/ope.hpp"
#include "statewise/oracle.hpp"
#include "statewise/policy.hpp"
#include "statewise/record.hpp"
#include "statewise/sim.hpp"

namespace {

using nlohmann::json;
using namespace statewise;

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

// --spec accepts either a preset name or a path to a spec JSON file.
SystemSpec load_spec(const std::string& arg) {
    if (arg == "mnm1_example") return spec_mnm1_example();
    if (arg == "parallel_example") return spec_parallel_example();
    SystemSpec spec = load_json_file(arg).get<SystemSpec>();
    validate(spec);
    return spec;
}

PolicySpec load_policy_file(const std::string& path) {
    try {
        return policy_from_json(load_json_file(path));
    } catch (const json::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

Trajectory load_trajectory(const std::string& path) {
    if (!std::filesystem::exists(path)) throw std::invalid_argument("cannot open " + path);
    try {
        return read_jsonl(path);
    } catch (const std::invalid_argument&) {
        throw;
    } catch (const std::exception& e) {
        // A file that exists but does not parse is a config-class error.
        throw std::invalid_argument(e.what());
    }
}

std::uint64_t effective_seed(std::uint64_t flag_seed) {
    if (const char* env = std::getenv("CONGEST_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw std::invalid_argument("CONGEST_SEED is not an unsigned integer: " +
                                        std::string(env));
        }
    }
    return flag_seed;
}

std::string join_g(const std::vector<double>& g) {
    std::string s;
    for (size_t i = 0; i < g.size(); ++i) {
        if (i) s += ';';
        std::ostringstream os;
        os.precision(17);
        os << g[i];
        s += os.str();
    }
    return s;
}

// --- simulate -----------------------------------------------------------------

struct SimulateArgs {
    std::string spec, policy, out;
    std::int64_t events = 0;
    double time = 0.0;
    std::uint64_t seed = 1;
};

int cmd_simulate(const SimulateArgs& a) {
    const SystemSpec spec = load_spec(a.spec);
    const PolicySpec policy = a.policy.empty() ? logging_policy(spec) : load_policy_file(a.policy);
    if ((a.events > 0) == (a.time > 0))
        throw std::invalid_argument("pass exactly one of --events or --time");
    const Horizon horizon = a.events > 0 ? Horizon::events(a.events) : Horizon::time(a.time);
    const std::uint64_t seed = effective_seed(a.seed);

    SimSummary sum;
    const Trajectory traj = simulate_trajectory(spec, policy, horizon, seed, &sum);
    write_jsonl(traj, a.out);

    std::map<EventType, std::int64_t> by_type;
    std::map<int, std::int64_t> occupancy;
    for (const EventRecord& e : traj.records) {
        by_type[e.a]++;
        occupancy[spec.state_index(e.k0, e.k1)]++;
    }
    std::cout << "wrote " << traj.records.size() << " events to " << a.out << "\n";
    std::cout << "arrivals=" << by_type[EventType::Arrival]
              << " services_main=" << by_type[EventType::Service0]
              << " services_fast=" << by_type[EventType::Service1]
              << " treated=" << sum.n_treated << " end_time=" << sum.end_time << "\n";
    std::cout << "state occupancy (events observed at each state):\n";
    for (const auto& [q, count] : occupancy)
        std::cout << "  " << spec.state_label(q) << ": " << count << "\n";
    return 0;
}

// --- learn --------------------------------------------------------------------

struct LearnArgs {
    std::string traj, out, value_csv, mode = "monotone", objective = "reward_rate";
    std::string propensity = "logistic";
    int B = 10;
    int jobs = 1;
    std::uint64_t seed = 1;
};

SearchGrid::Mode parse_mode(const std::string& mode) {
    if (mode == "monotone") return SearchGrid::Mode::MonotoneParam;
    if (mode == "full") return SearchGrid::Mode::FullProduct;
    if (mode == "ascent") return SearchGrid::Mode::CoordinateAscent;
    throw std::invalid_argument("unknown mode '" + mode + "' (monotone, full, ascent)");
}

int cmd_learn(const LearnArgs& a) {
    const Trajectory traj = load_trajectory(a.traj);
    LearnOptions lo;
    lo.B = a.B;
    lo.mode = parse_mode(a.mode);
    lo.objective = a.objective;
    lo.jobs = a.jobs;
    lo.ope.propensity = a.propensity;
    lo.split.seed = effective_seed(a.seed);
    lo.cade.seed = effective_seed(a.seed);

    const LearnResult lr = learn_policy(traj.spec, traj.records, lo);
    save_policy(lr.policy, a.out);
    std::cout << "learned policy written to " << a.out << "\n";
    std::cout << "objective=" << lr.objective << " estimate=" << lr.value
              << " g=" << join_g(lr.g) << "\n";
    for (const std::string& w : lr.warnings) std::cout << "warning: " << w << "\n";

    if (!a.value_csv.empty()) {
        CsvWriter csv(a.value_csv, fingerprint(traj.spec), effective_seed(a.seed),
                      {"g", "value", "flagged_mass", "excluded"});
        for (const ScoredCandidate& c : lr.selection.table)
            csv.row() << join_g(c.g) << c.value << c.flagged_mass
                      << static_cast<std::int64_t>(c.excluded ? 1 : 0);
        std::cout << "value table written to " << a.value_csv << "\n";
    }
    return 0;
}

// --- experiment -----------------------------------------------------------------

struct ExperimentArgs {
    std::string name, out = ".";
    int reps = 50;
    int jobs = 1;
    int B = 10;
    std::uint64_t seed = 20240816ULL;
};

int cmd_experiment(const ExperimentArgs& a) {
    ExperimentOptions opt;
    opt.reps = a.reps;
    opt.jobs = a.jobs;
    opt.B = a.B;
    opt.seed = effective_seed(a.seed);
    opt.out_dir = a.out;
    std::filesystem::create_directories(a.out);
    const ExperimentOutput out = run_experiment(a.name, opt);
    for (const std::string& f : out.files) std::cout << "wrote " << f << "\n";
    for (const std::string& n : out.notes) std::cout << n << "\n";
    return 0;
}

// --- analyze-stationary ------------------------------------------------------------

struct StationaryArgs {
    std::string spec, pibar, out;
};

int cmd_analyze_stationary(const StationaryArgs& a) {
    const SystemSpec spec = load_spec(a.spec);
    const json pj = load_json_file(a.pibar);
    if (!pj.is_array()) throw std::invalid_argument(a.pibar + ": expected a JSON array");
    std::vector<double> pibar = pj.get<std::vector<double>>();
    const StationaryResult dist = spec.single_queue()
                                      ? stationary_closed_form(spec, pibar)
                                      : stationary_solve(build_kernel(spec, pibar));
    const int nq = spec.n_queue_states();
    CsvWriter csv(a.out, fingerprint(spec), 0,
                  {"k0", "k1", "queue_marginal", "arrival_conditioned", "d_service_main",
                   "d_service_fast", "d_arrival"});
    for (int q = 0; q < nq; ++q) {
        auto [k0, k1] = spec.state_of(q);
        csv.row() << k0 << k1 << dist.queue_marginal[static_cast<size_t>(q)]
                  << dist.arrival_conditioned[static_cast<size_t>(q)]
                  << dist.augmented[static_cast<size_t>(aug_index(spec, EventType::Service0, q))]
                  << dist.augmented[static_cast<size_t>(aug_index(spec, EventType::Service1, q))]
                  << dist.augmented[static_cast<size_t>(aug_index(spec, EventType::Arrival, q))];
    }
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// --- fit-cade -----------------------------------------------------------------------

struct FitCadeArgs {
    std::string traj, out, estimator = "knn";
    bool train_split_only = false;
    std::uint64_t seed = 1;
};

int cmd_fit_cade(const FitCadeArgs& a) {
    const Trajectory traj = load_trajectory(a.traj);
    CadeOptions co;
    co.estimator = a.estimator;
    co.seed = effective_seed(a.seed);
    std::vector<int> indices;
    if (a.train_split_only) {
        SplitOptions so;
        so.seed = effective_seed(a.seed);
        indices = regeneration_split(traj.spec, traj.records, so).train_idx;
    } else {
        indices.resize(traj.records.size());
        for (size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
    }
    const CadeModelPtr model = fit_cade(traj.spec, traj.records, indices, co);
    std::ofstream out(a.out);
    if (!out) throw std::invalid_argument("cannot open " + a.out + " for writing");
    out << model->to_json().dump(2) << "\n";
    std::cout << "fitted " << model->id() << " model written to " << a.out << "\n";
    for (const std::string& w : model->fit_warnings) std::cout << "warning: " << w << "\n";
    return 0;
}

// --- ope ------------------------------------------------------------------------------

struct OpeArgs {
    std::string traj, policy, out, split;
    std::string objective = "avg_outcome";
    std::string propensity = "logistic";
    std::string eta = "fit";
    std::uint64_t seed = 1;
};

int cmd_ope(const OpeArgs& a) {
    const Trajectory traj = load_trajectory(a.traj);
    const PolicySpec policy = load_policy_file(a.policy);

    RegenerationSplit split;
    if (!a.split.empty()) {
        const json sj = load_json_file(a.split);
        split.train_idx = sj.at("train").get<std::vector<int>>();
        split.eval_idx = sj.at("eval").get<std::vector<int>>();
    } else {
        SplitOptions so;
        so.seed = effective_seed(a.seed);
        split = regeneration_split(traj.spec, traj.records, so);
    }

    OpeOptions oo;
    oo.propensity = a.propensity;
    oo.eta = a.eta;
    oo.cade.seed = effective_seed(a.seed);
    const NuisanceSet nuis = fit_nuisances(traj.spec, traj.records, split, oo);
    const OpeResult res = evaluate_policy(traj.spec, traj.records, split, nuis, policy,
                                          a.objective);

    json out;
    out["objective"] = a.objective;
    out["value"] = res.value;
    out["n_eval_arrivals"] = res.n_eval_arrivals;
    out["flagged_mass"] = res.flagged_mass;
    out["r"] = res.r;
    out["d_arrival"] = res.d_arrival;
    out["pibar"] = res.pibar;
    if (a.out.empty()) {
        std::cout << out.dump(2) << "\n";
    } else {
        std::ofstream f(a.out);
        if (!f) throw std::invalid_argument("cannot open " + a.out + " for writing");
        f << out.dump(2) << "\n";
        std::cout << "wrote " << a.out << "\n";
    }
    std::cout << "estimate=" << res.value << " flagged_mass=" << res.flagged_mass << "\n";
    return 0;
}

// --- oracle ----------------------------------------------------------------------------

struct OracleArgs {
    std::string spec, policy, out;
    std::string objective = "reward_rate";
    bool optimal = false;
    bool caie = false;
    int n_mc = 40000;
    int caie_reps = 2000;
    int truncation = 10000;
    std::uint64_t seed = 20240801ULL;
};

int cmd_oracle(const OracleArgs& a) {
    const SystemSpec spec = load_spec(a.spec);
    const std::uint64_t seed = effective_seed(a.seed);

    if (a.caie) {
        const PolicySpec policy =
            a.policy.empty() ? logging_policy(spec) : load_policy_file(a.policy);
        if (a.out.empty()) throw std::invalid_argument("oracle --caie needs --out CSV path");
        const double mu = true_value(spec, policy, "avg_outcome", a.n_mc, seed).value;
        CsvWriter csv(a.out, fingerprint(spec), seed,
                      {"k0", "k1", "caie", "se", "recouple_rate"});
        for (int q = 0; q < spec.n_queue_states(); ++q) {
            if (!spec.arrivals_possible(q)) continue;
            CaieOptions co;
            co.reps = a.caie_reps;
            co.truncation = a.truncation;
            co.seed = mix_seed(seed, static_cast<std::uint64_t>(q));
            co.mu = mu;
            const CaieResult res = caie_diagnostic(spec, policy, q, co);
            auto [k0, k1] = spec.state_of(q);
            csv.row() << k0 << k1 << res.c << res.se << res.recouple_rate;
            for (const std::string& w : res.warnings)
                std::cout << "warning (" << spec.state_label(q) << "): " << w << "\n";
        }
        std::cout << "wrote " << a.out << "\n";
        return 0;
    }

    if (a.optimal) {
        OptimalOptions oo;
        oo.n_mc = a.n_mc;
        oo.seed = seed;
        const OptimalResult res = approx_optimal(spec, a.objective, oo);
        json out;
        out["objective"] = a.objective;
        out["g"] = res.g;
        out["value"] = res.value;
        out["direct_value"] = res.direct_value;
        out["start_values"] = res.start_values;
        if (a.out.empty()) {
            std::cout << out.dump(2) << "\n";
        } else {
            std::ofstream f(a.out);
            if (!f) throw std::invalid_argument("cannot open " + a.out + " for writing");
            f << out.dump(2) << "\n";
            std::cout << "wrote " << a.out << "\n";
        }
        std::cout << "optimal value=" << res.value << " direct value=" << res.direct_value
                  << "\n";
        return 0;
    }

    if (a.policy.empty())
        throw std::invalid_argument("oracle needs --policy, --optimal, or --caie");
    const PolicySpec policy = load_policy_file(a.policy);
    const OracleValue val = true_value(spec, policy, a.objective, a.n_mc, seed);
    json out;
    out["objective"] = a.objective;
    out["value"] = val.value;
    out["pibar"] = val.pibar;
    out["r"] = val.r;
    out["d_arrival"] = val.d_arrival;
    if (a.out.empty()) {
        std::cout << out.dump(2) << "\n";
    } else {
        std::ofstream f(a.out);
        if (!f) throw std::invalid_argument("cannot open " + a.out + " for writing");
        f << out.dump(2) << "\n";
        std::cout << "wrote " << a.out << "\n";
    }
    std::cout << "value=" << val.value << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Queueing-aware treatment targeting: simulate, learn, evaluate"};
    app.require_subcommand(1);

    SimulateArgs sim_args;
    CLI::App* sim = app.add_subcommand("simulate", "Simulate a logged trajectory");
    sim->add_option("--spec", sim_args.spec, "Spec JSON file or preset name")->required();
    sim->add_option("--policy", sim_args.policy, "Policy JSON (default: the spec's logging policy)");
    sim->add_option("--events", sim_args.events, "Stop after N events");
    sim->add_option("--time", sim_args.time, "Stop at clock time T");
    sim->add_option("--seed", sim_args.seed, "RNG seed");
    sim->add_option("--out", sim_args.out, "Output JSONL path")->required();

    LearnArgs learn_args;
    CLI::App* lrn = app.add_subcommand("learn", "Learn a threshold policy from a trajectory");
    lrn->add_option("--traj", learn_args.traj, "Trajectory JSONL")->required();
    lrn->add_option("--B", learn_args.B, "Grid resolution");
    lrn->add_option("--mode", learn_args.mode, "Grid mode: monotone, full, ascent");
    lrn->add_option("--objective", learn_args.objective, "avg_outcome or reward_rate");
    lrn->add_option("--propensity", learn_args.propensity, "logistic, known, or constant");
    lrn->add_option("--jobs", learn_args.jobs, "Scoring threads");
    lrn->add_option("--seed", learn_args.seed, "Split/estimator seed");
    lrn->add_option("--out", learn_args.out, "Learned policy JSON path")->required();
    lrn->add_option("--value-csv", learn_args.value_csv, "Optional per-candidate value table");

    ExperimentArgs exp_args;
    CLI::App* exp = app.add_subcommand("experiment", "Reproduce a bundled study");
    exp->add_option("--name", exp_args.name, "fig2, fig3, fig4, or fig5")->required();
    exp->add_option("--reps", exp_args.reps, "Replications");
    exp->add_option("--jobs", exp_args.jobs, "Worker threads");
    exp->add_option("--B", exp_args.B, "Grid resolution");
    exp->add_option("--seed", exp_args.seed, "Base seed");
    exp->add_option("--out", exp_args.out, "Output directory")->required();

    StationaryArgs st_args;
    CLI::App* sta = app.add_subcommand("analyze-stationary", "Stationary law for a treated-share table");
    sta->add_option("--spec", st_args.spec, "Spec JSON file or preset name")->required();
    sta->add_option("--pibar", st_args.pibar, "JSON array of treated shares per state")->required();
    sta->add_option("--out", st_args.out, "Output CSV")->required();

    FitCadeArgs fc_args;
    CLI::App* fit = app.add_subcommand("fit-cade", "Fit an effect model from a trajectory");
    fit->add_option("--traj", fc_args.traj, "Trajectory JSONL")->required();
    fit->add_option("--estimator", fc_args.estimator, "knn, honest_tree, or oracle");
    fit->add_flag("--train-split-only", fc_args.train_split_only,
                  "Fit on the training side of the regeneration split");
    fit->add_option("--seed", fc_args.seed, "Estimator/split seed");
    fit->add_option("--out", fc_args.out, "Model JSON path")->required();

    OpeArgs ope_args;
    CLI::App* ope = app.add_subcommand("ope", "Off-policy evaluation of a policy file");
    ope->add_option("--traj", ope_args.traj, "Trajectory JSONL")->required();
    ope->add_option("--policy", ope_args.policy, "Policy JSON")->required();
    ope->add_option("--objective", ope_args.objective, "avg_outcome or reward_rate");
    ope->add_option("--split", ope_args.split, "Optional JSON file with train/eval index arrays");
    ope->add_option("--propensity", ope_args.propensity, "logistic, known, or constant");
    ope->add_option("--eta", ope_args.eta, "fit or oracle");
    ope->add_option("--seed", ope_args.seed, "Split/estimator seed");
    ope->add_option("--out", ope_args.out, "Result JSON path (stdout when omitted)");

    OracleArgs or_args;
    CLI::App* orc = app.add_subcommand("oracle", "Ground-truth values, optima, and diagnostics");
    orc->add_option("--spec", or_args.spec, "Spec JSON file or preset name")->required();
    orc->add_option("--policy", or_args.policy, "Policy JSON to evaluate");
    orc->add_option("--objective", or_args.objective, "avg_outcome or reward_rate");
    orc->add_flag("--optimal", or_args.optimal, "Search for the optimal treated-share table");
    orc->add_flag("--caie", or_args.caie, "Coupled-chain congestion externality per state");
    orc->add_option("--n-mc", or_args.n_mc, "Monte Carlo draws");
    orc->add_option("--caie-reps", or_args.caie_reps, "Coupling replications per state");
    orc->add_option("--truncation", or_args.truncation, "Coupling truncation in events");
    orc->add_option("--seed", or_args.seed, "Oracle seed");
    orc->add_option("--out", or_args.out, "Output path (JSON or CSV per flag)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (sim->parsed()) return cmd_simulate(sim_args);
        if (lrn->parsed()) return cmd_learn(learn_args);
        if (exp->parsed()) return cmd_experiment(exp_args);
        if (sta->parsed()) return cmd_analyze_stationary(st_args);
        if (fit->parsed()) return cmd_fit_cade(fc_args);
        if (ope->parsed()) return cmd_ope(ope_args);
        if (orc->parsed()) return cmd_oracle(or_args);
        std::cerr << "no command\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
