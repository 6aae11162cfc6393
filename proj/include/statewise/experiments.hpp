#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "csv.hpp"
#include "learn.hpp"
#include "model.hpp"
#include "oracle.hpp"
#include "parallel.hpp"
#include "policy.hpp"
#include "sim.hpp"

namespace statewise {

// Desk-scale reproductions of the paper-style studies: logged data are
// simulated under the logging policy, policies are learned from each
// replication, and everything is scored by the ground-truth oracle so the
// curves compare like with like.

struct ExperimentOptions {
    int reps = 50;
    int jobs = 1;
    std::uint64_t seed = 20240816ULL;
    std::string out_dir = ".";
    int B = 10;
    int n_mc_eval = 4000;    // oracle-evaluation draws per policy
    int n_mc_table = 40000;  // oracle-table / optimizer draws
    std::vector<int> horizons_T = {2000, 6000, 10000};  // single-queue study
    std::vector<int> sample_sizes_n = {2000, 10000};    // routing study
};

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty sample");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::uint64_t rep_stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t scale,
                                std::uint64_t rep) {
    return mix_seed(mix_seed(seed, tag ^ (scale << 20)), rep);
}

}  // namespace detail

// --- single-queue policy-vs-horizon study ------------------------------------------

struct HorizonRep {
    int T = 0;
    int rep = 0;
    double algorithm = 0.0;  // oracle reward rate of the learned policy
    double direct = 0.0;     // oracle reward rate of the direct rule, same effect model
};

struct HorizonStudy {
    std::vector<HorizonRep> rows;
    std::vector<int> horizons;
    std::vector<double> median_algorithm;  // per horizon
    std::vector<double> median_direct;
    double optimal_value = 0.0;
    std::vector<double> optimal_g;
    std::string csv_path;
};

// Learned-policy reward rates against the horizon of the logged window, with
// the optimizer's value as the reference line.
inline HorizonStudy run_horizon_study(const ExperimentOptions& opt, bool write_csv = true) {
    const SystemSpec spec = spec_mnm1_example();
    const std::uint64_t eval_seed = mix_seed(opt.seed, 0xe7a1ULL);

    OracleTable table(spec, "reward_rate", opt.n_mc_table, opt.seed);
    OptimalOptions oo;
    oo.n_mc = opt.n_mc_table;
    oo.seed = opt.seed;
    const OptimalResult best = approx_optimal(table, oo);

    HorizonStudy study;
    study.horizons = opt.horizons_T;
    study.optimal_value = best.value;
    study.optimal_g = best.g;

    const int n_cells = static_cast<int>(opt.horizons_T.size()) * opt.reps;
    study.rows.resize(static_cast<size_t>(n_cells));
    parallel_for(n_cells, opt.jobs, [&](int cell) {
        const int ti = cell / opt.reps;
        const int rep = cell % opt.reps;
        const int T = opt.horizons_T[static_cast<size_t>(ti)];
        const std::uint64_t sim_seed =
            detail::rep_stream(opt.seed, 0xf1930001ULL, static_cast<std::uint64_t>(T),
                               static_cast<std::uint64_t>(rep));
        const Trajectory traj = simulate_trajectory(spec, logging_policy(spec),
                                                    Horizon::time(T), sim_seed);
        LearnOptions lo;
        lo.B = opt.B;
        lo.objective = "reward_rate";
        const LearnResult lr = learn_policy(spec, traj.records, lo);
        const PolicySpec direct = direct_baseline(lr.model);

        HorizonRep& row = study.rows[static_cast<size_t>(cell)];
        row.T = T;
        row.rep = rep;
        row.algorithm = true_value(spec, lr.policy, "reward_rate", opt.n_mc_eval, eval_seed).value;
        row.direct = true_value(spec, direct, "reward_rate", opt.n_mc_eval, eval_seed).value;
    });

    for (size_t ti = 0; ti < opt.horizons_T.size(); ++ti) {
        std::vector<double> alg, dir;
        for (const HorizonRep& row : study.rows) {
            if (row.T != opt.horizons_T[ti]) continue;
            alg.push_back(row.algorithm);
            dir.push_back(row.direct);
        }
        study.median_algorithm.push_back(detail::median(alg));
        study.median_direct.push_back(detail::median(dir));
    }

    if (write_csv) {
        study.csv_path = opt.out_dir + "/fig3.csv";
        CsvWriter csv(study.csv_path, fingerprint(spec), opt.seed,
                      {"method", "T", "rep", "value"});
        for (const HorizonRep& row : study.rows) {
            csv.row() << "algorithm" << row.T << row.rep << row.algorithm;
            csv.row() << "direct" << row.T << row.rep << row.direct;
        }
        for (int T : opt.horizons_T) csv.row() << "optimal" << T << -1 << study.optimal_value;
    }
    return study;
}

// --- single-queue policy portrait ----------------------------------------------------

struct PolicyPortrait {
    std::vector<double> optimal_g, optimal_c, optimal_p;
    std::vector<double> optimal_arrival_mass;
    std::vector<double> direct_share, direct_arrival_mass;
    std::string states_csv, quantiles_csv;
};

// Optimal-vs-direct targeting per queue length: thresholds, treated shares,
// arrival masses, and the per-state effect distribution as quantiles.
inline PolicyPortrait run_policy_portrait(const ExperimentOptions& opt, bool write_csv = true) {
    const SystemSpec spec = spec_mnm1_example();
    OracleTable table(spec, "reward_rate", opt.n_mc_table, opt.seed);
    OptimalOptions oo;
    oo.n_mc = opt.n_mc_table;
    oo.seed = opt.seed;
    const OptimalResult best = approx_optimal(table, oo);
    const OracleValue opt_val = table.value_of(best.g);
    const OracleValue dir_val = table.value_of_direct();
    const PolicySpec opt_policy = table.policy_for(best.g);

    PolicyPortrait out;
    out.optimal_g = best.g;
    out.optimal_c = opt_policy.c;
    out.optimal_p = opt_policy.p;
    out.optimal_arrival_mass = opt_val.d_arrival;
    out.direct_share = dir_val.pibar;
    out.direct_arrival_mass = dir_val.d_arrival;

    if (write_csv) {
        out.states_csv = opt.out_dir + "/fig2_states.csv";
        CsvWriter scsv(out.states_csv, fingerprint(spec), opt.seed,
                       {"k", "optimal_g", "optimal_c", "optimal_tie_p", "optimal_arrival_mass",
                        "direct_share", "direct_arrival_mass"});
        for (int q = 0; q < spec.n_queue_states(); ++q) {
            if (!spec.arrivals_possible(q)) continue;
            const size_t i = static_cast<size_t>(q);
            scsv.row() << q << out.optimal_g[i] << out.optimal_c[i] << out.optimal_p[i]
                       << out.optimal_arrival_mass[i] << out.direct_share[i]
                       << out.direct_arrival_mass[i];
        }
        out.quantiles_csv = opt.out_dir + "/fig2_tau_quantiles.csv";
        CsvWriter qcsv(out.quantiles_csv, fingerprint(spec), opt.seed, {"k", "level", "tau"});
        for (int q = 0; q < spec.n_queue_states(); ++q) {
            if (!spec.arrivals_possible(q)) continue;
            for (int pct = 5; pct <= 95; pct += 5) {
                const double level = pct / 100.0;
                qcsv.row() << q << level << quantile_type1(table.tau_sorted(q), level);
            }
        }
    }
    return out;
}

// --- routing-study state portrait --------------------------------------------------

struct RoutingPortrait {
    std::vector<double> optimal_g;
    std::vector<double> optimal_mass, direct_mass;  // queue-marginal stationary laws
    double optimal_value = 0.0, direct_value = 0.0;
    std::string csv_path;
};

// Stationary occupancy of the two queues under the optimal and the direct
// targeting rules.
inline RoutingPortrait run_routing_portrait(const ExperimentOptions& opt, bool write_csv = true) {
    const SystemSpec spec = spec_parallel_example();
    OracleTable table(spec, "avg_outcome", opt.n_mc_table, opt.seed);
    OptimalOptions oo;
    oo.n_mc = opt.n_mc_table;
    oo.seed = opt.seed;
    const OptimalResult best = approx_optimal(table, oo);
    const OracleValue opt_val = table.value_of(best.g);
    const OracleValue dir_val = table.value_of_direct();

    RoutingPortrait out;
    out.optimal_g = best.g;
    out.optimal_mass = opt_val.queue_marginal;
    out.direct_mass = dir_val.queue_marginal;
    out.optimal_value = opt_val.value;
    out.direct_value = dir_val.value;

    if (write_csv) {
        out.csv_path = opt.out_dir + "/fig4.csv";
        CsvWriter csv(out.csv_path, fingerprint(spec), opt.seed, {"policy", "k0", "k1", "mass"});
        for (int q = 0; q < spec.n_queue_states(); ++q) {
            auto [k0, k1] = spec.state_of(q);
            csv.row() << "optimal" << k0 << k1 << out.optimal_mass[static_cast<size_t>(q)];
        }
        for (int q = 0; q < spec.n_queue_states(); ++q) {
            auto [k0, k1] = spec.state_of(q);
            csv.row() << "direct" << k0 << k1 << out.direct_mass[static_cast<size_t>(q)];
        }
    }
    return out;
}

// --- routing policy-vs-sample-size study --------------------------------------------

struct RoutingRep {
    int n = 0;
    int rep = 0;
    double algorithm = 0.0;
    double direct = 0.0;
    double direct_min_fast_share = 0.0;  // min treated share over non-forced states
};

struct RoutingStudy {
    std::vector<RoutingRep> rows;
    std::vector<int> sample_sizes;
    std::vector<double> median_algorithm;
    std::vector<double> median_direct;
    double optimal_value = 0.0;
    std::vector<double> optimal_g;
    std::string csv_path, routing_csv_path;
};

// Learned-routing average outcomes against the logged sample size n; the
// logged window length is n over the arrival rate so roughly n users arrive.
inline RoutingStudy run_routing_study(const ExperimentOptions& opt, bool write_csv = true) {
    const SystemSpec spec = spec_parallel_example();
    const std::uint64_t eval_seed = mix_seed(opt.seed, 0xe7a1ULL);

    OracleTable table(spec, "avg_outcome", opt.n_mc_table, opt.seed);
    OptimalOptions oo;
    oo.n_mc = opt.n_mc_table;
    oo.seed = opt.seed;
    const OptimalResult best = approx_optimal(table, oo);

    RoutingStudy study;
    study.sample_sizes = opt.sample_sizes_n;
    study.optimal_value = best.value;
    study.optimal_g = best.g;

    const int n_cells = static_cast<int>(opt.sample_sizes_n.size()) * opt.reps;
    study.rows.resize(static_cast<size_t>(n_cells));
    parallel_for(n_cells, opt.jobs, [&](int cell) {
        const int ni = cell / opt.reps;
        const int rep = cell % opt.reps;
        const int n = opt.sample_sizes_n[static_cast<size_t>(ni)];
        const double T = static_cast<double>(n) / spec.arrival_rates[0];
        const std::uint64_t sim_seed =
            detail::rep_stream(opt.seed, 0xf1950002ULL, static_cast<std::uint64_t>(n),
                               static_cast<std::uint64_t>(rep));
        const Trajectory traj = simulate_trajectory(spec, logging_policy(spec),
                                                    Horizon::time(T), sim_seed);
        LearnOptions lo;
        lo.B = opt.B;
        lo.objective = "avg_outcome";
        // Routing has no natural congestion ordering, so search thresholds
        // coordinate-wise; smooth the effect fit hard (wide pooling, shallow
        // trees) because per-state samples are thin at these horizons.
        lo.mode = SearchGrid::Mode::CoordinateAscent;
        lo.cade.estimator = "honest_tree";
        lo.cade.pool_threshold = 800;
        lo.cade.tree_max_depth = 3;
        lo.cade.tree_min_leaf = 80;
        const LearnResult lr = learn_policy(spec, traj.records, lo);
        const PolicySpec direct = direct_baseline(lr.model);

        RoutingRep& row = study.rows[static_cast<size_t>(cell)];
        row.n = n;
        row.rep = rep;
        row.algorithm = true_value(spec, lr.policy, "avg_outcome", opt.n_mc_eval, eval_seed).value;
        const OracleValue dv = true_value(spec, direct, "avg_outcome", opt.n_mc_eval, eval_seed);
        row.direct = dv.value;
        double min_share = 1.0;
        for (int q = 0; q < spec.n_queue_states(); ++q) {
            auto [k0, k1] = spec.state_of(q);
            if (k0 >= spec.cap0 || k1 >= spec.cap1) continue;  // routing forced or queue full
            min_share = std::min(min_share, dv.pibar[static_cast<size_t>(q)]);
        }
        row.direct_min_fast_share = min_share;
    });

    for (size_t ni = 0; ni < opt.sample_sizes_n.size(); ++ni) {
        std::vector<double> alg, dir;
        for (const RoutingRep& row : study.rows) {
            if (row.n != opt.sample_sizes_n[ni]) continue;
            alg.push_back(row.algorithm);
            dir.push_back(row.direct);
        }
        study.median_algorithm.push_back(detail::median(alg));
        study.median_direct.push_back(detail::median(dir));
    }

    if (write_csv) {
        study.csv_path = opt.out_dir + "/fig5.csv";
        CsvWriter csv(study.csv_path, fingerprint(spec), opt.seed,
                      {"method", "n", "rep", "value"});
        for (const RoutingRep& row : study.rows) {
            csv.row() << "algorithm" << row.n << row.rep << row.algorithm;
            csv.row() << "direct" << row.n << row.rep << row.direct;
        }
        for (int n : opt.sample_sizes_n) csv.row() << "optimal" << n << -1 << study.optimal_value;

        study.routing_csv_path = opt.out_dir + "/fig5_direct_routing.csv";
        CsvWriter rcsv(study.routing_csv_path, fingerprint(spec), opt.seed,
                       {"n", "rep", "min_fast_share"});
        for (const RoutingRep& row : study.rows)
            rcsv.row() << row.n << row.rep << row.direct_min_fast_share;
    }
    return study;
}

// --- dispatch ------------------------------------------------------------------------

struct ExperimentOutput {
    std::vector<std::string> files;
    std::vector<std::string> notes;
};

inline ExperimentOutput run_experiment(const std::string& name, const ExperimentOptions& opt) {
    ExperimentOutput out;
    if (name == "fig2") {
        const PolicyPortrait p = run_policy_portrait(opt);
        out.files = {p.states_csv, p.quantiles_csv};
        out.notes.push_back("single-queue targeting portrait written");
    } else if (name == "fig3") {
        const HorizonStudy s = run_horizon_study(opt);
        out.files = {s.csv_path};
        for (size_t i = 0; i < s.horizons.size(); ++i)
            out.notes.push_back("T=" + std::to_string(s.horizons[i]) +
                                ": median algorithm=" + std::to_string(s.median_algorithm[i]) +
                                " direct=" + std::to_string(s.median_direct[i]) +
                                " optimal=" + std::to_string(s.optimal_value));
    } else if (name == "fig4") {
        const RoutingPortrait p = run_routing_portrait(opt);
        out.files = {p.csv_path};
        out.notes.push_back("optimal value=" + std::to_string(p.optimal_value) +
                            " direct value=" + std::to_string(p.direct_value));
    } else if (name == "fig5") {
        const RoutingStudy s = run_routing_study(opt);
        out.files = {s.csv_path, s.routing_csv_path};
        for (size_t i = 0; i < s.sample_sizes.size(); ++i)
            out.notes.push_back("n=" + std::to_string(s.sample_sizes[i]) +
                                ": median algorithm=" + std::to_string(s.median_algorithm[i]) +
                                " direct=" + std::to_string(s.median_direct[i]) +
                                " optimal=" + std::to_string(s.optimal_value));
    } else {
        throw std::invalid_argument("unknown experiment '" + name +
                                    "' (expected fig2, fig3, fig4, or fig5)");
    }
    return out;
}

}  // namespace statewise
