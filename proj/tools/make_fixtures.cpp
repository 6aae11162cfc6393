// Regenerates the versioned oracle fixtures under tests/fixtures/. Run by
// hand when the built-in system definitions change; the test suites read the
// committed CSVs and never invoke this tool.
//
//   make_fixtures [OUT_DIR]   (default: tests/fixtures)
//
// Everything here is pinned: Monte Carlo sizes, seeds, and the optimizer
// budget are fixed below so reruns reproduce the files bit-for-bit. The
// treatment-effect Monte Carlo uses the standard-library RNG directly and
// spells out the closed forms locally, so those columns do not depend on the
// library code they are later checked against.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "statewise/csv.hpp"
#include "statewise/model.hpp"
#include "statewise/oracle.hpp"
#include "statewise/policy.hpp"

namespace {

using namespace statewise;

constexpr std::uint64_t kSeed = 20240816ULL;
constexpr int kTableDraws = 40000;

// Euler-Mascheroni, enough digits for double.
constexpr double kGamma = 0.57721566490153286;

// psi(n) for integer n >= 1, written out rather than reused from the library.
double psi_int(int n) {
    double h = 0.0;
    for (int j = 1; j < n; ++j) h += 1.0 / j;
    return -kGamma + h;
}

struct TauPoint {
    std::string outcome;  // "tolerant" (-log sojourn) or "sensitive" (-3 sojourn^2)
    int k0 = 0;
    int k1 = 0;
    long draws = 0;
};

// Closed-form routing effect of fast (queue 1) over main (queue 0) service,
// sojourn_j ~ Erlang(k_j + 1, mu_j).
double tau_closed(const SystemSpec& spec, const TauPoint& pt) {
    if (pt.outcome == "tolerant")
        return psi_int(pt.k0 + 1) - psi_int(pt.k1 + 1) + std::log(spec.mu1 / spec.mu0);
    const auto second_moment = [](int ahead, double mu) {
        return (ahead + 1.0) * (ahead + 2.0) / (mu * mu);
    };
    return 3.0 * (second_moment(pt.k0, spec.mu0) - second_moment(pt.k1, spec.mu1));
}

// Monte Carlo estimate of the same contrast from raw exponential sums.
std::pair<double, double> tau_mc(const SystemSpec& spec, const TauPoint& pt,
                                 std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::exponential_distribution<double> exp0(spec.mu0), exp1(spec.mu1);
    const auto sojourn = [&](int ahead, auto& dist) {
        double s = 0.0;
        for (int j = 0; j <= ahead; ++j) s += dist(gen);
        return s;
    };
    const auto y = [&](double s) {
        return pt.outcome == "tolerant" ? -std::log(s) : -3.0 * s * s;
    };
    double sum = 0.0, sumsq = 0.0;
    for (long i = 0; i < pt.draws; ++i) {
        const double d = y(sojourn(pt.k1, exp1)) - y(sojourn(pt.k0, exp0));
        sum += d;
        sumsq += d * d;
    }
    const double mean = sum / pt.draws;
    const double var = (sumsq - pt.draws * mean * mean) / (pt.draws - 1);
    return {mean, std::sqrt(var / pt.draws)};
}

void write_value_fixture(const std::string& path, const SystemSpec& spec,
                         const std::string& objective) {
    OracleTable table(spec, objective, kTableDraws, kSeed);
    OptimalOptions oo;
    oo.n_mc = kTableDraws;
    oo.seed = kSeed;
    const OptimalResult best = approx_optimal(table, oo);

    const double logging = true_value(spec, logging_policy(spec), objective,
                                      kTableDraws, kSeed).value;
    const double direct = best.direct_value;
    const double margin_pct = 100.0 * (best.value - direct) / std::abs(direct);

    CsvWriter csv(path, fingerprint(spec), kSeed, {"name", "value"});
    csv.row() << "objective" << (objective == "reward_rate" ? 1.0 : 0.0);
    csv.row() << "n_mc" << static_cast<double>(kTableDraws);
    csv.row() << "logging" << logging;
    csv.row() << "direct_true_tau" << direct;
    csv.row() << "optimal" << best.value;
    csv.row() << "optimal_margin_pct" << margin_pct;
    if (!spec.single_queue())
        csv.row() << "always_fast"
                  << true_value(spec, constant_policy(1.0), objective, kTableDraws, kSeed).value;
    std::cout << path << ": logging=" << logging << " direct=" << direct
              << " optimal=" << best.value << " margin%=" << margin_pct << "\n";
}

void write_tau_fixture(const std::string& path, const SystemSpec& spec) {
    const std::vector<TauPoint> points = {
        {"tolerant", 0, 0, 1000000},  {"tolerant", 0, 1, 1000000},
        {"tolerant", 0, 2, 1000000},  {"tolerant", 1, 0, 1000000},
        {"sensitive", 0, 0, 4000000}, {"sensitive", 0, 2, 4000000},
    };
    CsvWriter csv(path, fingerprint(spec), kSeed,
                  {"outcome", "k0", "k1", "closed_form", "mc_mean", "mc_se", "draws"});
    std::uint64_t stream = kSeed;
    for (const TauPoint& pt : points) {
        ++stream;
        const double closed = tau_closed(spec, pt);
        const auto [mean, se] = tau_mc(spec, pt, stream);
        csv.row() << pt.outcome << pt.k0 << pt.k1 << closed << mean << se
                  << static_cast<double>(pt.draws);
        std::cout << path << ": " << pt.outcome << "(" << pt.k0 << "," << pt.k1
                  << ") closed=" << closed << " mc=" << mean << " se=" << se << "\n";
        if (std::abs(mean - closed) > 5.0 * se) {
            std::cerr << "fixture disagreement beyond 5 standard errors\n";
            std::exit(1);
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    const std::string out_dir = argc > 1 ? argv[1] : "tests/fixtures";
    std::filesystem::create_directories(out_dir);
    write_value_fixture(out_dir + "/mnm1_oracle.csv", spec_mnm1_example(), "reward_rate");
    write_value_fixture(out_dir + "/parallel_oracle.csv", spec_parallel_example(),
                        "avg_outcome");
    write_tau_fixture(out_dir + "/parallel_tau_mc.csv", spec_parallel_example());
    return 0;
}
