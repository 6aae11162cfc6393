// Standalone randomized property checks, deliberately free of the unit-test
// framework so they can run as one self-contained binary: prints one line per
// suite and exits nonzero on the first broken property.
#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "statewise/cade.hpp"
#include "statewise/cade_model.hpp"
#include "statewise/chain.hpp"
#include "statewise/model.hpp"
#include "statewise/policy.hpp"
#include "statewise/sim.hpp"

using namespace statewise;

namespace {

int g_failures = 0;

void report(const std::string& name, long cases, const std::string& error) {
    if (error.empty()) {
        std::cout << "[property] " << name << ": ok (" << cases << " cases)\n";
    } else {
        ++g_failures;
        std::cout << "[property] " << name << ": FAILED - " << error << "\n";
    }
}

// The quantile rule restated independently: the smallest order statistic
// whose (1-based) rank covers the requested level.
double naive_type1_quantile(const std::vector<double>& sorted, double level) {
    const long n = static_cast<long>(sorted.size());
    for (long i = 1; i <= n; ++i)
        if (static_cast<double>(i) >= level * static_cast<double>(n) - 1e-9)
            return sorted[static_cast<size_t>(i - 1)];
    return sorted.back();
}

std::string check_quantiles() {
    std::mt19937_64 gen(2024001);
    std::uniform_int_distribution<int> n_dist(1, 200);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 3.0);
    for (int t = 0; t < 500; ++t) {
        const int n = n_dist(gen);
        std::vector<double> v(static_cast<size_t>(n));
        const bool with_ties = t % 3 == 0;
        for (double& x : v)
            x = with_ties ? std::floor(normal(gen)) : normal(gen);
        std::sort(v.begin(), v.end());
        // Random interior levels plus exact rank boundaries.
        std::vector<double> levels = {u(gen), 1.0};
        levels.push_back(static_cast<double>(1 + t % n) / n);
        for (double level : levels) {
            if (level <= 0.0) continue;
            const double got = quantile_type1(v, level);
            const double want = naive_type1_quantile(v, level);
            if (got != want) {
                std::ostringstream os;
                os << "n=" << n << " level=" << level << " got=" << got << " want=" << want;
                return os.str();
            }
        }
    }
    return "";
}

std::string check_kernel_rows() {
    std::mt19937_64 gen(2024002);
    std::uniform_real_distribution<double> rate(0.1, 5.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> cap(1, 8);
    std::uniform_int_distribution<int> cap_small(1, 3);
    for (int t = 0; t < 40; ++t) {
        SystemSpec spec;
        if (t % 2 == 0) {
            spec = spec_mm1_admission(1.0, rate(gen), cap(gen));
            for (size_t k = 0; k + 1 < spec.arrival_rates.size(); ++k)
                spec.arrival_rates[k] = rate(gen);
        } else {
            spec = spec_parallel_example();
            spec.arrival_rates = {rate(gen)};
            spec.mu0 = rate(gen);
            spec.mu1 = rate(gen);
            spec.cap0 = cap(gen);
            spec.cap1 = cap_small(gen);
        }
        std::vector<double> pibar(static_cast<size_t>(spec.n_queue_states()));
        for (double& p : pibar) p = u(gen);
        const ChainModel m = build_kernel(spec, pibar);
        for (int i = 0; i < m.kernel.rows(); ++i) {
            const double sum = m.kernel.row(i).sum();
            if (std::abs(sum - 1.0) > 1e-12 || m.kernel.row(i).minCoeff() < -1e-15) {
                std::ostringstream os;
                os << "trial " << t << " row " << i << " sums to " << sum;
                return os.str();
            }
        }
    }
    return "";
}

std::string check_policy_prob_bounds() {
    std::mt19937_64 gen(2024003);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    long cases = 0;
    for (const SystemSpec& spec : {spec_mnm1_example(), spec_parallel_example()}) {
        const int nq = spec.n_queue_states();
        std::vector<PolicySpec> policies = {constant_policy(u(gen)), logging_policy(spec)};
        for (int rep = 0; rep < 3; ++rep) {
            PolicySpec th;
            th.kind = PolicyKind::Threshold;
            th.model = std::make_shared<OracleCadeModel>(spec);
            th.c.resize(static_cast<size_t>(nq));
            th.p.resize(static_cast<size_t>(nq));
            for (int q = 0; q < nq; ++q) {
                th.c[static_cast<size_t>(q)] = 3.0 * normal(gen);
                th.p[static_cast<size_t>(q)] = u(gen);
            }
            policies.push_back(th);
        }
        policies.push_back(direct_policy(std::make_shared<OracleCadeModel>(spec)));
        for (const PolicySpec& pol : policies) {
            for (int q = 0; q < nq; ++q) {
                for (int i = 0; i < 40; ++i) {
                    std::vector<double> x(static_cast<size_t>(spec.covariate_dim));
                    for (double& v : x) v = normal(gen);
                    const double p = policy_prob(pol, spec, x, q);
                    ++cases;
                    if (!(p >= 0.0 && p <= 1.0)) {
                        std::ostringstream os;
                        os << "policy prob " << p << " at state " << q;
                        return os.str();
                    }
                }
            }
        }
    }
    std::cout << "[property] policy-prob-bounds evaluated " << cases << " probabilities\n";
    return "";
}

std::string check_threshold_monotonicity() {
    std::mt19937_64 gen(2024004);
    std::normal_distribution<double> normal(0.0, 2.0);
    std::uniform_int_distribution<int> n_dist(5, 400);
    for (int t = 0; t < 50; ++t) {
        const int n = n_dist(gen);
        std::vector<double> v(static_cast<size_t>(n));
        for (double& x : v) x = t % 4 == 0 ? std::round(normal(gen)) : normal(gen);
        std::sort(v.begin(), v.end());
        double prev_c = std::numeric_limits<double>::infinity();
        double prev_share = 0.0;
        for (int b = 1; b < 20; ++b) {
            const double g = static_cast<double>(b) / 20.0;
            const ThresholdAt th = threshold_from_sorted(v, g);
            // Realized treated share over the defining sample.
            long above = 0, at = 0;
            for (double x : v) {
                above += x > th.c;
                at += x == th.c;
            }
            const double share =
                (static_cast<double>(above) + th.p * static_cast<double>(at)) / n;
            if (std::abs(share - g) > 1e-12)
                return "share " + std::to_string(share) + " != g " + std::to_string(g);
            if (th.c > prev_c + 1e-15) return "cut increased with the treated share";
            if (share + 1e-12 < prev_share) return "share decreased along the sweep";
            prev_c = th.c;
            prev_share = share;
        }
    }
    return "";
}

std::string check_seed_determinism() {
    for (const SystemSpec& spec : {spec_mnm1_example(), spec_parallel_example()}) {
        const PolicySpec pol = logging_policy(spec);
        const Trajectory a = simulate_trajectory(spec, pol, Horizon::events(500), 4242);
        const Trajectory b = simulate_trajectory(spec, pol, Horizon::events(500), 4242);
        const Trajectory c = simulate_trajectory(spec, pol, Horizon::events(500), 4243);
        if (a.records.size() != b.records.size()) return "same seed, different lengths";
        for (size_t i = 0; i < a.records.size(); ++i) {
            const EventRecord &ra = a.records[i], &rb = b.records[i];
            const bool same = ra.t == rb.t && ra.dt == rb.dt && ra.a == rb.a &&
                              ra.k0 == rb.k0 && ra.k1 == rb.k1 && ra.w == rb.w &&
                              ra.x == rb.x &&
                              ((is_missing(ra.r) && is_missing(rb.r)) || ra.r == rb.r);
            if (!same) return "same seed diverged at event " + std::to_string(i);
        }
        bool differs = false;
        for (size_t i = 0; i < std::min(a.records.size(), c.records.size()) && !differs; ++i)
            differs = a.records[i].t != c.records[i].t;
        if (!differs) return "different seeds produced identical clocks";
    }
    return "";
}

}  // namespace

int main() {
    report("quantile-vs-sort", 500, check_quantiles());
    report("kernel-row-sums", 40, check_kernel_rows());
    report("policy-prob-bounds", 2, check_policy_prob_bounds());
    report("threshold-monotonicity", 50, check_threshold_monotonicity());
    report("seed-determinism", 2, check_seed_determinism());
    if (g_failures > 0) {
        std::cout << g_failures << " property suite(s) failed\n";
        return 1;
    }
    std::cout << "all property suites passed\n";
    return 0;
}
