// Exact evaluation machinery: true effects, policy values, the threshold
// table, the approximate optimizer, and the coupled congestion diagnostic.
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "statewise/model.hpp"
#include "statewise/oracle.hpp"
#include "statewise/outcome.hpp"
#include "statewise/policy.hpp"

#include "helpers.hpp"

using namespace statewise;
using Catch::Approx;

namespace {

std::vector<double> probe(double x0) {
    std::vector<double> x(10, 0.0);
    x[0] = x0;
    return x;
}

double fixture_num(const testutil::CsvFile& f, const std::string& name) {
    return testutil::fixture_value(f, name);
}

}  // namespace

TEST_CASE("true effect matches hand values on the admission system") {
    const SystemSpec spec = spec_mnm1_example();
    CHECK(true_cade(spec, probe(1.0), 0) == Approx(7.0).margin(1e-12));
    CHECK(true_cade(spec, probe(1.0), 3) == Approx(4.0).margin(1e-12));
    const std::vector<double> zero(10, 0.0);
    for (int k : {0, 3, 7, 12}) CHECK(true_cade(spec, zero, k) == Approx(0.0).margin(1e-12));
}

TEST_CASE("routing effects match the frozen closed forms and their Monte Carlo check") {
    const SystemSpec spec = spec_parallel_example();
    const testutil::CsvFile f =
        testutil::read_csv(std::string(STATEWISE_FIXTURE_DIR) + "/parallel_tau_mc.csv");
    REQUIRE(f.rows.size() == 6);
    bool saw_origin = false;
    for (const auto& row : f.rows) {
        const std::string& outcome = row[0];
        const int k0 = std::stoi(row[1]);
        const int k1 = std::stoi(row[2]);
        const double closed = std::stod(row[3]);
        const double mc = std::stod(row[4]);
        const double se = std::stod(row[5]);
        const double x0 = outcome == "tolerant" ? 0.0 : 2.0;  // quantile split on x0
        INFO(outcome << " at (" << k0 << "," << k1 << ")");
        CHECK(true_cade(spec, probe(x0), k0, k1) == Approx(closed).margin(1e-12));
        CHECK(std::abs(mc - closed) <= 4.0 * se);
        if (outcome == "tolerant" && k0 == 0 && k1 == 0) {
            saw_origin = true;
            CHECK(closed == Approx(std::log(2.0)).margin(1e-12));
            CHECK(se <= 0.01);
        }
    }
    REQUIRE(saw_origin);
}

TEST_CASE("never treating is worth the positive-part mean") {
    const SystemSpec spec = spec_mm1_admission(0.5, 1.0, 5);
    const OracleValue v = true_value(spec, constant_policy(0.0), "avg_outcome", 40000, 20240816);
    CHECK(v.value == Approx(kMeanPositivePart).margin(0.01));
    for (double share : v.pibar) CHECK(share == 0.0);
    // Nobody ever joins, so the queue stays empty.
    CHECK(v.queue_marginal[0] == Approx(1.0).margin(1e-12));
    CHECK_THROWS_AS(true_value(spec, constant_policy(0.0), "avg_outcome", 50), std::invalid_argument);
}

TEST_CASE("covariates outside the outcome model have no influence") {
    const SystemSpec spec = spec_mnm1_example();
    const OracleCadeModel model(spec);
    std::vector<double> x = probe(1.3);
    x[1] = -0.4;
    x[2] = 0.9;
    std::vector<double> y = x;
    for (size_t j = 5; j < 10; ++j) y[j] = 100.0 + static_cast<double>(j);
    for (int q : {0, 2, 9}) {
        CHECK(model.tau(x, q) == model.tau(y, q));
        CHECK(model.arm_mean(0, x, q) == model.arm_mean(0, y, q));
        CHECK(model.arm_mean(1, x, q) == model.arm_mean(1, y, q));
    }
}

TEST_CASE("the threshold table prices its own policies consistently") {
    const SystemSpec spec = spec_mnm1_example();
    const OracleTable table(spec, "reward_rate", 4000, 9001);
    const int nq = spec.n_queue_states();

    const std::vector<double>& t0 = table.tau_sorted(0);
    REQUIRE(t0.size() == 4000);
    CHECK(std::is_sorted(t0.begin(), t0.end()));

    const std::vector<double> g(static_cast<size_t>(nq), 0.4);
    const OracleValue via_table = table.value_of(g);
    const OracleValue via_policy = true_value(spec, table.policy_for(g), "reward_rate", 4000, 9001);
    CHECK(via_table.value == Approx(via_policy.value).margin(1e-8));
    for (int q = 0; q < nq - 1; ++q)  // the full state admits nobody
        CHECK(via_table.pibar[static_cast<size_t>(q)] ==
              Approx(via_policy.pibar[static_cast<size_t>(q)]).margin(1e-12));

    CHECK_THROWS_AS(table.value_of({0.4, 0.4}), std::invalid_argument);
}

TEST_CASE("frozen admission oracle values reproduce exactly") {
    const SystemSpec spec = spec_mnm1_example();
    const testutil::CsvFile f =
        testutil::read_csv(std::string(STATEWISE_FIXTURE_DIR) + "/mnm1_oracle.csv");
    REQUIRE(fixture_num(f, "objective") == 1.0);  // reward rate
    const int n_mc = static_cast<int>(fixture_num(f, "n_mc"));
    const std::uint64_t seed = 20240816ULL;

    const double logging =
        true_value(spec, logging_policy(spec), "reward_rate", n_mc, seed).value;
    CHECK(logging == Approx(fixture_num(f, "logging")).epsilon(1e-9));

    const OracleTable table(spec, "reward_rate", n_mc, seed);
    OptimalOptions oo;
    oo.n_mc = n_mc;
    oo.seed = seed;
    const OptimalResult best = approx_optimal(table, oo);
    CHECK(best.direct_value == Approx(fixture_num(f, "direct_true_tau")).epsilon(1e-9));
    CHECK(best.value == Approx(fixture_num(f, "optimal")).epsilon(1e-9));

    // Internal consistency of the frozen numbers themselves.
    const double margin =
        100.0 * (fixture_num(f, "optimal") - fixture_num(f, "direct_true_tau")) /
        std::abs(fixture_num(f, "direct_true_tau"));
    CHECK(margin == Approx(fixture_num(f, "optimal_margin_pct")).margin(1e-6));
    CHECK(best.value > best.direct_value);
    CHECK(fixture_num(f, "direct_true_tau") > logging);
    CHECK(best.evaluations > 0);
    CHECK(best.start_values.size() >= 5);
}

TEST_CASE("frozen routing oracle values are internally consistent") {
    const testutil::CsvFile f =
        testutil::read_csv(std::string(STATEWISE_FIXTURE_DIR) + "/parallel_oracle.csv");
    REQUIRE(fixture_num(f, "objective") == 0.0);  // average outcome
    const double logging = fixture_num(f, "logging");
    const double direct = fixture_num(f, "direct_true_tau");
    const double optimal = fixture_num(f, "optimal");
    const double always_fast = fixture_num(f, "always_fast");
    CHECK(optimal > direct);
    CHECK(direct > always_fast);   // blind fast-routing loses to the direct rule
    CHECK(always_fast > logging);  // and even that beats coin-flip routing
    const double margin = 100.0 * (optimal - direct) / std::abs(direct);
    CHECK(margin == Approx(fixture_num(f, "optimal_margin_pct")).margin(1e-6));
    CHECK(margin >= 5.0);
}

TEST_CASE("without a congestion channel the search recovers the direct rule") {
    SystemSpec spec = spec_mm1_admission(1.0, 1.0, 3);
    spec.treatment_affects_state = false;
    const OracleTable table(spec, "avg_outcome", 4000, 11);
    OptimalOptions oo;
    oo.monotone = 0;  // per-state shares are free when treatment cannot congest
    const OptimalResult res = approx_optimal(table, oo);
    REQUIRE(res.direct_value > 0.0);
    CHECK(std::abs(res.value - res.direct_value) <= 1e-3 * res.direct_value);
    CHECK(res.value <= res.direct_value + 1e-12);  // direct is the ceiling here
}

TEST_CASE("no state effect means exactly zero congestion adjustment") {
    SystemSpec spec = spec_mm1_admission(1.0, 1.0, 3);
    spec.treatment_affects_state = false;
    CaieOptions copt;
    copt.reps = 300;
    const CaieResult res = caie_diagnostic(spec, constant_policy(0.5), 1, copt);
    // The two forced arms start in the same state, so every coupled
    // difference vanishes identically.
    CHECK(res.c == 0.0);
    CHECK(res.se == 0.0);
    CHECK(res.recouple_rate == 1.0);
    CHECK(res.warnings.empty());
}

TEST_CASE("the congestion adjustment ignores the focal covariate") {
    const SystemSpec spec = spec_mnm1_example();
    const PolicySpec pol = logging_policy(spec);
    CaieOptions a;
    a.reps = 400;
    a.seed = 33;
    CaieOptions b = a;
    a.pinned_x.assign(10, 0.0);
    b.pinned_x.assign(10, 2.0);
    const CaieResult ra = caie_diagnostic(spec, pol, 2, a);
    const CaieResult rb = caie_diagnostic(spec, pol, 2, b);
    // Same seed, different focal covariates: identical coupled chains.
    CHECK(ra.c == rb.c);
    CHECK(ra.se == rb.se);

    // Stratifying an unpinned run by the focal draw moves nothing either.
    CaieOptions c;
    c.reps = 1200;
    c.seed = 34;
    const CaieResult rc = caie_diagnostic(spec, pol, 2, c);
    REQUIRE(rc.per_rep.size() == rc.focal_x0.size());
    const double cut = testutil::median_of(rc.focal_x0);
    std::vector<double> lo, hi;
    for (size_t i = 0; i < rc.per_rep.size(); ++i)
        (rc.focal_x0[i] <= cut ? lo : hi).push_back(rc.per_rep[i]);
    REQUIRE(lo.size() > 100);
    REQUIRE(hi.size() > 100);
    const double gap = std::abs(testutil::mean_of(lo) - testutil::mean_of(hi));
    const double se = std::hypot(testutil::sem_of(lo), testutil::sem_of(hi));
    CHECK(gap <= 3.0 * se);
}

TEST_CASE("a tiny truncation budget misses recouplings and warns") {
    const SystemSpec spec = spec_mnm1_example();
    CaieOptions copt;
    copt.reps = 200;
    copt.truncation = 3;
    const CaieResult res = caie_diagnostic(spec, logging_policy(spec), 2, copt);
    CHECK(res.recouple_rate < 0.99);
    REQUIRE(!res.warnings.empty());
    CHECK(res.warnings.front().find("recoupling") != std::string::npos);
}

TEST_CASE("the diagnostic rejects states that cannot see arrivals") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 2);
    CHECK_THROWS_AS(caie_diagnostic(spec, constant_policy(0.5), 2), std::invalid_argument);
    CHECK_THROWS_AS(caie_diagnostic(spec, constant_policy(0.5), -1), std::invalid_argument);
}

TEST_CASE("effect plus adjustment signs the optimal in-or-out decision") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 3);
    const OracleTable table(spec, "avg_outcome", 20000, 51);
    OptimalOptions oo;
    oo.n_mc = 20000;
    oo.seed = 51;
    const OptimalResult best = approx_optimal(table, oo);
    const PolicySpec pol = table.policy_for(best.g);

    Rng rng(909);
    int tested = 0;
    for (int q = 0; q < 3; ++q) {
        CaieOptions copt;
        copt.reps = 2000;
        copt.seed = 52;
        const CaieResult adj = caie_diagnostic(spec, pol, q, copt);
        REQUIRE(adj.recouple_rate >= 0.99);
        for (int i = 0; i < 400; ++i) {
            std::vector<double> x(10);
            for (double& v : x) v = rng.normal();
            const double h = oracle_h(spec, x, q, adj.c);
            if (std::abs(h) <= 3.0 * adj.se) continue;  // too close to call
            const double treat = policy_prob(pol, spec, x, q);
            if (treat != 0.0 && treat != 1.0) continue;  // tie atom
            ++tested;
            INFO("state " << q << ", h = " << h << ", se = " << adj.se);
            REQUIRE((h > 0.0) == (treat == 1.0));
        }
    }
    CHECK(tested > 600);
}
