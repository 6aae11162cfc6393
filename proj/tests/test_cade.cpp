// Effect estimation and thresholding: regeneration splitting, type-1
// quantiles, tie-randomized thresholds, reference-share construction, and the
// nearest-neighbor / honest-tree effect models.
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "statewise/cade.hpp"
#include "statewise/cade_model.hpp"
#include "statewise/model.hpp"
#include "statewise/oracle.hpp"
#include "statewise/policy.hpp"
#include "statewise/sim.hpp"

#include "helpers.hpp"

using namespace statewise;
using Catch::Approx;

namespace {

// Bare-bones records with the given queue lengths; everything else untouched.
std::vector<EventRecord> records_with_states(const std::vector<int>& k0s) {
    std::vector<EventRecord> recs(k0s.size());
    for (size_t i = 0; i < k0s.size(); ++i) {
        recs[i].i = static_cast<std::int64_t>(i);
        recs[i].k0 = k0s[i];
    }
    return recs;
}

// Synthetic single-state arrival sample with outcome r = f(x, w).
template <class Fn>
std::vector<EventRecord> synthetic_arrivals(int n, int dim, std::uint64_t seed, Fn&& f) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::vector<EventRecord> recs(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        EventRecord& e = recs[static_cast<size_t>(i)];
        e.i = i;
        e.a = EventType::Arrival;
        e.k0 = 0;
        e.x.resize(static_cast<size_t>(dim));
        for (double& xi : e.x) xi = normal(gen);
        e.w = coin(gen) ? 1 : 0;
        e.r = f(e.x, e.w);
    }
    return recs;
}

std::vector<int> all_indices(size_t n) {
    std::vector<int> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    return idx;
}

}  // namespace

TEST_CASE("regeneration split alternates interior chunks from a fixed anchor") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 2);
    // Anchor state 0 is visited at indices 1, 5, and 9.
    const std::vector<EventRecord> recs =
        records_with_states({2, 0, 1, 1, 2, 0, 1, 2, 1, 0, 1, 2});
    SplitOptions opt;
    opt.anchor = 0;
    opt.min_anchor_visits = 3;
    const RegenerationSplit split = regeneration_split(spec, recs, opt);

    CHECK(split.anchor == 0);
    CHECK(split.boundaries == std::vector<int>{1, 5, 9});
    CHECK(split.n_interior_chunks == 2);
    // Leading partial, first interior chunk [1,4], trailing partial -> train;
    // second interior chunk [5,8] -> eval.
    CHECK(split.train_idx == std::vector<int>{0, 1, 2, 3, 4, 9, 10, 11});
    CHECK(split.eval_idx == std::vector<int>{5, 6, 7, 8});
}

TEST_CASE("regeneration split needs enough anchor visits") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 2);
    const std::vector<EventRecord> recs = records_with_states({0, 1, 0, 1, 1, 1});
    SplitOptions opt;
    opt.anchor = 0;
    opt.min_anchor_visits = 4;
    CHECK_THROWS_AS(regeneration_split(spec, recs, opt), std::runtime_error);
    CHECK_THROWS_AS(regeneration_split(spec, {}, SplitOptions{}), std::invalid_argument);
}

TEST_CASE("chunk lengths are exchangeable between the two halves") {
    // Kolmogorov-Smirnov on first-half vs second-half regeneration chunk
    // lengths, 50 seeded trajectories; at the 1% level two rejections are
    // already unlikely under exchangeability.
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 3);
    int rejections = 0;
    for (int seed = 0; seed < 50; ++seed) {
        const Trajectory traj = simulate_trajectory(spec, logging_policy(spec),
                                                    Horizon::events(2000), 1000 + seed);
        const RegenerationSplit split = regeneration_split(spec, traj.records);
        std::vector<double> lengths;
        for (size_t j = 0; j + 1 < split.boundaries.size(); ++j)
            lengths.push_back(static_cast<double>(split.boundaries[j + 1] - split.boundaries[j]));
        const size_t half = lengths.size() / 2;
        std::vector<double> a(lengths.begin(), lengths.begin() + half);
        std::vector<double> b(lengths.begin() + half, lengths.end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        double d = 0.0;
        for (double v : a) {
            const double fa = static_cast<double>(std::upper_bound(a.begin(), a.end(), v) - a.begin()) / a.size();
            const double fb = static_cast<double>(std::upper_bound(b.begin(), b.end(), v) - b.begin()) / b.size();
            d = std::max(d, std::abs(fa - fb));
        }
        for (double v : b) {
            const double fa = static_cast<double>(std::upper_bound(a.begin(), a.end(), v) - a.begin()) / a.size();
            const double fb = static_cast<double>(std::upper_bound(b.begin(), b.end(), v) - b.begin()) / b.size();
            d = std::max(d, std::abs(fa - fb));
        }
        const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
        const double critical = 1.628 * std::sqrt((n + m) / (n * m));  // alpha = 0.01
        if (d > critical) ++rejections;
    }
    CHECK(rejections <= 2);
}

TEST_CASE("type-1 quantiles") {
    const std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
    CHECK(quantile_type1(v, 0.5) == 2.0);
    CHECK(quantile_type1(v, 0.999) == 4.0);
    CHECK(quantile_type1(v, 0.0) == 1.0);

    std::mt19937_64 gen(5);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> draws(10000);
    for (double& d : draws) d = normal(gen);
    std::sort(draws.begin(), draws.end());
    CHECK(quantile_type1(draws, 0.975) == Approx(1.96).margin(0.05));

    CHECK_THROWS_AS(quantile_type1({}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(quantile_type1(v, 1.5), std::invalid_argument);
}

TEST_CASE("thresholds treat the requested upper share") {
    // All predictions equal: the tie coin carries the whole share.
    const ThresholdAt tied = threshold_from_sorted({2.0, 2.0, 2.0, 2.0}, 0.3);
    CHECK(tied.c == 2.0);
    CHECK(tied.p == Approx(0.3));

    // Distinct values, g = 0.5: treat strictly above 2, no tie mass needed.
    const ThresholdAt half = threshold_from_sorted({1.0, 2.0, 3.0, 4.0}, 0.5);
    CHECK(half.c == 2.0);
    CHECK(half.p == 0.0);

    // Continuous sample: the induced share equals g exactly.
    std::mt19937_64 gen(7);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> draws(10000);
    for (double& d : draws) d = normal(gen);
    std::sort(draws.begin(), draws.end());
    const ThresholdAt top = threshold_from_sorted(draws, 0.25);
    CHECK(top.c == Approx(kNormalQ75).margin(0.05));
    const double above =
        static_cast<double>(draws.end() - std::upper_bound(draws.begin(), draws.end(), top.c));
    CHECK(above / 10000.0 + top.p * (1.0 / 10000.0) == Approx(0.25).margin(1e-12));

    CHECK_THROWS_AS(threshold_from_sorted(draws, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(threshold_from_sorted(draws, 1.0), std::invalid_argument);
}

TEST_CASE("threshold policies hit their treated share on the reference sample") {
    const SystemSpec spec = spec_mnm1_example();
    auto model = std::make_shared<OracleCadeModel>(spec);
    const auto xs = detail::gaussian_draws(5000, spec.covariate_dim, 99);
    const StatePredictions sp = predict_reference(spec, *model, xs);

    const std::vector<double> g(static_cast<size_t>(spec.n_queue_states()), 0.4);
    const PolicySpec ps = threshold_policy_from_predictions(spec, model, sp, g);
    const std::vector<double> share = treated_share_from_predictions(spec, ps, sp);
    for (int q = 0; q < spec.n_queue_states(); ++q) {
        if (!spec.arrivals_possible(q)) continue;
        REQUIRE(share[static_cast<size_t>(q)] == Approx(0.4).margin(1e-12));
    }
}

TEST_CASE("states without reference predictions fall back to never-treat") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 2);
    auto model = std::make_shared<OracleCadeModel>(spec);
    StatePredictions sp;
    sp.sorted.resize(static_cast<size_t>(spec.n_queue_states()));
    sp.sorted[0] = {-1.0, 0.5, 2.0};  // state 1 stays empty
    const std::vector<double> g(static_cast<size_t>(spec.n_queue_states()), 0.5);
    const PolicySpec ps = threshold_policy_from_predictions(spec, model, sp, g);
    CHECK(ps.c[1] == std::numeric_limits<double>::infinity());
    CHECK(ps.p[1] == 0.0);
    CHECK(std::isfinite(ps.c[0]));
}

TEST_CASE("nearest-neighbor fit recovers a noiseless linear effect") {
    // Noiseless Y = W * x, with the covariate space densely covered: one
    // dimension, uniform draws. The neighbor average must then track the
    // identity everywhere on the interval, including its edges.
    SystemSpec spec = spec_mm1_admission(1.0, 1.0, 1);
    spec.covariate_dim = 1;
    std::mt19937_64 gen(42);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::vector<EventRecord> recs(20000);
    for (size_t i = 0; i < recs.size(); ++i) {
        EventRecord& e = recs[i];
        e.i = static_cast<std::int64_t>(i);
        e.a = EventType::Arrival;
        e.k0 = 0;
        e.x.assign(1, unif(gen));
        e.w = coin(gen) ? 1 : 0;
        e.r = e.w * e.x[0];
    }
    const CadeModelPtr model = fit_cade(spec, recs, all_indices(recs.size()));

    std::mt19937_64 g2(43);
    double max_err = 0.0;
    for (int i = 0; i < 200; ++i) {
        const double x0 = unif(g2);
        max_err = std::max(max_err, std::abs(model->tau({x0}, 0) - x0));
    }
    for (double x0 : {-1.0, 1.0})
        max_err = std::max(max_err, std::abs(model->tau({x0}, 0) - x0));
    CHECK(max_err <= 0.1);
}

TEST_CASE("constant outcomes give an identically zero effect") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 1);
    const auto recs =
        synthetic_arrivals(400, 10, 3, [](const std::vector<double>&, int) { return 4.5; });
    for (const char* estimator : {"knn", "honest_tree"}) {
        CadeOptions opt;
        opt.estimator = estimator;
        const CadeModelPtr model = fit_cade(spec, recs, all_indices(recs.size()), opt);
        std::mt19937_64 gen(4);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (int i = 0; i < 50; ++i) {
            std::vector<double> x(10);
            for (double& xi : x) xi = normal(gen);
            REQUIRE(model->tau(x, 0) == 0.0);
            REQUIRE(model->arm_mean(0, x, 0) == 4.5);
            REQUIRE(model->arm_mean(1, x, 0) == 4.5);
        }
    }
}

TEST_CASE("fitted effects correlate with the truth on the admission system") {
    // Twenty thousand logged decisions; correlation against the exact effect
    // at fresh covariate draws, per state and pooled over states 0..5. The
    // sparsely visited short-queue states carry the least data, so the pooled
    // bound is looser than the per-state bound at the well-covered states.
    const SystemSpec spec = spec_mnm1_example();
    Trajectory traj =
        simulate_trajectory(spec, logging_policy(spec), Horizon::events(40000), 61);
    std::vector<EventRecord> recs;
    int arrivals = 0;
    for (const EventRecord& e : traj.records) {
        recs.push_back(e);
        if (e.is_arrival() && ++arrivals == 20000) break;
    }
    REQUIRE(arrivals == 20000);
    const CadeModelPtr model = fit_cade(spec, recs, all_indices(recs.size()));

    std::mt19937_64 gen(62);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> fitted, truth;
    for (int k = 0; k <= 5; ++k) {
        std::vector<double> fk, tk;
        for (int i = 0; i < 300; ++i) {
            std::vector<double> x(10);
            for (double& xi : x) xi = normal(gen);
            fk.push_back(model->tau(x, k));
            tk.push_back(true_tau(spec, x, k));
        }
        if (k >= 3) CHECK(testutil::pearson(fk, tk) > 0.8);
        fitted.insert(fitted.end(), fk.begin(), fk.end());
        truth.insert(truth.end(), tk.begin(), tk.end());
    }
    CHECK(testutil::pearson(fitted, truth) > 0.7);
}

TEST_CASE("honest tree keeps a uniformly positive effect positive") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 1);
    const auto recs = synthetic_arrivals(
        6000, 10, 8, [](const std::vector<double>& x, int w) { return w * (1.0 + std::abs(x[0])); });
    CadeOptions opt;
    opt.estimator = "honest_tree";
    const CadeModelPtr model = fit_cade(spec, recs, all_indices(recs.size()), opt);

    std::mt19937_64 gen(9);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < 300; ++i) {
        std::vector<double> x(10);
        for (double& xi : x) xi = normal(gen);
        REQUIRE(model->tau(x, 0) > 0.0);
    }
}

TEST_CASE("oracle effect model matches the closed form and bias shifts arms only") {
    const SystemSpec spec = spec_mnm1_example();
    const OracleCadeModel plain(spec);
    const OracleCadeModel biased(spec, 1.0);
    std::mt19937_64 gen(10);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> x(10);
        for (double& xi : x) xi = normal(gen);
        const int k = i % 8;
        REQUIRE(plain.tau(x, k) == Approx(true_tau(spec, x, k)).margin(1e-12));
        REQUIRE(biased.tau(x, k) == Approx(plain.tau(x, k)).margin(1e-12));
        REQUIRE(biased.arm_mean(1, x, k) == Approx(plain.arm_mean(1, x, k) + 1.0).margin(1e-12));
        REQUIRE(biased.arm_mean(0, x, k) == Approx(plain.arm_mean(0, x, k) + 1.0).margin(1e-12));
    }
}

TEST_CASE("pooling skips records taken where the system overrode the policy") {
    const SystemSpec spec = spec_parallel_example();
    // Target (1,1) is free; (1,3) has the fast track full, so its arm labels
    // are unreliable and must never pool in.
    const int target = spec.state_index(1, 1);
    const int forced = spec.state_index(1, 3);
    std::vector<int> rec_state, rec_w;
    for (int i = 0; i < 40; ++i) {
        rec_state.push_back(forced);
        rec_w.push_back(i % 2);
    }
    rec_state.push_back(target);
    rec_w.push_back(1);
    const std::vector<int> members =
        detail::pooled_members(spec, target, rec_state, rec_w, 5);
    for (int m : members) REQUIRE(rec_state[static_cast<size_t>(m)] != forced);

    // A forced target keeps its own records.
    const std::vector<int> own =
        detail::pooled_members(spec, forced, rec_state, rec_w, 5);
    CHECK(own.size() >= 40);
}

TEST_CASE("effect models round-trip through JSON") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 1);
    const auto recs = synthetic_arrivals(
        500, 10, 12, [](const std::vector<double>& x, int w) { return w * x[0] + x[1]; });
    std::mt19937_64 gen(13);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const char* estimator : {"knn", "honest_tree"}) {
        CadeOptions opt;
        opt.estimator = estimator;
        const CadeModelPtr model = fit_cade(spec, recs, all_indices(recs.size()), opt);
        const CadeModelPtr back = cade_model_from_json(model->to_json());
        REQUIRE(back->id() == model->id());
        for (int i = 0; i < 25; ++i) {
            std::vector<double> x(10);
            for (double& xi : x) xi = normal(gen);
            REQUIRE(back->tau(x, 0) == model->tau(x, 0));
            REQUIRE(back->arm_mean(1, x, 1) == model->arm_mean(1, x, 1));
        }
    }
}

TEST_CASE("fitting requires usable arrivals") {
    const SystemSpec spec = spec_mm1_admission(1.0, 1.0, 1);
    std::vector<EventRecord> recs = records_with_states({0, 1, 0});
    for (auto& e : recs) e.a = EventType::Service0;  // no arrivals at all
    CHECK_THROWS_AS(fit_cade(spec, recs, all_indices(recs.size())), std::invalid_argument);

    CadeOptions bad;
    bad.estimator = "mystery";
    const auto ok = synthetic_arrivals(50, 10, 14, [](const std::vector<double>&, int) { return 0.0; });
    CHECK_THROWS_AS(fit_cade(spec, ok, all_indices(ok.size()), bad), std::invalid_argument);
}
