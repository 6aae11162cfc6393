#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cade.hpp"
#include "cade_model.hpp"
#include "chain.hpp"
#include "model.hpp"
#include "ope.hpp"
#include "parallel.hpp"
#include "policy.hpp"
#include "record.hpp"

namespace statewise {

// --- candidate grids ------------------------------------------------------------

// Candidate treated-share tables g live on {1/B, ..., (B-1)/B} per state.
// FullProduct enumerates the whole product (tiny systems only); MonotoneParam
// restricts to tables that are non-decreasing along the congestion axis,
// parameterized by a 3-knot piecewise-linear function snapped back to the
// grid; CoordinateAscent searches the product grid one state at a time.
struct SearchGrid {
    enum class Mode { FullProduct, CoordinateAscent, MonotoneParam };
    Mode mode = Mode::MonotoneParam;
    int B = 10;
    int n_states = 0;                             // length of each g table
    std::vector<double> levels;                   // 1/B ... (B-1)/B
    std::vector<int> free_states;                 // queue states the grid varies
    std::vector<int> axis;                        // congestion coordinate per queue state
    std::vector<std::vector<double>> candidates;  // explicit list (empty for CoordinateAscent)
};

namespace detail {

// Congestion axis: queue length for a single queue, total occupancy for the
// parallel pair. Non-arrival states take the value of the nearest axis point.
inline std::vector<int> congestion_axis(const SystemSpec& spec) {
    const int nq = spec.n_queue_states();
    std::vector<int> axis(static_cast<size_t>(nq), 0);
    for (int q = 0; q < nq; ++q) {
        auto [k0, k1] = spec.state_of(q);
        axis[static_cast<size_t>(q)] = spec.single_queue() ? k0 : k0 + k1;
    }
    return axis;
}

inline double pwl_eval(double a, const double t[3], const double v[3]) {
    if (a <= t[0]) return v[0];
    if (a >= t[2]) return v[2];
    if (a <= t[1]) {
        const double span = t[1] - t[0];
        return span <= 0.0 ? v[1] : v[0] + (v[1] - v[0]) * (a - t[0]) / span;
    }
    const double span = t[2] - t[1];
    return span <= 0.0 ? v[2] : v[1] + (v[2] - v[1]) * (a - t[1]) / span;
}

}  // namespace detail

inline SearchGrid make_grid(const SystemSpec& spec, int B, SearchGrid::Mode mode) {
    if (B < 2) throw std::invalid_argument("grid: resolution B must be at least 2");
    SearchGrid grid;
    grid.mode = mode;
    grid.B = B;
    for (int b = 1; b < B; ++b) grid.levels.push_back(static_cast<double>(b) / B);
    const int nq = spec.n_queue_states();
    grid.n_states = nq;
    for (int q = 0; q < nq; ++q)
        if (spec.arrivals_possible(q)) grid.free_states.push_back(q);
    grid.axis = detail::congestion_axis(spec);
    const int n_free = static_cast<int>(grid.free_states.size());
    if (n_free == 0) throw std::invalid_argument("grid: no states admit arrivals");

    if (mode == SearchGrid::Mode::CoordinateAscent) return grid;

    if (mode == SearchGrid::Mode::FullProduct) {
        double size = 1.0;
        for (int i = 0; i < n_free; ++i) size *= static_cast<double>(B - 1);
        if (size > 2e5)
            throw std::invalid_argument("grid: FullProduct would enumerate " +
                                        std::to_string(size) +
                                        " candidates; use MonotoneParam or CoordinateAscent");
        std::vector<int> digit(static_cast<size_t>(n_free), 0);
        std::vector<double> g(static_cast<size_t>(nq), grid.levels[0]);
        for (;;) {
            for (int i = 0; i < n_free; ++i)
                g[static_cast<size_t>(grid.free_states[static_cast<size_t>(i)])] =
                    grid.levels[static_cast<size_t>(digit[static_cast<size_t>(i)])];
            // Non-free states copy the value at the nearest free axis point.
            for (int q = 0; q < nq; ++q) {
                if (spec.arrivals_possible(q)) continue;
                int best = grid.free_states[0], bd = 1 << 30;
                for (int f : grid.free_states) {
                    const int d = std::abs(grid.axis[static_cast<size_t>(f)] -
                                           grid.axis[static_cast<size_t>(q)]);
                    if (d < bd) { bd = d; best = f; }
                }
                g[static_cast<size_t>(q)] = g[static_cast<size_t>(best)];
            }
            grid.candidates.push_back(g);
            // Mixed-radix increment, last coordinate fastest, so the list
            // comes out in ascending lexicographic order.
            int pos = n_free - 1;
            while (pos >= 0 && ++digit[static_cast<size_t>(pos)] == B - 1) {
                digit[static_cast<size_t>(pos)] = 0;
                --pos;
            }
            if (pos < 0) break;
        }
        return grid;
    }

    // MonotoneParam: knots at the ends and midpoint of the free-state axis
    // range; enumerate non-decreasing value triples, interpolate, snap.
    int amax = 0;
    for (int f : grid.free_states) amax = std::max(amax, grid.axis[static_cast<size_t>(f)]);
    const double t[3] = {0.0, amax / 2.0, static_cast<double>(amax)};
    const int L = static_cast<int>(grid.levels.size());
    for (int i0 = 0; i0 < L; ++i0) {
        for (int i1 = i0; i1 < L; ++i1) {
            for (int i2 = i1; i2 < L; ++i2) {
                const double v[3] = {grid.levels[static_cast<size_t>(i0)],
                                     grid.levels[static_cast<size_t>(i1)],
                                     grid.levels[static_cast<size_t>(i2)]};
                std::vector<double> g(static_cast<size_t>(nq), 0.0);
                for (int q = 0; q < nq; ++q) {
                    const double a =
                        std::min(static_cast<double>(grid.axis[static_cast<size_t>(q)]),
                                 static_cast<double>(amax));
                    const double val = detail::pwl_eval(a, t, v);
                    const int idx = std::clamp(static_cast<int>(std::lround(val * B)), 1, B - 1);
                    g[static_cast<size_t>(q)] = static_cast<double>(idx) / B;
                }
                grid.candidates.push_back(std::move(g));
            }
        }
    }
    std::sort(grid.candidates.begin(), grid.candidates.end());
    grid.candidates.erase(std::unique(grid.candidates.begin(), grid.candidates.end()),
                          grid.candidates.end());
    return grid;
}

// An explicit candidate list (used by tests and by callers with bespoke grids).
inline SearchGrid explicit_grid(std::vector<std::vector<double>> candidates, int B = 10) {
    if (candidates.empty()) throw std::invalid_argument("grid: empty explicit candidate list");
    SearchGrid grid;
    grid.mode = SearchGrid::Mode::FullProduct;
    grid.B = B;
    grid.candidates = std::move(candidates);
    grid.n_states = static_cast<int>(grid.candidates.front().size());
    std::sort(grid.candidates.begin(), grid.candidates.end());
    grid.candidates.erase(std::unique(grid.candidates.begin(), grid.candidates.end()),
                          grid.candidates.end());
    return grid;
}

// --- candidate scoring -----------------------------------------------------------

struct Scored {
    double value = 0.0;
    double flagged_mass = 0.0;
};

struct ScoredCandidate {
    std::vector<double> g;
    double value = 0.0;
    double flagged_mass = 0.0;
    bool excluded = false;
};

struct SelectionResult {
    std::vector<double> best_g;
    double best_value = 0.0;
    std::vector<ScoredCandidate> table;  // every candidate visited
    std::int64_t n_excluded = 0;
};

struct SelectOptions {
    double flag_limit = 0.01;   // exclude candidates putting more mass on flagged states
    int jobs = 1;
    int max_sweeps = 100;       // CoordinateAscent safety stop
    std::vector<double> start;  // CoordinateAscent start point (optional)
};

namespace detail {

// Argmax over non-excluded rows; candidates must be visited in ascending
// lexicographic order of g for the tie-break (smallest g wins) to hold.
inline void reduce_argmax(SelectionResult& res) {
    std::vector<size_t> order(res.table.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return res.table[a].g < res.table[b].g; });
    bool found = false;
    for (size_t i : order) {
        const ScoredCandidate& c = res.table[i];
        if (c.excluded) {
            ++res.n_excluded;
            continue;
        }
        if (!found || c.value > res.best_value) {
            res.best_g = c.g;
            res.best_value = c.value;
            found = true;
        }
    }
    if (!found)
        throw std::runtime_error(
            "policy search: every candidate places too much plug-in mass on flagged states");
}

}  // namespace detail

// Runs the grid search against any scorer mapping g -> Scored. Enumerated
// modes score every candidate; CoordinateAscent sweeps one state at a time
// until a full sweep yields no strict improvement.
template <class ScoreFn>
inline SelectionResult select_best(const SearchGrid& grid, ScoreFn&& score,
                                   const SelectOptions& opt = {}) {
    SelectionResult res;
    if (grid.mode != SearchGrid::Mode::CoordinateAscent) {
        const int n = static_cast<int>(grid.candidates.size());
        res.table.resize(static_cast<size_t>(n));
        parallel_for(n, opt.jobs, [&](int i) {
            const std::vector<double>& g = grid.candidates[static_cast<size_t>(i)];
            const Scored s = score(g);
            ScoredCandidate& row = res.table[static_cast<size_t>(i)];
            row.g = g;
            row.value = s.value;
            row.flagged_mass = s.flagged_mass;
            row.excluded = s.flagged_mass > opt.flag_limit;
        });
        detail::reduce_argmax(res);
        return res;
    }

    if (grid.levels.empty() || grid.free_states.empty() || grid.n_states <= 0)
        throw std::invalid_argument("coordinate ascent needs a grid built by make_grid");
    std::vector<double> cur;
    if (!opt.start.empty()) {
        cur = opt.start;
    } else {
        // Start every coordinate at the level nearest 1/2.
        cur.assign(static_cast<size_t>(grid.n_states), grid.levels[(grid.levels.size() - 1) / 2]);
    }
    std::map<std::vector<double>, Scored> cache;
    auto scored = [&](const std::vector<double>& g) {
        auto it = cache.find(g);
        if (it != cache.end()) return it->second;
        const Scored s = score(g);
        cache.emplace(g, s);
        ScoredCandidate row;
        row.g = g;
        row.value = s.value;
        row.flagged_mass = s.flagged_mass;
        row.excluded = s.flagged_mass > opt.flag_limit;
        res.table.push_back(std::move(row));
        return s;
    };

    Scored best = scored(cur);
    bool have_best = best.flagged_mass <= opt.flag_limit;
    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
        bool improved = false;
        for (int f : grid.free_states) {
            std::vector<double> trial = cur;
            for (double lvl : grid.levels) {
                trial[static_cast<size_t>(f)] = lvl;
                const Scored s = scored(trial);
                if (s.flagged_mass > opt.flag_limit) {
                    // Infeasible. Until some candidate clears the flag limit,
                    // walk toward feasibility by shedding flagged mass;
                    // afterwards infeasible trials are just skipped.
                    if (!have_best && s.flagged_mass < best.flagged_mass - 1e-12) {
                        best = s;
                        cur = trial;
                        improved = true;
                    }
                    continue;
                }
                if (!have_best || s.value > best.value) {
                    best = s;
                    cur = trial;
                    have_best = true;
                    improved = true;
                }
            }
        }
        if (!improved) break;
    }
    detail::reduce_argmax(res);
    return res;
}

// --- the doubly robust scorer ------------------------------------------------------

// Scores threshold policies sharing one fitted effect model and one nuisance
// set. Everything that does not depend on g — eval-side predictions, the
// reference table, the rate-substituted spec, the eta-only fallback tables —
// is computed once, so each candidate costs one pass over the evaluation
// arrivals plus one stationary solve.
class GridScorer {
  public:
    GridScorer(const SystemSpec& spec, const std::vector<EventRecord>& records,
               const RegenerationSplit& split, const NuisanceSet& nuis, CadeModelPtr model,
               std::string objective)
        : spec_(spec), nuis_(&nuis), model_(std::move(model)), objective_(std::move(objective)) {
        if (objective_ != "avg_outcome" && objective_ != "reward_rate")
            throw std::invalid_argument("objective must be avg_outcome or reward_rate");
        in_ = prepare_ope_inputs(spec_, records, split.eval_idx, nuis);
        for (int idx : split.train_idx) {
            const EventRecord& e = records.at(static_cast<size_t>(idx));
            if (e.is_arrival()) ref_x_.push_back(e.x);
        }
        if (ref_x_.empty()) throw std::invalid_argument("scorer: no training arrivals");
        sp_ = predict_reference(spec_, *model_, ref_x_);
        tau_eval_.reserve(in_.arrivals.size());
        for (const EvalArrival& a : in_.arrivals) tau_eval_.push_back(model_->tau(*a.x, a.q));
        plug_ = make_rate_plugin(spec_, nuis.rates);

        const int nq = spec_.n_queue_states();
        flagged_.assign(static_cast<size_t>(nq), 0);
        for (int q = 0; q < nq; ++q) {
            if (plug_.state_flagged[static_cast<size_t>(q)]) flagged_[static_cast<size_t>(q)] = 1;
            if (!spec_.arrivals_possible(q)) continue;
            if (in_.per_state_count[static_cast<size_t>(q)] == 0) {
                flagged_[static_cast<size_t>(q)] = 1;
                build_fallback(q);
            }
        }
    }

    const StatePredictions& reference() const { return sp_; }
    const OpeInputs& inputs() const { return in_; }
    const std::vector<std::vector<double>>& reference_covariates() const { return ref_x_; }

    PolicySpec policy_for(const std::vector<double>& g) const {
        return threshold_policy_from_predictions(spec_, model_, sp_, g);
    }

    Scored operator()(const std::vector<double>& g) const {
        const PolicySpec pol = policy_for(g);
        return score_policy(pol, g);
    }

    // Scores an arbitrary effect-based policy (the direct rule, say) with the
    // same machinery; pibar must hold its treated share per state.
    Scored score_policy(const PolicySpec& pol, const std::vector<double>& pibar) const {
        const int nq = spec_.n_queue_states();
        std::vector<double> pi1(in_.arrivals.size());
        for (size_t i = 0; i < in_.arrivals.size(); ++i)
            pi1[i] = prob_from_tau(pol, tau_eval_[i], in_.arrivals[i].q);
        std::vector<double> r = dr_state_value(spec_, in_, pi1);
        for (int q = 0; q < nq; ++q) {
            if (!is_missing(r[static_cast<size_t>(q)])) continue;
            if (!spec_.arrivals_possible(q)) {
                r[static_cast<size_t>(q)] = 0.0;
                continue;
            }
            r[static_cast<size_t>(q)] = fallback_value(q, pol);
        }
        const StationaryResult dist = plugin_dist(plug_.rate_spec, pibar);

        Scored out;
        for (int q = 0; q < nq; ++q)
            if (flagged_[static_cast<size_t>(q)])
                out.flagged_mass += dist.arrival_conditioned[static_cast<size_t>(q)];
        if (objective_ == "avg_outcome") {
            for (int q = 0; q < nq; ++q)
                out.value += dist.arrival_conditioned[static_cast<size_t>(q)] *
                             r[static_cast<size_t>(q)];
            return out;
        }
        double num = 0.0, den = 0.0;
        for (int a = 0; a < kNumEventTypes; ++a) {
            for (int q = 0; q < nq; ++q) {
                const size_t ai = static_cast<size_t>(a * nq + q);
                const double mass = dist.augmented[ai];
                if (mass <= 0.0) continue;
                double gap = in_.gaps.mean[ai];
                if (is_missing(gap)) {
                    auto [k0, k1] = plug_.rate_spec.state_of(q);
                    gap = 1.0 / total_rate(plug_.rate_spec, k0, k1);
                }
                den += mass * gap;
                if (static_cast<EventType>(a) == EventType::Arrival)
                    num += mass * r[static_cast<size_t>(q)];
            }
        }
        if (den <= 0.0) throw std::runtime_error("scorer: degenerate gap denominator");
        out.value = num / den;
        return out;
    }

  private:
    struct Fallback {
        std::vector<double> tau;         // ascending
        std::vector<double> pre0, pre1;  // prefix sums of eta0/eta1 in tau order
    };

    static double prob_from_tau(const PolicySpec& pol, double tau, int q) {
        switch (pol.kind) {
            case PolicyKind::Direct: return tau > 0.0 ? 1.0 : 0.0;
            case PolicyKind::Threshold: {
                const double c = pol.c[static_cast<size_t>(q)];
                if (tau > c) return 1.0;
                if (tau == c) return pol.p[static_cast<size_t>(q)];
                return 0.0;
            }
            default:
                throw std::invalid_argument("scorer: policy must be effect-based");
        }
    }

    void build_fallback(int q) {
        Fallback fb;
        const size_t m = ref_x_.size();
        std::vector<std::pair<double, size_t>> order(m);
        for (size_t j = 0; j < m; ++j) order[j] = {model_->tau(ref_x_[j], q), j};
        std::sort(order.begin(), order.end());
        fb.tau.resize(m);
        fb.pre0.assign(m + 1, 0.0);
        fb.pre1.assign(m + 1, 0.0);
        for (size_t j = 0; j < m; ++j) {
            fb.tau[j] = order[j].first;
            const std::vector<double>& x = ref_x_[order[j].second];
            fb.pre0[j + 1] = fb.pre0[j] + nuis_->eta_at(0, x, q);
            fb.pre1[j + 1] = fb.pre1[j] + nuis_->eta_at(1, x, q);
        }
        fallback_.emplace(q, std::move(fb));
    }

    // Plug-in mean of pi*eta1 + (1-pi)*eta0 over the reference sample, using
    // the prefix sums: arrivals above the cut take eta1, ties take a p-blend.
    double fallback_value(int q, const PolicySpec& pol) const {
        const Fallback& fb = fallback_.at(q);
        const size_t m = fb.tau.size();
        double c, p;
        if (pol.kind == PolicyKind::Direct) {
            c = 0.0;
            p = 0.0;
        } else {
            c = pol.c[static_cast<size_t>(q)];
            p = pol.p[static_cast<size_t>(q)];
        }
        const size_t lo = static_cast<size_t>(
            std::lower_bound(fb.tau.begin(), fb.tau.end(), c) - fb.tau.begin());
        const size_t hi = static_cast<size_t>(
            std::upper_bound(fb.tau.begin(), fb.tau.end(), c) - fb.tau.begin());
        const double sum1_above = fb.pre1[m] - fb.pre1[hi];
        const double sum1_at = fb.pre1[hi] - fb.pre1[lo];
        const double sum0_below = fb.pre0[lo];
        const double sum0_at = fb.pre0[hi] - fb.pre0[lo];
        return (sum1_above + p * sum1_at + sum0_below + (1.0 - p) * sum0_at) /
               static_cast<double>(m);
    }

    SystemSpec spec_;
    const NuisanceSet* nuis_;
    CadeModelPtr model_;
    std::string objective_;
    OpeInputs in_;
    std::vector<std::vector<double>> ref_x_;
    StatePredictions sp_;
    std::vector<double> tau_eval_;
    RatePlugin plug_;
    std::vector<char> flagged_;
    std::map<int, Fallback> fallback_;
};

// --- the learner ---------------------------------------------------------------

struct LearnOptions {
    int B = 10;
    SearchGrid::Mode mode = SearchGrid::Mode::MonotoneParam;
    std::string objective = "reward_rate";  // or "avg_outcome"
    double flag_limit = 0.01;
    int jobs = 1;
    SplitOptions split;
    CadeOptions cade;
    OpeOptions ope;
};

struct LearnResult {
    PolicySpec policy;          // the winning threshold policy
    std::vector<double> g;      // its treated-share table
    double value = 0.0;         // its estimate under the chosen objective
    std::string objective;
    SelectionResult selection;  // every candidate visited, scored
    CadeModelPtr model;
    RegenerationSplit split;
    std::vector<std::string> warnings;
};

// Split at regenerations, fit the effect model on the training side, fit
// nuisances, then pick the treated-share table whose threshold policy scores
// best on the evaluation side.
inline LearnResult learn_policy(const SystemSpec& spec, const std::vector<EventRecord>& records,
                                const LearnOptions& opt = {}) {
    LearnResult out;
    out.objective = opt.objective;
    out.split = regeneration_split(spec, records, opt.split);

    CadeModelPtr model = fit_cade(spec, records, out.split.train_idx, opt.cade);
    out.model = model;
    out.warnings = model->fit_warnings;

    OpeOptions ope_opt = opt.ope;
    ope_opt.cade = opt.cade;
    NuisanceSet nuis = fit_nuisances(spec, records, out.split, ope_opt,
                                     ope_opt.eta == "fit" ? model : nullptr);

    const GridScorer scorer(spec, records, out.split, nuis, model, opt.objective);
    const SearchGrid grid = make_grid(spec, opt.B, opt.mode);
    SelectOptions sel;
    sel.flag_limit = opt.flag_limit;
    sel.jobs = opt.jobs;
    out.selection = select_best(grid, scorer, sel);

    out.g = out.selection.best_g;
    out.value = out.selection.best_value;
    out.policy = scorer.policy_for(out.g);
    if (out.selection.n_excluded > 0)
        out.warnings.push_back(std::to_string(out.selection.n_excluded) +
                               " grid point(s) excluded for plug-in mass on flagged states");
    return out;
}

// The uncongested baseline: treat exactly when the estimated effect is positive.
inline PolicySpec direct_baseline(CadeModelPtr model) { return direct_policy(std::move(model)); }

}  // namespace statewise
