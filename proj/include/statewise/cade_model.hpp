#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"
#include "outcome.hpp"
#include "record.hpp"
#include "rng.hpp"

namespace statewise {

// Conditional treatment-effect model keyed by covariates and queue state.
// arm_mean doubles as the outcome regression used by the off-policy machinery.
class CadeModel {
  public:
    virtual ~CadeModel() = default;
    virtual double tau(const std::vector<double>& x, int qidx) const = 0;
    virtual double arm_mean(int w, const std::vector<double>& x, int qidx) const = 0;
    virtual std::string id() const = 0;
    virtual nlohmann::json to_json() const = 0;

    std::vector<std::string> fit_warnings;
};

using CadeModelPtr = std::shared_ptr<const CadeModel>;

// --- exact model -------------------------------------------------------------

// Wraps the spec's known outcome means; `bias` shifts both arms, which leaves
// tau untouched (used to probe double robustness).
class OracleCadeModel final : public CadeModel {
  public:
    explicit OracleCadeModel(SystemSpec spec, double bias = 0.0)
        : spec_(std::move(spec)), bias_(bias) {}

    double tau(const std::vector<double>& x, int qidx) const override {
        auto [k0, k1] = spec_.state_of(qidx);
        return true_tau(spec_, x, k0, k1);
    }
    double arm_mean(int w, const std::vector<double>& x, int qidx) const override {
        auto [k0, k1] = spec_.state_of(qidx);
        return true_eta(spec_, w, x, k0, k1) + bias_;
    }
    std::string id() const override { return "oracle"; }
    nlohmann::json to_json() const override {
        return {{"estimator", "oracle"}, {"spec", spec_}, {"bias", bias_}};
    }

  private:
    SystemSpec spec_;
    double bias_;
};

// --- fitted models ------------------------------------------------------------

struct CadeOptions {
    std::string estimator = "knn";  // "knn" | "honest_tree" | "oracle"
    int pool_threshold = 50;        // min per-arm sample before pooling stops
    double k_exponent = 2.0 / 3.0;  // k = ceil(n^k_exponent)
    int tree_max_depth = 6;
    int tree_min_leaf = 20;
    std::uint64_t seed = 1;         // honest-split shuffling
};

namespace detail {

// Per-(state, arm) training slice, stored contiguously for the distance loop.
struct ArmSlice {
    std::vector<double> X;  // m x d row-major
    std::vector<double> y;
    int k = 0;              // neighbors used at prediction time
    int m() const { return static_cast<int>(y.size()); }
};

inline double sqdist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

// Grows the pooling radius around `qidx` (L1 distance on queue lengths) until
// both arms clear the threshold or the whole sample is pooled. Records taken
// at forced-action states carry arm labels the system overrode, so they never
// pool into states where the policy actually chooses.
inline std::vector<int> pooled_members(const SystemSpec& spec, int qidx,
                                       const std::vector<int>& rec_state,
                                       const std::vector<int>& rec_w, int threshold) {
    auto [k0, k1] = spec.state_of(qidx);
    const bool target_forced = spec.forced_action(qidx);
    const int n = static_cast<int>(rec_state.size());
    const int max_radius = spec.cap0 + spec.cap1 + 1;
    for (int radius = 0; radius <= max_radius; ++radius) {
        std::vector<int> members;
        int c0 = 0, c1 = 0;
        for (int i = 0; i < n; ++i) {
            const int s = rec_state[static_cast<size_t>(i)];
            if (!target_forced && spec.forced_action(s)) continue;
            auto [s0, s1] = spec.state_of(s);
            if (std::abs(s0 - k0) + std::abs(s1 - k1) > radius) continue;
            members.push_back(i);
            (rec_w[static_cast<size_t>(i)] == 1 ? c1 : c0)++;
        }
        if ((c0 >= threshold && c1 >= threshold) || radius == max_radius) return members;
    }
    return {};
}

}  // namespace detail

// Two k-nearest-neighbor regressions per queue state, one per arm; the effect
// estimate is their difference. States short on either arm pool neighboring
// queue lengths before fitting.
class KnnTLearner final : public CadeModel {
  public:
    double tau(const std::vector<double>& x, int qidx) const override {
        return predict(1, x.data(), qidx) - predict(0, x.data(), qidx);
    }
    double arm_mean(int w, const std::vector<double>& x, int qidx) const override {
        return predict(w, x.data(), qidx);
    }
    std::string id() const override { return "knn"; }

    nlohmann::json to_json() const override {
        nlohmann::json states = nlohmann::json::array();
        for (const auto& pair : slices_) {
            states.push_back({{"X0", pair[0].X}, {"y0", pair[0].y}, {"k0", pair[0].k},
                              {"X1", pair[1].X}, {"y1", pair[1].y}, {"k1", pair[1].k}});
        }
        return {{"estimator", "knn"}, {"d", d_}, {"fallback", fallback_}, {"states", states}};
    }

    static std::shared_ptr<KnnTLearner> from_json(const nlohmann::json& j) {
        auto m = std::make_shared<KnnTLearner>();
        m->d_ = j.at("d").get<int>();
        m->fallback_ = j.at("fallback").get<double>();
        for (const auto& js : j.at("states")) {
            std::array<detail::ArmSlice, 2> pair;
            pair[0].X = js.at("X0").get<std::vector<double>>();
            pair[0].y = js.at("y0").get<std::vector<double>>();
            pair[0].k = js.at("k0").get<int>();
            pair[1].X = js.at("X1").get<std::vector<double>>();
            pair[1].y = js.at("y1").get<std::vector<double>>();
            pair[1].k = js.at("k1").get<int>();
            m->slices_.push_back(std::move(pair));
        }
        return m;
    }

    friend CadeModelPtr fit_cade(const SystemSpec&, const std::vector<EventRecord>&,
                                 const std::vector<int>&, const CadeOptions&);

  private:
    double predict(int w, const double* xq, int qidx) const {
        const detail::ArmSlice& s = slices_[static_cast<size_t>(qidx)][static_cast<size_t>(w)];
        const int m = s.m();
        if (m == 0) return fallback_;
        thread_local std::vector<std::pair<double, double>> buf;  // (dist^2, y)
        buf.resize(static_cast<size_t>(m));
        for (int i = 0; i < m; ++i)
            buf[static_cast<size_t>(i)] = {detail::sqdist(&s.X[static_cast<size_t>(i) * d_], xq, d_),
                                           s.y[static_cast<size_t>(i)]};
        const int k = std::min(s.k, m);
        std::nth_element(buf.begin(), buf.begin() + (k - 1), buf.begin() + m);
        double sum = 0.0;
        for (int i = 0; i < k; ++i) sum += buf[static_cast<size_t>(i)].second;
        return sum / k;
    }

    int d_ = 0;
    double fallback_ = 0.0;  // global outcome mean; used when an arm is empty
    std::vector<std::array<detail::ArmSlice, 2>> slices_;  // indexed by queue state
};

// One honest causal tree per queue state: the partition is grown on a
// structure half (treatment-blind, outcome SSE), and each leaf carries honest
// per-arm means from the estimation half. Sharing the partition keeps the
// effect estimate leaf-constant instead of inheriting phantom sign changes
// from two independently grown arm trees.
class HonestTreeTLearner final : public CadeModel {
  public:
    struct Node {
        int feat = -1;       // -1 marks a leaf
        double cut = 0.0;
        int left = -1, right = -1;
        double value0 = 0.0, value1 = 0.0;  // estimation-half arm means
    };

    double tau(const std::vector<double>& x, int qidx) const override {
        const Node leaf = leaf_at(x.data(), qidx);
        return leaf.value1 - leaf.value0;
    }
    double arm_mean(int w, const std::vector<double>& x, int qidx) const override {
        const Node leaf = leaf_at(x.data(), qidx);
        return w == 1 ? leaf.value1 : leaf.value0;
    }
    std::string id() const override { return "honest_tree"; }

    nlohmann::json to_json() const override {
        nlohmann::json states = nlohmann::json::array();
        for (const auto& tree : trees_) {
            nlohmann::json nodes = nlohmann::json::array();
            for (const Node& n : tree)
                nodes.push_back({{"f", n.feat}, {"c", n.cut}, {"l", n.left}, {"r", n.right},
                                 {"v0", n.value0}, {"v1", n.value1}});
            states.push_back(nodes);
        }
        return {{"estimator", "honest_tree"}, {"d", d_}, {"fallback", fallback_},
                {"states", states}};
    }

    static std::shared_ptr<HonestTreeTLearner> from_json(const nlohmann::json& j) {
        auto m = std::make_shared<HonestTreeTLearner>();
        m->d_ = j.at("d").get<int>();
        m->fallback_ = j.at("fallback").get<double>();
        for (const auto& jt : j.at("states")) {
            std::vector<Node> tree;
            for (const auto& jn : jt) {
                Node n;
                n.feat = jn.at("f").get<int>();
                n.cut = jn.at("c").get<double>();
                n.left = jn.at("l").get<int>();
                n.right = jn.at("r").get<int>();
                n.value0 = jn.at("v0").get<double>();
                n.value1 = jn.at("v1").get<double>();
                tree.push_back(n);
            }
            m->trees_.push_back(std::move(tree));
        }
        return m;
    }

    friend CadeModelPtr fit_cade(const SystemSpec&, const std::vector<EventRecord>&,
                                 const std::vector<int>&, const CadeOptions&);

  private:
    Node leaf_at(const double* xq, int qidx) const {
        const auto& tree = trees_[static_cast<size_t>(qidx)];
        if (tree.empty()) {
            Node n;
            n.value0 = fallback_;
            n.value1 = fallback_;
            return n;
        }
        int node = 0;
        while (tree[static_cast<size_t>(node)].feat >= 0) {
            const Node& n = tree[static_cast<size_t>(node)];
            node = xq[n.feat] <= n.cut ? n.left : n.right;
        }
        return tree[static_cast<size_t>(node)];
    }

    int d_ = 0;
    double fallback_ = 0.0;
    std::vector<std::vector<Node>> trees_;
};

namespace detail {

// Grow one honest causal tree for a pooled slice. `rows` indexes into X/y/w.
// The partition is built on a structure half by outcome-SSE reduction; every
// node then carries per-arm means from the estimation half, inheriting the
// parent's mean for an arm absent from a child.
inline std::vector<HonestTreeTLearner::Node> grow_honest_tree(
    const std::vector<double>& X, const std::vector<double>& y, const std::vector<int>& w, int d,
    std::vector<int> rows, const CadeOptions& opt, Rng& rng) {
    std::vector<HonestTreeTLearner::Node> tree;
    if (rows.size() < 4) return tree;
    // Seeded shuffle, then split: even positions build structure, odd estimate.
    for (size_t i = rows.size() - 1; i > 0; --i) {
        const size_t j = static_cast<size_t>(rng.uniform() * static_cast<double>(i + 1));
        std::swap(rows[i], rows[j]);
    }
    std::vector<int> structure, estimate;
    for (size_t i = 0; i < rows.size(); ++i)
        (i % 2 == 0 ? structure : estimate).push_back(rows[i]);

    // Honest per-arm means; missing arms fall back to the supplied default.
    const auto arm_means = [&](const std::vector<int>& idx, double fb0, double fb1) {
        double s0 = 0.0, s1 = 0.0;
        int n0 = 0, n1 = 0;
        for (int i : idx) {
            if (w[static_cast<size_t>(i)] == 1) {
                s1 += y[static_cast<size_t>(i)];
                ++n1;
            } else {
                s0 += y[static_cast<size_t>(i)];
                ++n0;
            }
        }
        return std::pair<double, double>{n0 ? s0 / n0 : fb0, n1 ? s1 / n1 : fb1};
    };

    struct Work {
        int node;
        std::vector<int> str, est;
        int depth;
    };
    tree.push_back({});
    {
        const auto& pool = estimate.empty() ? structure : estimate;
        double s = 0.0;
        for (int i : pool) s += y[static_cast<size_t>(i)];
        const double overall = s / static_cast<double>(pool.size());
        auto [m0, m1] = arm_means(pool, overall, overall);
        tree[0].value0 = m0;
        tree[0].value1 = m1;
    }
    std::vector<Work> stack{{0, std::move(structure), std::move(estimate), 0}};
    while (!stack.empty()) {
        Work wk = std::move(stack.back());
        stack.pop_back();
        const int n_str = static_cast<int>(wk.str.size());
        if (wk.depth >= opt.tree_max_depth || n_str < 2 * opt.tree_min_leaf) continue;

        // Best axis-aligned split by structure-half SSE reduction; candidate
        // cuts at structure-half deciles.
        double base_sum = 0.0, base_sq = 0.0;
        for (int i : wk.str) {
            base_sum += y[static_cast<size_t>(i)];
            base_sq += y[static_cast<size_t>(i)] * y[static_cast<size_t>(i)];
        }
        const double base_sse = base_sq - base_sum * base_sum / n_str;
        int best_feat = -1;
        double best_cut = 0.0, best_gain = 1e-12;
        std::vector<double> vals(static_cast<size_t>(n_str));
        for (int f = 0; f < d; ++f) {
            for (int i = 0; i < n_str; ++i)
                vals[static_cast<size_t>(i)] = X[static_cast<size_t>(wk.str[static_cast<size_t>(i)]) *
                                                     static_cast<size_t>(d) + static_cast<size_t>(f)];
            std::vector<double> sorted = vals;
            std::sort(sorted.begin(), sorted.end());
            for (int q = 1; q <= 9; ++q) {
                const double cut = sorted[static_cast<size_t>(q * (n_str - 1) / 10)];
                double ls = 0.0, lq = 0.0;
                int ln = 0;
                for (int i = 0; i < n_str; ++i) {
                    if (vals[static_cast<size_t>(i)] <= cut) {
                        const double yi = y[static_cast<size_t>(wk.str[static_cast<size_t>(i)])];
                        ls += yi;
                        lq += yi * yi;
                        ++ln;
                    }
                }
                const int rn = n_str - ln;
                if (ln < opt.tree_min_leaf || rn < opt.tree_min_leaf) continue;
                const double rs = base_sum - ls, rq = base_sq - lq;
                const double sse = (lq - ls * ls / ln) + (rq - rs * rs / rn);
                if (base_sse - sse > best_gain) {
                    best_gain = base_sse - sse;
                    best_feat = f;
                    best_cut = cut;
                }
            }
        }
        if (best_feat < 0) continue;

        Work left{static_cast<int>(tree.size()), {}, {}, wk.depth + 1};
        Work right{static_cast<int>(tree.size()) + 1, {}, {}, wk.depth + 1};
        for (int i : wk.str)
            (X[static_cast<size_t>(i) * static_cast<size_t>(d) + static_cast<size_t>(best_feat)] <=
                     best_cut
                 ? left.str
                 : right.str)
                .push_back(i);
        for (int i : wk.est)
            (X[static_cast<size_t>(i) * static_cast<size_t>(d) + static_cast<size_t>(best_feat)] <=
                     best_cut
                 ? left.est
                 : right.est)
                .push_back(i);
        const HonestTreeTLearner::Node& parent = tree[static_cast<size_t>(wk.node)];
        HonestTreeTLearner::Node lnode, rnode;
        std::tie(lnode.value0, lnode.value1) = arm_means(left.est, parent.value0, parent.value1);
        std::tie(rnode.value0, rnode.value1) = arm_means(right.est, parent.value0, parent.value1);
        tree[static_cast<size_t>(wk.node)].feat = best_feat;
        tree[static_cast<size_t>(wk.node)].cut = best_cut;
        tree[static_cast<size_t>(wk.node)].left = left.node;
        tree[static_cast<size_t>(wk.node)].right = right.node;
        tree.push_back(lnode);
        tree.push_back(rnode);
        stack.push_back(std::move(left));
        stack.push_back(std::move(right));
    }
    return tree;
}

}  // namespace detail

// Fit a treatment-effect model on the arrival records selected by `indices`.
// Records with missing rewards (unserved at the horizon) are skipped.
inline CadeModelPtr fit_cade(const SystemSpec& spec, const std::vector<EventRecord>& records,
                             const std::vector<int>& indices, const CadeOptions& opt = {}) {
    if (opt.estimator == "oracle") return std::make_shared<OracleCadeModel>(spec);
    if (opt.estimator != "knn" && opt.estimator != "honest_tree")
        throw std::invalid_argument("fit_cade: unknown estimator '" + opt.estimator + "'");

    const int d = spec.covariate_dim;
    std::vector<double> X, y;
    std::vector<int> rec_state, rec_w;
    for (int idx : indices) {
        const EventRecord& e = records.at(static_cast<size_t>(idx));
        if (!e.is_arrival()) continue;
        if (is_missing(e.r)) continue;
        X.insert(X.end(), e.x.begin(), e.x.end());
        y.push_back(e.r);
        rec_state.push_back(spec.state_index(e.k0, e.k1));
        rec_w.push_back(e.w);
    }
    const int n = static_cast<int>(y.size());
    if (n == 0) throw std::invalid_argument("fit_cade: no usable arrival records in training set");

    const double global_mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
    const int nq = spec.n_queue_states();
    std::vector<std::string> warnings;

    if (opt.estimator == "knn") {
        auto model = std::make_shared<KnnTLearner>();
        model->d_ = d;
        model->fallback_ = global_mean;
        model->slices_.resize(static_cast<size_t>(nq));
        for (int q = 0; q < nq; ++q) {
            const std::vector<int> members =
                detail::pooled_members(spec, q, rec_state, rec_w, opt.pool_threshold);
            auto& pair = model->slices_[static_cast<size_t>(q)];
            for (int i : members) {
                detail::ArmSlice& s = pair[static_cast<size_t>(rec_w[static_cast<size_t>(i)])];
                s.X.insert(s.X.end(), X.begin() + static_cast<size_t>(i) * static_cast<size_t>(d),
                           X.begin() + static_cast<size_t>(i + 1) * static_cast<size_t>(d));
                s.y.push_back(y[static_cast<size_t>(i)]);
            }
            for (int w = 0; w < 2; ++w) {
                detail::ArmSlice& s = pair[static_cast<size_t>(w)];
                s.k = std::max(1, static_cast<int>(
                                      std::ceil(std::pow(static_cast<double>(s.m()), opt.k_exponent))));
                if (s.m() == 0 && spec.arrivals_possible(q))
                    warnings.push_back("state " + spec.state_label(q) + ": arm " +
                                       std::to_string(w) +
                                       " unobserved anywhere; using global mean");
            }
        }
        auto out = std::static_pointer_cast<CadeModel>(model);
        model->fit_warnings = std::move(warnings);
        return out;
    }

    auto model = std::make_shared<HonestTreeTLearner>();
    model->d_ = d;
    model->fallback_ = global_mean;
    model->trees_.resize(static_cast<size_t>(nq));
    Rng rng(mix_seed(opt.seed, 0x7ee5));
    for (int q = 0; q < nq; ++q) {
        const std::vector<int> members =
            detail::pooled_members(spec, q, rec_state, rec_w, opt.pool_threshold);
        int c0 = 0, c1 = 0;
        for (int i : members) (rec_w[static_cast<size_t>(i)] == 1 ? c1 : c0)++;
        model->trees_[static_cast<size_t>(q)] =
            detail::grow_honest_tree(X, y, rec_w, d, members, opt, rng);
        for (int w = 0; w < 2; ++w)
            if ((w == 1 ? c1 : c0) == 0 && spec.arrivals_possible(q))
                warnings.push_back("state " + spec.state_label(q) + ": arm " + std::to_string(w) +
                                   " unobserved anywhere; using global mean");
    }
    model->fit_warnings = std::move(warnings);
    return model;
}

// Factory for serialized models.
inline CadeModelPtr cade_model_from_json(const nlohmann::json& j) {
    const std::string est = j.at("estimator").get<std::string>();
    if (est == "oracle")
        return std::make_shared<OracleCadeModel>(j.at("spec").get<SystemSpec>(),
                                                 j.value("bias", 0.0));
    if (est == "knn") return KnnTLearner::from_json(j);
    if (est == "honest_tree") return HonestTreeTLearner::from_json(j);
    throw std::invalid_argument("unknown serialized estimator '" + est + "'");
}

}  // namespace statewise
