#ifndef QUANT2PC_PLANNER_HPP_
#define QUANT2PC_PLANNER_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "quant2pc/graph.hpp"

// Communication-aware weight bit-width allocation: one candidate width per
// weight-bearing layer, minimizing total sensitivity (perturbation) under
// a communication budget -- a multiple-choice knapsack, solved exactly by
// dynamic programming over discretized communication.

namespace quant2pc {

struct SensitivityTable {
    // layer_id -> candidate weight bits -> omega (non-negative)
    std::map<int, std::map<int, double>> omega;

    std::string serialize() const {
        std::ostringstream o;
        o << std::setprecision(std::numeric_limits<double>::max_digits10);
        for (const auto& [layer, row] : omega)
            for (const auto& [bits, w] : row)
                o << "sens layer=" << layer << " bits=" << bits << " omega=" << w << "\n";
        return o.str();
    }

    static SensitivityTable parse(const std::string& text) {
        SensitivityTable t;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            auto h = line.find('#');
            if (h != std::string::npos) line = line.substr(0, h);
            std::istringstream ss(line);
            std::string word;
            if (!(ss >> word)) continue;
            if (word != "sens") throw std::runtime_error("sensitivity file: unknown directive " + word);
            auto kv = detail::parse_kv(ss);
            t.omega[int(detail::kv_num(kv, "layer"))][int(detail::kv_num(kv, "bits"))] =
                std::stod(kv.at("omega"));
        }
        return t;
    }

    static SensitivityTable load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open sensitivity file: " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }
};

// Seeded synthetic sensitivities for testing: larger layers and narrower
// widths perturb more; strictly decreasing in the bit-width.
inline SensitivityTable make_synthetic_sensitivity(const Graph& g,
                                                   const std::vector<int>& candidates,
                                                   uint64_t seed) {
    SensitivityTable t;
    uint64_t s = seed ^ 0xa0761d6478bd642fULL;
    for (const auto& n : g.nodes) {
        if (n.op != OpKind::Conv && n.op != OpKind::FC) continue;
        MatmulDims d = matmul_dims_for(g, n);
        double base = double(d.d1 * d.d2);
        double jitter = 0.5 + double(splitmix64(s) % 1000) / 1000.0;
        for (int b : candidates)
            t.omega[n.layer_id][b] = base * jitter * std::pow(2.0, -2.0 * b);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Per-layer communication under a candidate weight width

inline std::vector<int> weight_layer_ids(const Graph& g) {
    std::vector<int> ids;
    for (const auto& n : g.nodes)
        if (n.op == OpKind::Conv || n.op == OpKind::FC) ids.push_back(n.layer_id);
    return ids;
}

inline void set_layer_weight_bits(Graph& g, int layer_id, int weight_bits) {
    bool found = false;
    for (auto& n : g.nodes)
        if (n.layer_id == layer_id && (n.op == OpKind::Conv || n.op == OpKind::FC)) {
            n.weight_bits = weight_bits;
            found = true;
        }
    if (!found) throw std::invalid_argument("set_layer_weight_bits: no such layer");
    infer_meta(g);
    propagate_signs(g);
}

// Total predicted bits of the nodes lowered from `layer_id` (the matmul
// plus its own re-quantization) with the layer's weights at `weight_bits`.
inline uint64_t layer_comm(const Graph& g, int layer_id, int weight_bits,
                           EstimateOptions opt = {}) {
    Graph h = g;
    set_layer_weight_bits(h, layer_id, weight_bits);
    GraphEstimate est = estimate_graph_comm(h, opt);
    uint64_t bits = 0;
    for (const auto& n : h.nodes)
        if (n.layer_id == layer_id) bits += est.node_bits[size_t(n.id)];
    return bits;
}

// ---------------------------------------------------------------------------
// Multiple-choice knapsack

struct PlanItem {
    int layer_id = 0;
    std::vector<int> bits;        // candidate widths
    std::vector<uint64_t> comm;   // bits of communication per candidate
    std::vector<double> omega;    // perturbation per candidate
};

struct PlanEntry {
    int layer_id = 0;
    int weight_bits = 0;
    int act_bits = 0;
    uint64_t predicted_bits = 0;
};

struct QuantPlan {
    bool feasible = false;
    std::vector<PlanEntry> entries;
    uint64_t total_comm_bits = 0;
    double total_omega = 0.0;
    uint64_t min_achievable_bits = 0;  // set when infeasible

    std::string serialize() const {
        std::ostringstream o;
        o << std::setprecision(std::numeric_limits<double>::max_digits10);
        o << "plan feasible=" << (feasible ? 1 : 0) << " total_bits=" << total_comm_bits
          << " omega=" << total_omega << " min_achievable_bits=" << min_achievable_bits << "\n";
        for (const auto& e : entries)
            o << "choice layer=" << e.layer_id << " weight_bits=" << e.weight_bits
              << " act_bits=" << e.act_bits << " predicted_bits=" << e.predicted_bits << "\n";
        return o.str();
    }

    static QuantPlan parse(const std::string& text) {
        QuantPlan p;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            std::istringstream ss(line);
            std::string word;
            if (!(ss >> word)) continue;
            auto kv = detail::parse_kv(ss);
            if (word == "plan") {
                p.feasible = detail::kv_num(kv, "feasible") != 0;
                p.total_comm_bits = uint64_t(detail::kv_num(kv, "total_bits"));
                p.total_omega = std::stod(kv.at("omega"));
                p.min_achievable_bits = uint64_t(detail::kv_num(kv, "min_achievable_bits"));
            } else if (word == "choice") {
                p.entries.push_back(PlanEntry{int(detail::kv_num(kv, "layer")),
                                              int(detail::kv_num(kv, "weight_bits")),
                                              int(detail::kv_num(kv, "act_bits")),
                                              uint64_t(detail::kv_num(kv, "predicted_bits"))});
            } else {
                throw std::runtime_error("plan file: unknown directive " + word);
            }
        }
        return p;
    }

    static QuantPlan load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open plan file: " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }
};

inline constexpr uint64_t kPlanGranularityBits = 8 * 1024 * 8;  // 1 KiB

// Exact DP over budget cells. Ties broken by lower true communication,
// then by preferring the wider candidate at the earliest layer.
inline QuantPlan solve_plan(const std::vector<PlanItem>& items, uint64_t limit_bits,
                            int act_bits = 0, uint64_t granularity = kPlanGranularityBits) {
    if (granularity == 0) throw std::invalid_argument("solve_plan: zero granularity");
    QuantPlan plan;
    const size_t n = items.size();
    uint64_t min_total = 0;
    for (const auto& it : items) {
        if (it.bits.empty() || it.bits.size() != it.comm.size() ||
            it.bits.size() != it.omega.size())
            throw std::invalid_argument("solve_plan: malformed item");
        min_total += *std::min_element(it.comm.begin(), it.comm.end());
    }
    plan.min_achievable_bits = min_total;
    if (min_total > limit_bits) {
        plan.feasible = false;
        return plan;
    }

    const uint64_t cells64 = limit_bits / granularity;
    if (cells64 > 4'000'000) throw std::invalid_argument("solve_plan: budget grid too fine");
    const size_t B = size_t(cells64);
    auto cell_cost = [&](uint64_t c) { return size_t((c + granularity - 1) / granularity); };

    struct Best {
        double omega = std::numeric_limits<double>::infinity();
        uint64_t comm = std::numeric_limits<uint64_t>::max();
    };
    // suffix DP: best over layers i..n-1 within b cells
    std::vector<std::vector<Best>> dp(n + 1, std::vector<Best>(B + 1));
    for (size_t b = 0; b <= B; ++b) dp[n][b] = Best{0.0, 0};
    for (size_t i = n; i-- > 0;) {
        for (size_t b = 0; b <= B; ++b) {
            Best best;
            for (size_t c = 0; c < items[i].bits.size(); ++c) {
                size_t cc = cell_cost(items[i].comm[c]);
                if (cc > b) continue;
                const Best& rest = dp[i + 1][b - cc];
                if (!std::isfinite(rest.omega)) continue;
                double om = rest.omega + items[i].omega[c];
                uint64_t cm = rest.comm + items[i].comm[c];
                if (om < best.omega || (om == best.omega && cm < best.comm)) best = Best{om, cm};
            }
            dp[i][b] = best;
        }
    }

    if (!std::isfinite(dp[0][B].omega)) {
        // the byte-grid rounding can push a borderline instance over
        plan.feasible = false;
        return plan;
    }

    // walk forward; among optimal candidates prefer the widest
    plan.feasible = true;
    size_t b = B;
    for (size_t i = 0; i < n; ++i) {
        const PlanItem& it = items[i];
        std::vector<size_t> order(it.bits.size());
        for (size_t c = 0; c < order.size(); ++c) order[c] = c;
        std::sort(order.begin(), order.end(),
                  [&](size_t a, size_t c) { return it.bits[a] > it.bits[c]; });
        bool picked = false;
        for (size_t c : order) {
            size_t cc = cell_cost(it.comm[c]);
            if (cc > b) continue;
            const Best& rest = dp[i + 1][b - cc];
            if (!std::isfinite(rest.omega)) continue;
            if (rest.omega + it.omega[c] == dp[i][b].omega &&
                rest.comm + it.comm[c] == dp[i][b].comm) {
                plan.entries.push_back(
                    PlanEntry{it.layer_id, it.bits[c], act_bits, it.comm[c]});
                plan.total_omega += it.omega[c];
                plan.total_comm_bits += it.comm[c];
                b -= cc;
                picked = true;
                break;
            }
        }
        if (!picked) throw std::runtime_error("solve_plan: reconstruction failed");
    }
    return plan;
}

// Exhaustive reference for small instances.
inline QuantPlan brute_force_plan(const std::vector<PlanItem>& items, uint64_t limit_bits,
                                  int act_bits = 0, uint64_t granularity = kPlanGranularityBits) {
    QuantPlan best;
    uint64_t min_total = 0;
    for (const auto& it : items) min_total += *std::min_element(it.comm.begin(), it.comm.end());
    best.min_achievable_bits = min_total;
    if (min_total > limit_bits) return best;

    auto cell = [&](uint64_t c) { return (c + granularity - 1) / granularity; };
    const uint64_t budget_cells = limit_bits / granularity;
    const size_t n = items.size();
    std::vector<size_t> pick(n, 0), cur(n, 0);
    double best_omega = std::numeric_limits<double>::infinity();
    uint64_t best_comm = std::numeric_limits<uint64_t>::max();
    std::vector<int> best_bits, cur_bits(n);

    std::function<void(size_t, uint64_t, double, uint64_t)> rec =
        [&](size_t i, uint64_t cells, double omega, uint64_t comm) {
            if (i == n) {
                if (cells > budget_cells) return;
                bool better = omega < best_omega || (omega == best_omega && comm < best_comm) ||
                              (omega == best_omega && comm == best_comm &&
                               cur_bits > best_bits);
                if (better) {
                    best_omega = omega;
                    best_comm = comm;
                    best_bits = cur_bits;
                    pick = cur;
                }
                return;
            }
            for (size_t c = 0; c < items[i].bits.size(); ++c) {
                cur[i] = c;
                cur_bits[i] = items[i].bits[c];
                rec(i + 1, cells + cell(items[i].comm[c]), omega + items[i].omega[c],
                    comm + items[i].comm[c]);
            }
        };
    rec(0, 0, 0.0, 0);
    if (!std::isfinite(best_omega)) return best;  // infeasible under rounding
    best.feasible = true;
    for (size_t i = 0; i < n; ++i) {
        best.entries.push_back(PlanEntry{items[i].layer_id, items[i].bits[pick[i]], act_bits,
                                         items[i].comm[pick[i]]});
        best.total_omega += items[i].omega[pick[i]];
        best.total_comm_bits += items[i].comm[pick[i]];
    }
    return best;
}

// ---------------------------------------------------------------------------
// Graph-level glue

inline std::vector<PlanItem> plan_items_for(const Graph& g, const SensitivityTable& sens) {
    std::vector<PlanItem> items;
    for (int layer : weight_layer_ids(g)) {
        auto it = sens.omega.find(layer);
        if (it == sens.omega.end())
            throw std::runtime_error("sensitivity table missing layer " + std::to_string(layer));
        PlanItem item;
        item.layer_id = layer;
        for (const auto& [bits, om] : it->second) {
            item.bits.push_back(bits);
            item.comm.push_back(layer_comm(g, layer, bits));
            item.omega.push_back(om);
        }
        items.push_back(std::move(item));
    }
    return items;
}

inline void apply_plan(Graph& g, const QuantPlan& plan) {
    if (!plan.feasible) throw std::invalid_argument("apply_plan: infeasible plan");
    for (const auto& e : plan.entries) {
        if (e.act_bits && e.act_bits != g.act_bits)
            throw std::invalid_argument("apply_plan: activation width mismatch");
        set_layer_weight_bits(g, e.layer_id, e.weight_bits);
    }
}

}  // namespace quant2pc

#endif  // QUANT2PC_PLANNER_HPP_
