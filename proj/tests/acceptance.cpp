// Acceptance gate: one line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "harness.hpp"
#include "quant2pc/executor.hpp"
#include "quant2pc/graph.hpp"
#include "quant2pc/planner.hpp"

using namespace quant2pc;
using q2t::run2;
using q2t::TwoPartyRun;

namespace {

int g_failures = 0;

void report(int idx, const char* name, bool ok) {
    std::printf("criterion %d (%s): %s\n", idx, name, ok ? "PASS" : "FAIL");
    if (!ok) ++g_failures;
}

RingTensor tensor_of(const std::vector<uint64_t>& vals, QuantMeta m) {
    RingTensor t({vals.size()}, m);
    for (size_t i = 0; i < vals.size(); ++i) t.set(i, vals[i]);
    return t;
}

RingTensor random_tensor(std::mt19937_64& rng, Shape shape, QuantMeta m) {
    RingTensor t(std::move(shape), m);
    for (size_t i = 0; i < t.numel(); ++i) t.set(i, rng());
    return t;
}

struct GraphRun {
    RingTensor out;
    std::map<std::string, LabelStat> labels;
    uint64_t payload = 0;

    uint64_t group_bytes(const std::vector<std::string>& names) const {
        uint64_t n = 0;
        for (const auto& l : names) {
            auto it = labels.find(l);
            if (it != labels.end()) n += it->second.bytes;
        }
        return n;
    }
    uint64_t prefix_bytes(const std::string& p) const {
        uint64_t n = 0;
        for (const auto& [k, v] : labels)
            if (k.rfind(p, 0) == 0) n += v.bytes;
        return n;
    }
};

GraphRun secure_graph(const Graph& g, const RingTensor& input, uint64_t seed,
                      ExecOptions opt = {}) {
    std::mt19937_64 rng(seed);
    auto [xs, xc] = share(input, rng);
    TwoPartyRun r = run2(xs, xc, [&](OtSession& ot, const Share& x) {
        return run_graph_secure(ot, g, x, opt).output;
    });
    return GraphRun{r.value(), r.labels, r.payload_bytes};
}

std::string graph_path(const std::string& name) {
    return std::string(Q2PC_GRAPH_DIR) + "/" + name;
}

// ---------------------------------------------------------------------------
// 1. randomized error-free check of the four base protocols at widths 2..32

bool crit1() {
    std::mt19937_64 rng(0x101);
    const size_t batch = 250;
    const int rounds = 40;  // 40 * 250 = 10^4 cases per protocol
    bool ok = true;

    auto values = [&](int l) {
        std::vector<uint64_t> v(batch);
        for (auto& x : v) x = rng() & ring_mask(l);
        return v;
    };
    auto check = [&](const Share& a, const Share& b,
                     const std::function<Share(OtSession&, const Share&)>& fn,
                     const std::function<uint64_t(uint64_t)>& oracle,
                     const std::vector<uint64_t>& xs) {
        RingTensor got = run2(a, b, fn).value();
        for (size_t i = 0; i < xs.size(); ++i) ok = ok && got.at(i) == oracle(xs[i]);
    };

    for (int it = 0; it < rounds; ++it) {
        // extension
        {
            int l1 = 2 + int(rng() % 30);  // 2..31
            int l2 = l1 + 1 + int(rng() % (32 - l1));
            auto xs = values(l1);
            auto [a, b] = share(tensor_of(xs, {l1, 0, true}), rng);
            check(a, b, [&](OtSession& ot, const Share& x) { return ext(ot, x, l2); },
                  [&](uint64_t x) { return from_signed(to_signed(x, l1), l2); }, xs);
        }
        // truncation (arithmetic shift, width kept)
        {
            int l = 2 + int(rng() % 31);  // 2..32
            int s = 1 + int(rng() % (l - 1));
            auto xs = values(l);
            auto [a, b] = share(tensor_of(xs, {l, 0, true}), rng);
            check(a, b, [&](OtSession& ot, const Share& x) { return trunc(ot, x, s); },
                  [&](uint64_t x) { return arith_shift_right(x, l, s); }, xs);
        }
        // truncate-and-reduce
        {
            int l = 2 + int(rng() % 31);
            int k = 1 + int(rng() % (l - 1));
            auto xs = values(l);
            auto [a, b] = share(tensor_of(xs, {l, 0, true}), rng);
            check(a, b, [&](OtSession& ot, const Share& x) { return trunc_reduce(ot, x, k); },
                  [&](uint64_t x) { return ring_reduce(arith_shift_right(x, l, k), l - k); }, xs);
        }
        // re-quantization
        {
            int l1 = 2 + int(rng() % 31), l2 = 2 + int(rng() % 31);
            int s1 = int(rng() % 9), s2 = int(rng() % 9);
            QuantMeta to{l2, s2, true};
            auto xs = values(l1);
            auto [a, b] = share(tensor_of(xs, {l1, s1, true}), rng);
            check(a, b, [&](OtSession& ot, const Share& x) { return requant(ot, x, to); },
                  [&](uint64_t x) { return requant_scalar(x, l1, s1, l2, s2); }, xs);
        }
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 2. exhaustive re-quantization vs the scalar oracle

bool crit2() {
    std::mt19937_64 rng(0x202);
    bool ok = true;
    for (int l1 = 2; l1 <= 8 && ok; ++l1)
        for (int s1 = 0; s1 <= 8 && ok; ++s1)
            for (int l2 = 2; l2 <= 8 && ok; ++l2)
                for (int s2 = 0; s2 <= 8 && ok; ++s2) {
                    std::vector<uint64_t> xs(size_t(1) << l1);
                    for (size_t i = 0; i < xs.size(); ++i) xs[i] = i;
                    auto [a, b] = share(tensor_of(xs, {l1, s1, true}), rng);
                    QuantMeta to{l2, s2, true};
                    RingTensor got =
                        run2(a, b, [&](OtSession& ot, const Share& x) { return requant(ot, x, to); })
                            .value();
                    for (size_t i = 0; i < xs.size(); ++i)
                        ok = ok && got.at(i) == requant_scalar(xs[i], l1, s1, l2, s2);
                }
    return ok;
}

// ---------------------------------------------------------------------------
// 3. four-variant matmul equivalence + exact OT counting on the fixed variant

bool crit3() {
    std::mt19937_64 rng(0x303);
    bool ok = true;
    for (int it = 0; it < 500 && ok; ++it) {
        size_t d1 = 1 + rng() % 8, d2 = 1 + rng() % 8, d3 = 1 + rng() % 8;
        int l1 = 1 + int(rng() % 8), l2 = 1 + int(rng() % 8);
        RingTensor W = random_tensor(rng, {d1, d2}, {l1, 0, true});
        RingTensor X = random_tensor(rng, {d2, d3}, {l2, 0, true});
        RingTensor Wzero({d1, d2}, W.meta());
        RingTensor want = matmul_plain(W, X);
        for (int v = 1; v <= 4; ++v) {
            auto [a, b] = share(X, rng);
            TwoPartyRun r = run2(a, b, [&](OtSession& ot, const Share& x) {
                return secure_matmul(ot, ot.channel().party() == Party::Server ? W : Wzero, x, v);
            });
            RingTensor got = r.value();
            ok = ok && got.shape() == want.shape();
            for (size_t i = 0; ok && i < got.numel(); ++i) ok = got.at(i) == want.at(i);
            if (v == 4) {
                auto mm = r.labels.find("mm.ot");
                ok = ok && mm != r.labels.end() &&
                     mm->second.ot_instances == uint64_t(d1) * d2 * uint64_t(l1);
            }
        }
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 4. adaptive variant choice dominates the fixed lowering on conv shapes

bool crit4() {
    struct ShapeSpec {
        int res, ch, k;
    };
    const ShapeSpec shapes[] = {{14, 16, 3}, {7, 32, 3}, {4, 64, 3}, {2, 128, 3}, {2, 128, 1}};
    bool ok = true;
    int strict = 0, total = 0;
    double log_sum = 0;
    for (const auto& s : shapes)
        for (int ab : {4, 6, 8}) {
            char buf[768];
            std::snprintf(buf, sizeof buf, R"(
graph shape
seed 5
act bits=%d scale=1
layer id=0 type=input channels=%d height=%d width=%d
layer id=1 type=conv in=0 out_channels=%d kernel=%d stride=1 pad=%d weight_bits=2 weight_scale=1
layer id=2 type=output in=1
)",
                          ab, s.ch, s.res, s.res, s.ch, s.k, s.k / 2);
            Graph g = load_graph_text(buf);
            propagate_signs(g);
            RingTensor input = make_input(g, 7);
            uint64_t adaptive = secure_graph(g, input, 7, ExecOptions{0}).prefix_bytes("mm.");
            uint64_t fixed = secure_graph(g, input, 7, ExecOptions{4}).prefix_bytes("mm.");
            ok = ok && adaptive <= fixed;
            if (adaptive < fixed) ++strict;
            ++total;
            log_sum += std::log(double(fixed) / double(adaptive));
        }
    double geomean = std::exp(log_sum / total);
    return ok && strict >= 10 && geomean >= 1.2;
}

// ---------------------------------------------------------------------------
// 5. simplified residual halves the residual-path bytes, bit-exactly

bool crit5() {
    const std::vector<std::string> residual_path = {"requant", "ext", "tr", "trunc", "wrap"};
    Graph baseline = load_graph_file(graph_path("residual_micro.cfg"));
    propagate_signs(baseline);
    Graph simplified = load_graph_file(graph_path("residual_micro.cfg"));
    PassReport pr = lower_residual_simplified(simplified);
    propagate_signs(simplified);
    if (pr.rewrites < 1) return false;

    RingTensor input = make_input(baseline, 13);
    RingTensor oracle = run_graph_plain(baseline, input);
    GraphRun rb = secure_graph(baseline, input, 13);
    GraphRun rs = secure_graph(simplified, input, 13);
    bool exact = rb.out.same_values(oracle) && rs.out.same_values(oracle);
    uint64_t base_bytes = rb.group_bytes(residual_path);
    uint64_t simp_bytes = rs.group_bytes(residual_path);
    return exact && simp_bytes * 2 <= base_bytes;
}

// ---------------------------------------------------------------------------
// 6. fusion rewrites: exhaustive value equivalence + measured reductions

bool crit6() {
    std::mt19937_64 rng(0x606);
    bool ok = true;

    // two chained extensions equal one, for every width triple and value
    for (int l1 = 2; l1 <= 6 && ok; ++l1)
        for (int l2 = l1 + 1; l2 <= 7 && ok; ++l2)
            for (int l3 = l2 + 1; l3 <= 8 && ok; ++l3) {
                std::vector<uint64_t> xs(size_t(1) << l1);
                for (size_t i = 0; i < xs.size(); ++i) xs[i] = i;
                auto [a1, b1] = share(tensor_of(xs, {l1, 0, true}), rng);
                RingTensor chained = run2(a1, b1, [&](OtSession& ot, const Share& x) {
                                         return ext(ot, ext(ot, x, l2), l3);
                                     }).value();
                auto [a2, b2] = share(tensor_of(xs, {l1, 0, true}), rng);
                RingTensor fused =
                    run2(a2, b2, [&](OtSession& ot, const Share& x) { return ext(ot, x, l3); })
                        .value();
                for (size_t i = 0; i < xs.size(); ++i) {
                    uint64_t want = from_signed(to_signed(xs[i], l1), l3);
                    ok = ok && chained.at(i) == want && fused.at(i) == want;
                }
            }

    // truncation followed by extension equals truncate-reduce + extension
    for (int l1 = 2; l1 <= 7 && ok; ++l1)
        for (int s = 1; s <= l1 - 1 && ok; ++s)
            for (int l3 = l1 + 1; l3 <= 8 && ok; ++l3) {
                std::vector<uint64_t> xs(size_t(1) << l1);
                for (size_t i = 0; i < xs.size(); ++i) xs[i] = i;
                auto [a1, b1] = share(tensor_of(xs, {l1, 0, true}), rng);
                RingTensor chained = run2(a1, b1, [&](OtSession& ot, const Share& x) {
                                         return ext(ot, trunc(ot, x, s), l3);
                                     }).value();
                auto [a2, b2] = share(tensor_of(xs, {l1, 0, true}), rng);
                RingTensor fused = run2(a2, b2, [&](OtSession& ot, const Share& x) {
                                       return ext(ot, trunc_reduce(ot, x, s), l3);
                                   }).value();
                for (size_t i = 0; i < xs.size(); ++i) {
                    uint64_t shifted = arith_shift_right(xs[i], l1, s);
                    uint64_t want = from_signed(to_signed(shifted, l1), l3);
                    ok = ok && chained.at(i) == want && fused.at(i) == want;
                }
            }

    // each rewrite strictly cuts measured bytes on the fusion micro-graphs
    for (const char* name : {"fuse_ee.cfg", "fuse_te.cfg"}) {
        Graph before = load_graph_file(graph_path(name));
        Graph after = load_graph_file(graph_path(name));
        PassReport pr = fuse_protocols(after);
        ok = ok && pr.rewrites >= 1;
        RingTensor input = make_input(before, 29);
        RingTensor oracle = run_graph_plain(before, input);
        GraphRun r0 = secure_graph(before, input, 29);
        GraphRun r1 = secure_graph(after, input, 29);
        ok = ok && r0.out.same_values(oracle) && r1.out.same_values(oracle);
        ok = ok && r1.payload < r0.payload;
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 7. whole-block ablation ratio on the stage-3 block

bool crit7() {
    Graph all_off = load_graph_file(graph_path("resnet32_block3.cfg"));
    clear_signs(all_off);
    Graph all_on = load_graph_file(graph_path("resnet32_block3.cfg"));
    lower_residual_simplified(all_on);
    propagate_signs(all_on);
    fuse_protocols(all_on);

    RingTensor input = make_input(all_off, 31);
    RingTensor oracle = run_graph_plain(all_off, input);
    GraphRun off = secure_graph(all_off, input, 31, ExecOptions{4});
    GraphRun on = secure_graph(all_on, input, 31, ExecOptions{0});
    if (!off.out.same_values(oracle) || !on.out.same_values(oracle)) return false;
    double ratio = double(off.payload) / double(on.payload);
    return ratio >= 1.8 && ratio <= 3.2;
}

// ---------------------------------------------------------------------------
// 8. planner: exact DP vs exhaustive search, monotone in the budget

bool crit8() {
    std::mt19937_64 rng(0x808);
    constexpr uint64_t G = kPlanGranularityBits;
    bool ok = true;
    for (int t = 0; t < 100 && ok; ++t) {
        std::vector<PlanItem> items(1 + rng() % 8);
        int layer = 0;
        for (auto& it : items) {
            it.layer_id = layer++;
            for (int b : {2, 3, 4, 5}) {
                it.bits.push_back(b);
                it.comm.push_back(rng() % (50 * G));
                it.omega.push_back(double(rng() % 1000));
            }
        }
        uint64_t min_total = 0, max_total = 0;
        for (const auto& it : items) {
            min_total += *std::min_element(it.comm.begin(), it.comm.end());
            max_total += *std::max_element(it.comm.begin(), it.comm.end());
        }
        uint64_t limit = min_total / 2 + rng() % (max_total + 1);
        QuantPlan dp = solve_plan(items, limit);
        QuantPlan bf = brute_force_plan(items, limit);
        ok = ok && dp.feasible == bf.feasible &&
             dp.min_achievable_bits == bf.min_achievable_bits;
        if (dp.feasible && ok) {
            ok = dp.total_omega == bf.total_omega && dp.total_comm_bits == bf.total_comm_bits &&
                 dp.entries.size() == bf.entries.size();
            for (size_t i = 0; ok && i < dp.entries.size(); ++i)
                ok = dp.entries[i].weight_bits == bf.entries[i].weight_bits;
        }
        QuantPlan relaxed = solve_plan(items, limit + G + rng() % (4 * (max_total + 1)));
        if (dp.feasible) ok = ok && relaxed.feasible && relaxed.total_omega <= dp.total_omega;
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 9. end-to-end small net over TCP loopback under a planned assignment

bool crit9() {
    Graph g = load_graph_file(graph_path("minionn8.cfg"));
    SensitivityTable sens = make_synthetic_sensitivity(g, {2, 3, 4, 5}, 17);
    std::vector<PlanItem> items = plan_items_for(g, sens);
    uint64_t min_total = 0;
    for (const auto& it : items) min_total += *std::min_element(it.comm.begin(), it.comm.end());
    QuantPlan plan = solve_plan(items, min_total + min_total / 4, g.act_bits);
    if (!plan.feasible) return false;
    for (const auto& e : plan.entries)
        if (e.weight_bits < 2 || e.weight_bits > 5 || e.act_bits != 4) return false;
    apply_plan(g, plan);
    lower_residual_simplified(g);
    propagate_signs(g);
    fuse_protocols(g);

    const uint64_t seed = 37;
    RingTensor input = make_input(g, seed);
    std::mt19937_64 rng(seed);
    auto [xs, xc] = share(input, rng);

    const std::string addr = "127.0.0.1:49417";
    Share server_out, client_out;
    std::map<std::string, LabelStat> labels;
    std::exception_ptr err;
    std::thread th([&] {
        try {
            auto ch = open_tcp_listen(addr);
            OtSession ot(*ch, seed + 1);
            server_out = run_graph_secure(ot, g, xs).output;
        } catch (...) {
            err = std::current_exception();
        }
    });
    try {
        auto ch = open_tcp_connect(addr);
        OtSession ot(*ch, seed + 2);
        client_out = run_graph_secure(ot, g, xc).output;
        labels = ch->meter().by_label();  // tcp meters mirror inbound traffic
    } catch (...) {
        th.join();
        return false;
    }
    th.join();
    if (err) return false;

    RingTensor logits = reconstruct(server_out, client_out);
    if (!logits.same_values(run_graph_plain(g, input))) return false;

    GraphEstimate est = estimate_graph_comm(g, EstimateOptions{true, 0});
    for (const std::string& label : {std::string("mm.ot"), std::string("ot")}) {
        auto it = labels.find(label);
        if (it == labels.end()) return false;
        double measured = double(it->second.bytes) * 8;
        double predicted = double(est.label_bits.at(label));
        if (std::abs(measured - predicted) > 0.10 * predicted) return false;
    }
    return true;
}

}  // namespace

int main() {
    report(1, "error-free base protocols at widths 2..32", crit1());
    report(2, "exhaustive re-quantization vs scalar oracle", crit2());
    report(3, "matmul variant equivalence and exact OT counts", crit3());
    report(4, "adaptive variant choice dominates the fixed lowering", crit4());
    report(5, "simplified residual halves the residual-path bytes", crit5());
    report(6, "fusion rewrites: value-equivalent and strictly cheaper", crit6());
    report(7, "whole-block ablation ratio within bounds", crit7());
    report(8, "planner DP exact vs brute force, monotone in budget", crit8());
    report(9, "end-to-end TCP run under a planned assignment", crit9());
    return g_failures == 0 ? 0 : 1;
}
