#ifndef QUANT2PC_EXECUTOR_HPP_
#define QUANT2PC_EXECUTOR_HPP_

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "quant2pc/graph.hpp"
#include "quant2pc/matmul.hpp"
#include "quant2pc/ot.hpp"
#include "quant2pc/primitives.hpp"

// Secure graph interpreter: walks the IR on additive shares, both roles
// running the same code. Non-linear layers (ReLU, pools) are built from
// the carry/mux primitives. A run trace keeps every node's output share
// so tests can reconstruct intermediates against the plaintext oracle.

namespace quant2pc {

// y = (1 - msb(x)) * x. The sign bit is XOR-shared via the carry of the
// low l-1 bits; the multiplexer is one OT in each direction with l-bit
// messages: t = (1 ^ s_mine ^ s_theirs ? x_mine : 0) - r.
inline Share secure_relu(OtSession& ot, const Share& x, const std::string& mux_label = "ot",
                         const std::string& wrap_label = "relu") {
    Channel& ch = ot.channel();
    if (x.party != ch.party()) throw std::invalid_argument("relu: share/channel party mismatch");
    const int l = x.bits();
    const size_t n = x.numel();
    const auto& xs = x.tensor.data();

    auto s = carry_xor(ot, xs, l - 1, wrap_label);
    for (size_t t = 0; t < n; ++t) s[t] ^= uint8_t((xs[t] >> (l - 1)) & 1);

    LabelScope scope(ch, mux_label);
    OtBatchParams p{n, l, 1, SecurityParam{}};
    const uint64_t mask = ring_mask(l);
    RingTensor y(x.tensor.shape(), x.meta());
    std::vector<uint64_t> m0(n), m1(n), r(n);
    if (ch.party() == Party::Server) {
        for (size_t t = 0; t < n; ++t) {
            r[t] = ot.rng()() & mask;
            m0[t] = (((1 ^ s[t]) ? xs[t] : 0) - r[t]) & mask;
            m1[t] = (((1 ^ s[t] ^ 1) ? xs[t] : 0) - r[t]) & mask;
        }
        ot.send(p, m0, m1);
        auto t0 = ot.receive(p, s);
        for (size_t t = 0; t < n; ++t) y.set(t, r[t] + t0[t]);
    } else {
        auto t1 = ot.receive(p, s);
        for (size_t t = 0; t < n; ++t) {
            r[t] = ot.rng()() & mask;
            m0[t] = (((1 ^ s[t]) ? xs[t] : 0) - r[t]) & mask;
            m1[t] = (((1 ^ s[t] ^ 1) ? xs[t] : 0) - r[t]) & mask;
        }
        ot.send(p, m0, m1);
        for (size_t t = 0; t < n; ++t) y.set(t, r[t] + t1[t]);
    }
    return Share{std::move(y), x.party, SignFact::NonNegative};
}

namespace detail {

// Pairwise signed max on same-meta shares: widen by one bit, then
// max(a,b) = b + relu(a-b). Widening stays on the generic path so the
// cost does not depend on runtime sign facts.
inline Share secure_max_pair(OtSession& ot, const Share& a, const Share& b,
                             const std::string& label) {
    const int l = a.bits();
    Share ag{a.tensor, a.party, SignFact::Unknown};
    Share bg{b.tensor, b.party, SignFact::Unknown};
    Share ae = ext(ot, ag, l + 1, label, label);
    Share be = ext(ot, bg, l + 1, label, label);
    RingTensor d(ae.tensor.shape(), ae.meta());
    for (size_t i = 0; i < d.numel(); ++i) d.set(i, ae.tensor.at(i) - be.tensor.at(i));
    Share r = secure_relu(ot, Share{std::move(d), a.party, SignFact::Unknown}, label, label);
    RingTensor y(a.tensor.shape(), a.meta());
    for (size_t i = 0; i < y.numel(); ++i) y.set(i, be.tensor.at(i) + r.tensor.at(i));
    return Share{std::move(y), a.party, SignFact::Unknown};
}

// Gather the j-th window element of every output position (local).
inline RingTensor pool_gather(const RingTensor& x, const ConvGeometry& g, size_t ky, size_t kx) {
    const size_t oh = g.out_h(), ow = g.out_w(), C = g.in_channels;
    RingTensor out({C, oh, ow}, x.meta());
    for (size_t c = 0; c < C; ++c)
        for (size_t oy = 0; oy < oh; ++oy)
            for (size_t ox = 0; ox < ow; ++ox) {
                size_t iy = oy * g.stride + ky, ix = ox * g.stride + kx;
                out.set((c * oh + oy) * ow + ox, x.at((c * g.in_h + iy) * g.in_w + ix));
            }
    return out;
}

}  // namespace detail

// Window mean: widen to cover the window sum, local sum, floor divide by
// the (power-of-two) window via truncate-reduce. The output keeps the
// input's quantization meta: the shift divides the value, not the scale.
inline Share secure_avgpool(OtSession& ot, const Share& x, const ConvGeometry& g) {
    const int l = x.bits();
    const int pad_bits = 2 * ceil_log2(g.kernel);
    Share xe = ext(ot, x, l + pad_bits);
    RingTensor sum({g.in_channels, g.out_h(), g.out_w()}, xe.meta());
    for (size_t ky = 0; ky < g.kernel; ++ky)
        for (size_t kx = 0; kx < g.kernel; ++kx) {
            RingTensor v = detail::pool_gather(xe.tensor, g, ky, kx);
            for (size_t i = 0; i < sum.numel(); ++i) sum.set(i, sum.at(i) + v.at(i));
        }
    Share t = trunc_reduce(ot, Share{std::move(sum), x.party, xe.sign_fact}, pad_bits);
    RingTensor y(t.tensor.shape(), x.meta(), t.tensor.data());
    return Share{std::move(y), x.party, t.sign_fact};
}

inline Share secure_maxpool(OtSession& ot, const Share& x, const ConvGeometry& g,
                            const std::string& label = "mp") {
    Share cur;
    bool first = true;
    for (size_t ky = 0; ky < g.kernel; ++ky)
        for (size_t kx = 0; kx < g.kernel; ++kx) {
            Share v{detail::pool_gather(x.tensor, g, ky, kx), x.party, SignFact::Unknown};
            if (first) {
                cur = std::move(v);
                first = false;
            } else {
                cur = detail::secure_max_pair(ot, cur, v, label);
            }
        }
    cur.sign_fact = x.sign_fact;
    return cur;
}

// ---------------------------------------------------------------------------
// Graph interpreter

struct ExecOptions {
    int forced_variant = 0;  // 0 = adaptive matmul variant selection
    bool keep_trace = false;
};

struct ExecTrace {
    Share output;
    std::vector<Share> node_out;  // populated when keep_trace is set
    std::vector<int> node_variant;
};

inline ExecTrace run_graph_secure(OtSession& ot, const Graph& g, const Share& input,
                                  ExecOptions opt = {}) {
    Channel& ch = ot.channel();
    const Party me = ch.party();
    std::vector<Share> vals(g.nodes.size());
    ExecTrace trace;
    trace.node_variant.assign(g.nodes.size(), 0);

    // every edge carries the graph's annotated sign fact, so protocol
    // choices match the estimator regardless of what a prior op learned
    auto annotated = [&](int id) {
        Share s = vals[size_t(id)];
        s.sign_fact = g.node(id).sign;
        return s;
    };

    for (const auto& n : g.nodes) {
        Share out;
        switch (n.op) {
            case OpKind::Input:
                if (input.tensor.shape() != n.out_shape || !(input.meta() == g.act_meta()))
                    throw std::invalid_argument("run_graph_secure: input meta/shape mismatch");
                out = input;
                break;
            case OpKind::Conv:
            case OpKind::FC: {
                MatmulDims d = matmul_dims_for(g, n);
                RingTensor w = me == Party::Server
                                   ? make_weights(g, n)
                                   : RingTensor({d.d1, d.d2},
                                                QuantMeta{n.weight_bits, n.weight_scale, true});
                Share x = annotated(n.inputs[0]);
                int v = opt.forced_variant;
                if (n.op == OpKind::Conv) {
                    out = secure_conv(ot, w, x, n.geom, v, n.out_bits_override);
                } else {
                    RingTensor col({x.numel(), 1}, x.meta(), x.tensor.data());
                    out = secure_matmul(ot, w, Share{std::move(col), me, x.sign_fact}, v,
                                        n.out_bits_override);
                    RingTensor shaped(n.out_shape, out.meta(), out.tensor.data());
                    out = Share{std::move(shaped), me, out.sign_fact};
                }
                trace.node_variant[size_t(n.id)] =
                    v ? v : select_variant(d, SecurityParam{}.lambda,
                                           x.sign_fact == SignFact::NonNegative,
                                           n.out_bits_override)
                               .variant;
                break;
            }
            case OpKind::ReLU:
                out = secure_relu(ot, annotated(n.inputs[0]));
                break;
            case OpKind::ResidualAdd: {
                const Share& a = vals[n.inputs[0]];
                const Share& b = vals[n.inputs[1]];
                RingTensor y(a.tensor.shape(), a.meta());
                for (size_t i = 0; i < y.numel(); ++i) y.set(i, a.tensor.at(i) + b.tensor.at(i));
                out = Share{std::move(y), me, SignFact::Unknown};
                break;
            }
            case OpKind::AvgPool:
                out = secure_avgpool(ot, annotated(n.inputs[0]), n.geom);
                break;
            case OpKind::MaxPool:
                out = secure_maxpool(ot, annotated(n.inputs[0]), n.geom);
                break;
            case OpKind::Requant:
                out = requant(ot, annotated(n.inputs[0]), n.target);
                break;
            case OpKind::Ext:
                out = ext(ot, annotated(n.inputs[0]), n.out_meta.bits);
                break;
            case OpKind::Trunc:
                out = trunc(ot, annotated(n.inputs[0]), n.shift);
                break;
            case OpKind::TR:
                out = trunc_reduce(ot, annotated(n.inputs[0]), n.shift);
                break;
            case OpKind::Output:
                out = vals[n.inputs[0]];
                break;
        }
        if (out.bits() != n.out_meta.bits)
            throw std::runtime_error("run_graph_secure: width mismatch at node " +
                                     std::to_string(n.id));
        // normalize bookkeeping to the inferred meta (scale conventions of
        // pooling differ from the raw shift primitives)
        out.tensor = RingTensor(out.tensor.shape(), n.out_meta, out.tensor.data());
        out.sign_fact = n.sign;
        vals[size_t(n.id)] = std::move(out);
        if (opt.keep_trace) trace.node_out.push_back(vals[size_t(n.id)]);
    }
    trace.output = vals[size_t(g.output_id())];
    return trace;
}

// ---------------------------------------------------------------------------
// Run report (structured text, stable key order)

struct RunReport {
    std::string graph_name;
    uint64_t seed = 0;
    bool bit_exact = false;
    uint64_t payload_bytes = 0;
    uint64_t rounds = 0;
    uint64_t predicted_total_bits = 0;
    // label -> {measured_bits, predicted_bits, ot_instances}
    struct LabelRow {
        uint64_t measured_bits = 0;
        uint64_t predicted_bits = 0;
        uint64_t ot_instances = 0;
    };
    std::map<std::string, LabelRow> labels;
    struct NodeRow {
        int id = 0;
        std::string op;
        int variant = 0;
        uint64_t predicted_bits = 0;
    };
    std::vector<NodeRow> nodes;

    std::string render() const {
        std::ostringstream o;
        o << "report graph=" << graph_name << " seed=" << seed << "\n";
        o << "verdict " << (bit_exact ? "bit-exact PASS" : "MISMATCH") << "\n";
        o << "total payload_bytes=" << payload_bytes << " rounds=" << rounds
          << " predicted_bits=" << predicted_total_bits << "\n";
        for (const auto& [k, v] : labels)
            o << "label " << k << " measured_bits=" << v.measured_bits
              << " predicted_bits=" << v.predicted_bits << " ot_instances=" << v.ot_instances
              << "\n";
        for (const auto& n : nodes)
            o << "node id=" << n.id << " op=" << n.op << " variant=" << n.variant
              << " predicted_bits=" << n.predicted_bits << "\n";
        return o.str();
    }
};

inline RunReport make_run_report(const Graph& g, const GraphEstimate& est, const CommMeter& m,
                                 bool bit_exact, uint64_t seed) {
    RunReport r;
    r.graph_name = g.name;
    r.seed = seed;
    r.bit_exact = bit_exact;
    r.payload_bytes = m.payload_bytes() - m.label_bytes("ot.setup");
    r.rounds = m.rounds();
    r.predicted_total_bits = est.total_bits;
    for (const auto& [label, st] : m.by_label()) {
        if (label == "__framing" || label == "ot.setup" || label == "default") continue;
        auto& row = r.labels[label];
        row.measured_bits = st.bytes * 8;
        row.ot_instances = st.ot_instances;
    }
    for (const auto& [label, bits] : est.label_bits) r.labels[label].predicted_bits = bits;
    for (const auto& n : g.nodes) {
        if (est.node_bits[size_t(n.id)] == 0 && n.op != OpKind::Conv && n.op != OpKind::FC)
            continue;
        r.nodes.push_back({n.id, op_name(n.op), est.node_variant[size_t(n.id)],
                           est.node_bits[size_t(n.id)]});
    }
    return r;
}

}  // namespace quant2pc

#endif  // QUANT2PC_EXECUTOR_HPP_
