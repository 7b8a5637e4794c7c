#ifndef QUANT2PC_GRAPH_HPP_
#define QUANT2PC_GRAPH_HPP_

#include <algorithm>
#include <climits>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "quant2pc/bits.hpp"
#include "quant2pc/matmul.hpp"
#include "quant2pc/primitives.hpp"
#include "quant2pc/ring.hpp"

// Quantized-network IR: a DAG of ops over shared tensors, loaded from a
// small line-based config format, with three optimization passes
// (simplified residual lowering, activation sign propagation, protocol
// fusion) and a whole-graph communication estimator. A plaintext
// reference executor with identical semantics provides the oracle every
// secure run is checked against.

namespace quant2pc {

enum class OpKind {
    Input,
    Output,
    Conv,
    FC,
    ReLU,
    ResidualAdd,
    AvgPool,
    MaxPool,
    Requant,
    Ext,
    Trunc,
    TR
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Output: return "output";
        case OpKind::Conv: return "conv";
        case OpKind::FC: return "fc";
        case OpKind::ReLU: return "relu";
        case OpKind::ResidualAdd: return "add";
        case OpKind::AvgPool: return "avgpool";
        case OpKind::MaxPool: return "maxpool";
        case OpKind::Requant: return "requant";
        case OpKind::Ext: return "ext";
        case OpKind::Trunc: return "trunc";
        case OpKind::TR: return "tr";
    }
    return "?";
}

struct GraphNode {
    int id = 0;
    OpKind op = OpKind::Input;
    std::vector<int> inputs;

    // op attributes
    ConvGeometry geom;                 // conv / pools
    int weight_bits = 0;               // conv/fc
    int weight_scale = 0;              // conv/fc
    size_t out_features = 0;           // fc
    int out_bits_override = 0;         // conv/fc accumulator widening
    QuantMeta target{8, 0, true};      // requant target; ext target bits
    int shift = 0;                     // trunc / tr
    int layer_id = -1;                 // config layer this node came from

    // inferred by infer_meta / propagate_signs
    QuantMeta out_meta{8, 0, true};
    Shape out_shape;
    SignFact sign = SignFact::Unknown;
    int bound_bits = 64;  // value < 2^bound_bits when sign == NonNegative
};

struct Graph {
    std::string name = "g";
    uint64_t seed = 1;
    int lambda = 128;
    int act_bits = 8;
    int act_scale = 0;
    bool signs_propagated = false;
    std::vector<GraphNode> nodes;  // index == id, topologically ordered

    QuantMeta act_meta() const { return QuantMeta{act_bits, act_scale, true}; }
    const GraphNode& node(int id) const { return nodes.at(size_t(id)); }
    GraphNode& node(int id) { return nodes.at(size_t(id)); }
    int output_id() const {
        for (auto& n : nodes)
            if (n.op == OpKind::Output) return n.id;
        throw std::runtime_error("graph: no output node");
    }
};

// ---------------------------------------------------------------------------
// Meta/shape inference

inline MatmulDims matmul_dims_for(const Graph& g, const GraphNode& n) {
    const GraphNode& in = g.node(n.inputs.at(0));
    if (n.op == OpKind::Conv) {
        ConvGeometry geom = n.geom;
        return MatmulDims{geom.out_channels, geom.patch(), geom.out_h() * geom.out_w(),
                          n.weight_bits, in.out_meta.bits};
    }
    return MatmulDims{n.out_features, shape_numel(in.out_shape), 1, n.weight_bits,
                      in.out_meta.bits};
}

inline void infer_meta(Graph& g) {
    for (auto& n : g.nodes) {
        switch (n.op) {
            case OpKind::Input:
                n.out_meta = g.act_meta();
                break;
            case OpKind::Conv: {
                const GraphNode& in = g.node(n.inputs.at(0));
                ConvGeometry& geom = n.geom;
                if (in.out_shape.size() != 3)
                    throw std::runtime_error("graph: conv input must be CHW");
                geom.in_channels = in.out_shape[0];
                geom.in_h = in.out_shape[1];
                geom.in_w = in.out_shape[2];
                MatmulDims d = matmul_dims_for(g, n);
                int L = n.out_bits_override ? n.out_bits_override : d.lacc();
                n.out_meta = QuantMeta{L, n.weight_scale + in.out_meta.scale_log2, true};
                n.out_shape = {geom.out_channels, geom.out_h(), geom.out_w()};
                break;
            }
            case OpKind::FC: {
                const GraphNode& in = g.node(n.inputs.at(0));
                MatmulDims d = matmul_dims_for(g, n);
                int L = n.out_bits_override ? n.out_bits_override : d.lacc();
                n.out_meta = QuantMeta{L, n.weight_scale + in.out_meta.scale_log2, true};
                n.out_shape = {n.out_features, 1};
                break;
            }
            case OpKind::ReLU:
                n.out_meta = g.node(n.inputs.at(0)).out_meta;
                n.out_shape = g.node(n.inputs.at(0)).out_shape;
                break;
            case OpKind::ResidualAdd: {
                const GraphNode& a = g.node(n.inputs.at(0));
                const GraphNode& b = g.node(n.inputs.at(1));
                if (!(a.out_meta == b.out_meta))
                    throw std::runtime_error("graph: residual-add operands must share meta");
                n.out_meta = a.out_meta;
                n.out_shape = a.out_shape;
                break;
            }
            case OpKind::AvgPool:
            case OpKind::MaxPool: {
                const GraphNode& in = g.node(n.inputs.at(0));
                ConvGeometry& geom = n.geom;
                geom.in_channels = in.out_shape.at(0);
                geom.in_h = in.out_shape.at(1);
                geom.in_w = in.out_shape.at(2);
                geom.out_channels = geom.in_channels;
                n.out_meta = in.out_meta;
                n.out_shape = {geom.in_channels, geom.out_h(), geom.out_w()};
                break;
            }
            case OpKind::Requant:
                n.out_meta = n.target;
                n.out_shape = g.node(n.inputs.at(0)).out_shape;
                break;
            case OpKind::Ext: {
                const GraphNode& in = g.node(n.inputs.at(0));
                if (n.target.bits <= in.out_meta.bits)
                    throw std::runtime_error("graph: ext must widen");
                n.out_meta = QuantMeta{n.target.bits, in.out_meta.scale_log2, true};
                n.out_shape = in.out_shape;
                break;
            }
            case OpKind::Trunc: {
                const GraphNode& in = g.node(n.inputs.at(0));
                n.out_meta = QuantMeta{in.out_meta.bits, in.out_meta.scale_log2 - n.shift, true};
                n.out_shape = in.out_shape;
                break;
            }
            case OpKind::TR: {
                const GraphNode& in = g.node(n.inputs.at(0));
                n.out_meta = QuantMeta{in.out_meta.bits - n.shift,
                                       in.out_meta.scale_log2 - n.shift, true};
                n.out_shape = in.out_shape;
                break;
            }
            case OpKind::Output:
                n.out_meta = g.node(n.inputs.at(0)).out_meta;
                n.out_shape = g.node(n.inputs.at(0)).out_shape;
                break;
        }
        if (n.op == OpKind::Input && n.out_shape.empty())
            throw std::runtime_error("graph: input shape missing");
    }
}

// ---------------------------------------------------------------------------
// Activation sign propagation. A node is marked NonNegative only when a
// conservative value bound proves the top bit stays clear:
// ReLU output < 2^(l-1) unconditionally; shifts/pools shrink or preserve
// the bound; extensions preserve it.

inline void clear_signs(Graph& g) {
    g.signs_propagated = false;
    for (auto& n : g.nodes) {
        n.sign = SignFact::Unknown;
        n.bound_bits = n.out_meta.bits;
    }
}

inline void propagate_signs(Graph& g) {
    clear_signs(g);
    g.signs_propagated = true;
    for (auto& n : g.nodes) {
        auto in_fact = [&](int i) { return g.node(n.inputs.at(i)).sign; };
        auto in_bound = [&](int i) { return g.node(n.inputs.at(i)).bound_bits; };
        switch (n.op) {
            case OpKind::ReLU:
                n.sign = SignFact::NonNegative;
                n.bound_bits = n.out_meta.bits - 1;
                break;
            case OpKind::Ext:
                n.sign = in_fact(0);
                n.bound_bits = in_bound(0);
                break;
            case OpKind::TR:
            case OpKind::Trunc:
                if (in_fact(0) == SignFact::NonNegative) {
                    n.sign = SignFact::NonNegative;
                    n.bound_bits = std::max(0, in_bound(0) - n.shift);
                }
                break;
            case OpKind::Requant: {
                if (in_fact(0) != SignFact::NonNegative) break;
                const QuantMeta& from = g.node(n.inputs.at(0)).out_meta;
                int b = in_bound(0);
                int d = n.target.scale_log2 - from.scale_log2;
                b += d;  // scale-up shifts left, scale-down floors right
                if (b < 0) b = 0;
                // the shift must not overflow the source width, and the
                // result must keep a clear top bit at the target width
                bool shift_safe = d <= 0 || b <= from.bits - 1;
                if (shift_safe && b <= n.target.bits - 1) {
                    n.sign = SignFact::NonNegative;
                    n.bound_bits = b;
                }
                break;
            }
            case OpKind::AvgPool: {
                if (in_fact(0) != SignFact::NonNegative) break;
                int win = ceil_log2(n.geom.kernel * n.geom.kernel);
                int b = in_bound(0) + win - 2 * ceil_log2(n.geom.kernel);
                // window sum adds log2(k^2) bits, the divide removes them
                if (b <= n.out_meta.bits - 1) {
                    n.sign = SignFact::NonNegative;
                    n.bound_bits = b;
                }
                break;
            }
            case OpKind::MaxPool:
                n.sign = in_fact(0);
                n.bound_bits = in_bound(0);
                break;
            case OpKind::ResidualAdd: {
                if (in_fact(0) == SignFact::NonNegative && in_fact(1) == SignFact::NonNegative) {
                    int b = std::max(in_bound(0), in_bound(1)) + 1;
                    if (b <= n.out_meta.bits - 1) {
                        n.sign = SignFact::NonNegative;
                        n.bound_bits = b;
                    }
                }
                break;
            }
            case OpKind::Output:
                n.sign = in_fact(0);
                n.bound_bits = in_bound(0);
                break;
            default:
                break;  // Input, Conv, FC: Unknown
        }
    }
}

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

inline std::map<std::string, std::string> parse_kv(std::istringstream& ss) {
    std::map<std::string, std::string> kv;
    std::string tok;
    while (ss >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) throw std::runtime_error("graph config: expected key=value, got " + tok);
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return kv;
}

inline long kv_num(const std::map<std::string, std::string>& kv, const std::string& k,
                   long def = LONG_MIN) {
    auto it = kv.find(k);
    if (it == kv.end()) {
        if (def != LONG_MIN) return def;
        throw std::runtime_error("graph config: missing attribute " + k);
    }
    return std::stol(it->second);
}

struct LayerLine {
    long id;
    std::string type;
    std::map<std::string, std::string> kv;
};

}  // namespace detail

// Loads the layer-level config and lowers it to IR with the baseline
// residual structure (the simplified form is a separate pass).
inline Graph load_graph_text(const std::string& text) {
    Graph g;
    std::vector<detail::LayerLine> layers;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto h = line.find('#');
        if (h != std::string::npos) line = line.substr(0, h);
        std::istringstream ss(line);
        std::string word;
        if (!(ss >> word)) continue;
        if (word == "graph") {
            ss >> g.name;
        } else if (word == "seed") {
            ss >> g.seed;
        } else if (word == "lambda") {
            ss >> g.lambda;
        } else if (word == "act") {
            auto kv = detail::parse_kv(ss);
            g.act_bits = int(detail::kv_num(kv, "bits"));
            g.act_scale = int(detail::kv_num(kv, "scale", 0));
        } else if (word == "layer") {
            auto kv = detail::parse_kv(ss);
            detail::LayerLine l;
            l.id = detail::kv_num(kv, "id");
            l.type = kv.at("type");
            l.kv = kv;
            layers.push_back(std::move(l));
        } else {
            throw std::runtime_error("graph config: unknown directive " + word);
        }
    }

    // conv/fc layers feeding a residual add keep their raw accumulator
    std::map<long, bool> feeds_residual;
    for (auto& l : layers)
        if (l.type == "residual") feeds_residual[detail::kv_num(l.kv, "in")] = true;

    std::map<long, int> layer_out;  // config layer id -> IR node id
    auto add_node = [&](GraphNode n) {
        n.id = int(g.nodes.size());
        g.nodes.push_back(std::move(n));
        return g.nodes.back().id;
    };

    for (auto& l : layers) {
        GraphNode n;
        n.layer_id = int(l.id);
        auto in_node = [&](const char* key) {
            long lid = detail::kv_num(l.kv, key);
            auto it = layer_out.find(lid);
            if (it == layer_out.end())
                throw std::runtime_error("graph config: layer references unknown layer " +
                                         std::to_string(lid));
            return it->second;
        };
        if (l.type == "input") {
            n.op = OpKind::Input;
            n.out_shape = {size_t(detail::kv_num(l.kv, "channels")),
                           size_t(detail::kv_num(l.kv, "height")),
                           size_t(detail::kv_num(l.kv, "width"))};
            layer_out[l.id] = add_node(n);
        } else if (l.type == "conv" || l.type == "fc") {
            n.op = l.type == "conv" ? OpKind::Conv : OpKind::FC;
            n.inputs = {in_node("in")};
            n.weight_bits = int(detail::kv_num(l.kv, "weight_bits"));
            n.weight_scale = int(detail::kv_num(l.kv, "weight_scale", 0));
            if (n.op == OpKind::Conv) {
                n.geom.out_channels = size_t(detail::kv_num(l.kv, "out_channels"));
                n.geom.kernel = size_t(detail::kv_num(l.kv, "kernel"));
                n.geom.stride = size_t(detail::kv_num(l.kv, "stride", 1));
                n.geom.pad = size_t(detail::kv_num(l.kv, "pad", 0));
            } else {
                n.out_features = size_t(detail::kv_num(l.kv, "out_features"));
            }
            int conv_id = add_node(n);
            if (feeds_residual.count(l.id)) {
                layer_out[l.id] = conv_id;  // residual lowering consumes the accumulator
            } else {
                GraphNode q;
                q.op = OpKind::Requant;
                q.inputs = {conv_id};
                q.target = g.act_meta();
                q.layer_id = int(l.id);
                layer_out[l.id] = add_node(q);
            }
        } else if (l.type == "relu") {
            n.op = OpKind::ReLU;
            n.inputs = {in_node("in")};
            layer_out[l.id] = add_node(n);
        } else if (l.type == "avgpool" || l.type == "maxpool") {
            n.op = l.type == "avgpool" ? OpKind::AvgPool : OpKind::MaxPool;
            n.inputs = {in_node("in")};
            n.geom.kernel = size_t(detail::kv_num(l.kv, "kernel"));
            n.geom.stride = size_t(detail::kv_num(l.kv, "stride", long(n.geom.kernel)));
            if (n.op == OpKind::AvgPool && (n.geom.kernel & (n.geom.kernel - 1)))
                throw std::runtime_error("graph config: avgpool kernel must be a power of two");
            layer_out[l.id] = add_node(n);
        } else if (l.type == "residual") {
            // baseline chain: requant conv output, widen both operands by
            // one bit, add, quantize back
            int conv = in_node("in");
            int res = in_node("res");
            // the residual branch may ride at a higher width; the add
            // happens one bit above it
            int l_res = int(detail::kv_num(l.kv, "residual_bits", g.act_bits));
            if (l_res < g.act_bits)
                throw std::runtime_error("graph config: residual_bits below activation width");
            QuantMeta wide{l_res + 1, g.act_scale, true};
            auto mk = [&](OpKind op, std::vector<int> in, QuantMeta target) {
                GraphNode x;
                x.op = op;
                x.inputs = std::move(in);
                x.target = target;
                x.layer_id = int(l.id);
                return add_node(std::move(x));
            };
            int q1id = mk(OpKind::Requant, {conv}, g.act_meta());
            int e1id = mk(OpKind::Ext, {q1id}, wide);
            int e2id = mk(OpKind::Ext, {res}, wide);
            int aid = mk(OpKind::ResidualAdd, {e1id, e2id}, g.act_meta());
            layer_out[l.id] = mk(OpKind::Requant, {aid}, g.act_meta());
        } else if (l.type == "requant") {
            n.op = OpKind::Requant;
            n.inputs = {in_node("in")};
            n.target = QuantMeta{int(detail::kv_num(l.kv, "bits")),
                                 int(detail::kv_num(l.kv, "scale", 0)), true};
            layer_out[l.id] = add_node(n);
        } else if (l.type == "ext") {
            n.op = OpKind::Ext;
            n.inputs = {in_node("in")};
            n.target = QuantMeta{int(detail::kv_num(l.kv, "bits")), 0, true};
            layer_out[l.id] = add_node(n);
        } else if (l.type == "trunc" || l.type == "tr") {
            n.op = l.type == "trunc" ? OpKind::Trunc : OpKind::TR;
            n.inputs = {in_node("in")};
            n.shift = int(detail::kv_num(l.kv, "shift"));
            layer_out[l.id] = add_node(n);
        } else if (l.type == "output") {
            n.op = OpKind::Output;
            n.inputs = {in_node("in")};
            layer_out[l.id] = add_node(n);
        } else {
            throw std::runtime_error("graph config: unknown layer type " + l.type);
        }
    }
    infer_meta(g);
    clear_signs(g);
    return g;
}

inline Graph load_graph_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open graph file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return load_graph_text(ss.str());
}

// Serialized IR for inspection; stable key order.
inline std::string serialize_graph(const Graph& g) {
    std::ostringstream out;
    out << "graph " << g.name << " seed=" << g.seed << " lambda=" << g.lambda
        << " act_bits=" << g.act_bits << " act_scale=" << g.act_scale << "\n";
    for (const auto& n : g.nodes) {
        out << "node id=" << n.id << " op=" << op_name(n.op) << " in=";
        for (size_t i = 0; i < n.inputs.size(); ++i) out << (i ? "," : "") << n.inputs[i];
        if (n.inputs.empty()) out << "-";
        out << " bits=" << n.out_meta.bits << " scale=" << n.out_meta.scale_log2
            << " sign=" << (n.sign == SignFact::NonNegative ? "nonneg" : "unknown");
        if (n.op == OpKind::Conv || n.op == OpKind::FC)
            out << " wbits=" << n.weight_bits << " wscale=" << n.weight_scale;
        if (n.shift) out << " shift=" << n.shift;
        out << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Weights / inputs (synthetic, deterministic in the graph seed)

inline RingTensor make_weights(const Graph& g, const GraphNode& n) {
    if (n.op != OpKind::Conv && n.op != OpKind::FC)
        throw std::invalid_argument("make_weights: not a weight-bearing node");
    MatmulDims d = matmul_dims_for(g, n);
    QuantMeta m{n.weight_bits, n.weight_scale, true};
    RingTensor w({d.d1, d.d2}, m);
    // keyed by the config layer id: node ids shift under rewrites, the
    // layer's weights must not
    uint64_t s = g.seed * 0x9e3779b97f4a7c15ULL + uint64_t(n.layer_id) + 1;
    for (size_t i = 0; i < w.numel(); ++i) w.set(i, splitmix64(s));
    return w;
}

inline RingTensor make_input(const Graph& g, uint64_t seed) {
    const GraphNode& in = g.nodes.front();
    if (in.op != OpKind::Input) throw std::runtime_error("graph: first node must be input");
    RingTensor x(in.out_shape, g.act_meta());
    uint64_t s = seed * 0x517cc1b727220a95ULL + 0xb5ad4eceda1ce2a9ULL;
    for (size_t i = 0; i < x.numel(); ++i) x.set(i, splitmix64(s));
    return x;
}

// ---------------------------------------------------------------------------
// Plaintext reference executor (the oracle)

namespace detail {

inline RingTensor pool_plain(const RingTensor& x, const ConvGeometry& geom, bool avg) {
    const size_t C = geom.in_channels, oh = geom.out_h(), ow = geom.out_w();
    const int l = x.meta().bits;
    const int lw = l + 2 * ceil_log2(geom.kernel);
    RingTensor y({C, oh, ow}, x.meta());
    for (size_t c = 0; c < C; ++c)
        for (size_t oy = 0; oy < oh; ++oy)
            for (size_t ox = 0; ox < ow; ++ox) {
                uint64_t sum = 0;
                int64_t best = 0;
                bool first = true;
                for (size_t ky = 0; ky < geom.kernel; ++ky)
                    for (size_t kx = 0; kx < geom.kernel; ++kx) {
                        size_t iy = oy * geom.stride + ky, ix = ox * geom.stride + kx;
                        int64_t v = x.signed_at((c * geom.in_h + iy) * geom.in_w + ix);
                        sum = ring_reduce(sum + from_signed(v, lw), lw);
                        if (first || v > best) best = v;
                        first = false;
                    }
                if (avg) {
                    uint64_t t = arith_shift_right(sum, lw, 2 * ceil_log2(geom.kernel));
                    y.set((c * oh + oy) * ow + ox, ring_reduce(t, l));
                } else {
                    y.set((c * oh + oy) * ow + ox, from_signed(best, l));
                }
            }
    return y;
}

}  // namespace detail

inline RingTensor run_graph_plain(const Graph& g, const RingTensor& input) {
    std::vector<RingTensor> vals(g.nodes.size());
    for (const auto& n : g.nodes) {
        switch (n.op) {
            case OpKind::Input:
                if (input.shape() != n.out_shape || !(input.meta() == g.act_meta()))
                    throw std::invalid_argument("run_graph_plain: input meta/shape mismatch");
                vals[n.id] = input;
                break;
            case OpKind::Conv: {
                RingTensor w = make_weights(g, n);
                vals[n.id] = conv_plain(vals[n.inputs[0]], w, n.geom, n.out_meta.bits);
                break;
            }
            case OpKind::FC: {
                RingTensor w = make_weights(g, n);
                const RingTensor& x = vals[n.inputs[0]];
                RingTensor col({x.numel(), 1}, x.meta(), x.data());
                vals[n.id] = matmul_plain(w, col, n.out_meta.bits);
                break;
            }
            case OpKind::ReLU:
                vals[n.id] = relu_plain(vals[n.inputs[0]]);
                break;
            case OpKind::ResidualAdd: {
                const RingTensor& a = vals[n.inputs[0]];
                const RingTensor& b = vals[n.inputs[1]];
                RingTensor y(a.shape(), n.out_meta);
                for (size_t i = 0; i < y.numel(); ++i) y.set(i, a.at(i) + b.at(i));
                vals[n.id] = std::move(y);
                break;
            }
            case OpKind::AvgPool:
                vals[n.id] = detail::pool_plain(vals[n.inputs[0]], n.geom, true);
                break;
            case OpKind::MaxPool:
                vals[n.id] = detail::pool_plain(vals[n.inputs[0]], n.geom, false);
                break;
            case OpKind::Requant:
                vals[n.id] = requant_plain(vals[n.inputs[0]], n.target);
                break;
            case OpKind::Ext: {
                const RingTensor& x = vals[n.inputs[0]];
                RingTensor y(x.shape(), n.out_meta);
                for (size_t i = 0; i < y.numel(); ++i)
                    y.set(i, from_signed(x.signed_at(i), n.out_meta.bits));
                vals[n.id] = std::move(y);
                break;
            }
            case OpKind::Trunc: {
                const RingTensor& x = vals[n.inputs[0]];
                RingTensor y(x.shape(), n.out_meta);
                for (size_t i = 0; i < y.numel(); ++i)
                    y.set(i, arith_shift_right(x.at(i), x.meta().bits, n.shift));
                vals[n.id] = std::move(y);
                break;
            }
            case OpKind::TR: {
                const RingTensor& x = vals[n.inputs[0]];
                RingTensor y(x.shape(), n.out_meta);
                for (size_t i = 0; i < y.numel(); ++i)
                    y.set(i, arith_shift_right(x.at(i), x.meta().bits, n.shift));
                vals[n.id] = std::move(y);
                break;
            }
            case OpKind::Output:
                vals[n.id] = vals[n.inputs[0]];
                break;
        }
    }
    return vals[size_t(g.output_id())];
}

// ---------------------------------------------------------------------------
// Passes

struct PassReport {
    int rewrites = 0;
    uint64_t predicted_before = 0;
    uint64_t predicted_after = 0;
    std::vector<std::string> notes;
};

namespace detail {

inline std::vector<int> consumer_count(const Graph& g) {
    std::vector<int> c(g.nodes.size(), 0);
    for (const auto& n : g.nodes)
        for (int i : n.inputs) ++c[size_t(i)];
    return c;
}

// Drop nodes marked dead and remap ids; order is preserved, so topological
// ordering survives.
inline void compact(Graph& g, const std::vector<bool>& dead) {
    std::vector<int> remap(g.nodes.size(), -1);
    std::vector<GraphNode> keep;
    for (auto& n : g.nodes) {
        if (dead[size_t(n.id)]) continue;
        remap[size_t(n.id)] = int(keep.size());
        n.id = int(keep.size());
        keep.push_back(std::move(n));
    }
    for (auto& n : keep)
        for (auto& i : n.inputs) {
            if (remap[size_t(i)] < 0) throw std::runtime_error("graph: dangling edge after rewrite");
            i = remap[size_t(i)];
        }
    g.nodes = std::move(keep);
}

// Insert a node at position `pos`; every id >= pos shifts up by one.
// `n.inputs` are given in pre-insert ids.
inline int insert_node_before(Graph& g, int pos, GraphNode n) {
    for (auto& x : g.nodes) {
        if (x.id >= pos) ++x.id;
        for (auto& e : x.inputs)
            if (e >= pos) ++e;
    }
    for (auto& e : n.inputs)
        if (e >= pos) ++e;
    n.id = pos;
    g.nodes.insert(g.nodes.begin() + pos, std::move(n));
    return pos;
}

}  // namespace detail

struct EstimateOptions {
    bool use_signs = true;      // honor NonNegative annotations
    int forced_variant = 0;     // 0 = adaptive selection
};

struct GraphEstimate {
    uint64_t total_bits = 0;
    std::map<std::string, uint64_t> label_bits;
    std::vector<uint64_t> node_bits;  // indexed by node id
    std::vector<int> node_variant;    // matmul variant per node (0 = n/a)
};

inline GraphEstimate estimate_graph_comm(const Graph& g, EstimateOptions opt = {}) {
    GraphEstimate est;
    est.node_bits.assign(g.nodes.size(), 0);
    est.node_variant.assign(g.nodes.size(), 0);
    const int lam = g.lambda;
    auto add = [&](int id, const std::string& label, uint64_t bits) {
        est.node_bits[size_t(id)] += bits;
        est.label_bits[label] += bits;
        est.total_bits += bits;
    };
    auto carry_m = [&](uint64_t n, int k) { return k <= 0 ? 0 : 2 * uint64_t(k) * ot_metered_bits(n, 1, lam); };
    auto b2a_m = [&](uint64_t n, int l) { return ot_metered_bits(n, uint64_t(l), lam); };
    auto ext_m = [&](int id, uint64_t n, int l1, int l2, bool nn, const char* lbl,
                     const char* wlbl) {
        if (nn) {
            add(id, lbl, ot_metered_bits(n, uint64_t(l2), lam));
        } else {
            add(id, wlbl, carry_m(n, l1));
            add(id, lbl, b2a_m(n, l2));
        }
    };
    auto tr_m = [&](int id, uint64_t n, int l1, int k, const char* lbl, const char* wlbl) {
        if (k <= 0) return;
        if (k > l1 - 1) k = l1 - 1;
        if (k == 0) return;
        add(id, wlbl, carry_m(n, k));
        add(id, lbl, b2a_m(n, l1 - k));
    };

    for (const auto& n : g.nodes) {
        const GraphNode* in0 = n.inputs.empty() ? nullptr : &g.node(n.inputs[0]);
        bool nn = opt.use_signs && in0 && in0->sign == SignFact::NonNegative;
        uint64_t numel = in0 ? shape_numel(in0->out_shape) : 0;
        switch (n.op) {
            case OpKind::Conv:
            case OpKind::FC: {
                MatmulDims d = matmul_dims_for(g, n);
                int ob = n.out_bits_override;
                int v = opt.forced_variant ? opt.forced_variant
                                           : select_variant(d, lam, nn, ob).variant;
                MmCost c = predict_variant(v, d, lam, nn, ob);
                est.node_variant[size_t(n.id)] = v;
                add(n.id, "mm.ext", c.ext_bits);
                add(n.id, "mm.ot", c.mult_bits);
                add(n.id, "mm.wrap", c.wrap_bits);
                break;
            }
            case OpKind::ReLU: {
                int l = n.out_meta.bits;
                add(n.id, "relu", carry_m(numel, l - 1));
                add(n.id, "ot", 2 * ot_metered_bits(numel, uint64_t(l), lam));
                break;
            }
            case OpKind::Requant: {
                const QuantMeta& from = in0->out_meta;
                const QuantMeta& to = n.target;
                int l1 = from.bits, s1 = from.scale_log2, l2 = to.bits, s2 = to.scale_log2;
                if (l1 >= l2 && s1 <= s2) break;
                if (s1 > s2) {
                    int k = std::min(s1 - s2, l1 - 1);
                    tr_m(n.id, numel, l1, k, "requant", "wrap");
                    if (l1 - k < l2) ext_m(n.id, numel, l1 - k, l2, nn, "requant", "wrap");
                } else {
                    ext_m(n.id, numel, l1, l2, nn && s1 == s2, "requant", "wrap");
                }
                break;
            }
            case OpKind::Ext:
                ext_m(n.id, numel, in0->out_meta.bits, n.out_meta.bits, nn, "ext", "wrap");
                break;
            case OpKind::Trunc: {
                int l1 = in0->out_meta.bits;
                int s = std::min(n.shift, l1 - 1);
                tr_m(n.id, numel, l1, s, "trunc", "wrap");
                if (s > 0) ext_m(n.id, numel, l1 - s, l1, nn, "trunc", "wrap");
                break;
            }
            case OpKind::TR:
                tr_m(n.id, numel, in0->out_meta.bits, n.shift, "tr", "wrap");
                break;
            case OpKind::AvgPool: {
                int l = in0->out_meta.bits;
                int pad_bits = 2 * ceil_log2(n.geom.kernel);
                uint64_t n_out = shape_numel(n.out_shape);
                ext_m(n.id, numel, l, l + pad_bits, nn, "ext", "wrap");
                tr_m(n.id, n_out, l + pad_bits, pad_bits, "tr", "wrap");
                break;
            }
            case OpKind::MaxPool: {
                int l = in0->out_meta.bits;
                uint64_t n_out = shape_numel(n.out_shape);
                uint64_t steps = n.geom.kernel * n.geom.kernel - 1;
                // per tournament step: widen both operands, sign-test the
                // difference, 2-OT mux; batched over all output positions
                uint64_t per = 2 * (carry_m(n_out, l) + b2a_m(n_out, l + 1)) +
                               carry_m(n_out, l) +
                               2 * ot_metered_bits(n_out, uint64_t(l + 1), lam);
                add(n.id, "mp", steps * per);
                break;
            }
            default:
                break;
        }
    }
    return est;
}

// Simplified residual lowering: match the baseline chain
//   Conv -> Requant -> Ext --+
//             residual -> Ext +-> Add -> Requant
// and rewrite to
//   Conv(wide accumulator) --------------+
//     residual -> Ext(l_add) -> shl(local)+-> Add -> Requant
// The conv output's standalone quantization disappears; the final values
// are unchanged because floor division distributes over integer addition.
inline PassReport lower_residual_simplified(Graph& g) {
    PassReport rep;
    rep.predicted_before = estimate_graph_comm(g).total_bits;
    bool changed = true;
    while (changed) {
        changed = false;
        auto cons = detail::consumer_count(g);
        for (auto& addn : g.nodes) {
            if (addn.op != OpKind::ResidualAdd) continue;
            GraphNode& e1 = g.node(addn.inputs[0]);
            GraphNode& e2 = g.node(addn.inputs[1]);
            if (e1.op != OpKind::Ext || e2.op != OpKind::Ext) continue;
            GraphNode& q1 = g.node(e1.inputs[0]);
            if (q1.op != OpKind::Requant) continue;
            GraphNode& conv = g.node(q1.inputs[0]);
            if (conv.op != OpKind::Conv && conv.op != OpKind::FC) continue;
            if (conv.out_bits_override != 0) continue;  // already rewritten
            if (cons[size_t(q1.id)] != 1 || cons[size_t(e1.id)] != 1) continue;

            MatmulDims d = matmul_dims_for(g, conv);
            const int l_add = d.lacc() + 1;
            const int s_acc = conv.out_meta.scale_log2;
            const int add_id = addn.id, conv_id = conv.id;
            const int q1_id = q1.id, e1_id = e1.id, e2_id = e2.id;
            const int layer = addn.layer_id;

            conv.out_bits_override = l_add;
            // retarget the residual-side extension to the accumulator width
            e2.target = QuantMeta{l_add, 0, true};
            // local shift aligns the residual's scale to the accumulator's
            GraphNode shl;
            shl.op = OpKind::Requant;
            shl.inputs = {e2_id};
            shl.target = QuantMeta{l_add, s_acc, true};
            shl.layer_id = layer;
            int shl_id = detail::insert_node_before(g, add_id, std::move(shl));
            g.node(add_id + 1).inputs = {conv_id, shl_id};

            // delete the conv output's standalone quantization chain
            std::vector<bool> dead(g.nodes.size(), false);
            dead[size_t(q1_id)] = dead[size_t(e1_id)] = true;
            detail::compact(g, dead);
            infer_meta(g);
            ++rep.rewrites;
            rep.notes.push_back("residual simplified at layer " + std::to_string(layer));
            changed = true;
            break;  // node references invalidated; rescan
        }
    }
    if (g.signs_propagated) propagate_signs(g);
    rep.predicted_after = estimate_graph_comm(g).total_bits;
    return rep;
}

// Protocol fusion: decompose Trunc feeding Ext (Prop. 1), then fuse
// Ext;Ext (Prop. 2) and TR;Ext chains (Prop. 3 composition) to fixpoint.
inline PassReport fuse_protocols(Graph& g) {
    PassReport rep;
    rep.predicted_before = estimate_graph_comm(g).total_bits;
    bool changed = true;
    while (changed) {
        changed = false;
        auto cons = detail::consumer_count(g);
        // Prop 1: Trunc -> Ext  becomes  TR ; Ext(l1-s -> l1) -> Ext,
        // exposing an Ext;Ext pair for Prop 2.
        for (auto& n : g.nodes) {
            if (n.op != OpKind::Trunc) continue;
            if (cons[size_t(n.id)] != 1) continue;
            const GraphNode* consumer = nullptr;
            for (const auto& m : g.nodes)
                for (int i : m.inputs)
                    if (i == n.id) consumer = &m;
            if (!consumer || consumer->op != OpKind::Ext) continue;
            int l1 = g.node(n.inputs[0]).out_meta.bits;
            int s = std::min(n.shift, l1 - 1);
            if (s <= 0) continue;
            // rewrite in place: the Trunc node becomes TR, and the
            // consumer Ext absorbs the width restore (its source width
            // shrinks; its target is unchanged)
            n.op = OpKind::TR;
            n.shift = s;
            ++rep.rewrites;
            rep.notes.push_back("prop1: trunc decomposed at node " + std::to_string(n.id));
            infer_meta(g);
            changed = true;
            break;
        }
        if (changed) continue;
        // Prop 2: Ext(l1->l2) ; Ext(l2->l3) => Ext(l1->l3)
        for (auto& b : g.nodes) {
            if (b.op != OpKind::Ext) continue;
            GraphNode& a = g.node(b.inputs[0]);
            if (a.op != OpKind::Ext) continue;
            if (cons[size_t(a.id)] != 1) continue;
            b.inputs[0] = a.inputs[0];
            std::vector<bool> dead(g.nodes.size(), false);
            dead[size_t(a.id)] = true;
            detail::compact(g, dead);
            infer_meta(g);
            ++rep.rewrites;
            rep.notes.push_back("prop2: consecutive extensions fused");
            changed = true;
            break;
        }
    }
    if (g.signs_propagated) propagate_signs(g);
    rep.predicted_after = estimate_graph_comm(g).total_bits;
    return rep;
}

}  // namespace quant2pc

#endif  // QUANT2PC_GRAPH_HPP_
