#ifndef QUANT2PC_PRIMITIVES_HPP_
#define QUANT2PC_PRIMITIVES_HPP_

#include <cstdint>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "quant2pc/ot.hpp"
#include "quant2pc/ring.hpp"
#include "quant2pc/transport.hpp"

// Share-level base protocols over additively shared ring tensors:
// sharing/reconstruction, bit-width extension, truncation (arithmetic
// shift), truncate-and-reduce, and re-quantization. Every protocol is
// written SPMD-style: both parties call the same function with their own
// share and OT session; the function returns the local output share.
//
// Signed semantics are obtained from the unsigned core protocols by the
// standard bias trick: the server offsets its share by 2^(l-1), the
// parties run the unsigned protocol, and the server removes the offset
// from the result. When a value is known non-negative (sign_fact ==
// NonNegative, i.e. its top bit is 0) the wrap bit collapses to an OR of
// the two shares' top bits and costs a single OT.

namespace quant2pc {

enum class SignFact { Unknown, NonNegative };

struct Share {
    RingTensor tensor;
    Party party = Party::Server;
    SignFact sign_fact = SignFact::Unknown;

    const QuantMeta& meta() const { return tensor.meta(); }
    int bits() const { return tensor.meta().bits; }
    size_t numel() const { return tensor.numel(); }
};

inline std::pair<Share, Share> share(const RingTensor& x, std::mt19937_64& rng,
                                     SignFact fact = SignFact::Unknown) {
    RingTensor r(x.shape(), x.meta());
    RingTensor d(x.shape(), x.meta());
    for (size_t i = 0; i < x.numel(); ++i) {
        uint64_t ri = rng() & ring_mask(x.meta().bits);
        r.set(i, ri);
        d.set(i, x.at(i) - ri);
    }
    return {Share{std::move(d), Party::Server, fact}, Share{std::move(r), Party::Client, fact}};
}

inline RingTensor reconstruct(const Share& a, const Share& b) {
    if (a.party == b.party) throw std::invalid_argument("reconstruct: shares from the same party");
    if (a.tensor.shape() != b.tensor.shape() || !(a.meta() == b.meta()))
        throw std::invalid_argument("reconstruct: share metadata mismatch");
    RingTensor out(a.tensor.shape(), a.meta());
    for (size_t i = 0; i < out.numel(); ++i) out.set(i, a.tensor.at(i) + b.tensor.at(i));
    return out;
}

// ---------------------------------------------------------------------------
// Building blocks

// XOR-shared carry out of the low k bits of x_s + x_c. Bit-serial scan:
// per bit position one OT in each direction with 1-bit messages, batched
// over all tensor elements. c_{i+1} = a_i b_i XOR c_i (a_i XOR b_i).
inline std::vector<uint8_t> carry_xor(OtSession& ot, const std::vector<uint64_t>& x, int k,
                                      const std::string& label = "wrap") {
    Channel& ch = ot.channel();
    LabelScope scope(ch, label);
    const size_t n = x.size();
    std::vector<uint8_t> c(n, 0);
    if (k <= 0 || n == 0) return c;
    OtBatchParams p{n, 1, 1, SecurityParam{}};
    std::vector<uint64_t> m0(n), m1(n);
    std::vector<uint8_t> choice(n);
    for (int i = 0; i < k; ++i) {
        if (ch.party() == Party::Server) {
            // our bit a_i; first send (r, r^a_i), then receive with choice c.
            std::vector<uint8_t> r(n);
            for (size_t t = 0; t < n; ++t) {
                uint8_t a = (x[t] >> i) & 1;
                r[t] = uint8_t(ot.rng()() & 1);
                m0[t] = r[t];
                m1[t] = r[t] ^ a;
            }
            ot.send(p, m0, m1);
            auto q = ot.receive(p, c);
            for (size_t t = 0; t < n; ++t) {
                uint8_t a = (x[t] >> i) & 1;
                c[t] = uint8_t((a & c[t]) ^ r[t] ^ uint8_t(q[t]));
            }
        } else {
            // our bit b_i; receive with choice b_i^c, then send (r, r^b_i).
            for (size_t t = 0; t < n; ++t) choice[t] = uint8_t(((x[t] >> i) & 1) ^ c[t]);
            auto q = ot.receive(p, choice);
            std::vector<uint8_t> r(n);
            for (size_t t = 0; t < n; ++t) {
                uint8_t b = (x[t] >> i) & 1;
                r[t] = uint8_t(ot.rng()() & 1);
                m0[t] = r[t];
                m1[t] = r[t] ^ b;
            }
            ot.send(p, m0, m1);
            for (size_t t = 0; t < n; ++t) {
                uint8_t b = (x[t] >> i) & 1;
                c[t] = uint8_t(uint8_t(q[t]) ^ r[t] ^ (b & c[t]));
            }
        }
    }
    return c;
}

// Boolean-to-arithmetic: turn an XOR-shared bit vector into additive
// shares at width lout. One OT with lout-bit messages, server as sender:
// u XOR v = (u + 2r) + (v - 2t) with t = r + u*v.
inline std::vector<uint64_t> b2a(OtSession& ot, const std::vector<uint8_t>& bit, int lout,
                                 const std::string& label) {
    Channel& ch = ot.channel();
    LabelScope scope(ch, label);
    const size_t n = bit.size();
    std::vector<uint64_t> out(n);
    OtBatchParams p{n, lout, 1, SecurityParam{}};
    const uint64_t mask = ring_mask(lout);
    if (ch.party() == Party::Server) {
        std::vector<uint64_t> m0(n), m1(n);
        std::vector<uint64_t> r(n);
        for (size_t t = 0; t < n; ++t) {
            r[t] = ot.rng()() & mask;
            m0[t] = r[t];
            m1[t] = (r[t] + bit[t]) & mask;
        }
        ot.send(p, m0, m1);
        for (size_t t = 0; t < n; ++t) out[t] = (bit[t] + 2 * r[t]) & mask;
    } else {
        auto t = ot.receive(p, bit);
        for (size_t i = 0; i < n; ++i) out[i] = (uint64_t(bit[i]) - 2 * t[i]) & mask;
    }
    return out;
}

// Additive shares (width lout) of ms OR mc, where the server holds bits
// ms and the client bits mc. One OT: messages (r+ms, r+1), choice mc.
inline std::vector<uint64_t> or_bits_a(OtSession& ot, const std::vector<uint8_t>& bit, int lout,
                                       const std::string& label) {
    Channel& ch = ot.channel();
    LabelScope scope(ch, label);
    const size_t n = bit.size();
    std::vector<uint64_t> out(n);
    OtBatchParams p{n, lout, 1, SecurityParam{}};
    const uint64_t mask = ring_mask(lout);
    if (ch.party() == Party::Server) {
        std::vector<uint64_t> m0(n), m1(n);
        for (size_t t = 0; t < n; ++t) {
            uint64_t r = ot.rng()() & mask;
            m0[t] = (r + bit[t]) & mask;
            m1[t] = (r + 1) & mask;
            out[t] = (~r + 1) & mask;  // -r
        }
        ot.send(p, m0, m1);
    } else {
        out = ot.receive(p, bit);
    }
    return out;
}

// XOR shares (width 1) of ms OR mc. One OT with 1-bit messages: server
// sends (rho ^ ms, rho ^ 1), client's choice is mc.
inline std::vector<uint8_t> or_bits_x(OtSession& ot, const std::vector<uint8_t>& bit,
                                      const std::string& label) {
    Channel& ch = ot.channel();
    LabelScope scope(ch, label);
    const size_t n = bit.size();
    std::vector<uint8_t> out(n);
    OtBatchParams p{n, 1, 1, SecurityParam{}};
    if (ch.party() == Party::Server) {
        std::vector<uint64_t> m0(n), m1(n);
        for (size_t t = 0; t < n; ++t) {
            uint8_t rho = uint8_t(ot.rng()() & 1);
            m0[t] = rho ^ bit[t];
            m1[t] = rho ^ 1;
            out[t] = rho;
        }
        ot.send(p, m0, m1);
    } else {
        auto q = ot.receive(p, bit);
        for (size_t t = 0; t < n; ++t) out[t] = uint8_t(q[t]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Base protocols

// Bit-width extension l1 -> l2: reconstructed l2-bit value sign-extends
// the l1-bit value (zero-extends when NonNegative; identical since the
// top bit is 0).
inline Share ext(OtSession& ot, const Share& x, int l2, const std::string& label = "ext",
                 const std::string& wrap_label = "wrap") {
    const int l1 = x.bits();
    if (l2 <= l1) throw std::invalid_argument("ext: target width must exceed source width");
    if (l2 > kMaxBits) throw std::invalid_argument("ext: target width exceeds 64");
    Channel& ch = ot.channel();
    if (x.party != ch.party()) throw std::invalid_argument("ext: share/channel party mismatch");
    LabelScope scope(ch, label);
    const size_t n = x.numel();
    QuantMeta m2 = x.meta();
    m2.bits = l2;
    RingTensor y(x.tensor.shape(), m2);

    if (x.sign_fact == SignFact::NonNegative) {
        std::vector<uint8_t> msb(n);
        for (size_t t = 0; t < n; ++t) msb[t] = uint8_t((x.tensor.at(t) >> (l1 - 1)) & 1);
        auto w = or_bits_a(ot, msb, l2, label);
        for (size_t t = 0; t < n; ++t) y.set(t, x.tensor.at(t) - (w[t] << l1));
        return Share{std::move(y), x.party, SignFact::NonNegative};
    }

    const uint64_t off = uint64_t{1} << (l1 - 1);
    std::vector<uint64_t> xs(n);
    for (size_t t = 0; t < n; ++t)
        xs[t] = ring_reduce(x.tensor.at(t) + (x.party == Party::Server ? off : 0), l1);
    auto cw = carry_xor(ot, xs, l1, wrap_label);
    auto w = b2a(ot, cw, l2, label);
    for (size_t t = 0; t < n; ++t) {
        uint64_t v = xs[t] - (w[t] << l1);
        if (x.party == Party::Server) v -= off;  // undo the sign bias at l2
        y.set(t, v);
    }
    return Share{std::move(y), x.party, SignFact::Unknown};
}

// Truncate-and-reduce: floor-shift right by k and drop the high k bits;
// output width l1-k. Only the carry of the low k bits needs an OT scan.
inline Share trunc_reduce(OtSession& ot, const Share& x, int k, const std::string& label = "tr",
                          const std::string& wrap_label = "wrap") {
    const int l1 = x.bits();
    if (k < 0) throw std::invalid_argument("tr: negative shift");
    if (k > l1 - 1) k = l1 - 1;  // floor saturates, mirroring arith_shift_right
    Channel& ch = ot.channel();
    if (x.party != ch.party()) throw std::invalid_argument("tr: share/channel party mismatch");
    QuantMeta m2 = x.meta();
    m2.bits = l1 - k;
    m2.scale_log2 -= k;
    if (k == 0) {
        RingTensor y(x.tensor.shape(), m2, x.tensor.data());
        return Share{std::move(y), x.party, x.sign_fact};
    }
    LabelScope scope(ch, label);
    const size_t n = x.numel();
    const uint64_t off = uint64_t{1} << (l1 - 1);
    std::vector<uint64_t> xs(n);
    for (size_t t = 0; t < n; ++t)
        xs[t] = ring_reduce(x.tensor.at(t) + (x.party == Party::Server ? off : 0), l1);
    auto cw = carry_xor(ot, xs, k, wrap_label);
    auto w = b2a(ot, cw, l1 - k, label);
    RingTensor y(x.tensor.shape(), m2);
    for (size_t t = 0; t < n; ++t) {
        uint64_t v = (xs[t] >> k) + w[t];
        if (x.party == Party::Server) v -= off >> k;  // undo the bias
        y.set(t, v);
    }
    return Share{std::move(y), x.party, x.sign_fact};
}

// Arithmetic right shift by s, width kept at l1: trunc-reduce then extend
// back. The reduced value is non-negative whenever the input is, which
// unlocks the single-OT wrap on the extension.
inline Share trunc(OtSession& ot, const Share& x, int s, const std::string& label = "trunc",
                   const std::string& wrap_label = "wrap") {
    const int l1 = x.bits();
    if (s <= 0) return x;
    if (s > l1 - 1) s = l1 - 1;
    Share t = trunc_reduce(ot, x, s, label, wrap_label);
    return ext(ot, t, l1, label, wrap_label);
}

// Re-quantization (l1,s1) -> (l2,s2); share-level twin of requant_scalar,
// branch for branch. Scale moves first, width second; pure-shift branches
// cost zero communication.
inline Share requant(OtSession& ot, const Share& x, const QuantMeta& to,
                     const std::string& label = "requant",
                     const std::string& wrap_label = "wrap") {
    check_meta(to);
    const int l1 = x.bits(), s1 = x.meta().scale_log2;
    const int l2 = to.bits, s2 = to.scale_log2;
    Channel& ch = ot.channel();
    if (x.party != ch.party()) throw std::invalid_argument("requant: share/channel party mismatch");

    auto local_shl = [&](const Share& in, int d, int lw) {
        QuantMeta m = in.meta();
        m.scale_log2 += d;
        RingTensor y(in.tensor.shape(), m);
        for (size_t t = 0; t < in.numel(); ++t)
            y.set(t, d >= 64 ? 0 : ring_reduce(in.tensor.at(t) << d, lw));
        // a left shift can push the value into the sign bit; drop the fact
        // unless nothing moved.
        return Share{std::move(y), in.party, d == 0 ? in.sign_fact : SignFact::Unknown};
    };
    auto local_reduce = [&](const Share& in, const QuantMeta& m) {
        RingTensor y(in.tensor.shape(), m, in.tensor.data());
        return Share{std::move(y), in.party,
                     m.bits == in.bits() ? in.sign_fact : SignFact::Unknown};
    };

    if (l1 >= l2) {
        if (s1 <= s2) {
            Share t = local_shl(x, s2 - s1, l1);
            return local_reduce(t, to);
        }
        int k = s1 - s2;
        if (k > l1 - 1) k = l1 - 1;
        // when the width budget covers the scale drop (l1-l2 >= s1-s2) the
        // truncate-reduce lands at >= l2 bits and a local reduce finishes;
        // otherwise extend back up to l2 first.
        Share t = trunc_reduce(ot, x, k, label, wrap_label);
        if (t.bits() < l2) t = ext(ot, t, l2, label, wrap_label);
        return local_reduce(t, to);
    }
    if (s1 > s2) {
        int k = s1 - s2;
        if (k > l1 - 1) k = l1 - 1;
        Share t = trunc_reduce(ot, x, k, label, wrap_label);
        if (t.bits() < l2) t = ext(ot, t, l2, label, wrap_label);
        return local_reduce(t, to);
    }
    Share t = local_shl(x, s2 - s1, l1);
    t = ext(ot, t, l2, label, wrap_label);
    return local_reduce(t, to);
}

// ---------------------------------------------------------------------------
// Exact cost predictors (bits, before per-batch byte rounding). These
// mirror the protocols above one OT batch at a time, so measured label
// bytes match them up to framing and rounding.

inline uint64_t carry_cost_bits(uint64_t n, int k, int lambda) {
    if (k <= 0) return 0;
    return uint64_t(k) * 2 * ot_cost_bits(n, 1, lambda);
}

inline uint64_t b2a_cost_bits(uint64_t n, int lout, int lambda) {
    return ot_cost_bits(n, uint64_t(lout), lambda);
}

inline uint64_t ext_cost_bits(uint64_t n, int l1, int l2, int lambda, bool nonneg) {
    if (nonneg) return ot_cost_bits(n, uint64_t(l2), lambda);
    return carry_cost_bits(n, l1, lambda) + b2a_cost_bits(n, l2, lambda);
}

inline uint64_t tr_cost_bits(uint64_t n, int l1, int k, int lambda) {
    if (k <= 0) return 0;
    if (k > l1 - 1) k = l1 - 1;
    if (k == 0) return 0;
    return carry_cost_bits(n, k, lambda) + b2a_cost_bits(n, uint64_t(l1 - k), lambda);
}

inline uint64_t trunc_cost_bits(uint64_t n, int l1, int s, int lambda, bool nonneg) {
    if (s <= 0) return 0;
    if (s > l1 - 1) s = l1 - 1;
    return tr_cost_bits(n, l1, s, lambda) + ext_cost_bits(n, l1 - s, l1, lambda, nonneg);
}

inline uint64_t requant_cost_bits(uint64_t n, const QuantMeta& from, const QuantMeta& to,
                                  int lambda, bool nonneg) {
    const int l1 = from.bits, s1 = from.scale_log2;
    const int l2 = to.bits, s2 = to.scale_log2;
    if (l1 >= l2 && s1 <= s2) return 0;
    if (s1 > s2) {
        int k = s1 - s2;
        if (k > l1 - 1) k = l1 - 1;
        uint64_t c = tr_cost_bits(n, l1, k, lambda);
        if (l1 - k < l2) c += ext_cost_bits(n, l1 - k, l2, lambda, nonneg);
        return c;
    }
    bool ext_nonneg = nonneg && s1 == s2;
    return ext_cost_bits(n, l1, l2, lambda, ext_nonneg);
}

}  // namespace quant2pc

#endif  // QUANT2PC_PRIMITIVES_HPP_
