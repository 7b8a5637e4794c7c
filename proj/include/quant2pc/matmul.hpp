#ifndef QUANT2PC_MATMUL_HPP_
#define QUANT2PC_MATMUL_HPP_

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "quant2pc/ot.hpp"
#include "quant2pc/primitives.hpp"
#include "quant2pc/ring.hpp"

// OT-based secure matrix multiplication Y = W * X, where the server holds
// W in plaintext (d1 x d2, l1-bit signed) and X (d2 x d3, l2-bit) is
// additively shared. Output is shared at L = l1 + l2 + e bits (e =
// ceil(log2 d2)), or a caller-chosen wider width.
//
// Four variants, indexed as in the cost table:
//   1: keep X at l2 (widening plaintext W is free),      server sends
//   2: keep X at l2,                                     client sends
//   3: extend <X> by e bits,                             server sends
//   4: extend <X> by e bits (the conventional default),  client sends
// "Server sends" splits the client's share into bit-planes (the client
// chooses); "client sends" splits W into bit-planes (the server chooses).
//
// Exactness: Y = W*rho_s + W*rho_c - 2^lw * W*w - 2^(lw-1) * W*J, where
// rho are the (sign-biased) share residues at working width lw, w is the
// share-sum wrap bit, and J is all-ones (the bias correction, local to
// the server). Bit-plane OT messages carry decreasing widths L-b, which
// keeps every term exact; the MSB plane of a signed split carries weight
// -2^(nb-1). Non-negative X skips the bias and gets the wrap bit from a
// single OR-of-MSBs OT.

namespace quant2pc {

struct MatmulDims {
    size_t d1 = 1, d2 = 1, d3 = 1;
    int l1 = 8, l2 = 8;

    int e() const { return ceil_log2(d2); }
    int lacc() const { return l1 + l2 + e(); }
    void check() const {
        if (d1 == 0 || d2 == 0 || d3 == 0) throw std::invalid_argument("matmul: zero dimension");
        if (l1 < 1 || l2 < 1 || lacc() > kMaxBits)
            throw std::invalid_argument("matmul: accumulator exceeds 64 bits");
    }
};

struct MmCost {
    uint64_t ext_bits = 0;
    uint64_t mult_bits = 0;
    uint64_t wrap_bits = 0;
    uint64_t total() const { return ext_bits + mult_bits + wrap_bits; }
};

struct MatmulPlanChoice {
    int variant = 4;           // 1..4
    char extend = 'X';         // 'W' or 'X'
    Party sender = Party::Client;
    MmCost predicted;
};

// The cost-table expressions taken literally (big-O constants = 1).
// Variant 4's mult column is implemented as printed, (l1+e), even though
// the underlying protocol's message width is (l2+e)-shaped; the exact
// predictor below is what drives selection.
inline MmCost cost_variant(int v, const MatmulDims& d, int lambda) {
    d.check();
    const uint64_t d1 = d.d1, d2 = d.d2, d3 = d.d3;
    const uint64_t l1 = d.l1, l2 = d.l2, e = d.e(), lam = lambda;
    MmCost c;
    switch (v) {
        case 1:
            c.ext_bits = 0;
            c.mult_bits = d2 * d3 * l2 * (lam + 2 * (l1 + e) * d1);
            c.wrap_bits = d2 * d3 * (lam + 14) * l2 + d1 * d2 * (lam + 2 * (l1 + e) * d3);
            break;
        case 2:
            c.ext_bits = 0;
            c.mult_bits = d1 * d2 * (l1 + e) * (lam + 2 * l2 * d3);
            c.wrap_bits = d2 * d3 * (lam + 14) * l2 + d1 * d2 * (lam + (l1 + e) * d3);
            break;
        case 3:
            c.ext_bits = d2 * d3 * lam * (l2 + 1);
            c.mult_bits = d2 * d3 * (l2 + e) * (lam + 2 * l1 * d1);
            c.wrap_bits = d2 * d3 * (lam + 14) * (l2 + e) + d1 * d2 * (lam + l1 * d3);
            break;
        case 4:
            c.ext_bits = d2 * d3 * lam * (l2 + 1);
            c.mult_bits = d1 * d2 * l1 * (lam + 2 * (l1 + e) * d3);
            c.wrap_bits = d2 * d3 * (lam + 14) * (l2 + e) + d1 * d2 * (lam + l1 * d3);
            break;
        default:
            throw std::invalid_argument("matmul: variant out of 1..4");
    }
    return c;
}

// Exact wire accounting of the implementation below (per-batch byte
// rounding included). This is what adaptive selection minimizes.
inline MmCost predict_variant(int v, const MatmulDims& d, int lambda, bool nonneg,
                              int out_bits = 0) {
    d.check();
    if (v < 1 || v > 4) throw std::invalid_argument("matmul: variant out of 1..4");
    const int e = d.e();
    const int L = out_bits == 0 ? d.lacc() : out_bits;
    if (L < d.lacc() || L > kMaxBits) throw std::invalid_argument("matmul: bad output width");
    const uint64_t nx = d.d2 * d.d3;
    const bool extend_x = (v == 3 || v == 4);
    const int lw = extend_x ? d.l2 + e : d.l2;
    MmCost c;
    if (extend_x && e > 0) {
        c.ext_bits = nonneg ? ot_metered_bits(nx, lw, lambda)
                            : 2 * uint64_t(d.l2) * ot_metered_bits(nx, 1, lambda) +
                                  ot_metered_bits(nx, lw, lambda);
    }
    if (v == 1 || v == 3) {
        for (int b = 0; b < lw; ++b)
            c.mult_bits += ot_metered_bits(nx, uint64_t(L - b) * d.d1, lambda);
    } else {
        const int nb = d.l1;
        for (int b = 0; b < nb; ++b)
            c.mult_bits += ot_metered_bits(d.d1 * d.d2, uint64_t(L - b) * d.d3, lambda);
    }
    c.wrap_bits = (nonneg ? 1 : 2 * uint64_t(lw)) * ot_metered_bits(nx, 1, lambda) +
                  ot_metered_bits(nx, uint64_t(L - lw) * d.d1, lambda);
    return c;
}

inline MatmulPlanChoice select_variant(const MatmulDims& d, int lambda, bool nonneg = false,
                                       int out_bits = 0) {
    MatmulPlanChoice best;
    uint64_t best_total = ~uint64_t{0};
    for (int v = 1; v <= 4; ++v) {
        MmCost c = predict_variant(v, d, lambda, nonneg, out_bits);
        if (c.total() < best_total) {
            best_total = c.total();
            best = MatmulPlanChoice{v, (v <= 2) ? 'W' : 'X',
                                    (v == 1 || v == 3) ? Party::Server : Party::Client, c};
        }
    }
    return best;
}

namespace detail {

// One bit-plane of the multiplication where the holder of the split
// operand is the OT chooser. Accumulates into y (flat d1 x d3, mod 2^L).
struct MmAccum {
    std::vector<uint64_t>& y;
    size_t d3;
    int L;
    void add(size_t i, size_t k, uint64_t v) {
        y[i * d3 + k] = ring_reduce(y[i * d3 + k] + v, L);
    }
    void sub(size_t i, size_t k, uint64_t v) {
        y[i * d3 + k] = ring_reduce(y[i * d3 + k] - v, L);
    }
};

}  // namespace detail

// SPMD secure matmul. The server passes real W; the client passes a
// tensor of the same shape/meta (values ignored — the architecture is
// public, the weights are not). X is the local share. variant 0 selects
// adaptively; out_bits 0 uses l1+l2+e.
inline Share secure_matmul(OtSession& ot, const RingTensor& W, const Share& X, int variant = 0,
                           int out_bits = 0) {
    if (W.shape().size() != 2 || X.tensor.shape().size() != 2 ||
        W.cols() != X.tensor.rows())
        throw std::invalid_argument("matmul: dimension mismatch");
    Channel& ch = ot.channel();
    if (X.party != ch.party()) throw std::invalid_argument("matmul: share/channel party mismatch");
    MatmulDims d{W.rows(), W.cols(), X.tensor.cols(), W.meta().bits, X.bits()};
    d.check();
    const int e = d.e();
    const int L = out_bits == 0 ? d.lacc() : out_bits;
    if (L < d.lacc() || L > kMaxBits) throw std::invalid_argument("matmul: bad output width");
    const bool nonneg = X.sign_fact == SignFact::NonNegative;
    if (variant == 0) variant = select_variant(d, SecurityParam{}.lambda, nonneg, out_bits).variant;
    if (variant < 1 || variant > 4) throw std::invalid_argument("matmul: variant out of 1..4");

    const Party me = ch.party();
    const size_t d1 = d.d1, d2 = d.d2, d3 = d.d3;
    const size_t nx = d2 * d3;

    // step 1: optional extension of <X> by e bits (free when extending W)
    Share Xw = X;
    int lw = d.l2;
    if ((variant == 3 || variant == 4) && e > 0) {
        Xw = ext(ot, X, d.l2 + e, "mm.ext", "mm.ext");
        lw = d.l2 + e;
    }

    // working residues; generic path biases the value by 2^(lw-1) on the
    // server share so the reconstructed residue is the unsigned value
    std::vector<uint64_t> rho(nx);
    const uint64_t bias = uint64_t{1} << (lw - 1);
    for (size_t t = 0; t < nx; ++t) {
        uint64_t v = Xw.tensor.at(t);
        if (!nonneg && me == Party::Server) v += bias;
        rho[t] = ring_reduce(v, lw);
    }

    // step 2: wrap bit of the share sum, XOR-shared
    std::vector<uint8_t> wxor;
    if (nonneg) {
        std::vector<uint8_t> msb(nx);
        for (size_t t = 0; t < nx; ++t) msb[t] = uint8_t((rho[t] >> (lw - 1)) & 1);
        wxor = or_bits_x(ot, msb, "mm.wrap");
    } else {
        wxor = carry_xor(ot, rho, lw, "mm.wrap");
    }

    std::vector<uint64_t> y(d1 * d3, 0);
    detail::MmAccum acc{y, d3, L};

    // step 3: MUX — shares of W[:,j] * w_jk at width L - lw, applied as
    // the -2^lw correction
    {
        LabelScope scope(ch, "mm.wrap");
        const int mw = L - lw;
        OtBatchParams p{nx, mw, d1, SecurityParam{}};
        if (me == Party::Server) {
            std::vector<uint64_t> m0(nx * d1), m1(nx * d1);
            std::vector<uint64_t> r(nx * d1);
            for (size_t j = 0; j < d2; ++j)
                for (size_t k = 0; k < d3; ++k) {
                    size_t t = j * d3 + k;
                    for (size_t i = 0; i < d1; ++i) {
                        uint64_t wij = from_signed(W.signed_at(i * d2 + j), mw);
                        r[t * d1 + i] = ot.rng()() & ring_mask(mw);
                        uint64_t u = wxor[t];
                        m0[t * d1 + i] = ring_reduce(wij * u + r[t * d1 + i], mw);
                        m1[t * d1 + i] = ring_reduce(wij * (u ^ 1) + r[t * d1 + i], mw);
                    }
                }
            ot.send(p, m0, m1);
            // our share of W[:,j]*w is -r; correction -2^lw * (-r) = +2^lw r
            for (size_t j = 0; j < d2; ++j)
                for (size_t k = 0; k < d3; ++k)
                    for (size_t i = 0; i < d1; ++i)
                        acc.add(i, k, r[(j * d3 + k) * d1 + i] << lw);
        } else {
            auto q = ot.receive(p, wxor);
            for (size_t j = 0; j < d2; ++j)
                for (size_t k = 0; k < d3; ++k)
                    for (size_t i = 0; i < d1; ++i) acc.sub(i, k, q[(j * d3 + k) * d1 + i] << lw);
        }
    }

    // step 4: OT-based multiplication of W with the peer's residues
    {
        LabelScope scope(ch, "mm.ot");
        if (variant == 1 || variant == 3) {
            // client splits its residues; server offers (r, r + W[:,j])
            for (int b = 0; b < lw; ++b) {
                const int width = L - b;
                OtBatchParams p{nx, width, d1, SecurityParam{}};
                if (me == Party::Server) {
                    std::vector<uint64_t> m0(nx * d1), m1(nx * d1), r(nx * d1);
                    for (size_t j = 0; j < d2; ++j)
                        for (size_t k = 0; k < d3; ++k) {
                            size_t t = j * d3 + k;
                            for (size_t i = 0; i < d1; ++i) {
                                r[t * d1 + i] = ot.rng()() & ring_mask(width);
                                m0[t * d1 + i] = r[t * d1 + i];
                                m1[t * d1 + i] = ring_reduce(
                                    r[t * d1 + i] + from_signed(W.signed_at(i * d2 + j), width),
                                    width);
                            }
                        }
                    ot.send(p, m0, m1);
                    for (size_t j = 0; j < d2; ++j)
                        for (size_t k = 0; k < d3; ++k)
                            for (size_t i = 0; i < d1; ++i)
                                acc.sub(i, k, r[(j * d3 + k) * d1 + i] << b);
                } else {
                    std::vector<uint8_t> choice(nx);
                    for (size_t t = 0; t < nx; ++t) choice[t] = uint8_t((rho[t] >> b) & 1);
                    auto q = ot.receive(p, choice);
                    for (size_t j = 0; j < d2; ++j)
                        for (size_t k = 0; k < d3; ++k)
                            for (size_t i = 0; i < d1; ++i)
                                acc.add(i, k, q[(j * d3 + k) * d1 + i] << b);
                }
            }
        } else {
            // server splits W at its native width (the top bit is the
            // two's-complement sign plane); client offers (r, r + rho_row)
            const int nb = d.l1;
            const size_t nw = d1 * d2;
            for (int b = 0; b < nb; ++b) {
                const int width = L - b;
                const bool neg = (b == nb - 1);  // two's-complement MSB plane
                OtBatchParams p{nw, width, d3, SecurityParam{}};
                if (me == Party::Client) {
                    std::vector<uint64_t> m0(nw * d3), m1(nw * d3), r(nw * d3);
                    for (size_t i = 0; i < d1; ++i)
                        for (size_t j = 0; j < d2; ++j) {
                            size_t t = i * d2 + j;
                            for (size_t k = 0; k < d3; ++k) {
                                r[t * d3 + k] = ot.rng()() & ring_mask(width);
                                m0[t * d3 + k] = r[t * d3 + k];
                                m1[t * d3 + k] =
                                    ring_reduce(r[t * d3 + k] + rho[j * d3 + k], width);
                            }
                        }
                    ot.send(p, m0, m1);
                    for (size_t i = 0; i < d1; ++i)
                        for (size_t j = 0; j < d2; ++j)
                            for (size_t k = 0; k < d3; ++k) {
                                uint64_t v = r[(i * d2 + j) * d3 + k] << b;
                                neg ? acc.add(i, k, v) : acc.sub(i, k, v);
                            }
                } else {
                    std::vector<uint8_t> choice(nw);
                    for (size_t i = 0; i < d1; ++i)
                        for (size_t j = 0; j < d2; ++j) {
                            uint64_t wext = from_signed(W.signed_at(i * d2 + j), nb);
                            choice[i * d2 + j] = uint8_t((wext >> b) & 1);
                        }
                    auto q = ot.receive(p, choice);
                    for (size_t i = 0; i < d1; ++i)
                        for (size_t j = 0; j < d2; ++j)
                            for (size_t k = 0; k < d3; ++k) {
                                uint64_t v = q[(i * d2 + j) * d3 + k] << b;
                                neg ? acc.sub(i, k, v) : acc.add(i, k, v);
                            }
                }
            }
        }
    }

    // step 5: server-local terms — W * (own residues) and the bias fix
    if (me == Party::Server) {
        for (size_t i = 0; i < d1; ++i)
            for (size_t k = 0; k < d3; ++k) {
                uint64_t s = 0;
                for (size_t j = 0; j < d2; ++j) {
                    uint64_t wij = from_signed(W.signed_at(i * d2 + j), L);
                    s += wij * rho[j * d3 + k];
                    if (!nonneg) s -= wij * bias;  // undo the 2^(lw-1) bias: -2^(lw-1) * W * J
                }
                acc.add(i, k, s);
            }
    }

    QuantMeta m{L, W.meta().scale_log2 + X.meta().scale_log2, true};
    RingTensor yt({d1, d3}, m, std::move(y));
    return Share{std::move(yt), me, SignFact::Unknown};
}

// Convolution on shares: im2col is a local rearrangement (padding is a
// share of zero on both sides), then secure matmul on the lowered dims.
inline Share secure_conv(OtSession& ot, const RingTensor& W, const Share& X,
                         const ConvGeometry& g, int variant = 0, int out_bits = 0) {
    RingTensor cols = im2col(X.tensor, g);
    Share xs{std::move(cols), X.party, X.sign_fact};
    Share y = secure_matmul(ot, W, xs, variant, out_bits);
    RingTensor shaped({g.out_channels, g.out_h(), g.out_w()}, y.tensor.meta(), y.tensor.data());
    return Share{std::move(shaped), y.party, y.sign_fact};
}

}  // namespace quant2pc

#endif  // QUANT2PC_MATMUL_HPP_
