#ifndef QUANT2PC_RING_HPP_
#define QUANT2PC_RING_HPP_

#include <cstdint>
#include <cstddef>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

// Fixed-bit-width modular integer tensors with quantization metadata,
// plus the plaintext reference semantics every secure protocol in this
// library is checked against.

namespace quant2pc {

inline constexpr int kMaxBits = 64;

// Mask selecting the low `bits` bits of a 64-bit word.
inline constexpr uint64_t ring_mask(int bits) {
    return bits >= 64 ? ~uint64_t{0} : ((uint64_t{1} << bits) - 1);
}

inline constexpr uint64_t ring_reduce(uint64_t v, int bits) {
    return v & ring_mask(bits);
}

// Two's-complement interpretation of an l-bit residue.
inline constexpr int64_t to_signed(uint64_t v, int bits) {
    if (bits >= 64) return static_cast<int64_t>(v);
    const uint64_t half = uint64_t{1} << (bits - 1);
    return v < half ? static_cast<int64_t>(v)
                    : static_cast<int64_t>(v) - static_cast<int64_t>(uint64_t{1} << bits);
}

inline constexpr uint64_t from_signed(int64_t v, int bits) {
    return ring_reduce(static_cast<uint64_t>(v), bits);
}

// Floor (arithmetic) right shift of an l-bit residue, result kept at l bits.
inline constexpr uint64_t arith_shift_right(uint64_t v, int bits, int shift) {
    if (shift <= 0) return ring_reduce(v, bits);
    if (shift > bits - 1) shift = bits - 1;  // floor saturates at 0 / -1
    int64_t s = to_signed(v, bits);
    return from_signed(s >> shift, bits);
}

struct QuantMeta {
    int bits = 32;        // l, 1..64
    int scale_log2 = 0;   // s, scale is 2^s
    bool is_signed = true;

    bool valid() const { return bits >= 1 && bits <= kMaxBits; }
    bool operator==(const QuantMeta&) const = default;
};

inline void check_meta(const QuantMeta& m) {
    if (!m.valid()) throw std::invalid_argument("QuantMeta: bits out of [1,64]");
}

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

// Tensor of l-bit ring elements in row-major order. Elements are stored
// as canonical residues in [0, 2^l).
class RingTensor {
public:
    RingTensor() = default;
    RingTensor(Shape shape, QuantMeta meta)
        : shape_(std::move(shape)), meta_(meta), data_(shape_numel(shape_), 0) {
        check_meta(meta_);
    }
    RingTensor(Shape shape, QuantMeta meta, std::vector<uint64_t> data)
        : shape_(std::move(shape)), meta_(meta), data_(std::move(data)) {
        check_meta(meta_);
        if (data_.size() != shape_numel(shape_))
            throw std::invalid_argument("RingTensor: data length does not match shape");
        for (auto& v : data_) v = ring_reduce(v, meta_.bits);
    }

    const Shape& shape() const { return shape_; }
    const QuantMeta& meta() const { return meta_; }
    QuantMeta& meta() { return meta_; }
    size_t numel() const { return data_.size(); }

    uint64_t at(size_t i) const { return data_[i]; }
    void set(size_t i, uint64_t v) { data_[i] = ring_reduce(v, meta_.bits); }
    int64_t signed_at(size_t i) const { return to_signed(data_[i], meta_.bits); }

    const std::vector<uint64_t>& data() const { return data_; }
    std::vector<uint64_t>& raw_data() { return data_; }

    // 2D helpers (matrices are shape {rows, cols}).
    size_t rows() const { return shape_.size() == 2 ? shape_[0] : 0; }
    size_t cols() const { return shape_.size() == 2 ? shape_[1] : 0; }
    uint64_t at2(size_t r, size_t c) const { return data_[r * shape_[1] + c]; }
    void set2(size_t r, size_t c, uint64_t v) { data_[r * shape_[1] + c] = ring_reduce(v, meta_.bits); }

    bool same_values(const RingTensor& o) const {
        return shape_ == o.shape_ && data_ == o.data_;
    }

private:
    Shape shape_;
    QuantMeta meta_;
    std::vector<uint64_t> data_;
};

// round-half-away-from-zero
inline int64_t round_half_away(double x) {
    return static_cast<int64_t>(x >= 0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

// Saturating quantization at ingestion: clamp(round(2^s * x)).
inline RingTensor quantize(const std::vector<double>& x, const Shape& shape, const QuantMeta& meta) {
    check_meta(meta);
    if (x.size() != shape_numel(shape))
        throw std::invalid_argument("quantize: data length does not match shape");
    RingTensor out(shape, meta);
    const double scale = std::ldexp(1.0, meta.scale_log2);
    int64_t lo, hi;
    if (meta.is_signed) {
        lo = meta.bits >= 64 ? INT64_MIN : -(int64_t{1} << (meta.bits - 1));
        hi = meta.bits >= 64 ? INT64_MAX : (int64_t{1} << (meta.bits - 1)) - 1;
    } else {
        lo = 0;
        hi = meta.bits >= 64 ? INT64_MAX : static_cast<int64_t>(ring_mask(meta.bits));
    }
    for (size_t i = 0; i < x.size(); ++i) {
        int64_t q = round_half_away(scale * x[i]);
        if (q < lo) q = lo;
        if (q > hi) q = hi;
        out.set(i, from_signed(q, meta.bits));
    }
    return out;
}

inline std::vector<double> dequantize(const RingTensor& t) {
    std::vector<double> out(t.numel());
    const double inv = std::ldexp(1.0, -t.meta().scale_log2);
    for (size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<double>(t.signed_at(i)) * inv;
    return out;
}

// Scalar reference for re-quantization. Mirrors the in-protocol branch
// structure exactly: shift first, width change second, floor shifts
// throughout. See requant() in primitives.hpp for the share-level twin.
inline uint64_t requant_scalar(uint64_t x, int l1, int s1, int l2, int s2) {
    if (l1 >= l2) {
        if (s1 <= s2) {
            uint64_t t = ring_reduce(x << (s2 - s1), l1);
            return ring_reduce(t, l2);
        }
        // s1 > s2: floor shift; TR and Trunc agree after reduction to l2
        uint64_t t = arith_shift_right(x, l1, s1 - s2);
        return ring_reduce(t, l2);
    }
    if (s1 > s2) {
        int k = s1 - s2;
        if (k > l1 - 1) k = l1 - 1;
        int lm = l1 - k;
        uint64_t t = ring_reduce(arith_shift_right(x, l1, s1 - s2), lm);
        return from_signed(to_signed(t, lm), l2);  // sign extend
    }
    uint64_t t = ring_reduce(x << (s2 - s1), l1);
    return from_signed(to_signed(t, l1), l2);
}

inline RingTensor requant_plain(const RingTensor& x, const QuantMeta& target) {
    check_meta(target);
    RingTensor out(x.shape(), target);
    for (size_t i = 0; i < x.numel(); ++i)
        out.set(i, requant_scalar(x.at(i), x.meta().bits, x.meta().scale_log2,
                                  target.bits, target.scale_log2));
    return out;
}

inline int ceil_log2(uint64_t n) {
    int e = 0;
    while ((uint64_t{1} << e) < n) ++e;
    return e;
}

// Accumulator width for a product-sum over d2 terms.
inline int accumulator_bits(int l1, int l2, size_t d2) {
    return l1 + l2 + ceil_log2(d2);
}

// W (d1 x d2) * X (d2 x d3), exact signed product-sum reduced into the
// accumulator ring. out_bits defaults to l1+l2+e which never overflows
// in the signed interpretation.
inline RingTensor matmul_plain(const RingTensor& W, const RingTensor& X, int out_bits = 0) {
    if (W.shape().size() != 2 || X.shape().size() != 2 || W.cols() != X.rows())
        throw std::invalid_argument("matmul_plain: dimension mismatch");
    const size_t d1 = W.rows(), d2 = W.cols(), d3 = X.cols();
    const int lacc = accumulator_bits(W.meta().bits, X.meta().bits, d2);
    if (out_bits == 0) out_bits = lacc;
    if (out_bits < lacc || out_bits > kMaxBits)
        throw std::invalid_argument("matmul_plain: accumulator width out of range");
    QuantMeta m{out_bits, W.meta().scale_log2 + X.meta().scale_log2, true};
    RingTensor Y({d1, d3}, m);
    for (size_t i = 0; i < d1; ++i)
        for (size_t k = 0; k < d3; ++k) {
            uint64_t acc = 0;
            for (size_t j = 0; j < d2; ++j) {
                uint64_t w = from_signed(W.signed_at(i * d2 + j), out_bits);
                uint64_t x = from_signed(X.signed_at(j * d3 + k), out_bits);
                acc += w * x;  // mod 2^64, reduced below
            }
            Y.set2(i, k, acc);
        }
    return Y;
}

struct ConvGeometry {
    size_t in_channels = 1, in_h = 1, in_w = 1;
    size_t out_channels = 1, kernel = 1;
    size_t stride = 1, pad = 0;

    size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    size_t patch() const { return in_channels * kernel * kernel; }

    void check() const {
        if (kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0)
            throw std::invalid_argument("conv: zero dimension");
        if (in_h + 2 * pad < kernel || in_w + 2 * pad < kernel)
            throw std::invalid_argument("conv: kernel larger than padded input");
    }
};

// im2col lowering: input (C,H,W) -> (C*k*k) x (out_h*out_w). Pure data
// rearrangement; on shares this is a local operation.
inline RingTensor im2col(const RingTensor& x, const ConvGeometry& g) {
    g.check();
    if (x.shape() != Shape{g.in_channels, g.in_h, g.in_w})
        throw std::invalid_argument("im2col: input shape mismatch");
    const size_t oh = g.out_h(), ow = g.out_w();
    RingTensor out({g.patch(), oh * ow}, x.meta());
    size_t row = 0;
    for (size_t c = 0; c < g.in_channels; ++c)
        for (size_t ky = 0; ky < g.kernel; ++ky)
            for (size_t kx = 0; kx < g.kernel; ++kx, ++row) {
                for (size_t oy = 0; oy < oh; ++oy)
                    for (size_t ox = 0; ox < ow; ++ox) {
                        int64_t iy = static_cast<int64_t>(oy * g.stride + ky) - static_cast<int64_t>(g.pad);
                        int64_t ix = static_cast<int64_t>(ox * g.stride + kx) - static_cast<int64_t>(g.pad);
                        uint64_t v = 0;
                        if (iy >= 0 && ix >= 0 && iy < static_cast<int64_t>(g.in_h) &&
                            ix < static_cast<int64_t>(g.in_w))
                            v = x.at((c * g.in_h + static_cast<size_t>(iy)) * g.in_w + static_cast<size_t>(ix));
                        out.set2(row, oy * ow + ox, v);
                    }
            }
    return out;
}

// Convolution via im2col + matmul_plain. Weights are (C_out) x (C_in*k*k).
inline RingTensor conv_plain(const RingTensor& x, const RingTensor& w, const ConvGeometry& g,
                             int out_bits = 0) {
    if (w.shape() != Shape{g.out_channels, g.patch()})
        throw std::invalid_argument("conv_plain: weight shape mismatch");
    RingTensor cols = im2col(x, g);
    RingTensor y = matmul_plain(w, cols, out_bits);
    return RingTensor({g.out_channels, g.out_h(), g.out_w()}, y.meta(), y.data());
}

inline RingTensor relu_plain(const RingTensor& x) {
    RingTensor out(x.shape(), x.meta());
    for (size_t i = 0; i < x.numel(); ++i)
        out.set(i, x.signed_at(i) > 0 ? x.at(i) : 0);
    return out;
}

// Simplified residual semantics: align b to a's meta (exactly: sign-extend
// first, then shift left -- the scale only grows), then add at l_add =
// a.bits + 1.
inline RingTensor residual_plain(const RingTensor& a, const RingTensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("residual_plain: shape mismatch");
    if (b.meta().scale_log2 > a.meta().scale_log2 || b.meta().bits > a.meta().bits)
        throw std::invalid_argument("residual_plain: residual must not exceed accumulator meta");
    const int l_add = a.meta().bits + 1;
    if (l_add > kMaxBits) throw std::invalid_argument("residual_plain: l_add exceeds 64");
    QuantMeta m{l_add, a.meta().scale_log2, true};
    RingTensor out(a.shape(), m);
    const int ds = a.meta().scale_log2 - b.meta().scale_log2;
    for (size_t i = 0; i < a.numel(); ++i) {
        uint64_t bi = from_signed(b.signed_at(i), l_add) << ds;
        out.set(i, from_signed(a.signed_at(i), l_add) + bi);
    }
    return out;
}

}  // namespace quant2pc

#endif  // QUANT2PC_RING_HPP_
