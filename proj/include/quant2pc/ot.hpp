#ifndef QUANT2PC_OT_HPP_
#define QUANT2PC_OT_HPP_

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "quant2pc/bits.hpp"
#include "quant2pc/ring.hpp"
#include "quant2pc/transport.hpp"

// Batched 1-out-of-2 oblivious transfer with communication metered at
// exactly lambda + 2*l bits per instance.
//
// Two backends share the contract:
//
//  * MeteredSim (default): the receiver sends a lambda-bit masked choice
//    block per instance, the sender replies with two masked l-bit
//    payloads; masks come from a pre-shared seeded random oracle. This
//    reproduces the target communication accounting and is correct, but
//    it is NOT cryptographically secure against a transcript analyst who
//    knows the shared seed. Use it for cost experiments only.
//  * HashDemo: a Diffie-Hellman style semi-honest OT over a 61-bit prime
//    field, for demonstration. Parameters are far too small for real
//    security; communication is metered at actual bytes.

namespace quant2pc {

struct SecurityParam {
    int lambda = 128;

    void check() const {
        if (lambda != 80 && lambda != 128 && lambda != 256)
            throw std::invalid_argument("lambda must be one of {80,128,256}");
    }
};

// Per-instance messages are vectors of `elems_per_msg` values, each
// `elem_bits` wide; message length l = elems_per_msg * elem_bits bits.
struct OtBatchParams {
    size_t count = 0;
    int elem_bits = 1;
    size_t elems_per_msg = 1;
    SecurityParam sec;

    size_t msg_bits() const { return elems_per_msg * static_cast<size_t>(elem_bits); }
    void check() const {
        sec.check();
        if (elem_bits < 1 || elem_bits > 64) throw std::invalid_argument("ot: elem_bits out of [1,64]");
        if (elems_per_msg == 0) throw std::invalid_argument("ot: empty message");
    }
};

// n * (lambda + 2l) bits.
inline uint64_t ot_cost_bits(uint64_t n, uint64_t msg_bits, int lambda) {
    return n * (static_cast<uint64_t>(lambda) + 2 * msg_bits);
}

// Bits a batch actually puts on the wire: each direction rounds up to
// whole bytes (lambda is a multiple of 8, so only the payload direction
// can round).
inline uint64_t ot_metered_bits(uint64_t n, uint64_t msg_bits, int lambda) {
    if (n == 0) return 0;
    return n * static_cast<uint64_t>(lambda) + (2 * n * msg_bits + 7) / 8 * 8;
}

enum class OtBackend { MeteredSim, HashDemo };

namespace detail {

// 61-bit Mersenne prime group for the demo backend.
inline constexpr uint64_t kDemoPrime = (uint64_t{1} << 61) - 1;

inline uint64_t mulmod61(uint64_t a, uint64_t b) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(a) * b) % kDemoPrime);
}
inline uint64_t powmod61(uint64_t base, uint64_t exp) {
    uint64_t r = 1;
    base %= kDemoPrime;
    while (exp) {
        if (exp & 1) r = mulmod61(r, base);
        base = mulmod61(base, base);
        exp >>= 1;
    }
    return r;
}
inline uint64_t invmod61(uint64_t a) { return powmod61(a, kDemoPrime - 2); }

// Key-derivation hash for the demo backend (random-oracle stand-in).
inline uint64_t demo_hash(uint64_t point, uint64_t ctr) {
    uint64_t s = point ^ (ctr * 0x9e3779b97f4a7c15ULL);
    return splitmix64(s);
}

}  // namespace detail

// One OT session per channel flow. The metered-sim backend needs a
// pre-shared random oracle; the server picks the seed and ships it once
// under the "ot.setup" label.
class OtSession {
public:
    OtSession(Channel& ch, uint64_t local_seed, OtBackend backend = OtBackend::MeteredSim)
        : ch_(ch), backend_(backend) {
        LabelScope scope(ch_, "ot.setup");
        if (ch_.party() == Party::Server) {
            std::mt19937_64 g(local_seed);
            uint64_t seed = g();
            ch_.send_u64(seed);
            oracle_.seed(seed);
        } else {
            oracle_.seed(ch_.recv_u64());
        }
        local_rng_.seed(local_seed ^ 0x5eedULL ^ static_cast<uint64_t>(ch_.party()));
    }

    Channel& channel() { return ch_; }
    std::mt19937_64& rng() { return local_rng_; }

    // Sender side. m0/m1 are flat arrays of count*elems_per_msg elements.
    void send(const OtBatchParams& p, const std::vector<uint64_t>& m0,
              const std::vector<uint64_t>& m1) {
        p.check();
        check_len(p, m0, "m0");
        check_len(p, m1, "m1");
        if (p.count == 0) return;
        LabelScope scope(ch_, ot_label());
        ch_.meter().add_ot_instances(ch_.label(), p.count);
        if (backend_ == OtBackend::MeteredSim)
            send_sim(p, m0, m1);
        else
            send_demo(p, m0, m1);
    }

    // Receiver side; returns the chosen messages, flat count*elems_per_msg.
    std::vector<uint64_t> receive(const OtBatchParams& p, const std::vector<uint8_t>& choices) {
        p.check();
        if (choices.size() != p.count) throw std::invalid_argument("ot: choices length mismatch");
        if (p.count == 0) return {};
        LabelScope scope(ch_, ot_label());
        // mirror the sender-side instance count on private-meter backends
        if (!ch_.shared_meter()) ch_.meter().add_ot_instances(ch_.label(), p.count);
        return backend_ == OtBackend::MeteredSim ? receive_sim(p, choices)
                                                 : receive_demo(p, choices);
    }

private:
    // Bare OT use is charged under "ot"; protocols that set their own
    // label scope keep it.
    std::string ot_label() const { return ch_.label() == "default" ? "ot" : ch_.label(); }

    static void check_len(const OtBatchParams& p, const std::vector<uint64_t>& m, const char* name) {
        if (m.size() != p.count * p.elems_per_msg)
            throw std::invalid_argument(std::string("ot: bad message array length for ") + name);
    }

    uint64_t oracle_bits(int bits) { return oracle_() & ring_mask(bits); }

    // --- metered-sim backend -------------------------------------------

    std::vector<uint64_t> receive_sim(const OtBatchParams& p, const std::vector<uint8_t>& choices) {
        // phase 1: lambda bits per instance, random-looking, low bit
        // carries the masked choice.
        BitWriter w;
        std::vector<uint64_t> pad_lo(p.count);
        for (size_t i = 0; i < p.count; ++i) {
            uint64_t first = oracle_();
            pad_lo[i] = first & 1;
            uint64_t block = (first & ~uint64_t{1}) | ((choices[i] ^ pad_lo[i]) & 1);
            int remaining = p.sec.lambda;
            w.put(block, remaining >= 64 ? 64 : remaining);
            remaining -= 64;
            while (remaining > 0) {
                w.put(oracle_bits(remaining >= 64 ? 64 : remaining), remaining >= 64 ? 64 : remaining);
                remaining -= 64;
            }
        }
        ch_.send(w.take());

        // phase 2: two masked payloads per instance; slot A is the chosen
        // message, slot B is oracle output independent of both messages.
        auto frame = ch_.recv();
        if (frame.size() != (p.count * 2 * p.msg_bits() + 7) / 8)
            throw std::runtime_error("ot: parameter mismatch between parties");
        BitReader r(frame);
        std::vector<uint64_t> out(p.count * p.elems_per_msg);
        for (size_t i = 0; i < p.count; ++i) {
            for (size_t e = 0; e < p.elems_per_msg; ++e) {
                uint64_t pad = oracle_bits(p.elem_bits);
                out[i * p.elems_per_msg + e] = (r.get(p.elem_bits) ^ pad) & ring_mask(p.elem_bits);
            }
            for (size_t e = 0; e < p.elems_per_msg; ++e) {
                oracle_bits(p.elem_bits);  // keep oracle streams aligned
                r.get(p.elem_bits);
            }
        }
        return out;
    }

    void send_sim(const OtBatchParams& p, const std::vector<uint64_t>& m0,
                  const std::vector<uint64_t>& m1) {
        auto frame = ch_.recv();
        if (frame.size() != (p.count * static_cast<size_t>(p.sec.lambda) + 7) / 8)
            throw std::runtime_error("ot: parameter mismatch between parties");
        BitReader r(frame);
        std::vector<uint8_t> choices(p.count);
        for (size_t i = 0; i < p.count; ++i) {
            uint64_t first = oracle_();
            uint64_t pad_lo = first & 1;
            int remaining = p.sec.lambda;
            uint64_t block = r.get(remaining >= 64 ? 64 : remaining);
            remaining -= 64;
            while (remaining > 0) {
                oracle_bits(remaining >= 64 ? 64 : remaining);
                r.get(remaining >= 64 ? 64 : remaining);
                remaining -= 64;
            }
            choices[i] = uint8_t((block ^ pad_lo) & 1);
        }

        BitWriter w;
        for (size_t i = 0; i < p.count; ++i) {
            const std::vector<uint64_t>& chosen = choices[i] ? m1 : m0;
            for (size_t e = 0; e < p.elems_per_msg; ++e) {
                uint64_t pad = oracle_bits(p.elem_bits);
                w.put((chosen[i * p.elems_per_msg + e] ^ pad) & ring_mask(p.elem_bits), p.elem_bits);
            }
            for (size_t e = 0; e < p.elems_per_msg; ++e)
                w.put(oracle_bits(p.elem_bits), p.elem_bits);
        }
        ch_.send(w.take());
    }

    // --- hash-demo backend ---------------------------------------------

    void send_demo(const OtBatchParams& p, const std::vector<uint64_t>& m0,
                   const std::vector<uint64_t>& m1) {
        constexpr uint64_t g = 3;
        uint64_t a = local_rng_() % (detail::kDemoPrime - 2) + 1;
        uint64_t A = detail::powmod61(g, a);
        ch_.send_u64(A);

        auto frame = ch_.recv();
        if (frame.size() != p.count * 8) throw std::runtime_error("ot: parameter mismatch between parties");
        BitReader r(frame);
        uint64_t Ainv = detail::invmod61(A);
        BitWriter w;
        for (size_t i = 0; i < p.count; ++i) {
            uint64_t B = r.get(64);
            uint64_t k0 = detail::powmod61(B, a);
            uint64_t k1 = detail::powmod61(detail::mulmod61(B, Ainv), a);
            for (size_t e = 0; e < p.elems_per_msg; ++e)
                w.put((m0[i * p.elems_per_msg + e] ^ detail::demo_hash(k0, e)) & ring_mask(p.elem_bits),
                      p.elem_bits);
            for (size_t e = 0; e < p.elems_per_msg; ++e)
                w.put((m1[i * p.elems_per_msg + e] ^ detail::demo_hash(k1, e)) & ring_mask(p.elem_bits),
                      p.elem_bits);
        }
        ch_.send(w.take());
    }

    std::vector<uint64_t> receive_demo(const OtBatchParams& p, const std::vector<uint8_t>& choices) {
        constexpr uint64_t g = 3;
        uint64_t A = ch_.recv_u64();
        BitWriter w;
        std::vector<uint64_t> b(p.count);
        for (size_t i = 0; i < p.count; ++i) {
            b[i] = local_rng_() % (detail::kDemoPrime - 2) + 1;
            uint64_t B = detail::powmod61(g, b[i]);
            if (choices[i]) B = detail::mulmod61(A, B);
            w.put(B, 64);
        }
        ch_.send(w.take());

        auto frame = ch_.recv();
        BitReader r(frame);
        std::vector<uint64_t> out(p.count * p.elems_per_msg);
        for (size_t i = 0; i < p.count; ++i) {
            uint64_t k = detail::powmod61(A, b[i]);
            for (int slot = 0; slot < 2; ++slot)
                for (size_t e = 0; e < p.elems_per_msg; ++e) {
                    uint64_t y = r.get(p.elem_bits);
                    if (slot == static_cast<int>(choices[i]))
                        out[i * p.elems_per_msg + e] = (y ^ detail::demo_hash(k, e)) & ring_mask(p.elem_bits);
                }
        }
        return out;
    }

    Channel& ch_;
    OtBackend backend_;
    std::mt19937_64 oracle_;
    std::mt19937_64 local_rng_;
};

}  // namespace quant2pc

#endif  // QUANT2PC_OT_HPP_
