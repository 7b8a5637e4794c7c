#ifndef QUANT2PC_BITS_HPP_
#define QUANT2PC_BITS_HPP_

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace quant2pc {

// Dense LSB-first bit packing for wire payloads, so metered bytes equal
// ceil(bits/8) exactly.
class BitWriter {
public:
    void put(uint64_t value, int bits) {
        for (int i = 0; i < bits; ++i) push_bit((value >> i) & 1);
    }
    void put_bit(int b) { push_bit(b & 1); }

    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t bit_count() const { return nbits_; }

private:
    void push_bit(uint64_t b) {
        if (nbits_ % 8 == 0) buf_.push_back(0);
        buf_.back() |= uint8_t(b << (nbits_ % 8));
        ++nbits_;
    }
    std::vector<uint8_t> buf_;
    size_t nbits_ = 0;
};

class BitReader {
public:
    explicit BitReader(const std::vector<uint8_t>& buf) : buf_(buf) {}

    uint64_t get(int bits) {
        uint64_t v = 0;
        for (int i = 0; i < bits; ++i) v |= uint64_t(next_bit()) << i;
        return v;
    }
    int get_bit() { return next_bit(); }

private:
    int next_bit() {
        if (pos_ / 8 >= buf_.size()) throw std::runtime_error("bit stream underrun");
        int b = (buf_[pos_ / 8] >> (pos_ % 8)) & 1;
        ++pos_;
        return b;
    }
    const std::vector<uint8_t>& buf_;
    size_t pos_ = 0;
};

// splitmix64: seeding helper with well-spread output.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace quant2pc

#endif  // QUANT2PC_BITS_HPP_
