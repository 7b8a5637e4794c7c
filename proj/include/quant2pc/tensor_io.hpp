#ifndef QUANT2PC_TENSOR_IO_HPP_
#define QUANT2PC_TENSOR_IO_HPP_

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "quant2pc/ring.hpp"

// Self-describing binary tensor snapshot:
//   {bits:u8, scale_log2:i8, signed:u8, rank:u8, dims:u32[rank], data:u64[n]}
// all little-endian. Used by tests and the CLI to freeze tensors on disk.

namespace quant2pc {

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
    os.write(b, 4);
}
inline void put_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor snapshot: truncated");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("tensor snapshot: truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}
}  // namespace detail

inline void write_tensor(std::ostream& os, const RingTensor& t) {
    os.put(static_cast<char>(t.meta().bits));
    os.put(static_cast<char>(static_cast<int8_t>(t.meta().scale_log2)));
    os.put(t.meta().is_signed ? 1 : 0);
    os.put(static_cast<char>(t.shape().size()));
    for (size_t d : t.shape()) detail::put_u32(os, static_cast<uint32_t>(d));
    for (uint64_t v : t.data()) detail::put_u64(os, v);
}

inline RingTensor read_tensor(std::istream& is) {
    int bits = is.get();
    int scale = static_cast<int8_t>(is.get());
    int sgn = is.get();
    int rank = is.get();
    if (!is || rank < 0) throw std::runtime_error("tensor snapshot: bad header");
    Shape shape(static_cast<size_t>(rank));
    for (auto& d : shape) d = detail::get_u32(is);
    QuantMeta meta{bits, scale, sgn != 0};
    check_meta(meta);
    std::vector<uint64_t> data(shape_numel(shape));
    for (auto& v : data) v = detail::get_u64(is);
    return RingTensor(std::move(shape), meta, std::move(data));
}

}  // namespace quant2pc

#endif  // QUANT2PC_TENSOR_IO_HPP_
