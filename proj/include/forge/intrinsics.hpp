#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <span>
#include <type_traits>
#include <vector>

#include "forge/bitstype.hpp"
#include "forge/machine.hpp"

namespace forge::intr {

// ---------------------------------------------------------------------------
// Typed views over device buffers. offset/stride are in elements of the
// underlying buffer, so alignment follows the underlying storage.

template <class T>
struct View {
  BufferId buf = -1;
  uint64_t offset = 0;
  uint64_t length = 0;
  uint64_t stride = 1;

  bool contiguous() const { return stride == 1; }
  uint64_t index_of(uint64_t i) const { return offset + i * stride; }

  View subview(uint64_t first, uint64_t count) const {
    return View{buf, offset + first * stride, count, stride};
  }
  View strided(uint64_t first, uint64_t count, uint64_t step) const {
    return View{buf, offset + first * stride, count, stride * step};
  }
};

// Maps C++ types to descriptors. Specialized for the builtin scalars here and
// for each registered composite next to its definition.
template <class T>
struct TypeOf;

#define FORGE_SCALAR_TYPEOF(T, S)                       \
  template <>                                           \
  struct TypeOf<T> {                                    \
    static const TypeDescriptor& get() {                \
      static const TypeDescriptor d = TypeDescriptor::primitive(S); \
      return d;                                         \
    }                                                   \
  };

FORGE_SCALAR_TYPEOF(uint8_t, Scalar::U8)
FORGE_SCALAR_TYPEOF(int8_t, Scalar::U8)
FORGE_SCALAR_TYPEOF(uint16_t, Scalar::U16)
FORGE_SCALAR_TYPEOF(int16_t, Scalar::U16)
FORGE_SCALAR_TYPEOF(uint32_t, Scalar::U32)
FORGE_SCALAR_TYPEOF(int32_t, Scalar::U32)
FORGE_SCALAR_TYPEOF(uint64_t, Scalar::U64)
FORGE_SCALAR_TYPEOF(int64_t, Scalar::U64)
FORGE_SCALAR_TYPEOF(float, Scalar::F32)
FORGE_SCALAR_TYPEOF(double, Scalar::F64)
#undef FORGE_SCALAR_TYPEOF

template <class T>
const TypeDescriptor& descriptor_of() {
  return TypeOf<T>::get();
}

/// Creates a typed view over a whole buffer; the element size must match.
template <class T>
View<T> make_view(const Machine& m, BufferId buf) {
  if (m.buffer_elem_size(buf) != sizeof(T))
    raise(ErrorCode::InvalidArgument, "view element size does not match buffer");
  return View<T>{buf, 0, m.buffer_length(buf), 1};
}

/// Creates a buffer whose element descriptor comes from the C++ type.
template <class T>
BufferId create_buffer(Machine& m, uint64_t length, uint32_t base_alignment = 0) {
  static_assert(std::is_trivially_copyable_v<T>);
  return m.create_buffer(descriptor_of<T>(), length, base_alignment);
}

// ---------------------------------------------------------------------------
// Scalar access

template <class T>
T load(Ctx& cx, const View<T>& v, uint64_t i,
       MemoryOrdering order = MemoryOrdering::Relaxed) {
  T out;
  cx.load(v.buf, v.index_of(i), std::as_writable_bytes(std::span<T>(&out, 1)), order);
  return out;
}

template <class T>
void store(Ctx& cx, const View<T>& v, uint64_t i, const T& value,
           MemoryOrdering order = MemoryOrdering::Relaxed) {
  cx.store(v.buf, v.index_of(i), std::as_bytes(std::span<const T>(&value, 1)), order);
}

/// The ordered-access pair: algorithm code never names orderings directly.
template <class T>
T ordered_load(Ctx& cx, const View<T>& v, uint64_t i) {
  return load(cx, v, i, MemoryOrdering::Acquire);
}

template <class T>
void ordered_store(Ctx& cx, const View<T>& v, uint64_t i, const T& value) {
  store(cx, v, i, value, MemoryOrdering::Release);
}

// ---------------------------------------------------------------------------
// Bitstype decomposition into 32-bit shuffle slots

struct Slot {
  uint32_t offset;  // byte offset within the value
  uint32_t len;     // 1, 2 or 4 bytes; sub-32-bit slots are zero-extended
};

/// Covers every non-padding byte exactly once, in field order. A 64-bit
/// primitive contributes two slots.
std::vector<Slot> decompose(const TypeDescriptor& desc);

namespace detail_slots {

template <class T>
const std::vector<Slot>& slots_of() {
  static const std::vector<Slot> s = decompose(descriptor_of<T>());
  return s;
}

}  // namespace detail_slots

// ---------------------------------------------------------------------------
// Warp shuffles for arbitrary Bitstypes. The value is decomposed into 32-bit
// slot words, every slot word is exchanged through the warp, and the result
// is reassembled with padding bytes zeroed.

template <class T>
T shuffle(Ctx& cx, const T& value, uint32_t source_lane) {
  static_assert(std::is_trivially_copyable_v<T>);
  const auto& slots = detail_slots::slots_of<T>();
  std::array<uint32_t, 64> words{};
  const std::byte* in = reinterpret_cast<const std::byte*>(&value);
  for (size_t s = 0; s < slots.size(); ++s)
    std::memcpy(&words[s], in + slots[s].offset, slots[s].len);

  std::array<uint32_t, 64> got{};
  cx.warp_exchange(std::as_bytes(std::span<const uint32_t>(words.data(), slots.size())),
                   source_lane,
                   std::as_writable_bytes(std::span<uint32_t>(got.data(), slots.size())));

  T out{};
  std::byte* raw = reinterpret_cast<std::byte*>(&out);
  std::memset(raw, 0, sizeof(T));
  for (size_t s = 0; s < slots.size(); ++s)
    std::memcpy(raw + slots[s].offset, &got[s], slots[s].len);
  return out;
}

/// Lane L receives the value of lane L+delta; lanes with L+delta past the
/// warp keep their own value. The reduction kernels rely on this convention.
template <class T>
T shuffle_down(Ctx& cx, const T& value, uint32_t delta) {
  uint32_t src = cx.lane_id() + delta;
  if (src >= cx.warp_width()) src = cx.lane_id();
  return shuffle(cx, value, src);
}

/// Mirror convention: lane L receives the value of lane L-delta, keeping its
/// own value when L < delta.
template <class T>
T shuffle_up(Ctx& cx, const T& value, uint32_t delta) {
  uint32_t src = cx.lane_id() >= delta ? cx.lane_id() - delta : cx.lane_id();
  return shuffle(cx, value, src);
}

// ---------------------------------------------------------------------------
// Vectorized access

struct LoadPattern {
  std::array<uint32_t, 16> seg{};
  uint32_t count = 0;

  std::span<const uint32_t> segments() const { return {seg.data(), count}; }
};

/// Greedy maximal decomposition of an nitem-element access at the given
/// element offset into power-of-two segments, each aligned to its own size.
/// nitem must be one of {1, 2, 4, 8, 16}.
LoadPattern vload_pattern(uint64_t offset, uint32_t nitem);

namespace detail_v {

inline bool vectorizable(uint32_t esz) { return std::has_single_bit(esz); }

// Same greedy rule with the segment width additionally capped so that no
// event outgrows the buffer's base alignment.
inline LoadPattern pattern_capped(uint64_t offset, uint32_t nitem, uint32_t max_seg) {
  LoadPattern p;
  uint64_t o = offset;
  uint32_t rem = nitem;
  while (rem > 0) {
    uint32_t by_align = o == 0 ? nitem : (uint32_t)std::min<uint64_t>(1ull << std::countr_zero(o), nitem);
    uint32_t by_rem = std::bit_floor(rem);
    uint32_t s = std::min({by_align, by_rem, nitem, max_seg});
    p.seg[p.count++] = s;
    o += s;
    rem -= s;
  }
  return p;
}

}  // namespace detail_v

/// Loads nitem contiguous elements. Contiguous power-of-two-sized elements go
/// through the pattern decomposition, one memory event per segment; strided
/// views and odd-sized elements fall back to one scalar event per element.
template <class T>
void vload_n(Ctx& cx, const View<T>& v, uint64_t start, uint32_t nitem, T* out) {
  if (v.stride != 1 || !detail_v::vectorizable(sizeof(T)) || nitem == 1) {
    for (uint32_t k = 0; k < nitem; ++k) out[k] = load(cx, v, start + k);
    return;
  }
  uint64_t abs = v.offset + start;
  uint32_t max_seg = std::max<uint32_t>(1, cx.buffer_alignment(v.buf) / sizeof(T));
  LoadPattern p = detail_v::pattern_capped(abs, nitem, max_seg);
  uint64_t idx = abs;
  T* dst = out;
  for (uint32_t s = 0; s < p.count; ++s) {
    uint32_t w = p.seg[s];
    cx.load_vector(v.buf, idx, w, std::as_writable_bytes(std::span<T>(dst, w)));
    idx += w;
    dst += w;
  }
}

template <class T>
void vstore_n(Ctx& cx, const View<T>& v, uint64_t start, uint32_t nitem, const T* vals) {
  if (v.stride != 1 || !detail_v::vectorizable(sizeof(T)) || nitem == 1) {
    for (uint32_t k = 0; k < nitem; ++k) store(cx, v, start + k, vals[k]);
    return;
  }
  uint64_t abs = v.offset + start;
  uint32_t max_seg = std::max<uint32_t>(1, cx.buffer_alignment(v.buf) / sizeof(T));
  LoadPattern p = detail_v::pattern_capped(abs, nitem, max_seg);
  uint64_t idx = abs;
  const T* src = vals;
  for (uint32_t s = 0; s < p.count; ++s) {
    uint32_t w = p.seg[s];
    cx.store_vector(v.buf, idx, w, std::as_bytes(std::span<const T>(src, w)));
    idx += w;
    src += w;
  }
}

template <class T, uint32_t N>
std::array<T, N> vload(Ctx& cx, const View<T>& v, uint64_t start) {
  static_assert(N == 1 || N == 2 || N == 4 || N == 8 || N == 16);
  std::array<T, N> out;
  vload_n(cx, v, start, N, out.data());
  return out;
}

template <class T, uint32_t N>
void vstore(Ctx& cx, const View<T>& v, uint64_t start, const std::array<T, N>& vals) {
  static_assert(N == 1 || N == 2 || N == 4 || N == 8 || N == 16);
  vstore_n(cx, v, start, N, vals.data());
}

}  // namespace forge::intr
