#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "forge/intrinsics.hpp"

namespace forge::alg {

// ---------------------------------------------------------------------------
// UnitFloat8: 256 evenly spaced levels over [-1, 1], promoted to float before
// accumulation.

struct UnitFloat8 {
  uint8_t code;
};

inline float decode(UnitFloat8 v) { return -1.0f + 2.0f * float(v.code) / 255.0f; }

/// Nearest grid point; exact ties round toward the even code.
inline UnitFloat8 encode(float x) {
  if (x <= -1.0f) return {0};
  if (x >= 1.0f) return {255};
  float scaled = (x + 1.0f) * 0.5f * 255.0f;
  float r = std::nearbyintf(scaled);  // default rounding: ties to even
  return {static_cast<uint8_t>(r)};
}

// ---------------------------------------------------------------------------
// Quaternions under the Hamilton product: associative, not commutative.

struct Quaternion {
  float w, x, y, z;
};

inline Quaternion qmul(const Quaternion& a, const Quaternion& b) {
  return Quaternion{
      a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
      a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
      a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
      a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
  };
}

inline constexpr Quaternion quat_one{1.0f, 0.0f, 0.0f, 0.0f};

// ---------------------------------------------------------------------------
// 2x2 matrices over wrapping uint32: an exact noncommutative monoid, the
// sharpest probe for illegal reordering in scan combine steps.

struct Mat2 {
  uint32_t m[4];  // row-major: [0] [1] / [2] [3]
};

inline Mat2 mat2_mul(const Mat2& a, const Mat2& b) {
  return Mat2{{
      a.m[0] * b.m[0] + a.m[1] * b.m[2],
      a.m[0] * b.m[1] + a.m[1] * b.m[3],
      a.m[2] * b.m[0] + a.m[3] * b.m[2],
      a.m[2] * b.m[1] + a.m[3] * b.m[3],
  }};
}

inline constexpr Mat2 mat2_one{{1, 0, 0, 1}};

inline bool operator==(const Mat2& a, const Mat2& b) {
  return a.m[0] == b.m[0] && a.m[1] == b.m[1] && a.m[2] == b.m[2] && a.m[3] == b.m[3];
}

// ---------------------------------------------------------------------------
// Deliberately misaligned test struct: one byte at 0, a double at 8, a short
// at 16, declared size 24. Bytes 1..7 and 18..23 are padding.

struct MisalignedStruct {
  int8_t a;
  double b;
  int16_t c;
};
static_assert(sizeof(MisalignedStruct) == 24);

// ---------------------------------------------------------------------------
// Operator helpers

inline int32_t sat_add_i32(int32_t a, int32_t b) {
  int64_t s = int64_t(a) + int64_t(b);
  if (s > std::numeric_limits<int32_t>::max()) return std::numeric_limits<int32_t>::max();
  if (s < std::numeric_limits<int32_t>::min()) return std::numeric_limits<int32_t>::min();
  return static_cast<int32_t>(s);
}

/// Log-space accumulation: op(a, b) = log(exp a + exp b), identity -inf.
template <class F>
inline F log_sum_exp(F a, F b) {
  if (std::isinf(a) && a < 0) return b;
  if (std::isinf(b) && b < 0) return a;
  F hi = a > b ? a : b;
  F lo = a > b ? b : a;
  return hi + std::log1p(std::exp(lo - hi));
}

}  // namespace forge::alg

// Shuffle descriptors for the composite types.
namespace forge::intr {

template <>
struct TypeOf<alg::UnitFloat8> {
  static const TypeDescriptor& get() {
    static const TypeDescriptor d = TypeDescriptor::primitive(Scalar::U8);
    return d;
  }
};

template <>
struct TypeOf<alg::Quaternion> {
  static const TypeDescriptor& get() {
    static const TypeDescriptor d = TypeDescriptor::tuple(
        {TypeDescriptor::primitive(Scalar::F32), TypeDescriptor::primitive(Scalar::F32),
         TypeDescriptor::primitive(Scalar::F32), TypeDescriptor::primitive(Scalar::F32)});
    return d;
  }
};

template <>
struct TypeOf<alg::Mat2> {
  static const TypeDescriptor& get() {
    static const TypeDescriptor d = TypeDescriptor::tuple(
        {TypeDescriptor::primitive(Scalar::U32), TypeDescriptor::primitive(Scalar::U32),
         TypeDescriptor::primitive(Scalar::U32), TypeDescriptor::primitive(Scalar::U32)});
    return d;
  }
};

template <>
struct TypeOf<alg::MisalignedStruct> {
  static const TypeDescriptor& get() {
    static const TypeDescriptor d = TypeDescriptor::struct_of(
        {{TypeDescriptor::primitive(Scalar::U8), 0},
         {TypeDescriptor::primitive(Scalar::F64), 8},
         {TypeDescriptor::primitive(Scalar::U16), 16}},
        sizeof(alg::MisalignedStruct));
    return d;
  }
};

}  // namespace forge::intr
