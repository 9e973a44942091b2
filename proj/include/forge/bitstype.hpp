#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forge/error.hpp"

namespace forge {

/// Scalar codes for primitive leaves. Floats and unsigned integers of the
/// same width are identical for layout and shuffling purposes; the code is
/// kept so descriptor literals round-trip.
enum class Scalar : uint8_t { U8, U16, U32, U64, F32, F64 };

uint32_t scalar_size(Scalar s);

/// Recursive description of a shuffleable value: a primitive of at most
/// 64 bits, a tuple of descriptors laid out sequentially with natural
/// alignment, or a struct with explicit field offsets and total size
/// (padding bytes are whatever the declared size does not cover).
class TypeDescriptor {
 public:
  enum class Kind : uint8_t { Primitive, Tuple, Struct };

  struct Field {
    TypeDescriptor type;
    uint32_t offset;
  };

  static TypeDescriptor primitive(Scalar s);
  /// Tuple layout: elements in order, each aligned to its own alignment,
  /// total size rounded up to the max element alignment.
  static TypeDescriptor tuple(std::vector<TypeDescriptor> elems);
  /// Struct layout is caller-declared; validation checks that offsets
  /// respect field alignment and that fields do not overlap.
  static TypeDescriptor struct_of(std::vector<Field> fields, uint32_t declared_size);

  Kind kind() const { return kind_; }
  Scalar scalar() const { return scalar_; }
  uint32_t size() const { return size_; }
  uint32_t alignment() const { return align_; }
  const std::vector<Field>& fields() const { return fields_; }

  bool operator==(const TypeDescriptor& other) const;

 private:
  TypeDescriptor() = default;

  Kind kind_ = Kind::Primitive;
  Scalar scalar_ = Scalar::U32;
  uint32_t size_ = 4;
  uint32_t align_ = 4;
  std::vector<Field> fields_;  // tuple elements carry computed offsets too
};

/// Parses the descriptor literal syntax:
///   u8|u16|u32|u64|f32|f64
///   tuple(<desc>,<desc>,...)
///   struct(<desc>@<offset>,...; size=N)
TypeDescriptor parse_descriptor(const std::string& text);
std::string to_string(const TypeDescriptor& desc);

/// Byte ranges of non-padding data, in field order. Adjacent leaves are not
/// merged.
std::vector<std::pair<uint32_t, uint32_t>> data_ranges(const TypeDescriptor& desc);

/// Equality on the non-padding bytes only.
bool value_bytes_equal(const TypeDescriptor& desc, std::span<const std::byte> a,
                       std::span<const std::byte> b);

}  // namespace forge
