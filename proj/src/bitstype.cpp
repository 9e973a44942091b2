#include "forge/bitstype.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>

namespace forge {

uint32_t scalar_size(Scalar s) {
  switch (s) {
    case Scalar::U8: return 1;
    case Scalar::U16: return 2;
    case Scalar::U32: return 4;
    case Scalar::U64: return 8;
    case Scalar::F32: return 4;
    case Scalar::F64: return 8;
  }
  return 0;
}

namespace {

const char* scalar_name(Scalar s) {
  switch (s) {
    case Scalar::U8: return "u8";
    case Scalar::U16: return "u16";
    case Scalar::U32: return "u32";
    case Scalar::U64: return "u64";
    case Scalar::F32: return "f32";
    case Scalar::F64: return "f64";
  }
  return "?";
}

uint32_t align_up(uint32_t v, uint32_t a) { return (v + a - 1) / a * a; }

}  // namespace

TypeDescriptor TypeDescriptor::primitive(Scalar s) {
  TypeDescriptor d;
  d.kind_ = Kind::Primitive;
  d.scalar_ = s;
  d.size_ = scalar_size(s);
  d.align_ = d.size_;
  return d;
}

TypeDescriptor TypeDescriptor::tuple(std::vector<TypeDescriptor> elems) {
  if (elems.empty()) raise(ErrorCode::InvalidDescriptor, "empty tuple");
  TypeDescriptor d;
  d.kind_ = Kind::Tuple;
  uint32_t offset = 0;
  uint32_t align = 1;
  for (auto& e : elems) {
    offset = align_up(offset, e.alignment());
    align = std::max(align, e.alignment());
    d.fields_.push_back(Field{std::move(e), offset});
    offset += d.fields_.back().type.size();
  }
  d.size_ = align_up(offset, align);
  d.align_ = align;
  return d;
}

TypeDescriptor TypeDescriptor::struct_of(std::vector<Field> fields, uint32_t declared_size) {
  if (fields.empty()) raise(ErrorCode::InvalidDescriptor, "empty struct");
  TypeDescriptor d;
  d.kind_ = Kind::Struct;
  uint32_t align = 1;
  uint32_t end = 0;
  // Fields must be declared in offset order and must not overlap.
  for (const auto& f : fields) {
    if (f.offset < end)
      raise(ErrorCode::InvalidDescriptor, "struct fields overlap or are out of order");
    if (f.offset % f.type.alignment() != 0)
      raise(ErrorCode::InvalidDescriptor, "struct field offset violates field alignment");
    end = f.offset + f.type.size();
    align = std::max(align, f.type.alignment());
  }
  if (declared_size < end)
    raise(ErrorCode::InvalidDescriptor, "declared struct size smaller than its fields");
  d.fields_ = std::move(fields);
  d.size_ = declared_size;
  d.align_ = align;
  return d;
}

bool TypeDescriptor::operator==(const TypeDescriptor& other) const {
  if (kind_ != other.kind_ || size_ != other.size_ || align_ != other.align_) return false;
  if (kind_ == Kind::Primitive) return scalar_ == other.scalar_;
  if (fields_.size() != other.fields_.size()) return false;
  for (size_t i = 0; i < fields_.size(); ++i) {
    if (fields_[i].offset != other.fields_[i].offset) return false;
    if (!(fields_[i].type == other.fields_[i].type)) return false;
  }
  return true;
}

namespace {

void collect_ranges(const TypeDescriptor& d, uint32_t base,
                    std::vector<std::pair<uint32_t, uint32_t>>& out) {
  if (d.kind() == TypeDescriptor::Kind::Primitive) {
    out.emplace_back(base, d.size());
    return;
  }
  for (const auto& f : d.fields()) collect_ranges(f.type, base + f.offset, out);
}

}  // namespace

std::vector<std::pair<uint32_t, uint32_t>> data_ranges(const TypeDescriptor& desc) {
  std::vector<std::pair<uint32_t, uint32_t>> out;
  collect_ranges(desc, 0, out);
  return out;
}

bool value_bytes_equal(const TypeDescriptor& desc, std::span<const std::byte> a,
                       std::span<const std::byte> b) {
  if (a.size() < desc.size() || b.size() < desc.size()) return false;
  for (auto [off, len] : data_ranges(desc))
    if (std::memcmp(a.data() + off, b.data() + off, len) != 0) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Literal syntax

namespace {

struct Parser {
  const std::string& s;
  size_t pos = 0;

  void skip_ws() {
    while (pos < s.size() && std::isspace((unsigned char)s[pos])) pos++;
  }

  bool eat(char c) {
    skip_ws();
    if (pos < s.size() && s[pos] == c) {
      pos++;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!eat(c))
      raise(ErrorCode::ParseError,
            "descriptor: expected '" + std::string(1, c) + "' at position " +
                std::to_string(pos));
  }

  std::string word() {
    skip_ws();
    size_t start = pos;
    while (pos < s.size() && (std::isalnum((unsigned char)s[pos]) || s[pos] == '_')) pos++;
    return s.substr(start, pos - start);
  }

  uint32_t number() {
    skip_ws();
    size_t start = pos;
    while (pos < s.size() && std::isdigit((unsigned char)s[pos])) pos++;
    if (pos == start) raise(ErrorCode::ParseError, "descriptor: expected a number");
    return static_cast<uint32_t>(std::stoul(s.substr(start, pos - start)));
  }

  TypeDescriptor parse() {
    std::string w = word();
    if (w == "u8") return TypeDescriptor::primitive(Scalar::U8);
    if (w == "u16") return TypeDescriptor::primitive(Scalar::U16);
    if (w == "u32") return TypeDescriptor::primitive(Scalar::U32);
    if (w == "u64") return TypeDescriptor::primitive(Scalar::U64);
    if (w == "f32") return TypeDescriptor::primitive(Scalar::F32);
    if (w == "f64") return TypeDescriptor::primitive(Scalar::F64);
    if (w == "tuple") {
      expect('(');
      std::vector<TypeDescriptor> elems;
      do {
        elems.push_back(parse());
      } while (eat(','));
      expect(')');
      return TypeDescriptor::tuple(std::move(elems));
    }
    if (w == "struct") {
      expect('(');
      std::vector<TypeDescriptor::Field> fields;
      do {
        TypeDescriptor t = parse();
        expect('@');
        uint32_t off = number();
        fields.push_back({std::move(t), off});
      } while (eat(','));
      expect(';');
      std::string sz = word();
      if (sz != "size") raise(ErrorCode::ParseError, "descriptor: expected size=N");
      expect('=');
      uint32_t size = number();
      expect(')');
      return TypeDescriptor::struct_of(std::move(fields), size);
    }
    raise(ErrorCode::ParseError, "descriptor: unknown token '" + w + "'");
  }
};

}  // namespace

TypeDescriptor parse_descriptor(const std::string& text) {
  Parser p{text};
  TypeDescriptor d = p.parse();
  p.skip_ws();
  if (p.pos != text.size())
    raise(ErrorCode::ParseError, "descriptor: trailing characters");
  return d;
}

std::string to_string(const TypeDescriptor& desc) {
  switch (desc.kind()) {
    case TypeDescriptor::Kind::Primitive:
      return scalar_name(desc.scalar());
    case TypeDescriptor::Kind::Tuple: {
      std::string out = "tuple(";
      for (size_t i = 0; i < desc.fields().size(); ++i) {
        if (i) out += ",";
        out += to_string(desc.fields()[i].type);
      }
      return out + ")";
    }
    case TypeDescriptor::Kind::Struct: {
      std::string out = "struct(";
      for (size_t i = 0; i < desc.fields().size(); ++i) {
        if (i) out += ",";
        out += to_string(desc.fields()[i].type) + "@" + std::to_string(desc.fields()[i].offset);
      }
      return out + ";size=" + std::to_string(desc.size()) + ")";
    }
  }
  return "?";
}

}  // namespace forge
