#include "forge/intrinsics.hpp"

namespace forge::intr {

namespace {

void decompose_into(const TypeDescriptor& d, uint32_t base, std::vector<Slot>& out) {
  if (d.kind() == TypeDescriptor::Kind::Primitive) {
    uint32_t sz = d.size();
    if (sz == 8) {
      out.push_back({base, 4});
      out.push_back({base + 4, 4});
    } else {
      out.push_back({base, sz});
    }
    return;
  }
  for (const auto& f : d.fields()) decompose_into(f.type, base + f.offset, out);
}

}  // namespace

std::vector<Slot> decompose(const TypeDescriptor& desc) {
  std::vector<Slot> out;
  decompose_into(desc, 0, out);
  return out;
}

LoadPattern vload_pattern(uint64_t offset, uint32_t nitem) {
  if (nitem != 1 && nitem != 2 && nitem != 4 && nitem != 8 && nitem != 16)
    raise(ErrorCode::InvalidNitem, "nitem must be one of {1,2,4,8,16}");
  return detail_v::pattern_capped(offset, nitem, nitem);
}

}  // namespace forge::intr
