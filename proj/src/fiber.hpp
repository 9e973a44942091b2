#pragma once

#include <boost/context/fiber.hpp>

#include <cstddef>
#include <cstdlib>
#include <vector>

namespace forge::detail {

namespace bc = boost::context;

// Recycles lane stacks across blocks of one launch. Not thread-safe; each
// scheduler / worker thread owns its own pool.
class StackPool {
 public:
  explicit StackPool(std::size_t stack_bytes) : bytes_(stack_bytes) {}

  StackPool(const StackPool&) = delete;
  StackPool& operator=(const StackPool&) = delete;

  ~StackPool() {
    for (void* p : free_) std::free(p);
  }

  bc::stack_context allocate() {
    void* base;
    if (!free_.empty()) {
      base = free_.back();
      free_.pop_back();
    } else {
      base = std::malloc(bytes_);
    }
    bc::stack_context sctx;
    sctx.size = bytes_;
    sctx.sp = static_cast<char*>(base) + bytes_;
    return sctx;
  }

  void deallocate(bc::stack_context& sctx) noexcept {
    free_.push_back(static_cast<char*>(sctx.sp) - sctx.size);
  }

  std::size_t stack_bytes() const { return bytes_; }

 private:
  std::size_t bytes_;
  std::vector<void*> free_;
};

// boost StackAllocator adapter referencing a shared pool.
struct PooledStack {
  StackPool* pool;
  bc::stack_context allocate() { return pool->allocate(); }
  void deallocate(bc::stack_context& sctx) noexcept { pool->deallocate(sctx); }
};

}  // namespace forge::detail
