#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "forge/bitstype.hpp"
#include "forge/error.hpp"

namespace forge {

enum class MemoryOrdering : uint8_t { Relaxed, Acquire, Release };
enum class Backend : uint8_t { Simulator, Threads };

const char* to_string(MemoryOrdering o);
const char* to_string(Backend b);

/// Grid geometry for one launch.
struct LaunchConfig {
  uint32_t num_blocks = 1;
  uint32_t threads_per_block = 32;
  uint32_t warp_width = 32;  // 32 or 64
  uint32_t shared_bytes = 0;

  uint32_t warps_per_block() const { return threads_per_block / warp_width; }
  uint32_t total_threads() const { return num_blocks * threads_per_block; }
  void validate() const;
};

/// Same seed + same program + same inputs reproduces the execution trace and
/// the final memory image bit for bit on the simulator backend.
struct ScheduleSeed {
  uint64_t seed = 0;
  uint64_t step_budget = 100'000'000;  // one warp instruction per step
};

/// Simulator capacity and adversary knobs. All randomness is drawn from the
/// launch seed, so these only shape the distribution of interleavings.
struct SimTuning {
  uint32_t max_resident_blocks = 32;  // admitted in block-id order
  uint32_t lane_stack_bytes = 16 * 1024;
  uint32_t drain_period = 8;    // avg steps between background write-backs
  uint32_t stale_chance = 2;    // 1-in-N: eligible relaxed load sees the prior commit
  uint32_t refetch_chance = 4;  // 1-in-N: cached clean entry refreshed on relaxed load
};

enum class FaultKind : uint8_t {
  None,
  OutOfBounds,
  StepBudgetExceeded,
  BarrierDivergence,
  MisalignedVectorAccess,
  SharedMemoryExhausted,
  LaneOutOfRange,
  NonUniformWarpCall,
  Internal,
};

const char* to_string(FaultKind k);

struct Fault {
  FaultKind kind = FaultKind::None;
  std::string detail;
  uint32_t block = 0;
  uint32_t thread = 0;
  int32_t buffer = -1;
  uint64_t index = 0;
};

/// Global-memory traffic per buffer. An N-wide vectorized access is one
/// event touching N elements.
struct BufferCounters {
  uint64_t load_events = 0;
  uint64_t load_elems = 0;
  uint64_t store_events = 0;
  uint64_t store_elems = 0;
};

struct LaunchReport {
  bool ok = false;
  Fault fault;
  uint64_t steps = 0;
  std::vector<BufferCounters> buffers;  // indexed by BufferId
  double wall_seconds = 0.0;            // informational; threads backend only

  BufferCounters totals() const;
};

struct TraceEvent {
  uint64_t step;
  uint32_t block;
  uint32_t warp;
  const char* op;  // ld, st, vld, vst, bar, shfl
  int32_t buffer;  // -1 when not applicable
  uint64_t index;
  MemoryOrdering order;
  uint32_t width;  // elements touched by the event
};

class TraceSink {
 public:
  virtual ~TraceSink() = default;
  virtual void on_event(const TraceEvent& e) = 0;
};

/// Writes one tab-separated record per event:
/// step, block, warp, op, buffer, index, ordering.
class FileTraceSink final : public TraceSink {
 public:
  explicit FileTraceSink(const std::string& path);
  ~FileTraceSink() override;
  void on_event(const TraceEvent& e) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct LaunchOptions {
  Backend backend = Backend::Simulator;
  ScheduleSeed schedule;
  SimTuning tuning;
  TraceSink* trace = nullptr;   // simulator backend only
  uint32_t thread_workers = 0;  // 0 = sized to hardware parallelism
};

using BufferId = int32_t;

class Ctx;

/// Device program, invoked once per thread. Must be const-invocable and must
/// touch shared state only through the Ctx; the threads backend calls it
/// concurrently from several workers.
using Kernel = std::function<void(Ctx&)>;

/// A deterministic SIMT virtual machine plus a real-threads backend running
/// the same kernels. One machine may be driven from one host thread at a
/// time; distinct machines are independent.
class Machine {
 public:
  Machine();
  ~Machine();
  Machine(Machine&&) noexcept;
  Machine& operator=(Machine&&) noexcept;
  Machine(const Machine&) = delete;
  Machine& operator=(const Machine&) = delete;

  /// Buffers are zero-initialized. base_alignment 0 picks a default large
  /// enough for any vectorized access the intrinsics layer will issue.
  BufferId create_buffer(const TypeDescriptor& elem, uint64_t length,
                         uint32_t base_alignment = 0);
  void destroy_buffer(BufferId id);

  uint64_t buffer_length(BufferId id) const;
  uint32_t buffer_elem_size(BufferId id) const;
  uint32_t buffer_alignment(BufferId id) const;
  const TypeDescriptor& buffer_descriptor(BufferId id) const;

  void write_bytes(BufferId id, uint64_t elem_offset, std::span<const std::byte> src);
  void read_bytes(BufferId id, uint64_t elem_offset, std::span<std::byte> dst) const;
  void fill_zero(BufferId id);

  template <class T>
  void write(BufferId id, std::span<const T> values, uint64_t elem_offset = 0) {
    write_bytes(id, elem_offset, std::as_bytes(values));
  }
  template <class T>
  void read(BufferId id, std::span<T> values, uint64_t elem_offset = 0) const {
    read_bytes(id, elem_offset, std::as_writable_bytes(values));
  }

  /// Runs the kernel over the grid to completion (or fault). Buffers must not
  /// be touched by the host while a launch is in flight.
  LaunchReport launch(const LaunchConfig& config, const Kernel& kernel,
                      const LaunchOptions& options = {});

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

/// Per-thread device context. Raw byte-level surface; the typed layer lives
/// in intrinsics.hpp.
class Ctx {
 public:
  uint32_t block_id() const;
  uint32_t local_id() const;
  uint32_t lane_id() const;
  uint32_t warp_id() const;
  uint32_t global_id() const;
  uint32_t warp_width() const;
  uint32_t threads_per_block() const;
  uint32_t num_blocks() const;
  uint32_t total_threads() const;

  /// Block-wide barrier: every live thread of the block must reach the same
  /// barrier call; global and shared writes of the block issued before it
  /// are visible to the whole block after it.
  void barrier();

  void load(BufferId buf, uint64_t index, std::span<std::byte> out,
            MemoryOrdering order = MemoryOrdering::Relaxed);
  void store(BufferId buf, uint64_t index, std::span<const std::byte> value,
             MemoryOrdering order = MemoryOrdering::Relaxed);

  /// One memory event of `width` contiguous elements. The element byte
  /// address must be aligned to the event's byte width.
  void load_vector(BufferId buf, uint64_t index, uint32_t width, std::span<std::byte> out);
  void store_vector(BufferId buf, uint64_t index, uint32_t width,
                    std::span<const std::byte> value);

  /// Block-shared allocation, zero-initialized, handed out in call order:
  /// the k-th allocation of every thread of the block is the same storage.
  void* shared_alloc(size_t bytes, size_t align);

  /// Warp-collective register exchange: every live lane of the warp must
  /// call with the same value size; each lane receives the bytes submitted
  /// by src_lane.
  void warp_exchange(std::span<const std::byte> value, uint32_t src_lane,
                     std::span<std::byte> out);

  uint64_t buffer_length(BufferId buf) const;
  uint32_t buffer_elem_size(BufferId buf) const;
  uint32_t buffer_alignment(BufferId buf) const;

  struct Lane;
  explicit Ctx(Lane* lane) : lane_(lane) {}

 private:
  Lane* lane_;
};

}  // namespace forge
