#include "forge/machine.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "fiber.hpp"
#include "prng.hpp"

namespace forge {

namespace {

constexpr uint32_t kDefaultAlignment = 4096;

uint64_t round_up(uint64_t v, uint64_t align) { return (v + align - 1) / align * align; }

}  // namespace

const char* to_string(MemoryOrdering o) {
  switch (o) {
    case MemoryOrdering::Relaxed: return "rlx";
    case MemoryOrdering::Acquire: return "acq";
    case MemoryOrdering::Release: return "rel";
  }
  return "?";
}

const char* to_string(Backend b) {
  return b == Backend::Simulator ? "sim" : "threads";
}

const char* to_string(FaultKind k) {
  switch (k) {
    case FaultKind::None: return "none";
    case FaultKind::OutOfBounds: return "OutOfBoundsAccess";
    case FaultKind::StepBudgetExceeded: return "StepBudgetExceeded";
    case FaultKind::BarrierDivergence: return "BarrierDivergence";
    case FaultKind::MisalignedVectorAccess: return "MisalignedVectorAccess";
    case FaultKind::SharedMemoryExhausted: return "SharedMemoryExhausted";
    case FaultKind::LaneOutOfRange: return "LaneOutOfRange";
    case FaultKind::NonUniformWarpCall: return "NonUniformWarpCall";
    case FaultKind::Internal: return "InternalError";
  }
  return "?";
}

void LaunchConfig::validate() const {
  if (warp_width != 32 && warp_width != 64)
    raise(ErrorCode::InvalidArgument, "warp_width must be 32 or 64");
  if (num_blocks < 1) raise(ErrorCode::InvalidArgument, "num_blocks must be >= 1");
  if (threads_per_block == 0 || threads_per_block % warp_width != 0)
    raise(ErrorCode::InvalidArgument,
          "threads_per_block must be a positive multiple of warp_width");
}

BufferCounters LaunchReport::totals() const {
  BufferCounters t;
  for (const auto& c : buffers) {
    t.load_events += c.load_events;
    t.load_elems += c.load_elems;
    t.store_events += c.store_events;
    t.store_elems += c.store_elems;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Trace sink

struct FileTraceSink::Impl {
  std::FILE* f = nullptr;
};

FileTraceSink::FileTraceSink(const std::string& path) : impl_(new Impl) {
  impl_->f = std::fopen(path.c_str(), "w");
  if (!impl_->f) raise(ErrorCode::InvalidArgument, "cannot open trace file: " + path);
}

FileTraceSink::~FileTraceSink() {
  if (impl_->f) std::fclose(impl_->f);
}

void FileTraceSink::on_event(const TraceEvent& e) {
  if (e.buffer >= 0) {
    std::fprintf(impl_->f, "%llu\t%u\t%u\t%s%u\t%d\t%llu\t%s\n",
                 (unsigned long long)e.step, e.block, e.warp, e.op,
                 e.width, e.buffer, (unsigned long long)e.index, to_string(e.order));
  } else {
    std::fprintf(impl_->f, "%llu\t%u\t%u\t%s\t-\t-\t-\n", (unsigned long long)e.step,
                 e.block, e.warp, e.op);
  }
}

// ---------------------------------------------------------------------------
// Buffers

struct BufferStore {
  TypeDescriptor desc = TypeDescriptor::primitive(Scalar::U32);
  uint32_t esz = 4;
  uint64_t len = 0;
  uint32_t alignment = kDefaultAlignment;
  bool alive = false;

  std::vector<std::byte> cur;  // committed bytes, authoritative between launches
  // Simulator commit history: one step back, enough to model a stale view.
  std::vector<std::byte> prev;
  std::vector<uint64_t> cur_ts, prev_ts;

  std::byte* cell(uint64_t i) { return cur.data() + i * esz; }
  const std::byte* cell(uint64_t i) const { return cur.data() + i * esz; }
  std::byte* prev_cell(uint64_t i) { return prev.data() + i * esz; }
};

struct Machine::Impl {
  std::vector<BufferStore> buffers;

  BufferStore& at(BufferId id) {
    if (id < 0 || (size_t)id >= buffers.size() || !buffers[id].alive)
      raise(ErrorCode::InvalidArgument, "invalid buffer id");
    return buffers[id];
  }
  const BufferStore& at(BufferId id) const {
    return const_cast<Impl*>(this)->at(id);
  }

  LaunchReport run_simulator(const LaunchConfig&, const Kernel&, const LaunchOptions&);
  LaunchReport run_threads(const LaunchConfig&, const Kernel&, const LaunchOptions&);
};

// ---------------------------------------------------------------------------
// Launch machinery

namespace {

struct AbortLaunch {};

struct Request {
  enum class Kind : uint8_t { None, Load, Store, Barrier, Exchange };
  Kind kind = Kind::None;
  BufferId buf = -1;
  uint64_t index = 0;
  uint32_t width = 1;
  MemoryOrdering order = MemoryOrdering::Relaxed;
  const std::byte* src = nullptr;
  std::byte* dst = nullptr;
  size_t bytes = 0;
  uint32_t src_lane = 0;
  const void* site = nullptr;
};

struct BlockRunner;

enum class LaneSt : uint8_t { NotStarted, Ready, AtBarrier, AtExchange, Exited };

}  // namespace

struct Ctx::Lane {
  uint32_t block_id = 0, local_id = 0, lane_id = 0, warp_id = 0, global_id = 0;
  BlockRunner* block = nullptr;
  LaneSt st = LaneSt::NotStarted;
  Request req;
  detail::bc::fiber fib;
  detail::bc::fiber sink;
  uint64_t exchange_count = 0;
  uint64_t barrier_count = 0;
  uint32_t shared_alloc_count = 0;

  void suspend();
};

namespace {

using Lane = Ctx::Lane;

struct RunnerHost {
  virtual ~RunnerHost() = default;
  virtual void warp_became_runnable(BlockRunner& b, uint32_t w) = 0;
  virtual void warp_became_blocked(BlockRunner& b, uint32_t w) = 0;
};

struct LaunchState;

struct MemEngine {
  virtual ~MemEngine() = default;
  virtual void load(BlockRunner& b, Lane& l, const Request& r) = 0;
  virtual void store(BlockRunner& b, Lane& l, const Request& r) = 0;
  virtual void block_started(BlockRunner& b) = 0;
  virtual void block_finished(BlockRunner& b) = 0;
};

struct LaunchState {
  Machine::Impl* mach = nullptr;
  LaunchConfig cfg;
  const Kernel* kernel = nullptr;
  MemEngine* engine = nullptr;
  RunnerHost* host = nullptr;
  TraceSink* trace = nullptr;
  const uint64_t* step_clock = nullptr;

  std::atomic<bool> aborted{false};
  std::mutex fault_mu;
  Fault fault;

  void fail(Fault f) {
    std::lock_guard<std::mutex> lock(fault_mu);
    if (!aborted.exchange(true)) fault = std::move(f);
  }
  void fail(FaultKind k, std::string detail, const Lane* l = nullptr, BufferId buf = -1,
            uint64_t index = 0) {
    Fault f;
    f.kind = k;
    f.detail = std::move(detail);
    if (l) {
      f.block = l->block_id;
      f.thread = l->local_id;
    }
    f.buffer = buf;
    f.index = index;
    fail(std::move(f));
  }

  void emit(const Lane& l, const char* op, BufferId buf, uint64_t index,
            MemoryOrdering order, uint32_t width) {
    if (!trace) return;
    trace->on_event(TraceEvent{step_clock ? *step_clock : 0, l.block_id, l.warp_id, op,
                               buf, index, order, width});
  }
};

struct BlockRunner {
  struct Warp {
    uint32_t steppable = 0;  // lanes in {NotStarted, Ready}
    uint32_t live = 0;       // lanes not Exited
    uint32_t at_exchange = 0;
    size_t exch_bytes = 0;
    uint64_t exch_seq = 0;
    int32_t sched_pos = -1;  // owned by the simulator scheduler
  };

  struct SharedAlloc {
    size_t offset, bytes, align;
  };

  LaunchState* ls;
  detail::StackPool* stacks;  // owned by the scheduler / worker running this block
  uint32_t block_id;
  std::vector<Lane> lanes;
  std::vector<Warp> warps;
  std::vector<std::byte> shared;
  size_t shared_used = 0;
  std::vector<SharedAlloc> shared_allocs;
  uint32_t barrier_waiting = 0;
  const void* barrier_site = nullptr;
  uint64_t barrier_gen = 0;
  uint32_t exited = 0;
  std::vector<BufferCounters> counters;
  uint64_t steps = 0;

  BlockRunner(LaunchState* state, detail::StackPool* pool, uint32_t id)
      : ls(state), stacks(pool), block_id(id) {
    const auto& cfg = ls->cfg;
    lanes.resize(cfg.threads_per_block);
    warps.resize(cfg.warps_per_block());
    for (auto& w : warps) {
      w.steppable = cfg.warp_width;
      w.live = cfg.warp_width;
    }
    shared.assign(cfg.shared_bytes, std::byte{0});
    counters.resize(ls->mach->buffers.size());
    for (uint32_t i = 0; i < cfg.threads_per_block; ++i) {
      Lane& l = lanes[i];
      l.block = this;
      l.block_id = id;
      l.local_id = i;
      l.lane_id = i % cfg.warp_width;
      l.warp_id = i / cfg.warp_width;
      l.global_id = id * cfg.threads_per_block + i;
    }
    ls->engine->block_started(*this);
  }

  bool done() const { return exited == lanes.size(); }

  void set_steppable(uint32_t w, uint32_t delta_up, uint32_t delta_down) {
    Warp& warp = warps[w];
    bool was = warp.steppable > 0;
    warp.steppable += delta_up;
    warp.steppable -= delta_down;
    bool now = warp.steppable > 0;
    if (was && !now) ls->host->warp_became_blocked(*this, w);
    if (!was && now) ls->host->warp_became_runnable(*this, w);
  }

  void resume(Lane& l) {
    if (l.st == LaneSt::NotStarted) {
      l.st = LaneSt::Ready;
      l.fib = detail::bc::fiber(
          std::allocator_arg, detail::PooledStack{stacks}, [this, &l](detail::bc::fiber&& sink) {
            l.sink = std::move(sink);
            try {
              Ctx cx(&l);
              (*ls->kernel)(cx);
            } catch (const AbortLaunch&) {
            }
            l.st = LaneSt::Exited;
            return std::move(l.sink);
          });
    }
    l.fib = std::move(l.fib).resume();
  }

  void handle_exit(Lane& l) {
    Warp& warp = warps[l.warp_id];
    set_steppable(l.warp_id, 0, 1);
    warp.live--;
    exited++;
    if (barrier_waiting > 0)
      ls->fail(FaultKind::BarrierDivergence,
               "thread exited while others wait at a barrier", &l);
    else if (warp.at_exchange > 0)
      ls->fail(FaultKind::NonUniformWarpCall,
               "thread exited while warp mates wait at a shuffle", &l);
  }

  void barrier_arrive(Lane& l) {
    if (exited > 0) {
      ls->fail(FaultKind::BarrierDivergence, "barrier reached after a thread exited", &l);
      return;
    }
    if (barrier_waiting == 0) {
      barrier_site = l.req.site;
      barrier_gen = l.barrier_count;
    } else if (l.req.site != barrier_site || l.barrier_count != barrier_gen) {
      ls->fail(FaultKind::BarrierDivergence, "threads reached different barriers", &l);
      return;
    }
    barrier_waiting++;
    if (barrier_waiting == lanes.size()) {
      barrier_waiting = 0;
      barrier_site = nullptr;
      ls->emit(l, "bar", -1, 0, MemoryOrdering::Relaxed, 0);
      for (auto& lane : lanes) {
        lane.barrier_count++;
        lane.st = LaneSt::Ready;
        set_steppable(lane.warp_id, 1, 0);
      }
    }
  }

  void exchange_arrive(Lane& l) {
    Warp& warp = warps[l.warp_id];
    if (warp.live < ls->cfg.warp_width) {
      ls->fail(FaultKind::NonUniformWarpCall,
               "shuffle with exited lanes in the warp", &l);
      return;
    }
    warp.at_exchange++;
    if (warp.at_exchange == 1) {
      warp.exch_bytes = l.req.bytes;
      warp.exch_seq = l.exchange_count;
    } else if (l.req.bytes != warp.exch_bytes || l.exchange_count != warp.exch_seq) {
      ls->fail(FaultKind::NonUniformWarpCall,
               "lanes disagree on the shuffle call site", &l);
      return;
    }
    if (warp.at_exchange < ls->cfg.warp_width) return;

    uint32_t lo = l.warp_id * ls->cfg.warp_width;
    for (uint32_t i = 0; i < ls->cfg.warp_width; ++i) {
      if (lanes[lo + i].req.src_lane >= ls->cfg.warp_width) {
        ls->fail(FaultKind::LaneOutOfRange, "shuffle source lane out of range",
                 &lanes[lo + i]);
        return;
      }
    }
    for (uint32_t i = 0; i < ls->cfg.warp_width; ++i) {
      Lane& dst = lanes[lo + i];
      const Lane& src = lanes[lo + dst.req.src_lane];
      std::memcpy(dst.req.dst, src.req.src, warp.exch_bytes);
    }
    ls->emit(l, "shfl", -1, 0, MemoryOrdering::Relaxed, ls->cfg.warp_width);
    warp.at_exchange = 0;
    for (uint32_t i = 0; i < ls->cfg.warp_width; ++i) {
      lanes[lo + i].exchange_count++;
      lanes[lo + i].st = LaneSt::Ready;
    }
    set_steppable(l.warp_id, ls->cfg.warp_width, 0);
  }

  // Advances every steppable lane of the warp by one instruction.
  void step_warp(uint32_t w) {
    steps++;
    uint32_t lo = w * ls->cfg.warp_width;
    uint32_t hi = lo + ls->cfg.warp_width;
    for (uint32_t i = lo; i < hi; ++i) {
      Lane& l = lanes[i];
      if (l.st != LaneSt::NotStarted && l.st != LaneSt::Ready) continue;
      resume(l);
      if (l.st == LaneSt::Exited) {
        handle_exit(l);
      } else {
        dispatch(l);
      }
      if (ls->aborted.load(std::memory_order_relaxed)) return;
    }
  }

  void dispatch(Lane& l) {
    switch (l.req.kind) {
      case Request::Kind::Load:
        ls->engine->load(*this, l, l.req);
        break;
      case Request::Kind::Store:
        ls->engine->store(*this, l, l.req);
        break;
      case Request::Kind::Barrier:
        l.st = LaneSt::AtBarrier;
        set_steppable(l.warp_id, 0, 1);
        barrier_arrive(l);
        break;
      case Request::Kind::Exchange:
        l.st = LaneSt::AtExchange;
        set_steppable(l.warp_id, 0, 1);
        exchange_arrive(l);
        break;
      case Request::Kind::None:
        ls->fail(FaultKind::Internal, "lane suspended without a request", &l);
        break;
    }
  }
};

// Runs on the scheduler/worker stack: reports the fault and lets the abort
// flag stop the launch instead of throwing.
bool access_ok(LaunchState* ls, const Lane& l, const Request& r, BufferStore& b) {
  if (!b.alive || r.index + r.width > b.len) {
    ls->fail(FaultKind::OutOfBounds, "index out of bounds", &l, r.buf, r.index);
    return false;
  }
  if (r.bytes != (size_t)b.esz * r.width) {
    ls->fail(FaultKind::Internal, "access size does not match element size", &l, r.buf,
             r.index);
    return false;
  }
  if (r.width > 1) {
    uint64_t byte_width = (uint64_t)b.esz * r.width;
    uint64_t byte_addr = r.index * b.esz;
    if (!std::has_single_bit((uint64_t)r.width) || !std::has_single_bit((uint64_t)b.esz) ||
        byte_addr % byte_width != 0 || byte_width > b.alignment) {
      ls->fail(Fault{FaultKind::MisalignedVectorAccess,
                     "vector access of " + std::to_string(byte_width) +
                         " bytes at byte address " + std::to_string(byte_addr),
                     l.block_id, l.local_id, r.buf, r.index});
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Simulator memory engine: a per-block view (L1 analog) over a shared
// committed store (L2 analog). Relaxed stores stay pending in the block view;
// release stores commit the block's pending set first; acquire loads read the
// latest commit and drop the block's stale clean entries. Pending entries also
// drain to the committed store at random scheduler-chosen points, and an
// unsynchronized relaxed load may serve the previous commit of a cell —
// that is the staleness a missing release/acquire pair must get caught by.

struct SimEngine final : MemEngine {
  Machine::Impl* m;
  SimTuning tun;
  detail::Prng* rng = nullptr;

  uint64_t commit_clock = 0;

  struct Entry {
    uint32_t arena_off;
    uint32_t epoch;
    bool dirty;
  };
  struct BlockVis {
    std::unordered_map<uint64_t, Entry> map;
    std::vector<std::byte> arena;
    std::vector<uint64_t> dirty_keys;
    uint32_t clean_epoch = 1;
    uint64_t view_ts = 0;
  };
  std::unordered_map<uint32_t, BlockVis> vis;

  static uint64_t key_of(BufferId buf, uint64_t idx) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(buf)) << 40) | idx;
  }
  static BufferId key_buf(uint64_t key) { return static_cast<BufferId>(key >> 40); }
  static uint64_t key_idx(uint64_t key) { return key & ((1ULL << 40) - 1); }

  void block_started(BlockRunner& b) override { vis.emplace(b.block_id, BlockVis{}); }

  void block_finished(BlockRunner& b) override {
    // Kernel-boundary flush: a finished block's pending stores become visible.
    BlockVis& v = vis.at(b.block_id);
    for (uint64_t key : v.dirty_keys) commit_entry(v, key);
    vis.erase(b.block_id);
  }

  void commit_cell(BufferStore& buf, uint64_t idx, const std::byte* bytes) {
    std::memcpy(buf.prev_cell(idx), buf.cell(idx), buf.esz);
    buf.prev_ts[idx] = buf.cur_ts[idx];
    std::memcpy(buf.cell(idx), bytes, buf.esz);
    buf.cur_ts[idx] = ++commit_clock;
  }

  void commit_entry(BlockVis& v, uint64_t key) {
    Entry& e = v.map.at(key);
    if (!e.dirty) return;  // already drained
    BufferStore& buf = m->buffers[key_buf(key)];
    commit_cell(buf, key_idx(key), v.arena.data() + e.arena_off);
    e.dirty = false;
    e.epoch = v.clean_epoch;
  }

  Entry& upsert(BlockVis& v, uint64_t key, uint32_t esz) {
    auto it = v.map.find(key);
    if (it != v.map.end()) return it->second;
    uint32_t off = static_cast<uint32_t>(v.arena.size());
    v.arena.resize(v.arena.size() + esz);
    return v.map.emplace(key, Entry{off, 0, false}).first->second;
  }

  void load(BlockRunner& b, Lane& l, const Request& r) override {
    BufferStore& buf = m->buffers[r.buf];
    if (!access_ok(b.ls, l, r, buf)) return;
    BlockVis& v = vis.at(b.block_id);
    const uint32_t esz = buf.esz;

    if (r.order == MemoryOrdering::Acquire) {
      // Program order beats synchronization: an own pending store wins.
      auto it = v.map.find(key_of(r.buf, r.index));
      if (it != v.map.end() && it->second.dirty) {
        std::memcpy(r.dst, v.arena.data() + it->second.arena_off, esz);
      } else {
        std::memcpy(r.dst, buf.cell(r.index), esz);
        v.view_ts = std::max(v.view_ts, buf.cur_ts[r.index]);
        v.clean_epoch++;  // drop every stale clean entry of this block
        if (it != v.map.end()) {
          std::memcpy(v.arena.data() + it->second.arena_off, buf.cell(r.index), esz);
          it->second.epoch = v.clean_epoch;
        }
      }
      b.counters[r.buf].load_events++;
      b.counters[r.buf].load_elems += r.width;
      b.ls->emit(l, "ld", r.buf, r.index, r.order, r.width);
      return;
    }

    for (uint32_t k = 0; k < r.width; ++k) {
      uint64_t idx = r.index + k;
      uint64_t key = key_of(r.buf, idx);
      std::byte* out = r.dst + (size_t)k * esz;
      auto it = v.map.find(key);
      if (it != v.map.end() && it->second.dirty) {
        std::memcpy(out, v.arena.data() + it->second.arena_off, esz);
        continue;
      }
      if (it != v.map.end() && it->second.epoch == v.clean_epoch) {
        if (rng->one_in(tun.refetch_chance)) {
          std::memcpy(v.arena.data() + it->second.arena_off, buf.cell(idx), esz);
        }
        std::memcpy(out, v.arena.data() + it->second.arena_off, esz);  // maybe stale
        continue;
      }
      // Miss: normally the latest commit; a cell this block has not
      // synchronized with may serve the previous commit instead.
      const std::byte* src = buf.cell(idx);
      if (buf.cur_ts[idx] > v.view_ts && rng->one_in(tun.stale_chance))
        src = buf.prev.data() + idx * esz;
      std::memcpy(out, src, esz);
      Entry& e = upsert(v, key, esz);
      std::memcpy(v.arena.data() + e.arena_off, src, esz);
      e.epoch = v.clean_epoch;
    }
    b.counters[r.buf].load_events++;
    b.counters[r.buf].load_elems += r.width;
    b.ls->emit(l, r.width > 1 ? "vld" : "ld", r.buf, r.index, r.order, r.width);
  }

  void store(BlockRunner& b, Lane& l, const Request& r) override {
    BufferStore& buf = m->buffers[r.buf];
    if (!access_ok(b.ls, l, r, buf)) return;
    BlockVis& v = vis.at(b.block_id);
    const uint32_t esz = buf.esz;

    if (r.order == MemoryOrdering::Release) {
      // Commit every pending store of this block, then this one.
      for (uint64_t key : v.dirty_keys) commit_entry(v, key);
      v.dirty_keys.clear();
      for (uint32_t k = 0; k < r.width; ++k) {
        uint64_t idx = r.index + k;
        commit_cell(buf, idx, r.src + (size_t)k * esz);
        Entry& e = upsert(v, key_of(r.buf, idx), esz);
        std::memcpy(v.arena.data() + e.arena_off, r.src + (size_t)k * esz, esz);
        e.dirty = false;
        e.epoch = v.clean_epoch;
      }
    } else {
      for (uint32_t k = 0; k < r.width; ++k) {
        uint64_t idx = r.index + k;
        uint64_t key = key_of(r.buf, idx);
        Entry& e = upsert(v, key, esz);
        std::memcpy(v.arena.data() + e.arena_off, r.src + (size_t)k * esz, esz);
        if (!e.dirty) {
          e.dirty = true;
          v.dirty_keys.push_back(key);
        }
      }
    }
    b.counters[r.buf].store_events++;
    b.counters[r.buf].store_elems += r.width;
    b.ls->emit(l, r.width > 1 ? "vst" : "st", r.buf, r.index, r.order, r.width);
  }

  // Background write-back: one pending entry of one block drains to the
  // committed store at a seed-chosen point.
  void maybe_drain(std::span<const uint32_t> resident_ids) {
    if (!rng->one_in(tun.drain_period)) return;
    uint32_t with_dirty = 0;
    for (uint32_t id : resident_ids)
      if (!vis.at(id).dirty_keys.empty()) with_dirty++;
    if (with_dirty == 0) return;
    uint64_t pick = rng->below(with_dirty);
    for (uint32_t id : resident_ids) {
      BlockVis& v = vis.at(id);
      if (v.dirty_keys.empty()) continue;
      if (pick-- == 0) {
        uint64_t slot = rng->below(v.dirty_keys.size());
        uint64_t key = v.dirty_keys[slot];
        v.dirty_keys[slot] = v.dirty_keys.back();
        v.dirty_keys.pop_back();
        commit_entry(v, key);
        return;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Threads memory engine: buffers are plain shared storage; flag-sized cells
// go through real atomics so release/acquire pairs carry their platform
// semantics, larger cells are copied and rely on the algorithm's own fence
// discipline.

struct ThreadsEngine final : MemEngine {
  Machine::Impl* m;

  void block_started(BlockRunner&) override {}
  void block_finished(BlockRunner&) override {}

  template <class U>
  static void atomic_load_cell(const std::byte* p, std::byte* out, std::memory_order mo) {
    U v = std::atomic_ref<U>(*const_cast<U*>(reinterpret_cast<const U*>(p))).load(mo);
    std::memcpy(out, &v, sizeof(U));
  }
  template <class U>
  static void atomic_store_cell(std::byte* p, const std::byte* in, std::memory_order mo) {
    U v;
    std::memcpy(&v, in, sizeof(U));
    std::atomic_ref<U>(*reinterpret_cast<U*>(p)).store(v, mo);
  }

  void load(BlockRunner& b, Lane& l, const Request& r) override {
    BufferStore& buf = m->buffers[r.buf];
    if (!access_ok(b.ls, l, r, buf)) return;
    std::memory_order mo = r.order == MemoryOrdering::Acquire
                               ? std::memory_order_acquire
                               : std::memory_order_relaxed;
    const uint32_t esz = buf.esz;
    if (esz == 1 || esz == 2 || esz == 4 || esz == 8) {
      for (uint32_t k = 0; k < r.width; ++k) {
        const std::byte* p = buf.cell(r.index + k);
        std::byte* out = r.dst + (size_t)k * esz;
        switch (esz) {
          case 1: atomic_load_cell<uint8_t>(p, out, mo); break;
          case 2: atomic_load_cell<uint16_t>(p, out, mo); break;
          case 4: atomic_load_cell<uint32_t>(p, out, mo); break;
          case 8: atomic_load_cell<uint64_t>(p, out, mo); break;
        }
        mo = std::memory_order_relaxed;  // acquire applies to the first cell
      }
    } else {
      std::memcpy(r.dst, buf.cell(r.index), r.bytes);
      if (r.order == MemoryOrdering::Acquire)
        std::atomic_thread_fence(std::memory_order_acquire);
    }
    b.counters[r.buf].load_events++;
    b.counters[r.buf].load_elems += r.width;
  }

  void store(BlockRunner& b, Lane& l, const Request& r) override {
    BufferStore& buf = m->buffers[r.buf];
    if (!access_ok(b.ls, l, r, buf)) return;
    std::memory_order mo = r.order == MemoryOrdering::Release
                               ? std::memory_order_release
                               : std::memory_order_relaxed;
    const uint32_t esz = buf.esz;
    if (esz == 1 || esz == 2 || esz == 4 || esz == 8) {
      for (uint32_t k = 0; k < r.width; ++k) {
        std::byte* p = buf.cell(r.index + k);
        const std::byte* in = r.src + (size_t)k * esz;
        switch (esz) {
          case 1: atomic_store_cell<uint8_t>(p, in, mo); break;
          case 2: atomic_store_cell<uint16_t>(p, in, mo); break;
          case 4: atomic_store_cell<uint32_t>(p, in, mo); break;
          case 8: atomic_store_cell<uint64_t>(p, in, mo); break;
        }
      }
    } else {
      if (r.order == MemoryOrdering::Release)
        std::atomic_thread_fence(std::memory_order_release);
      std::memcpy(buf.cell(r.index), r.src, r.bytes);
    }
    b.counters[r.buf].store_events++;
    b.counters[r.buf].store_elems += r.width;
  }
};

// ---------------------------------------------------------------------------
// Simulator scheduler: admits blocks in id order up to the residency cap and
// picks one runnable (block, warp) pair per step from the seeded generator.

struct Scheduler final : RunnerHost {
  LaunchState* ls;
  SimEngine* eng;
  detail::StackPool* stacks;
  detail::Prng rng;
  uint64_t budget;
  SimTuning tun;

  std::vector<std::unique_ptr<BlockRunner>> resident;
  std::vector<uint32_t> resident_ids;
  std::vector<std::pair<BlockRunner*, uint32_t>> runnable;
  uint32_t next_block = 0;
  uint64_t steps = 0;

  Scheduler(LaunchState* state, SimEngine* engine, detail::StackPool* pool, uint64_t seed,
            uint64_t step_budget, const SimTuning& tuning)
      : ls(state), eng(engine), stacks(pool), rng(seed), budget(step_budget), tun(tuning) {}

  void warp_became_runnable(BlockRunner& b, uint32_t w) override {
    b.warps[w].sched_pos = static_cast<int32_t>(runnable.size());
    runnable.emplace_back(&b, w);
  }

  void warp_became_blocked(BlockRunner& b, uint32_t w) override {
    int32_t pos = b.warps[w].sched_pos;
    runnable[pos] = runnable.back();
    runnable[pos].first->warps[runnable[pos].second].sched_pos = pos;
    runnable.pop_back();
    b.warps[w].sched_pos = -1;
  }

  void admit() {
    while (next_block < ls->cfg.num_blocks && resident.size() < tun.max_resident_blocks) {
      auto runner = std::make_unique<BlockRunner>(ls, stacks, next_block);
      for (uint32_t w = 0; w < ls->cfg.warps_per_block(); ++w)
        warp_became_runnable(*runner, w);
      resident_ids.push_back(next_block);
      resident.push_back(std::move(runner));
      next_block++;
    }
  }

  void retire(size_t slot) {
    eng->block_finished(*resident[slot]);
    if (slot != resident.size() - 1) {
      resident[slot] = std::move(resident.back());
      resident_ids[slot] = resident_ids.back();
    }
    resident.pop_back();
    resident_ids.pop_back();
  }

  uint64_t run(std::vector<BufferCounters>& totals) {
    admit();
    while (!resident.empty() && !ls->aborted.load(std::memory_order_relaxed)) {
      if (runnable.empty()) {
        ls->fail(FaultKind::Internal, "no runnable warp (all blocks blocked)");
        break;
      }
      if (++steps > budget) {
        ls->fail(FaultKind::StepBudgetExceeded,
                 "step budget of " + std::to_string(budget) + " exhausted");
        break;
      }
      auto [b, w] = runnable[rng.below(runnable.size())];
      b->step_warp(w);
      if (ls->aborted.load(std::memory_order_relaxed)) break;
      if (b->done()) {
        for (size_t i = 0; i < totals.size(); ++i) {
          totals[i].load_events += b->counters[i].load_events;
          totals[i].load_elems += b->counters[i].load_elems;
          totals[i].store_events += b->counters[i].store_events;
          totals[i].store_elems += b->counters[i].store_elems;
        }
        for (size_t slot = 0; slot < resident.size(); ++slot) {
          if (resident[slot].get() == b) {
            retire(slot);
            break;
          }
        }
        admit();
      }
      eng->maybe_drain(resident_ids);
    }
    resident.clear();  // unwinds any live lane fibers
    return steps;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Lane suspension and Ctx surface

void Ctx::Lane::suspend() {
  sink = std::move(sink).resume();
  if (block->ls->aborted.load(std::memory_order_relaxed)) throw AbortLaunch{};
}

uint32_t Ctx::block_id() const { return lane_->block_id; }
uint32_t Ctx::local_id() const { return lane_->local_id; }
uint32_t Ctx::lane_id() const { return lane_->lane_id; }
uint32_t Ctx::warp_id() const { return lane_->warp_id; }
uint32_t Ctx::global_id() const { return lane_->global_id; }
uint32_t Ctx::warp_width() const { return lane_->block->ls->cfg.warp_width; }
uint32_t Ctx::threads_per_block() const { return lane_->block->ls->cfg.threads_per_block; }
uint32_t Ctx::num_blocks() const { return lane_->block->ls->cfg.num_blocks; }
uint32_t Ctx::total_threads() const { return lane_->block->ls->cfg.total_threads(); }

#if defined(__GNUC__)
#define FORGE_NOINLINE __attribute__((noinline))
#else
#define FORGE_NOINLINE
#endif

FORGE_NOINLINE void Ctx::barrier() {
  Lane& l = *lane_;
  l.req = Request{};
  l.req.kind = Request::Kind::Barrier;
  l.req.site = __builtin_return_address(0);
  l.suspend();
}

void Ctx::load(BufferId buf, uint64_t index, std::span<std::byte> out, MemoryOrdering order) {
  Lane& l = *lane_;
  l.req = Request{};
  l.req.kind = Request::Kind::Load;
  l.req.buf = buf;
  l.req.index = index;
  l.req.width = 1;
  l.req.order = order;
  l.req.dst = out.data();
  l.req.bytes = out.size();
  l.suspend();
}

void Ctx::store(BufferId buf, uint64_t index, std::span<const std::byte> value,
                MemoryOrdering order) {
  Lane& l = *lane_;
  l.req = Request{};
  l.req.kind = Request::Kind::Store;
  l.req.buf = buf;
  l.req.index = index;
  l.req.width = 1;
  l.req.order = order;
  l.req.src = value.data();
  l.req.bytes = value.size();
  l.suspend();
}

void Ctx::load_vector(BufferId buf, uint64_t index, uint32_t width, std::span<std::byte> out) {
  Lane& l = *lane_;
  l.req = Request{};
  l.req.kind = Request::Kind::Load;
  l.req.buf = buf;
  l.req.index = index;
  l.req.width = width;
  l.req.order = MemoryOrdering::Relaxed;
  l.req.dst = out.data();
  l.req.bytes = out.size();
  l.suspend();
}

void Ctx::store_vector(BufferId buf, uint64_t index, uint32_t width,
                       std::span<const std::byte> value) {
  Lane& l = *lane_;
  l.req = Request{};
  l.req.kind = Request::Kind::Store;
  l.req.buf = buf;
  l.req.index = index;
  l.req.width = width;
  l.req.order = MemoryOrdering::Relaxed;
  l.req.src = value.data();
  l.req.bytes = value.size();
  l.suspend();
}

void Ctx::warp_exchange(std::span<const std::byte> value, uint32_t src_lane,
                        std::span<std::byte> out) {
  Lane& l = *lane_;
  l.req = Request{};
  l.req.kind = Request::Kind::Exchange;
  l.req.src = value.data();
  l.req.dst = out.data();
  l.req.bytes = value.size();
  l.req.src_lane = src_lane;
  l.suspend();
}

void* Ctx::shared_alloc(size_t bytes, size_t align) {
  Lane& l = *lane_;
  BlockRunner& b = *l.block;
  uint32_t k = l.shared_alloc_count++;
  if (k < b.shared_allocs.size()) {
    const auto& a = b.shared_allocs[k];
    if (a.bytes != bytes || a.align != align) {
      b.ls->fail(FaultKind::Internal, "threads disagree on shared allocation shape", &l);
      throw AbortLaunch{};
    }
    return b.shared.data() + a.offset;
  }
  size_t offset = round_up(b.shared_used, align == 0 ? 1 : align);
  if (offset + bytes > b.shared.size()) {
    b.ls->fail(FaultKind::SharedMemoryExhausted,
               "shared allocation of " + std::to_string(bytes) + " bytes exceeds " +
                   std::to_string(b.shared.size()) + "-byte budget",
               &l);
    throw AbortLaunch{};
  }
  b.shared_allocs.push_back({offset, bytes, align});
  b.shared_used = offset + bytes;
  return b.shared.data() + offset;
}

uint64_t Ctx::buffer_length(BufferId buf) const {
  return lane_->block->ls->mach->buffers[buf].len;
}
uint32_t Ctx::buffer_elem_size(BufferId buf) const {
  return lane_->block->ls->mach->buffers[buf].esz;
}
uint32_t Ctx::buffer_alignment(BufferId buf) const {
  return lane_->block->ls->mach->buffers[buf].alignment;
}

// ---------------------------------------------------------------------------
// Machine

Machine::Machine() : impl_(new Impl) {}
Machine::~Machine() = default;
Machine::Machine(Machine&&) noexcept = default;
Machine& Machine::operator=(Machine&&) noexcept = default;

BufferId Machine::create_buffer(const TypeDescriptor& elem, uint64_t length,
                                uint32_t base_alignment) {
  uint32_t esz = elem.size();
  if (esz == 0) raise(ErrorCode::InvalidDescriptor, "zero-size element");
  if (base_alignment == 0)
    base_alignment = std::max<uint32_t>(kDefaultAlignment, std::bit_ceil(esz));
  if (!std::has_single_bit(base_alignment) || base_alignment % elem.alignment() != 0)
    raise(ErrorCode::InvalidArgument, "base_alignment must be a power of two multiple "
                                      "of the element alignment");
  BufferStore b;
  b.desc = elem;
  b.esz = esz;
  b.len = length;
  b.alignment = base_alignment;
  b.alive = true;
  b.cur.assign(length * esz, std::byte{0});
  impl_->buffers.push_back(std::move(b));
  return static_cast<BufferId>(impl_->buffers.size() - 1);
}

void Machine::destroy_buffer(BufferId id) {
  BufferStore& b = impl_->at(id);
  b.alive = false;
  b.cur.clear();
  b.cur.shrink_to_fit();
  b.prev.clear();
  b.prev.shrink_to_fit();
  b.cur_ts.clear();
  b.prev_ts.clear();
}

uint64_t Machine::buffer_length(BufferId id) const { return impl_->at(id).len; }
uint32_t Machine::buffer_elem_size(BufferId id) const { return impl_->at(id).esz; }
uint32_t Machine::buffer_alignment(BufferId id) const { return impl_->at(id).alignment; }
const TypeDescriptor& Machine::buffer_descriptor(BufferId id) const {
  return impl_->at(id).desc;
}

void Machine::write_bytes(BufferId id, uint64_t elem_offset, std::span<const std::byte> src) {
  BufferStore& b = impl_->at(id);
  if (src.size() % b.esz != 0 || elem_offset * b.esz + src.size() > b.cur.size())
    raise(ErrorCode::InvalidArgument, "host write out of range");
  std::memcpy(b.cur.data() + elem_offset * b.esz, src.data(), src.size());
}

void Machine::read_bytes(BufferId id, uint64_t elem_offset, std::span<std::byte> dst) const {
  const BufferStore& b = impl_->at(id);
  if (dst.size() % b.esz != 0 || elem_offset * b.esz + dst.size() > b.cur.size())
    raise(ErrorCode::InvalidArgument, "host read out of range");
  std::memcpy(dst.data(), b.cur.data() + elem_offset * b.esz, dst.size());
}

void Machine::fill_zero(BufferId id) {
  BufferStore& b = impl_->at(id);
  std::fill(b.cur.begin(), b.cur.end(), std::byte{0});
}

LaunchReport Machine::Impl::run_simulator(const LaunchConfig& cfg, const Kernel& kernel,
                                          const LaunchOptions& opts) {
  // Fresh launch: histories collapse onto the current committed image.
  for (auto& b : buffers) {
    if (!b.alive) continue;
    b.prev = b.cur;
    b.cur_ts.assign(b.len, 0);
    b.prev_ts.assign(b.len, 0);
  }

  SimEngine engine;
  engine.m = this;
  engine.tun = opts.tuning;

  LaunchState ls;
  ls.mach = this;
  ls.cfg = cfg;
  ls.kernel = &kernel;
  ls.engine = &engine;
  ls.trace = opts.trace;

  detail::StackPool stacks(opts.tuning.lane_stack_bytes);

  Scheduler sched(&ls, &engine, &stacks, opts.schedule.seed, opts.schedule.step_budget,
                  opts.tuning);
  engine.rng = &sched.rng;
  ls.host = &sched;
  ls.step_clock = &sched.steps;

  LaunchReport rep;
  rep.buffers.resize(buffers.size());
  rep.steps = sched.run(rep.buffers);
  rep.ok = !ls.aborted.load();
  rep.fault = ls.fault;
  return rep;
}

LaunchReport Machine::Impl::run_threads(const LaunchConfig& cfg, const Kernel& kernel,
                                        const LaunchOptions& opts) {
  ThreadsEngine engine;
  engine.m = this;

  LaunchState ls;
  ls.mach = this;
  ls.cfg = cfg;
  ls.kernel = &kernel;
  ls.engine = &engine;
  ls.trace = nullptr;

  struct NullHost final : RunnerHost {
    void warp_became_runnable(BlockRunner&, uint32_t) override {}
    void warp_became_blocked(BlockRunner&, uint32_t) override {}
  } host;
  ls.host = &host;

  uint32_t workers = opts.thread_workers;
  if (workers == 0)
    workers = std::clamp(std::thread::hardware_concurrency(), 2u, 16u);
  workers = std::min<uint32_t>(workers, cfg.num_blocks);
  workers = std::max<uint32_t>(workers, cfg.num_blocks > 1 ? 2u : 1u);

  std::atomic<uint32_t> next_block{0};
  std::atomic<uint64_t> steps_total{0};
  const uint64_t budget = opts.schedule.step_budget;

  LaunchReport rep;
  rep.buffers.resize(buffers.size());
  std::mutex merge_mu;

  auto t0 = std::chrono::steady_clock::now();
  auto worker_fn = [&]() {
    detail::StackPool stacks(opts.tuning.lane_stack_bytes);
    LaunchState* lsp = &ls;
    for (;;) {
      uint32_t id = next_block.fetch_add(1, std::memory_order_relaxed);
      if (id >= cfg.num_blocks || lsp->aborted.load(std::memory_order_relaxed)) break;
      BlockRunner runner(lsp, &stacks, id);
      // Round-robin over steppable warps until the block finishes.
      uint64_t local_steps = 0;
      uint32_t idle_guard = 0;
      while (!runner.done() && !lsp->aborted.load(std::memory_order_relaxed)) {
        bool any = false;
        for (uint32_t w = 0; w < cfg.warps_per_block(); ++w) {
          if (runner.warps[w].steppable == 0) continue;
          any = true;
          runner.step_warp(w);
          if (lsp->aborted.load(std::memory_order_relaxed)) break;
          if (++local_steps % 4096 == 0) {
            if (steps_total.fetch_add(4096, std::memory_order_relaxed) + 4096 > budget)
              lsp->fail(FaultKind::StepBudgetExceeded,
                        "step budget of " + std::to_string(budget) + " exhausted");
          }
        }
        if (!any) {
          // Blocked warps only resolve through this block's own lanes.
          lsp->fail(FaultKind::Internal, "block has no steppable warp");
          break;
        }
        if (++idle_guard % 512 == 0) std::this_thread::yield();
      }
      steps_total.fetch_add(local_steps % 4096, std::memory_order_relaxed);
      {
        std::lock_guard<std::mutex> lock(merge_mu);
        for (size_t i = 0; i < rep.buffers.size(); ++i) {
          rep.buffers[i].load_events += runner.counters[i].load_events;
          rep.buffers[i].load_elems += runner.counters[i].load_elems;
          rep.buffers[i].store_events += runner.counters[i].store_events;
          rep.buffers[i].store_elems += runner.counters[i].store_elems;
        }
      }
    }
  };

  // One worker per pool slot; each runs whole blocks drawn in id order, so a
  // block only ever waits on predecessors that are running or finished.
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (uint32_t i = 0; i < workers; ++i) pool.emplace_back(worker_fn);
  for (auto& t : pool) t.join();
  auto t1 = std::chrono::steady_clock::now();

  rep.steps = steps_total.load();
  rep.ok = !ls.aborted.load();
  rep.fault = ls.fault;
  rep.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  return rep;
}

LaunchReport Machine::launch(const LaunchConfig& config, const Kernel& kernel,
                             const LaunchOptions& options) {
  config.validate();
  if (!kernel) raise(ErrorCode::InvalidArgument, "null kernel");
  if (options.backend == Backend::Simulator)
    return impl_->run_simulator(config, kernel, options);
  return impl_->run_threads(config, kernel, options);
}

}  // namespace forge
