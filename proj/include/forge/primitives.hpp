#pragma once

#include <algorithm>
#include <optional>

#include "forge/intrinsics.hpp"
#include "forge/machine.hpp"

namespace forge::prim {

using intr::View;

// ---------------------------------------------------------------------------
// Tuning parameters, dispatched per architecture profile.

struct ArchParams {
  uint32_t warp_width = 32;
  uint32_t mapreduce_blocks = 100;
  uint32_t threads_per_block = 256;
  uint32_t nitem_scan = 16;
  uint32_t nitem_copy = 4;
  uint32_t lookback_window = 0;  // 0 = warp_width; anything else must equal it
  uint32_t matvec_wide_warp_cols = 4;
  uint32_t matvec_wide_block_threads = 128;
  // Wide dispatch threshold on the output count; 0 derives the default
  // 4 * mapreduce_blocks * (threads_per_block / warp_width) * warp_cols.
  uint64_t matvec_wide_min_outputs = 0;

  ArchParams normalized() const {
    ArchParams p = *this;
    if (p.lookback_window == 0) p.lookback_window = p.warp_width;
    if (p.matvec_wide_min_outputs == 0)
      p.matvec_wide_min_outputs = 4ull * p.mapreduce_blocks *
                                  (p.threads_per_block / p.warp_width) *
                                  p.matvec_wide_warp_cols;
    p.validate();
    return p;
  }

  void validate() const {
    auto ok_nitem = [](uint32_t v) {
      return v == 1 || v == 2 || v == 4 || v == 8 || v == 16;
    };
    if (warp_width != 32 && warp_width != 64)
      raise(ErrorCode::InvalidArgument, "warp_width must be 32 or 64");
    if (threads_per_block == 0 || threads_per_block % warp_width != 0 ||
        threads_per_block > warp_width * warp_width)
      raise(ErrorCode::InvalidArgument, "threads_per_block must be a multiple of "
                                        "warp_width, at most warp_width^2");
    if (mapreduce_blocks == 0) raise(ErrorCode::InvalidArgument, "mapreduce_blocks");
    if (!ok_nitem(nitem_scan) || !ok_nitem(nitem_copy))
      raise(ErrorCode::InvalidNitem, "nitem must be one of {1,2,4,8,16}");
    if (lookback_window != warp_width)
      raise(ErrorCode::InvalidArgument, "lookback_window must equal warp_width");
    if (matvec_wide_block_threads == 0 || matvec_wide_block_threads % warp_width != 0)
      raise(ErrorCode::InvalidArgument, "matvec_wide_block_threads");
    if (matvec_wide_warp_cols == 0 || matvec_wide_warp_cols > 8)
      raise(ErrorCode::InvalidArgument, "matvec_wide_warp_cols must be in 1..8");
  }
};

/// Fault-injection switches for the ordering ablation: the named release
/// store is downgraded to relaxed.
struct MutationFlags {
  bool relax_scan_flag = false;
  bool relax_mapreduce_flag = false;
};

struct RunOptions {
  Backend backend = Backend::Simulator;
  ScheduleSeed schedule{};
  SimTuning tuning{};
  TraceSink* trace = nullptr;
  MutationFlags mutate{};
};

inline LaunchOptions to_launch_options(const RunOptions& o) {
  LaunchOptions lo;
  lo.backend = o.backend;
  lo.schedule = o.schedule;
  lo.tuning = o.tuning;
  lo.trace = o.trace;
  return lo;
}

// ---------------------------------------------------------------------------
// The (f, op) pair. `map` is unary T -> S for the 1-D primitives and binary
// T x T -> S for the matrix primitives. `op` must be associative; the
// - commutative flag is a declaration the caller is responsible for (mapreduce
// rejects specs that do not declare it).

template <class F, class S, class Op>
struct SemiringSpec {
  F map;
  Op op;
  std::optional<S> identity;
  bool commutative = false;
};

template <class S, class F, class Op>
SemiringSpec<F, S, Op> make_semiring(F map, Op op, std::optional<S> identity,
                                     bool commutative) {
  return SemiringSpec<F, S, Op>{map, op, identity, commutative};
}

/// Randomized algebra checks run before a package is admitted to the
/// primitive test matrix. `eq` decides equality (exact or tolerance-based).
template <class S, class Op, class Gen, class Eq>
bool validate_reduce_op(const Op& op, const std::optional<S>& identity, bool commutative,
                        Gen&& gen, Eq&& eq, int samples = 256) {
  for (int i = 0; i < samples; ++i) {
    S a = gen(), b = gen(), c = gen();
    if (!eq(op(op(a, b), c), op(a, op(b, c)))) return false;
    if (commutative && !eq(op(a, b), op(b, a))) return false;
    if (identity && (!eq(op(*identity, a), a) || !eq(op(a, *identity), a))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Optional accumulator: a value plus a validity flag, so warp and block
// combines stay total when tails leave lanes empty and no identity exists.

template <class S>
struct OptVal {
  S value;
  uint8_t valid;
};

template <class S>
inline OptVal<S> opt_none() {
  return OptVal<S>{S{}, 0};
}

template <class S>
inline OptVal<S> opt_of(const S& v) {
  return OptVal<S>{v, 1};
}

// Folds b onto the right of a; associativity of op makes this associative.
template <class Op, class S>
inline OptVal<S> opt_combine(const Op& op, const OptVal<S>& a, const OptVal<S>& b) {
  if (!a.valid) return b;
  if (!b.valid) return a;
  return OptVal<S>{op(a.value, b.value), 1};
}

// ---------------------------------------------------------------------------
// Device-side building blocks

/// Inclusive warp scan in lane order: lane L ends with the fold of lanes
/// 0..L. Safe for noncommutative operators.
template <class S, class Op>
inline OptVal<S> warp_inclusive_scan(Ctx& cx, const Op& op, OptVal<S> v) {
  for (uint32_t d = 1; d < cx.warp_width(); d <<= 1) {
    OptVal<S> got = intr::shuffle_up(cx, v, d);
    if (cx.lane_id() >= d) v = opt_combine(op, got, v);
  }
  return v;
}

/// Pairwise tree reduction in lane order; lane 0 ends with the full fold.
template <class S, class Op>
inline OptVal<S> warp_reduce_ordered(Ctx& cx, const Op& op, OptVal<S> v) {
  for (uint32_t d = 1; d < cx.warp_width(); d <<= 1) {
    OptVal<S> got = intr::shuffle_down(cx, v, d);
    if ((cx.lane_id() & (2 * d - 1)) == 0) v = opt_combine(op, v, got);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Workspace: pre-allocated flag / partial / tile-state buffers, zeroed before
// every launch.

enum class Primitive : uint8_t { Scan, MapReduce, MatVec, VecMat, VCopy, MapReduce2d };

enum class TileFlag : uint8_t { Invalid = 0, Partial = 1, Prefix = 2 };

struct Workspace {
  BufferId tile_aggregate = -1;
  BufferId tile_prefix = -1;
  BufferId tile_flag = -1;
  BufferId partials = -1;
  BufferId flags = -1;
  BufferId result = -1;
  uint64_t tiles = 0;  // scan tile count capacity
  uint64_t slots = 0;  // partial slot capacity

  void release(Machine& m) {
    for (BufferId id : {tile_aggregate, tile_prefix, tile_flag, partials, flags, result})
      if (id >= 0) m.destroy_buffer(id);
    *this = Workspace{};
  }
};

inline uint64_t scan_tiles(uint64_t n, const ArchParams& p) {
  uint64_t tile = uint64_t(p.threads_per_block) * p.nitem_scan;
  return (n + tile - 1) / tile;
}

// Matrix primitive geometry. `outputs` is the result length, `reduce_len` the
// fold length per output.
struct MatPlan {
  bool wide = false;
  uint64_t nb = 1;            // tall: slices per output
  uint64_t rows_per_slice = 0;
  uint64_t grid_outputs = 0;  // tall: outputs in flight, looped with stride
  uint64_t groups = 0;        // wide: output groups per grid pass
  LaunchConfig cfg;
  uint64_t slots = 0;         // partial slots (tall with nb > 1)
};

inline uint64_t tall_slices(uint64_t reduce_len, const ArchParams& p) {
  uint64_t per_slice = uint64_t(p.threads_per_block) * p.nitem_copy * 8;
  return std::clamp<uint64_t>((reduce_len + per_slice - 1) / per_slice, 1,
                              p.mapreduce_blocks);
}

inline MatPlan plan_mat(uint64_t reduce_len, uint64_t outputs, bool commutative,
                        const ArchParams& p) {
  MatPlan plan;
  uint32_t V = p.nitem_copy;
  bool order_free = commutative || reduce_len <= V;  // one lane covers the fold
  if (outputs >= p.matvec_wide_min_outputs && order_free) {
    plan.wide = true;
    uint32_t warps = p.matvec_wide_block_threads / p.warp_width;
    uint64_t per_block = uint64_t(warps) * p.matvec_wide_warp_cols;
    uint64_t needed = (outputs + per_block - 1) / per_block;
    plan.groups = needed;
    plan.cfg.num_blocks = (uint32_t)std::min<uint64_t>(needed, 2ull * p.mapreduce_blocks);
    plan.cfg.threads_per_block = p.matvec_wide_block_threads;
  } else {
    plan.nb = tall_slices(reduce_len, p);
    plan.rows_per_slice = (reduce_len + plan.nb - 1) / plan.nb;
    plan.grid_outputs =
        std::min<uint64_t>(outputs, std::max<uint64_t>(1, 4ull * p.mapreduce_blocks / plan.nb));
    plan.cfg.num_blocks = (uint32_t)(plan.nb * plan.grid_outputs);
    plan.cfg.threads_per_block = p.threads_per_block;
    if (plan.nb > 1) plan.slots = plan.nb * outputs;
  }
  plan.cfg.warp_width = p.warp_width;
  return plan;
}

/// Workspace byte sizing for the pre-allocation interface.
inline uint64_t required_workspace(Primitive prim, uint32_t accum_size, uint64_t n,
                                   uint64_t p_cols, const ArchParams& params_in) {
  ArchParams p = params_in.normalized();
  switch (prim) {
    case Primitive::Scan:
      return scan_tiles(n, p) * (2ull * accum_size + 1);
    case Primitive::MapReduce:
      return uint64_t(p.mapreduce_blocks) * (accum_size + 1) + accum_size;
    case Primitive::MatVec:
    case Primitive::MapReduce2d:
      return tall_slices(n, p) * p_cols * (uint64_t(accum_size) + 1);
    case Primitive::VecMat:
      return tall_slices(p_cols, p) * n * (uint64_t(accum_size) + 1);
    case Primitive::VCopy:
      return 0;
  }
  return 0;
}

template <class S>
Workspace make_scan_workspace(Machine& m, uint64_t n, const ArchParams& params) {
  ArchParams p = params.normalized();
  Workspace ws;
  ws.tiles = scan_tiles(n, p);
  uint64_t cap = std::max<uint64_t>(ws.tiles, 1);
  ws.tile_aggregate = intr::create_buffer<S>(m, cap);
  ws.tile_prefix = intr::create_buffer<S>(m, cap);
  ws.tile_flag = intr::create_buffer<uint8_t>(m, cap);
  return ws;
}

template <class S>
Workspace make_mapreduce_workspace(Machine& m, const ArchParams& params) {
  ArchParams p = params.normalized();
  Workspace ws;
  ws.slots = p.mapreduce_blocks;
  ws.partials = intr::create_buffer<S>(m, ws.slots);
  ws.flags = intr::create_buffer<uint8_t>(m, ws.slots);
  ws.result = intr::create_buffer<S>(m, 1);
  return ws;
}

template <class S>
Workspace make_mat_workspace(Machine& m, uint64_t reduce_len, uint64_t outputs,
                             const ArchParams& params) {
  ArchParams p = params.normalized();
  Workspace ws;
  ws.slots = tall_slices(reduce_len, p) * outputs;  // worst case over strategies
  if (ws.slots > 0) {
    ws.partials = intr::create_buffer<S>(m, ws.slots);
    ws.flags = intr::create_buffer<uint8_t>(m, ws.slots);
  }
  return ws;
}

// ---------------------------------------------------------------------------
// vcopy

template <class T>
LaunchReport vcopy(Machine& m, View<T> src, View<T> dst, uint32_t nitem,
                   const ArchParams& params, const RunOptions& opt = {}) {
  ArchParams p = params.normalized();
  if (nitem != 1 && nitem != 2 && nitem != 4 && nitem != 8 && nitem != 16)
    raise(ErrorCode::InvalidNitem, "vcopy nitem");
  if (src.length != dst.length) raise(ErrorCode::DimensionMismatch, "vcopy lengths differ");
  const uint64_t n = src.length;
  LaunchReport rep;
  if (n == 0) {
    rep.ok = true;
    return rep;
  }

  LaunchConfig cfg;
  cfg.warp_width = p.warp_width;
  cfg.threads_per_block = p.threads_per_block;
  uint64_t chunks = n / nitem;
  uint64_t want = std::max<uint64_t>(1, (chunks + p.threads_per_block - 1) / p.threads_per_block);
  cfg.num_blocks = (uint32_t)std::min<uint64_t>(want, p.mapreduce_blocks);

  const uint32_t V = nitem;
  Kernel k = [=](Ctx& cx) {
    uint64_t total = cx.total_threads();
    T vals[16];
    for (uint64_t c = cx.global_id(); c < chunks; c += total) {
      intr::vload_n(cx, src, c * V, V, vals);
      intr::vstore_n(cx, dst, c * V, V, vals);
    }
    // The final thread copies the remainder tail scalarly.
    if (cx.global_id() == total - 1) {
      for (uint64_t i = chunks * V; i < n; ++i)
        intr::store(cx, dst, i, intr::load(cx, src, i));
    }
  };
  return m.launch(cfg, k, to_launch_options(opt));
}

// ---------------------------------------------------------------------------
// mapreduce: fixed-grid strided accumulation, warp shuffle reduction,
// shared-memory cross-warp reduction, then single-launch inter-block
// aggregation through release-stored flags.

template <class T, class S, class F, class Op>
LaunchReport mapreduce(Machine& m, const SemiringSpec<F, S, Op>& spec, View<T> src,
                       Workspace& ws, const ArchParams& params, S* out,
                       const RunOptions& opt = {}) {
  ArchParams p = params.normalized();
  if (!spec.commutative)
    raise(ErrorCode::InvalidArgument,
          "mapreduce requires an operator declared commutative");
  const uint64_t n = src.length;
  LaunchReport rep;
  if (n == 0) {
    if (!spec.identity) raise(ErrorCode::MissingIdentity, "empty mapreduce needs an identity");
    *out = *spec.identity;
    rep.ok = true;
    return rep;
  }
  LaunchConfig cfg;
  cfg.warp_width = p.warp_width;
  cfg.threads_per_block = p.threads_per_block;
  cfg.num_blocks = (uint32_t)std::clamp<uint64_t>(
      (n + p.threads_per_block - 1) / p.threads_per_block, 1, p.mapreduce_blocks);
  if (ws.slots < cfg.num_blocks || ws.partials < 0 || ws.result < 0)
    raise(ErrorCode::WorkspaceTooSmall, "mapreduce workspace");

  uint32_t nw = cfg.warps_per_block();
  cfg.shared_bytes = (uint32_t)(nw * sizeof(OptVal<S>) + 64);
  m.fill_zero(ws.flags);

  View<S> partials = intr::make_view<S>(m, ws.partials);
  View<uint8_t> flags = intr::make_view<uint8_t>(m, ws.flags);
  View<S> result = intr::make_view<S>(m, ws.result);
  const bool relax_flag = opt.mutate.relax_mapreduce_flag;
  const F f = spec.map;
  const Op op = spec.op;
  const uint32_t grid_blocks = cfg.num_blocks;
  const uint32_t tpb = cfg.threads_per_block;

  Kernel k = [=](Ctx& cx) {
    uint64_t total = cx.total_threads();
    OptVal<S> acc = opt_none<S>();
    for (uint64_t i = cx.global_id(); i < n; i += total)
      acc = opt_combine(op, acc, opt_of<S>(f(intr::load(cx, src, i))));
    acc = warp_reduce_ordered(cx, op, acc);

    uint32_t nwarps = cx.threads_per_block() / cx.warp_width();
    auto* parts = static_cast<OptVal<S>*>(
        cx.shared_alloc(nwarps * sizeof(OptVal<S>), alignof(OptVal<S>)));
    if (cx.lane_id() == 0) parts[cx.warp_id()] = acc;
    cx.barrier();
    if (cx.warp_id() == 0) {
      OptVal<S> v = cx.lane_id() < nwarps ? parts[cx.lane_id()] : opt_none<S>();
      v = warp_reduce_ordered(cx, op, v);
      if (cx.lane_id() == 0) acc = v;
    }

    if (cx.local_id() == 0) {
      if (acc.valid) intr::store(cx, partials, cx.block_id(), acc.value);
      if (relax_flag)
        intr::store(cx, flags, cx.block_id(), uint8_t{1});
      else
        intr::ordered_store(cx, flags, cx.block_id(), uint8_t{1});
    }

    // Block 0 spins on every flag, then folds partials in block order.
    if (cx.block_id() == 0 && cx.local_id() == 0) {
      for (uint32_t b = 0; b < grid_blocks; ++b)
        while (intr::ordered_load(cx, flags, b) == 0) {
        }
      OptVal<S> sum = opt_none<S>();
      for (uint32_t b = 0; b < grid_blocks; ++b) {
        if (uint64_t(b) * tpb < n)  // block stride touched the input
          sum = opt_combine(op, sum, opt_of<S>(intr::load(cx, partials, b)));
      }
      intr::store(cx, result, 0, sum.value);
    }
  };
  rep = m.launch(cfg, k, to_launch_options(opt));
  if (rep.ok) {
    S r;
    m.read(ws.result, std::span<S>(&r, 1));
    *out = r;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// scan: decoupled lookback. One tile of threads_per_block * nitem elements
// per block; per-thread register scan over a vectorized load, warp shuffle
// scan, shared-memory cross-warp scan, then a PARTIAL release; warp 0 walks
// the predecessor tiles backwards, folding PARTIAL aggregates until a PREFIX
// tile closes the window, and publishes this tile's PREFIX.

template <class T, class S, class F, class Op>
LaunchReport scan(Machine& m, const SemiringSpec<F, S, Op>& spec, View<T> src, View<S> dst,
                  bool inclusive, Workspace& ws, const ArchParams& params,
                  const RunOptions& opt = {}) {
  ArchParams p = params.normalized();
  if (src.length != dst.length) raise(ErrorCode::DimensionMismatch, "scan lengths differ");
  if (!inclusive && !spec.identity)
    raise(ErrorCode::MissingIdentity, "exclusive scan needs an identity");
  const uint64_t n = src.length;
  LaunchReport rep;
  if (n == 0) {
    rep.ok = true;
    return rep;
  }
  const uint64_t tiles = scan_tiles(n, p);
  if (ws.tiles < tiles || ws.tile_flag < 0)
    raise(ErrorCode::WorkspaceTooSmall, "scan workspace");

  LaunchConfig cfg;
  cfg.warp_width = p.warp_width;
  cfg.threads_per_block = p.threads_per_block;
  cfg.num_blocks = (uint32_t)tiles;
  uint32_t nw = cfg.warps_per_block();
  cfg.shared_bytes = (uint32_t)((nw + 1) * sizeof(OptVal<S>) + 64);
  m.fill_zero(ws.tile_flag);
  m.fill_zero(ws.tile_aggregate);
  m.fill_zero(ws.tile_prefix);

  View<S> aggs = intr::make_view<S>(m, ws.tile_aggregate);
  View<S> prefixes = intr::make_view<S>(m, ws.tile_prefix);
  View<uint8_t> tflags = intr::make_view<uint8_t>(m, ws.tile_flag);
  const bool relax_flag = opt.mutate.relax_scan_flag;
  const F f = spec.map;
  const Op op = spec.op;
  const S identity = spec.identity.value_or(S{});
  const uint32_t V = p.nitem_scan;

  Kernel k = [=](Ctx& cx) {
    const uint64_t tile = cx.block_id();
    const uint64_t tile_elems = uint64_t(cx.threads_per_block()) * V;
    const uint64_t base = tile * tile_elems + uint64_t(cx.local_id()) * V;
    uint32_t count = 0;
    if (base < n) count = (uint32_t)std::min<uint64_t>(V, n - base);

    // Register scan over this thread's elements.
    S regs[16];
    if (count == V) {
      T raw[16];
      intr::vload_n(cx, src, base, V, raw);
      for (uint32_t i = 0; i < V; ++i) {
        S v = f(raw[i]);
        regs[i] = i ? op(regs[i - 1], v) : v;
      }
    } else {
      for (uint32_t i = 0; i < count; ++i) {
        S v = f(intr::load(cx, src, base + i));
        regs[i] = i ? op(regs[i - 1], v) : v;
      }
    }
    OptVal<S> total = count ? opt_of<S>(regs[count - 1]) : opt_none<S>();

    // Warp scan, then cross-warp scan through shared memory.
    OptVal<S> incl = warp_inclusive_scan(cx, op, total);
    const uint32_t nwarps = cx.threads_per_block() / cx.warp_width();
    auto* warp_tot = static_cast<OptVal<S>*>(
        cx.shared_alloc(nwarps * sizeof(OptVal<S>), alignof(OptVal<S>)));
    auto* tile_ex = static_cast<OptVal<S>*>(
        cx.shared_alloc(sizeof(OptVal<S>), alignof(OptVal<S>)));
    if (cx.lane_id() == cx.warp_width() - 1) warp_tot[cx.warp_id()] = incl;
    cx.barrier();
    if (cx.warp_id() == 0) {
      OptVal<S> wt = cx.lane_id() < nwarps ? warp_tot[cx.lane_id()] : opt_none<S>();
      wt = warp_inclusive_scan(cx, op, wt);
      if (cx.lane_id() < nwarps) warp_tot[cx.lane_id()] = wt;
    }
    cx.barrier();
    const OptVal<S> tile_agg = warp_tot[nwarps - 1];

    // Publish this tile's aggregate. Tile 0 bootstraps with PREFIX.
    if (cx.local_id() == 0) {
      intr::store(cx, aggs, tile, tile_agg.value);
      if (tile == 0) {
        *tile_ex = opt_none<S>();
        intr::store(cx, prefixes, 0, tile_agg.value);
        if (relax_flag)
          intr::store(cx, tflags, 0, uint8_t(TileFlag::Prefix));
        else
          intr::ordered_store(cx, tflags, 0, uint8_t(TileFlag::Prefix));
      } else {
        if (relax_flag)
          intr::store(cx, tflags, tile, uint8_t(TileFlag::Partial));
        else
          intr::ordered_store(cx, tflags, tile, uint8_t(TileFlag::Partial));
      }
    }

    // Lookback by warp 0: spin each predecessor's flag up, fold the window
    // newest-to-oldest in operator order, hop to the next window while only
    // PARTIALs are visible, stop at the first PREFIX.
    if (tile > 0 && cx.warp_id() == 0) {
      OptVal<S> carry = opt_none<S>();
      uint64_t win_hi = tile;
      for (;;) {
        int64_t j = (int64_t)win_hi - 1 - cx.lane_id();
        OptVal<S> contrib = opt_none<S>();
        uint8_t flag = 0;
        if (j >= 0) {
          do {
            flag = intr::ordered_load(cx, tflags, (uint64_t)j);
          } while (flag == uint8_t(TileFlag::Invalid));
          contrib = opt_of<S>(flag == uint8_t(TileFlag::Prefix)
                                  ? intr::load(cx, prefixes, (uint64_t)j)
                                  : intr::load(cx, aggs, (uint64_t)j));
        }
        uint32_t pl = (j >= 0 && flag == uint8_t(TileFlag::Prefix)) ? cx.lane_id()
                                                                    : cx.warp_width();
        for (uint32_t d = 1; d < cx.warp_width(); d <<= 1)
          pl = std::min(pl, intr::shuffle_down(cx, pl, d));
        pl = intr::shuffle(cx, pl, 0);

        uint32_t oldest = pl < cx.warp_width() ? pl : cx.warp_width() - 1;
        OptVal<S> window = opt_none<S>();
        for (int32_t lane = (int32_t)oldest; lane >= 0; --lane)
          window = opt_combine(op, window, intr::shuffle(cx, contrib, (uint32_t)lane));
        carry = opt_combine(op, window, carry);
        if (pl < cx.warp_width()) break;
        win_hi -= cx.warp_width();
      }
      if (cx.lane_id() == 0) {
        *tile_ex = carry;
        intr::store(cx, prefixes, tile, opt_combine(op, carry, tile_agg).value);
        if (relax_flag)
          intr::store(cx, tflags, tile, uint8_t(TileFlag::Prefix));
        else
          intr::ordered_store(cx, tflags, tile, uint8_t(TileFlag::Prefix));
      }
    }
    cx.barrier();

    // Compose the element outputs entirely in registers, then store once.
    const OptVal<S> pre_tile = *tile_ex;
    OptVal<S> warp_ex = cx.warp_id() > 0 ? warp_tot[cx.warp_id() - 1] : opt_none<S>();
    OptVal<S> lane_got = intr::shuffle_up(cx, incl, 1);
    OptVal<S> lane_ex = cx.lane_id() > 0 ? lane_got : opt_none<S>();
    OptVal<S> thread_ex = opt_combine(op, opt_combine(op, pre_tile, warp_ex), lane_ex);

    if (count > 0) {
      S outs[16];
      if (inclusive) {
        for (uint32_t i = 0; i < count; ++i)
          outs[i] = opt_combine(op, thread_ex, opt_of<S>(regs[i])).value;
      } else {
        outs[0] = thread_ex.valid ? thread_ex.value : identity;
        for (uint32_t i = 1; i < count; ++i)
          outs[i] = opt_combine(op, thread_ex, opt_of<S>(regs[i - 1])).value;
      }
      if (count == V)
        intr::vstore_n(cx, dst, base, V, outs);
      else
        for (uint32_t i = 0; i < count; ++i) intr::store(cx, dst, base + i, outs[i]);
    }
  };
  return m.launch(cfg, k, to_launch_options(opt));
}

// ---------------------------------------------------------------------------
// matvec / vecmat. Column-major A (element (i,j) at j*n + i). The tall path
// assigns a set of blocks per output and keeps every combine in row order, so
// it is safe for any associative operator; the wide path spreads the fold of
// one output across a warp's lanes and is picked only when that is harmless.

namespace detail_mat {

template <class T, class S, class F2, class Op>
struct MatArgs {
  F2 f;  // (vector_elem, matrix_elem) for matvec; (matrix_elem, vector_elem) for vecmat
  Op op;
  bool uses_vector;
  uint64_t reduce_len, outputs;
  View<T> x;
  View<S> out;
  View<S> partials;
  View<uint8_t> flags;
  MatPlan plan;
  uint32_t nitem;
};

// column_of(output) yields the reduce-axis view for one output:
// matvec -> a matrix column (contiguous); vecmat -> a matrix row (strided).
template <class T, class S, class F2, class Op, class AxisView>
void tall_kernel(Ctx& cx, const MatArgs<T, S, F2, Op>& a, const AxisView& axis_of) {
  const uint64_t nb = a.plan.nb;
  const uint64_t slice = cx.block_id() % nb;
  const uint64_t first_out = cx.block_id() / nb;
  const uint64_t out_stride = a.plan.grid_outputs;
  const uint64_t row_lo = slice * a.plan.rows_per_slice;
  const uint64_t row_hi = std::min<uint64_t>(a.reduce_len, row_lo + a.plan.rows_per_slice);
  const uint64_t chunk =
      (a.plan.rows_per_slice + cx.threads_per_block() - 1) / cx.threads_per_block();
  const uint64_t my_lo = std::min<uint64_t>(row_hi, row_lo + cx.local_id() * chunk);
  const uint64_t my_hi = std::min<uint64_t>(row_hi, my_lo + chunk);

  auto* parts = static_cast<OptVal<S>*>(cx.shared_alloc(
      cx.threads_per_block() * sizeof(OptVal<S>), alignof(OptVal<S>)));

  T av[16] = {}, xv[16] = {};
  for (uint64_t o = first_out; o < a.outputs; o += out_stride) {
    auto col = axis_of(o);
    OptVal<S> acc = opt_none<S>();
    uint64_t r = my_lo;
    while (r + a.nitem <= my_hi) {
      intr::vload_n(cx, col, r, a.nitem, av);
      if (a.uses_vector) intr::vload_n(cx, a.x, r, a.nitem, xv);
      for (uint32_t k = 0; k < a.nitem; ++k)
        acc = opt_combine(a.op, acc, opt_of<S>(a.f(av[k], xv[k])));
      r += a.nitem;
    }
    for (; r < my_hi; ++r) {
      T e = intr::load(cx, col, r);
      T xe = a.uses_vector ? intr::load(cx, a.x, r) : T{};
      acc = opt_combine(a.op, acc, opt_of<S>(a.f(e, xe)));
    }
    parts[cx.local_id()] = acc;
    cx.barrier();
    if (cx.local_id() == 0) {
      OptVal<S> total = opt_none<S>();
      for (uint32_t t = 0; t < cx.threads_per_block(); ++t)
        total = opt_combine(a.op, total, parts[t]);
      if (nb == 1) {
        intr::store(cx, a.out, o, total.value);
      } else {
        if (total.valid) intr::store(cx, a.partials, o * nb + slice, total.value);
        intr::ordered_store(cx, a.flags, o * nb + slice, uint8_t{1});
        if (slice == 0) {
          // This block finalizes the output from all slices, in slice order.
          OptVal<S> sum = opt_none<S>();
          for (uint64_t s = 0; s < nb; ++s) {
            if (s * a.plan.rows_per_slice >= a.reduce_len) break;  // empty tail slice
            while (intr::ordered_load(cx, a.flags, o * nb + s) == 0) {
            }
            sum = opt_combine(a.op, sum, opt_of<S>(intr::load(cx, a.partials, o * nb + s)));
          }
          intr::store(cx, a.out, o, sum.value);
        }
      }
    }
    cx.barrier();
  }
}

template <class T, class S, class F2, class Op, class AxisView>
void wide_kernel(Ctx& cx, const MatArgs<T, S, F2, Op>& a, uint32_t warp_cols,
                 const AxisView& axis_of) {
  const uint32_t warps = cx.threads_per_block() / cx.warp_width();
  const uint64_t per_block = uint64_t(warps) * warp_cols;
  const uint64_t group_stride = uint64_t(cx.num_blocks()) * per_block;
  OptVal<S> acc[8];
  T av[16] = {}, xv[16] = {};

  for (uint64_t g0 = uint64_t(cx.block_id()) * per_block + uint64_t(cx.warp_id()) * warp_cols;
       g0 < a.outputs; g0 += group_stride) {
    for (uint32_t c = 0; c < warp_cols; ++c) acc[c] = opt_none<S>();
    const uint64_t stride = uint64_t(cx.warp_width()) * a.nitem;
    for (uint64_t r0 = uint64_t(cx.lane_id()) * a.nitem; r0 < a.reduce_len; r0 += stride) {
      uint32_t w = (uint32_t)std::min<uint64_t>(a.nitem, a.reduce_len - r0);
      if (a.uses_vector) {
        if (w == a.nitem)
          intr::vload_n(cx, a.x, r0, w, xv);
        else
          for (uint32_t k = 0; k < w; ++k) xv[k] = intr::load(cx, a.x, r0 + k);
      }
      for (uint32_t c = 0; c < warp_cols; ++c) {
        uint64_t o = g0 + c;
        if (o >= a.outputs) break;
        auto col = axis_of(o);
        if (w == a.nitem)
          intr::vload_n(cx, col, r0, w, av);
        else
          for (uint32_t k = 0; k < w; ++k) av[k] = intr::load(cx, col, r0 + k);
        for (uint32_t k = 0; k < w; ++k)
          acc[c] = opt_combine(a.op, acc[c], opt_of<S>(a.f(av[k], xv[k])));
      }
    }
    for (uint32_t c = 0; c < warp_cols; ++c) {
      OptVal<S> total = warp_reduce_ordered(cx, a.op, acc[c]);
      if (cx.lane_id() == 0 && g0 + c < a.outputs)
        intr::store(cx, a.out, g0 + c, total.value);
    }
  }
}

template <class T, class S, class F2, class Op, class AxisOf>
LaunchReport run_mat(Machine& m, const SemiringSpec<F2, S, Op>& spec, bool uses_vector,
                     uint64_t reduce_len, uint64_t outputs, View<T> x, View<S> out,
                     Workspace& ws, const ArchParams& p, const RunOptions& opt,
                     AxisOf axis_of, uint32_t warp_cols) {
  LaunchReport rep;
  if (outputs == 0) {
    rep.ok = true;
    return rep;
  }
  if (reduce_len == 0) {
    if (!spec.identity) raise(ErrorCode::MissingIdentity, "empty reduction needs an identity");
    std::vector<S> fill(outputs, *spec.identity);
    m.write(out.buf, std::span<const S>(fill), out.offset);
    rep.ok = true;
    return rep;
  }
  MatPlan plan = plan_mat(reduce_len, outputs, spec.commutative, p);
  LaunchConfig cfg = plan.cfg;
  cfg.shared_bytes =
      (uint32_t)(plan.wide ? 64 : cfg.threads_per_block * sizeof(OptVal<S>) + 64);

  MatArgs<T, S, F2, Op> args{spec.map, spec.op, uses_vector, reduce_len, outputs,
                             x,        out,     {},          {},         plan,
                             p.nitem_copy};
  if (!plan.wide && plan.nb > 1) {
    if (ws.slots < plan.nb * outputs || ws.partials < 0)
      raise(ErrorCode::WorkspaceTooSmall, "matrix primitive workspace");
    m.fill_zero(ws.flags);
    args.partials = intr::make_view<S>(m, ws.partials);
    args.flags = intr::make_view<uint8_t>(m, ws.flags);
  }

  Kernel k = [=](Ctx& cx) {
    if (args.plan.wide)
      wide_kernel(cx, args, warp_cols, axis_of);
    else
      tall_kernel(cx, args, axis_of);
  };
  return m.launch(cfg, k, to_launch_options(opt));
}

}  // namespace detail_mat

/// y[j] = op over rows i of f(x[i], A[i, j]); A is n x p column-major.
template <class T, class S, class F2, class Op>
LaunchReport matvec(Machine& m, const SemiringSpec<F2, S, Op>& spec, View<T> A, uint64_t n,
                    uint64_t p_cols, View<T> x, View<S> y, Workspace& ws,
                    const ArchParams& params, const RunOptions& opt = {},
                    bool uses_vector = true) {
  ArchParams p = params.normalized();
  if (A.length != n * p_cols || (uses_vector && x.length != n) || y.length != p_cols)
    raise(ErrorCode::DimensionMismatch, "matvec shapes");
  if (!A.contiguous()) raise(ErrorCode::InvalidArgument, "matvec needs contiguous A");
  auto f2 = spec.map;
  auto swapped = make_semiring<S>([f2](T a, T b) { return f2(b, a); }, spec.op,
                                  spec.identity, spec.commutative);
  auto column_of = [A, n](uint64_t j) { return A.subview(j * n, n); };
  return detail_mat::run_mat<T, S>(m, swapped, uses_vector, n, p_cols, x, y, ws, p, opt,
                                   column_of, p.matvec_wide_warp_cols);
}

/// z[i] = op over columns j of f(A[i, j], x[j]); row reads are strided and
/// fall back to scalar events.
template <class T, class S, class F2, class Op>
LaunchReport vecmat(Machine& m, const SemiringSpec<F2, S, Op>& spec, View<T> A, uint64_t n,
                    uint64_t p_cols, View<T> x, View<S> z, Workspace& ws,
                    const ArchParams& params, const RunOptions& opt = {},
                    bool uses_vector = true) {
  ArchParams p = params.normalized();
  if (A.length != n * p_cols || (uses_vector && x.length != p_cols) || z.length != n)
    raise(ErrorCode::DimensionMismatch, "vecmat shapes");
  if (!A.contiguous()) raise(ErrorCode::InvalidArgument, "vecmat needs contiguous A");
  auto row_of = [A, n, p_cols](uint64_t i) { return A.strided(i, p_cols, n); };
  return detail_mat::run_mat<T, S>(m, spec, uses_vector, p_cols, n, x, z, ws, p, opt,
                                   row_of, p.matvec_wide_warp_cols);
}

enum class ReduceAxis : uint8_t { Rows, Cols };

/// 2-D reduction delegated to the matrix kernels: reducing over rows yields
/// one value per column (matvec layout), over columns one per row (vecmat).
/// The unary map is lifted to a binary one whose vector operand is never read.
template <class T, class S, class F, class Op>
LaunchReport mapreduce_2d(Machine& m, const SemiringSpec<F, S, Op>& spec, View<T> A,
                          uint64_t n, uint64_t p_cols, ReduceAxis axis, View<S> out,
                          Workspace& ws, const ArchParams& params,
                          const RunOptions& opt = {}) {
  auto f = spec.map;
  BufferId dummy = intr::create_buffer<T>(m, 1);
  View<T> xdummy = intr::make_view<T>(m, dummy);
  LaunchReport rep;
  if (axis == ReduceAxis::Rows) {
    auto lifted = make_semiring<S>([f](T xv, T a) { (void)xv; return f(a); }, spec.op,
                                   spec.identity, spec.commutative);
    rep = matvec<T, S>(m, lifted, A, n, p_cols, xdummy, out, ws, params, opt,
                       /*uses_vector=*/false);
  } else {
    auto lifted = make_semiring<S>([f](T a, T xv) { (void)xv; return f(a); }, spec.op,
                                   spec.identity, spec.commutative);
    rep = vecmat<T, S>(m, lifted, A, n, p_cols, xdummy, out, ws, params, opt,
                       /*uses_vector=*/false);
  }
  m.destroy_buffer(dummy);
  return rep;
}

}  // namespace forge::prim

namespace forge::intr {

template <class S>
struct TypeOf<prim::OptVal<S>> {
  static const TypeDescriptor& get() {
    static const TypeDescriptor d = TypeDescriptor::struct_of(
        {{descriptor_of<S>(), 0},
         {TypeDescriptor::primitive(Scalar::U8), offsetof(prim::OptVal<S>, valid)}},
        sizeof(prim::OptVal<S>));
    return d;
  }
};

}  // namespace forge::intr
