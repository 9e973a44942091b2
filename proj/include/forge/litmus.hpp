#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "forge/machine.hpp"

namespace forge::lit {

/// One ordering-annotated access of a straight-line litmus program.
struct Instr {
  bool is_store = false;
  uint32_t cell = 0;
  MemoryOrdering order = MemoryOrdering::Relaxed;
  uint32_t imm = 0;  // stores only
};

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

/// Parsed litmus specification:
///   blocks=<n> cells=<k>
///   B<i>: st|ld <cell> [rel|acq|rlx] [=<imm>]
///   assert <expr>
/// The assert expression ranges over final cell values (`mem[k]`) and load
/// observations (`B<i>.r<j>`, the j-th load of block i).
struct LitmusSpec {
  uint32_t blocks = 0;
  uint32_t cells = 0;
  std::vector<std::vector<Instr>> programs;
  ExprPtr check;           // null when no assert line
  std::string check_text;  // verbatim assert expression
};

LitmusSpec parse_litmus(const std::string& text);

/// Values observed by one schedule: every load's result in program order per
/// block, plus the final committed cells.
struct Outcome {
  std::vector<std::vector<uint32_t>> loads;
  std::vector<uint32_t> final_cells;

  std::string to_string() const;
  auto operator<=>(const Outcome&) const = default;
};

struct LitmusResult {
  std::map<Outcome, uint64_t> histogram;  // outcome -> number of seeds
  uint64_t seeds_run = 0;
  uint64_t assert_violations = 0;  // seeds whose outcome fails the assert
  uint64_t faults = 0;             // seeds whose launch faulted
  Fault first_fault;
};

struct LitmusOptions {
  uint64_t step_budget = 10'000'000;
  SimTuning tuning{};
};

/// Runs the program once per seed on the simulator and histograms outcomes.
/// Deterministic per seed.
LitmusResult run_litmus(const LitmusSpec& spec, uint64_t seed_begin, uint64_t seed_end,
                        const LitmusOptions& options = {});

bool eval_assert(const LitmusSpec& spec, const Outcome& o);

}  // namespace forge::lit
