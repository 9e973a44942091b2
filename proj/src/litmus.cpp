#include "forge/litmus.hpp"

#include <cctype>
#include <sstream>

#include "forge/intrinsics.hpp"

namespace forge::lit {

// ---------------------------------------------------------------------------
// Assert expressions: ||, &&, !, comparisons, mem[k], B<i>.r<j>, integers.

struct Expr {
  enum class Kind { Or, And, Not, Cmp, Mem, Reg, Lit } kind;
  ExprPtr lhs, rhs;
  std::string cmp;
  uint32_t a = 0, b = 0;
  int64_t value = 0;
};

namespace {

int64_t eval_value(const Expr& e, const Outcome& o) {
  switch (e.kind) {
    case Expr::Kind::Mem:
      if (e.a >= o.final_cells.size()) raise(ErrorCode::ParseError, "assert: cell out of range");
      return o.final_cells[e.a];
    case Expr::Kind::Reg:
      if (e.a >= o.loads.size() || e.b >= o.loads[e.a].size())
        raise(ErrorCode::ParseError, "assert: register out of range");
      return o.loads[e.a][e.b];
    case Expr::Kind::Lit:
      return e.value;
    default:
      raise(ErrorCode::ParseError, "assert: value expected");
  }
}

bool eval_bool(const Expr& e, const Outcome& o) {
  switch (e.kind) {
    case Expr::Kind::Or: return eval_bool(*e.lhs, o) || eval_bool(*e.rhs, o);
    case Expr::Kind::And: return eval_bool(*e.lhs, o) && eval_bool(*e.rhs, o);
    case Expr::Kind::Not: return !eval_bool(*e.lhs, o);
    case Expr::Kind::Cmp: {
      int64_t x = eval_value(*e.lhs, o), y = eval_value(*e.rhs, o);
      if (e.cmp == "==") return x == y;
      if (e.cmp == "!=") return x != y;
      if (e.cmp == "<") return x < y;
      if (e.cmp == "<=") return x <= y;
      if (e.cmp == ">") return x > y;
      if (e.cmp == ">=") return x >= y;
      raise(ErrorCode::ParseError, "assert: bad comparison");
    }
    default:
      raise(ErrorCode::ParseError, "assert: boolean expected");
  }
}

struct ExprParser {
  const std::string& s;
  size_t pos = 0;

  void skip() {
    while (pos < s.size() && std::isspace((unsigned char)s[pos])) pos++;
  }
  bool lit(const char* tok) {
    skip();
    size_t len = std::strlen(tok);
    if (s.compare(pos, len, tok) == 0) {
      pos += len;
      return true;
    }
    return false;
  }
  [[noreturn]] void fail(const std::string& what) {
    raise(ErrorCode::ParseError, "assert: " + what + " at '" + s.substr(pos, 12) + "'");
  }

  uint32_t number() {
    skip();
    size_t start = pos;
    while (pos < s.size() && std::isdigit((unsigned char)s[pos])) pos++;
    if (pos == start) fail("number expected");
    return (uint32_t)std::stoul(s.substr(start, pos - start));
  }

  ExprPtr value() {
    skip();
    if (lit("mem[")) {
      auto e = std::make_shared<Expr>();
      e->kind = Expr::Kind::Mem;
      e->a = number();
      if (!lit("]")) fail("']' expected");
      return e;
    }
    if (pos < s.size() && s[pos] == 'B') {
      pos++;
      auto e = std::make_shared<Expr>();
      e->kind = Expr::Kind::Reg;
      e->a = number();
      if (!lit(".r")) fail("'.r' expected");
      e->b = number();
      return e;
    }
    auto e = std::make_shared<Expr>();
    e->kind = Expr::Kind::Lit;
    e->value = number();
    return e;
  }

  ExprPtr comparison() {
    skip();
    if (lit("!")) {
      auto e = std::make_shared<Expr>();
      e->kind = Expr::Kind::Not;
      e->lhs = comparison();
      return e;
    }
    if (lit("(")) {
      ExprPtr inner = or_expr();
      if (!lit(")")) fail("')' expected");
      return inner;
    }
    ExprPtr l = value();
    skip();
    for (const char* op : {"==", "!=", "<=", ">=", "<", ">"}) {
      if (lit(op)) {
        auto e = std::make_shared<Expr>();
        e->kind = Expr::Kind::Cmp;
        e->cmp = op;
        e->lhs = l;
        e->rhs = value();
        return e;
      }
    }
    fail("comparison expected");
  }

  ExprPtr and_expr() {
    ExprPtr l = comparison();
    while (lit("&&")) {
      auto e = std::make_shared<Expr>();
      e->kind = Expr::Kind::And;
      e->lhs = l;
      e->rhs = comparison();
      l = e;
    }
    return l;
  }

  ExprPtr or_expr() {
    ExprPtr l = and_expr();
    while (lit("||")) {
      auto e = std::make_shared<Expr>();
      e->kind = Expr::Kind::Or;
      e->lhs = l;
      e->rhs = and_expr();
      l = e;
    }
    return l;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Parser

LitmusSpec parse_litmus(const std::string& text) {
  LitmusSpec spec;
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    size_t h = line.find('#');
    if (h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;

    auto parse_err = [&](const std::string& what) -> void {
      raise(ErrorCode::ParseError,
            "litmus line " + std::to_string(lineno) + ": " + what);
    };

    if (!header_seen) {
      if (tok.rfind("blocks=", 0) != 0) parse_err("expected 'blocks=<n> cells=<k>'");
      spec.blocks = (uint32_t)std::stoul(tok.substr(7));
      std::string tok2;
      if (!(ls >> tok2) || tok2.rfind("cells=", 0) != 0)
        parse_err("expected 'cells=<k>'");
      spec.cells = (uint32_t)std::stoul(tok2.substr(6));
      if (spec.blocks == 0 || spec.blocks > 4) parse_err("blocks must be 1..4");
      if (spec.cells == 0 || spec.cells > 8) parse_err("cells must be 1..8");
      spec.programs.resize(spec.blocks);
      header_seen = true;
      continue;
    }

    if (tok == "assert") {
      std::string rest;
      std::getline(ls, rest);
      spec.check_text = rest;
      ExprParser ep{spec.check_text};
      spec.check = ep.or_expr();
      ep.skip();
      if (ep.pos != spec.check_text.size()) parse_err("trailing characters in assert");
      continue;
    }

    if (tok.size() < 3 || tok[0] != 'B' || tok.back() != ':')
      parse_err("expected 'B<i>:'");
    uint32_t block = (uint32_t)std::stoul(tok.substr(1, tok.size() - 2));
    if (block >= spec.blocks) parse_err("block index out of range");

    Instr ins;
    std::string op;
    if (!(ls >> op)) parse_err("expected st|ld");
    if (op == "st")
      ins.is_store = true;
    else if (op == "ld")
      ins.is_store = false;
    else
      parse_err("expected st|ld");
    if (!(ls >> ins.cell) || ins.cell >= spec.cells) parse_err("bad cell index");

    std::string extra;
    while (ls >> extra) {
      if (extra == "rel")
        ins.order = MemoryOrdering::Release;
      else if (extra == "acq")
        ins.order = MemoryOrdering::Acquire;
      else if (extra == "rlx")
        ins.order = MemoryOrdering::Relaxed;
      else if (extra[0] == '=')
        ins.imm = (uint32_t)std::stoul(extra.substr(1));
      else
        parse_err("unknown token '" + extra + "'");
    }
    if (ins.is_store && ins.order == MemoryOrdering::Acquire)
      parse_err("stores cannot be acquire");
    if (!ins.is_store && ins.order == MemoryOrdering::Release)
      parse_err("loads cannot be release");
    spec.programs[block].push_back(ins);
  }
  if (!header_seen) raise(ErrorCode::ParseError, "litmus: missing header");
  return spec;
}

// ---------------------------------------------------------------------------
// Runner

std::string Outcome::to_string() const {
  std::ostringstream out;
  bool first = true;
  for (size_t b = 0; b < loads.size(); ++b) {
    if (loads[b].empty()) continue;
    if (!first) out << " ";
    first = false;
    out << "B" << b << ":";
    for (size_t r = 0; r < loads[b].size(); ++r) {
      if (r) out << ",";
      out << "r" << r << "=" << loads[b][r];
    }
  }
  if (!first) out << " ";
  out << "mem=[";
  for (size_t c = 0; c < final_cells.size(); ++c) {
    if (c) out << ",";
    out << final_cells[c];
  }
  out << "]";
  return out.str();
}

bool eval_assert(const LitmusSpec& spec, const Outcome& o) {
  if (!spec.check) return true;
  return eval_bool(*spec.check, o);
}

LitmusResult run_litmus(const LitmusSpec& spec, uint64_t seed_begin, uint64_t seed_end,
                        const LitmusOptions& options) {
  LitmusResult res;
  uint32_t total_loads = 0;
  std::vector<uint32_t> load_base(spec.blocks, 0);
  for (uint32_t b = 0; b < spec.blocks; ++b) {
    load_base[b] = total_loads;
    for (const Instr& i : spec.programs[b])
      if (!i.is_store) total_loads++;
  }

  for (uint64_t seed = seed_begin; seed < seed_end; ++seed) {
    Machine m;
    BufferId cells = intr::create_buffer<uint32_t>(m, spec.cells);
    BufferId obs = intr::create_buffer<uint32_t>(m, std::max<uint32_t>(total_loads, 1));
    View<uint32_t> cells_v = intr::make_view<uint32_t>(m, cells);
    View<uint32_t> obs_v = intr::make_view<uint32_t>(m, obs);

    LaunchConfig cfg;
    cfg.num_blocks = spec.blocks;
    cfg.threads_per_block = 32;
    cfg.warp_width = 32;

    const LitmusSpec* sp = &spec;
    const std::vector<uint32_t>* base = &load_base;
    Kernel k = [sp, base, cells_v, obs_v](Ctx& cx) {
      if (cx.local_id() != 0) return;
      uint32_t slot = (*base)[cx.block_id()];
      for (const Instr& ins : sp->programs[cx.block_id()]) {
        if (ins.is_store) {
          intr::store(cx, cells_v, ins.cell, ins.imm, ins.order);
        } else {
          uint32_t v = intr::load(cx, cells_v, ins.cell, ins.order);
          intr::store(cx, obs_v, slot++, v);
        }
      }
    };

    LaunchOptions lo;
    lo.backend = Backend::Simulator;
    lo.schedule.seed = seed;
    lo.schedule.step_budget = options.step_budget;
    lo.tuning = options.tuning;
    LaunchReport rep = m.launch(cfg, k, lo);
    res.seeds_run++;
    if (!rep.ok) {
      if (res.faults == 0) res.first_fault = rep.fault;
      res.faults++;
      continue;
    }

    Outcome o;
    o.final_cells.resize(spec.cells);
    m.read(cells, std::span<uint32_t>(o.final_cells));
    std::vector<uint32_t> all(std::max<uint32_t>(total_loads, 1));
    m.read(obs, std::span<uint32_t>(all));
    o.loads.resize(spec.blocks);
    for (uint32_t b = 0; b < spec.blocks; ++b) {
      uint32_t count = 0;
      for (const Instr& i : spec.programs[b])
        if (!i.is_store) count++;
      o.loads[b].assign(all.begin() + load_base[b], all.begin() + load_base[b] + count);
    }
    if (!eval_assert(spec, o)) res.assert_violations++;
    res.histogram[o]++;
  }
  return res;
}

}  // namespace forge::lit
