#include "canary/isa.hpp"

#include <bit>
#include <cctype>
#include <charconv>
#include <cstring>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "canary/binio.hpp"
#include "canary/error.hpp"

namespace canary::isa {

namespace {

struct OpInfo {
  Opcode op;
  const char* name;
  int regs;
};

constexpr OpInfo kOps[] = {
    {Opcode::Inf, "inf", 3},        {Opcode::Infsp, "infsp", 4},   {Opcode::Csps, "csps", 3},
    {Opcode::Sort, "sort", 3},      {Opcode::Acum, "acum", 3},     {Opcode::Genmasks, "genmasks", 2},
    {Opcode::Findneuron, "findneuron", 3}, {Opcode::Findrf, "findrf", 2}, {Opcode::Cls, "cls", 3},
    {Opcode::Mov, "mov", 1},        {Opcode::Dec, "dec", 2},       {Opcode::Jne, "jne", 0},
    {Opcode::Mul, "mul", 2},        {Opcode::Halt, "halt", 0},
};

const OpInfo* info_of(Opcode op) {
  for (const auto& i : kOps)
    if (i.op == op) return &i;
  return nullptr;
}

bool uses_pool(Opcode op) { return op == Opcode::Mov || op == Opcode::Jne; }

}  // namespace

std::string mnemonic(Opcode op) {
  const OpInfo* i = info_of(op);
  return i ? i->name : "?";
}

std::optional<Opcode> opcode_from_mnemonic(const std::string& s) {
  for (const auto& i : kOps)
    if (s == i.name) return i.op;
  return std::nullopt;
}

int register_count(Opcode op) {
  const OpInfo* i = info_of(op);
  require(i != nullptr, ErrorKind::Internal, "unknown opcode");
  return i->regs;
}

std::uint32_t encode(const Instruction& i) {
  int n = register_count(i.op);
  std::uint32_t w = static_cast<std::uint32_t>(i.op) << 20;
  for (int k = 0; k < 4; ++k) {
    require(i.r[k] < 16, ErrorKind::Bounds, "register index out of range");
    require(k < n || i.r[k] == 0, ErrorKind::Internal, mnemonic(i.op) + ": unused register field set");
  }
  if (uses_pool(i.op)) return w | (static_cast<std::uint32_t>(i.r[0]) << 16) | i.pool;
  require(i.pool == 0, ErrorKind::Internal, mnemonic(i.op) + ": carries no pool index");
  for (int k = 0; k < n; ++k) w |= static_cast<std::uint32_t>(i.r[k]) << (16 - 4 * k);
  return w;
}

Instruction decode(std::uint32_t word) {
  auto bad = [&](const std::string& why) { fail(ErrorKind::Data, fmt::format("cannot decode 0x{:06x}: {}", word, why)); };
  if (word >> 24) bad("wider than 24 bits");
  auto nib = static_cast<std::uint8_t>(word >> 20);
  const OpInfo* oi = nullptr;
  for (const auto& o : kOps)
    if (static_cast<std::uint8_t>(o.op) == nib) oi = &o;
  if (!oi) bad(fmt::format("unknown opcode nibble {:x}", nib));
  Instruction i;
  i.op = oi->op;
  if (uses_pool(i.op)) {
    i.r[0] = static_cast<std::uint8_t>((word >> 16) & 0xF);
    i.pool = static_cast<std::uint16_t>(word & 0xFFFF);
    if (i.op == Opcode::Jne && i.r[0] != 0) bad("jne has no register field");
    return i;
  }
  for (int k = 0; k < 4; ++k) {
    auto v = static_cast<std::uint8_t>((word >> (16 - 4 * k)) & 0xF);
    if (k < oi->regs) i.r[k] = v;
    else if (v != 0) bad("nonzero unused field");
  }
  if (word & 0xF) bad("nonzero unused field");
  return i;
}

// ---------------------------------------------------------------- assembler

namespace {

struct Token {
  std::string text;
  std::size_t col;  // 1-based
};

[[noreturn]] void syntax(std::size_t line, std::size_t col, const std::string& msg) {
  fail(ErrorKind::Syntax, fmt::format("line {}, column {}: {}", line, col, msg));
}

std::string trim_copy(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_ident(const std::string& s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  return true;
}

std::optional<std::uint32_t> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (s.find('.') != std::string::npos) {
    try {
      std::size_t used = 0;
      float f = std::stof(s, &used);
      if (used != s.size()) return std::nullopt;
      return std::bit_cast<std::uint32_t>(f);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  bool neg = s[0] == '-';
  std::string body = neg ? s.substr(1) : s;
  int base = 10;
  if (body.size() > 2 && body[0] == '0' && (body[1] == 'x' || body[1] == 'X')) base = 16, body = body.substr(2);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(body.data(), body.data() + body.size(), v, base);
  if (ec != std::errc{} || p != body.data() + body.size() || body.empty()) return std::nullopt;
  if (neg ? v > 0x80000000ull : v > 0xFFFFFFFFull) return std::nullopt;
  return static_cast<std::uint32_t>(neg ? (~v + 1) : v);
}

std::optional<std::uint8_t> parse_register(const std::string& s) {
  if (s.size() < 2 || (s[0] != 'r' && s[0] != 'R')) return std::nullopt;
  int v = 0;
  auto [p, ec] = std::from_chars(s.data() + 1, s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || v < 0 || v > 15) return std::nullopt;
  return static_cast<std::uint8_t>(v);
}

struct Line {
  std::size_t number = 0;
  std::string mnem;
  std::size_t mnem_col = 0;
  std::vector<Token> operands;
};

std::optional<std::string> label_name(const std::string& s) {
  if (s.size() >= 3 && s.front() == '<' && s.back() == '>') {
    std::string n = s.substr(1, s.size() - 2);
    if (is_ident(n)) return n;
  }
  return std::nullopt;
}

}  // namespace

Program assemble(const std::string& text) {
  Program prog;
  std::vector<Line> lines;
  std::map<std::string, std::size_t> label_line;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;

  // Pass 1: directives, labels, instruction skeletons.
  while (std::getline(in, raw)) {
    ++lineno;
    std::string s = raw;
    auto cut = s.find_first_of(";#");
    if (cut != std::string::npos) s = s.substr(0, cut);
    std::size_t lead = s.find_first_not_of(" \t\r");
    if (lead == std::string::npos) continue;
    std::size_t col = lead + 1;
    s = trim_copy(s);
    if (s.front() == '[') {
      if (s.back() != ']') syntax(lineno, col, "unterminated placeholder");
      continue;
    }
    if (s.front() == '<') {
      auto close = s.find('>');
      if (close == std::string::npos) syntax(lineno, col, "unterminated label");
      auto name = label_name(s.substr(0, close + 1));
      if (!name) syntax(lineno, col, "malformed label");
      if (prog.labels.count(*name))
        syntax(lineno, col, fmt::format("duplicate label <{}> (first on line {})", *name, label_line[*name]));
      prog.labels[*name] = lines.size();
      label_line[*name] = lineno;
      std::string rest = s.substr(close + 1);
      auto r = rest.find_first_not_of(" \t");
      if (r == std::string::npos) continue;
      col += close + 1 + r;
      s = trim_copy(rest);
    }
    auto sp = s.find_first_of(" \t");
    std::string head = s.substr(0, sp);
    std::string rest = sp == std::string::npos ? "" : s.substr(sp);
    std::size_t rest_col = col + (sp == std::string::npos ? s.size() : sp);

    if (head == ".set") {
      std::istringstream ds(rest);
      std::string name, value, extra;
      ds >> name >> value;
      if (name.empty() || value.empty()) syntax(lineno, rest_col, ".set needs a name and a value");
      if (ds >> extra) syntax(lineno, rest_col, "trailing text after .set value");
      if (!is_ident(name)) syntax(lineno, rest_col, "bad constant name '" + name + "'");
      if (prog.constants.count(name)) syntax(lineno, rest_col, "duplicate constant '" + name + "'");
      if (parse_register(name)) syntax(lineno, rest_col, "constant name shadows a register");
      auto v = parse_number(value);
      if (!v) syntax(lineno, rest_col + rest.find(value), "bad number '" + value + "'");
      prog.constants[name] = *v;
      continue;
    }
    if (head.front() == '.') syntax(lineno, col, "unknown directive " + head);

    Line l;
    l.number = lineno;
    l.mnem = head;
    l.mnem_col = col;
    std::size_t pos = 0;
    std::string ops = rest;
    while (pos < ops.size()) {
      auto comma = ops.find(',', pos);
      std::string piece = ops.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      auto b = piece.find_first_not_of(" \t");
      if (b == std::string::npos) {
        if (comma == std::string::npos && l.operands.empty()) break;
        syntax(lineno, rest_col + pos, "empty operand");
      }
      l.operands.push_back({trim_copy(piece), rest_col + pos + b});
      if (comma == std::string::npos) break;
      pos = comma + 1;
      if (pos >= ops.size()) syntax(lineno, rest_col + comma, "empty operand");
    }
    lines.push_back(std::move(l));
  }

  // Pass 2: encode with labels and constants resolved.
  std::map<std::uint32_t, std::uint16_t> interned;
  auto intern = [&](std::uint32_t v, std::size_t line, std::size_t col) {
    auto it = interned.find(v);
    if (it != interned.end()) return it->second;
    if (prog.pool.size() >= 0x10000) syntax(line, col, "immediate pool overflow");
    auto idx = static_cast<std::uint16_t>(prog.pool.size());
    prog.pool.push_back(v);
    interned[v] = idx;
    return idx;
  };
  auto reg = [&](const Line& l, const Token& t) {
    auto r = parse_register(t.text);
    if (!r) {
      if (parse_number(t.text) || prog.constants.count(t.text))
        syntax(l.number, t.col, l.mnem + " takes register operands only; load immediates with mov");
      syntax(l.number, t.col, "expected a register r0..r15, got '" + t.text + "'");
    }
    return *r;
  };
  auto label_value = [&](const Line& l, const Token& t) -> std::uint32_t {
    auto n = label_name(t.text);
    if (!n) syntax(l.number, t.col, "expected a label <name>, got '" + t.text + "'");
    auto it = prog.labels.find(*n);
    if (it == prog.labels.end()) syntax(l.number, t.col, "undefined label <" + *n + ">");
    return static_cast<std::uint32_t>(it->second);
  };

  for (const Line& l : lines) {
    auto op = opcode_from_mnemonic(l.mnem);
    if (!op) syntax(l.number, l.mnem_col, "unknown mnemonic '" + l.mnem + "'");
    Instruction ins;
    ins.op = *op;
    const auto& o = l.operands;
    auto arity = [&](std::size_t lo, std::size_t hi) {
      if (o.size() < lo || o.size() > hi)
        syntax(l.number, l.mnem_col,
               fmt::format("{} takes {} operand{}, got {}", l.mnem, lo == hi ? std::to_string(lo) : fmt::format("{}-{}", lo, hi),
                           hi == 1 ? "" : "s", o.size()));
    };
    switch (*op) {
      case Opcode::Mov: {
        arity(2, 2);
        ins.r[0] = reg(l, o[0]);
        std::uint32_t v;
        if (auto c = prog.constants.find(o[1].text); c != prog.constants.end()) v = c->second;
        else if (auto n = parse_number(o[1].text)) v = *n;
        else if (label_name(o[1].text)) v = label_value(l, o[1]);
        else syntax(l.number, o[1].col, "undefined constant '" + o[1].text + "'");
        ins.pool = intern(v, l.number, o[1].col);
        break;
      }
      case Opcode::Jne:
        arity(1, 1);
        ins.pool = intern(label_value(l, o[0]), l.number, o[0].col);
        break;
      case Opcode::Mul: {
        arity(2, 2);
        ins.r[0] = reg(l, o[0]);
        const auto& t = o[1].text;
        if (t.size() < 4 || t.front() != '(' || t.back() != ')')
          syntax(l.number, o[1].col, "mul expects a register-indirect operand (rX)");
        ins.r[1] = reg(l, {trim_copy(t.substr(1, t.size() - 2)), o[1].col + 1});
        break;
      }
      case Opcode::Dec:
        arity(1, 2);
        ins.r[0] = reg(l, o[0]);
        if (o.size() == 2) {
          ins.r[1] = reg(l, o[1]);
          if (ins.r[1] == 0) syntax(l.number, o[1].col, "r0 cannot be a dec step register");
        }
        break;
      default: {
        auto n = static_cast<std::size_t>(register_count(*op));
        arity(n, n);
        for (std::size_t k = 0; k < n; ++k) {
          if (o[k].text.front() == '(') syntax(l.number, o[k].col, "register-indirect operands are only valid for mul");
          ins.r[k] = reg(l, o[k]);
        }
      }
    }
    prog.code.push_back(ins);
  }
  return prog;
}

// ---------------------------------------------------------------- disassembler

namespace {

std::string constant_name(const Program* p, std::uint16_t idx) {
  if (p && idx < p->pool.size())
    for (const auto& [name, v] : p->constants)
      if (v == p->pool[idx]) return name;
  return fmt::format("k{}", idx);
}

std::string label_for(std::uint32_t target) { return fmt::format("L{}", target); }

}  // namespace

std::string format_instruction(const Instruction& i, const Program* p) {
  std::string s = mnemonic(i.op);
  switch (i.op) {
    case Opcode::Mov: return fmt::format("{} r{}, {}", s, i.r[0], constant_name(p, i.pool));
    case Opcode::Jne:
      if (p && i.pool < p->pool.size()) return fmt::format("{} <{}>", s, label_for(p->pool[i.pool]));
      return fmt::format("{} <pool{}>", s, i.pool);
    case Opcode::Mul: return fmt::format("{} r{}, (r{})", s, i.r[0], i.r[1]);
    case Opcode::Dec: return i.r[1] ? fmt::format("{} r{}, r{}", s, i.r[0], i.r[1]) : fmt::format("{} r{}", s, i.r[0]);
    default: break;
  }
  int n = register_count(i.op);
  for (int k = 0; k < n; ++k) s += fmt::format("{}r{}", k ? ", " : " ", i.r[k]);
  return s;
}

std::string disassemble(const Program& p) {
  validate(p);
  std::set<std::uint32_t> targets;
  std::set<std::uint16_t> movs;
  for (const auto& i : p.code) {
    if (i.op == Opcode::Jne) targets.insert(p.pool[i.pool]);
    if (i.op == Opcode::Mov) movs.insert(i.pool);
  }
  std::string out;
  std::set<std::string> emitted;
  for (auto idx : movs) {
    std::string name = constant_name(&p, idx);
    if (emitted.insert(name).second) out += fmt::format(".set {} 0x{:08x}\n", name, p.pool[idx]);
  }
  for (std::size_t k = 0; k < p.code.size(); ++k) {
    if (targets.count(static_cast<std::uint32_t>(k))) out += "<" + label_for(static_cast<std::uint32_t>(k)) + ">\n";
    out += format_instruction(p.code[k], &p) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------- binary form

std::vector<std::uint8_t> to_binary(const Program& p) {
  binio::Writer w;
  w.magic("PTPR");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(p.code.size()));
  for (const auto& i : p.code) {
    std::uint32_t word = encode(i);
    w.u8(static_cast<std::uint8_t>(word >> 16));
    w.u8(static_cast<std::uint8_t>(word >> 8));
    w.u8(static_cast<std::uint8_t>(word));
  }
  w.u32(static_cast<std::uint32_t>(p.pool.size()));
  for (auto v : p.pool) w.u32(v);
  return std::move(w.data());
}

Program from_binary(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes, "program");
  r.expect_magic("PTPR");
  auto version = r.u16();
  require(version == 1, ErrorKind::Data, "program: unsupported version " + std::to_string(version));
  Program p;
  auto n = r.u32();
  require(static_cast<std::uint64_t>(n) * 3 <= r.remaining(), ErrorKind::Data, "program: truncated");
  for (std::uint32_t k = 0; k < n; ++k) {
    std::uint32_t a = r.u8(), b = r.u8(), c = r.u8();
    p.code.push_back(decode(a << 16 | b << 8 | c));
  }
  auto m = r.u32();
  require(static_cast<std::uint64_t>(m) * 4 <= r.remaining(), ErrorKind::Data, "program: truncated pool");
  for (std::uint32_t k = 0; k < m; ++k) p.pool.push_back(r.u32());
  r.expect_end();
  validate(p);
  return p;
}

void save_program(const Program& p, const std::filesystem::path& path) { binio::write_file(path, to_binary(p)); }

Program load_program(const std::filesystem::path& path) {
  try {
    return from_binary(binio::read_file(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Data) fail(ErrorKind::Data, path.string() + ": " + e.what());
    throw;
  }
}

// ---------------------------------------------------------------- static checks

std::vector<std::uint8_t> registers_read(const Instruction& i) {
  switch (i.op) {
    case Opcode::Mov:
    case Opcode::Halt: return {};
    case Opcode::Jne: return {kFlagRegister};
    case Opcode::Dec: return i.r[1] ? std::vector<std::uint8_t>{i.r[0], i.r[1]} : std::vector<std::uint8_t>{i.r[0]};
    case Opcode::Mul: return {i.r[0], i.r[1]};
    case Opcode::Findneuron:
    case Opcode::Cls: return {i.r[0], i.r[1]};
    case Opcode::Findrf: return {i.r[0]};
    default: break;
  }
  int n = register_count(i.op);
  return {i.r.begin(), i.r.begin() + n};
}

std::vector<std::uint8_t> registers_written(const Instruction& i) {
  switch (i.op) {
    case Opcode::Mov: return {i.r[0]};
    case Opcode::Dec:
    case Opcode::Mul: return {i.r[0], kFlagRegister};
    case Opcode::Findneuron:
    case Opcode::Cls: return {i.r[2]};
    case Opcode::Findrf: return {i.r[1]};
    default: return {};
  }
}

void validate(const Program& p) {
  for (std::size_t k = 0; k < p.code.size(); ++k) {
    const auto& i = p.code[k];
    if (!uses_pool(i.op)) continue;
    require(i.pool < p.pool.size(), ErrorKind::Data,
            fmt::format("instruction {}: pool index {} out of range ({} entries)", k, i.pool, p.pool.size()));
    if (i.op == Opcode::Jne)
      require(p.pool[i.pool] < p.code.size(), ErrorKind::Data,
              fmt::format("instruction {}: jump target {} outside the program", k, p.pool[i.pool]));
  }
}

std::vector<std::string> check_registers_defined(const Program& p) {
  validate(p);
  const std::size_t n = p.code.size();
  std::vector<std::uint16_t> in(n, 0xFFFF);
  std::vector<bool> reached(n, false);
  if (n) in[0] = 0, reached[0] = true;
  auto successors = [&](std::size_t k) {
    std::vector<std::size_t> s;
    const auto& i = p.code[k];
    if (i.op == Opcode::Halt) return s;
    if (k + 1 < n) s.push_back(k + 1);
    if (i.op == Opcode::Jne) s.push_back(p.pool[i.pool]);
    return s;
  };
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t k = 0; k < n; ++k) {
      if (!reached[k]) continue;
      std::uint16_t out = in[k];
      for (auto r : registers_written(p.code[k])) out |= static_cast<std::uint16_t>(1u << r);
      for (auto s : successors(k)) {
        std::uint16_t meet = reached[s] ? static_cast<std::uint16_t>(in[s] & out) : out;
        if (!reached[s] || meet != in[s]) in[s] = meet, reached[s] = true, changed = true;
      }
    }
  }
  std::vector<std::string> problems;
  for (std::size_t k = 0; k < n; ++k) {
    if (!reached[k]) continue;
    for (auto r : registers_read(p.code[k]))
      if (!(in[k] >> r & 1))
        problems.push_back(fmt::format("instruction {} ({}): r{} may be read before it is written", k,
                                       format_instruction(p.code[k], &p), r));
  }
  return problems;
}

}  // namespace canary::isa
