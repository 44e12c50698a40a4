#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace canary::isa {

enum class Opcode : std::uint8_t {
  Inf = 0x0,
  Infsp = 0x1,
  Csps = 0x2,
  Sort = 0x3,
  Acum = 0x4,
  Genmasks = 0x5,
  Findneuron = 0x6,
  Findrf = 0x7,
  Cls = 0x8,
  Mov = 0x9,
  Dec = 0xA,
  Jne = 0xB,
  Mul = 0xC,
  Halt = 0xF,
};

inline constexpr std::array<Opcode, 14> kAllOpcodes{Opcode::Inf,        Opcode::Infsp,  Opcode::Csps, Opcode::Sort,
                                                    Opcode::Acum,       Opcode::Genmasks, Opcode::Findneuron,
                                                    Opcode::Findrf,     Opcode::Cls,    Opcode::Mov,  Opcode::Dec,
                                                    Opcode::Jne,        Opcode::Mul,    Opcode::Halt};

/// Register r15 holds the flag written by dec and mul and tested by jne.
inline constexpr std::uint8_t kFlagRegister = 15;

std::string mnemonic(Opcode op);
std::optional<Opcode> opcode_from_mnemonic(const std::string& s);
/// Number of register fields an opcode uses (mov and jne also carry a pool index).
int register_count(Opcode op);

/// One instruction. `r` holds the register fields in bits 19-16, 15-12, 11-8
/// and 7-4; unused fields are zero. mov and jne carry a 16-bit immediate-pool
/// index in bits 15-0 instead of the last three fields.
struct Instruction {
  Opcode op = Opcode::Halt;
  std::array<std::uint8_t, 4> r{0, 0, 0, 0};
  std::uint16_t pool = 0;
  bool operator==(const Instruction&) const = default;
};

std::uint32_t encode(const Instruction& i);
/// Throws a data error naming the word for an unknown opcode nibble or
/// nonzero bits in unused fields.
Instruction decode(std::uint32_t word);

struct Program {
  std::vector<Instruction> code;
  std::vector<std::uint32_t> pool;
  /// Assembly-level names; not part of the binary and not compared.
  std::map<std::string, std::uint32_t> constants;
  std::map<std::string, std::size_t> labels;

  bool operator==(const Program& o) const { return code == o.code && pool == o.pool; }
  std::size_t size_bytes() const { return code.size() * 3; }
};

/// Two-pass assembler for the dialect:
///   .set NAME value        constant (decimal, 0x hex, negative, or a real with '.')
///   <name>                 label on the next instruction
///   mnemonic operands      registers r0..r15, (rX) register-indirect for mul,
///                          constants/immediates for mov, <label> for jne
///   [anything]             elided-code placeholder, ignored
///   ; or # comments
/// Errors carry line and column.
Program assemble(const std::string& text);

/// Text that assembles back to the same program.
std::string disassemble(const Program& p);
std::string format_instruction(const Instruction& i, const Program* p = nullptr);

/// `PTPR`, u16 version, u32 count, 3-byte big-endian words, u32 pool length,
/// u32 little-endian pool entries.
std::vector<std::uint8_t> to_binary(const Program& p);
Program from_binary(const std::vector<std::uint8_t>& bytes);
void save_program(const Program& p, const std::filesystem::path& path);
Program load_program(const std::filesystem::path& path);

/// Registers read and written by an instruction (flag writes included).
std::vector<std::uint8_t> registers_read(const Instruction& i);
std::vector<std::uint8_t> registers_written(const Instruction& i);

/// Forward must-define dataflow over the control-flow graph. Returns one
/// message per (instruction, register) read that is not defined on every path.
std::vector<std::string> check_registers_defined(const Program& p);

/// Control-flow validity: pool indices in range, jump targets in range.
void validate(const Program& p);

}  // namespace canary::isa
