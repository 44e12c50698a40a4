#pragma once

#include <stdexcept>
#include <string>

namespace canary {

/// Broad failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  Config,     // bad configuration, usage, unsupported combination
  Data,       // malformed or inconsistent input data / files
  Shape,      // tensor or bitmask shape mismatch
  Bounds,     // index out of range
  Syntax,     // assembler input
  Fault,      // simulated machine fault
  Internal,   // invariant violation
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace canary
