#pragma once

#include <stdexcept>
#include <string>

namespace lcat {

// Error categories. The CLI prints the code name as a machine-parseable
// prefix ("E_CONFIG: ...") and exits nonzero.
enum class Err {
  Config,   // invalid configuration, preset, or flag
  Shape,    // tensor shape / dimension mismatch
  Format,   // malformed file (bad magic, truncation, out-of-range field)
  Io,       // filesystem failure
  State,    // invalid runtime state (lock held, existing output, incomplete log)
  Numeric,  // NaN/Inf encountered where finite values are required
};

inline const char* err_name(Err code) {
  switch (code) {
    case Err::Config: return "E_CONFIG";
    case Err::Shape: return "E_SHAPE";
    case Err::Format: return "E_FORMAT";
    case Err::Io: return "E_IO";
    case Err::State: return "E_STATE";
    case Err::Numeric: return "E_NUMERIC";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Err code() const { return code_; }
  const char* code_name() const { return err_name(code_); }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace lcat
