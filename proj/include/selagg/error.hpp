#pragma once

#include <stdexcept>
#include <string>

namespace selagg {

enum class ErrorKind {
  Shape,      // dimension or length mismatch
  Domain,     // argument outside its valid range
  Numeric,    // NaN/Inf or zero mass where a distribution is required
  Data,       // missing or inconsistent input data
  Truncated,  // SATF payload shorter than the header declares
  BadMagic,   // SATF magic/version/dtype not recognised
  PayloadMismatch,  // SATF payload longer than the header declares
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Data: return "data";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::PayloadMismatch: return "payload-mismatch";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace selagg
