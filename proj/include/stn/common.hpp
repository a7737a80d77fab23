#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace stn {

// Error taxonomy shared by the library and the CLI. The CLI maps kinds to
// process exit codes (config/data -> 2, numeric -> 3).
enum class ErrorKind {
  Shape,     // tensor dimension mismatch
  Config,    // invalid or inconsistent configuration
  Data,      // dataset layout / file problems
  Numeric,   // non-finite values during training
  Contract,  // API misuse (e.g. memory write at test time)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_shape(const std::string& where,
                                    const std::string& axis, long expected,
                                    long got) {
  throw Error(ErrorKind::Shape, where + ": axis '" + axis + "' expected " +
                                    std::to_string(expected) + ", got " +
                                    std::to_string(got));
}

[[noreturn]] inline void fail_config(const std::string& msg) {
  throw Error(ErrorKind::Config, msg);
}

[[noreturn]] inline void fail_data(const std::string& msg) {
  throw Error(ErrorKind::Data, msg);
}

[[noreturn]] inline void fail_contract(const std::string& msg) {
  throw Error(ErrorKind::Contract, msg);
}

}  // namespace stn
