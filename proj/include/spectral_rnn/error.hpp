#pragma once

#include <stdexcept>
#include <string>

namespace srnn {

// Classes of failure, mapped to CLI exit codes by the front-end.
enum class ErrorKind { config, numerical, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, const std::string& what)
      : std::runtime_error(what), kind_(kind), module_(std::move(module)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorKind kind_;
  std::string module_;
};

[[noreturn]] inline void fail(const char* module, const std::string& what,
                              ErrorKind kind = ErrorKind::numerical) {
  throw Error(kind, module, what);
}

inline void require(bool ok, const char* module, const std::string& what,
                    ErrorKind kind = ErrorKind::numerical) {
  if (!ok) fail(module, what, kind);
}

}  // namespace srnn
