#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace gradsigns {

// All library failures derive from Error. `kind` is a short stable token
// (e.g. "shape", "checksum") that the CLI reports in machine-readable form.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

inline Error shape_error(const std::string& what) { return Error("shape", what); }
inline Error value_error(const std::string& what) { return Error("value", what); }

}  // namespace gradsigns
