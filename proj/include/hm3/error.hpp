#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hm3 {

enum class ErrorKind {
  validation,
  format,
  io,
  incompatible,
  numeric,
  domain,
  provenance,
  configuration,
  protocol,
  training,
  evaluation,
  assembly,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; `kind()` distinguishes the failure
// class so callers (and the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 protected:
  struct Verbatim {};
  Error(ErrorKind kind, const std::string& full_message, Verbatim)
      : std::runtime_error(full_message), kind_(kind) {}

 private:
  ErrorKind kind_;
};

class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& message);

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace hm3
