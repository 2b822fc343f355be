#include "hm3/error.hpp"

namespace hm3 {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return "validation error";
    case ErrorKind::format: return "format error";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::incompatible: return "incompatibility error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::domain: return "domain error";
    case ErrorKind::provenance: return "provenance error";
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::protocol: return "protocol error";
    case ErrorKind::training: return "training error";
    case ErrorKind::evaluation: return "evaluation error";
    case ErrorKind::assembly: return "assembly error";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

FormatError::FormatError(std::uint64_t offset, const std::string& message)
    : Error(ErrorKind::format, message + " (at byte offset " + std::to_string(offset) + ")"),
      offset_(offset) {}

}  // namespace hm3
