#pragma once

#include <stdexcept>
#include <string>

namespace nrt {

/// Error type thrown by every module for contract violations
/// (bad inputs, degenerate configurations, malformed files).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace nrt
