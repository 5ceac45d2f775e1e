#pragma once

#include <stdexcept>

namespace lrmf {

// Raised when a binary container fails validation: wrong magic, unsupported
// version, or a size that disagrees with the header.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lrmf
