#pragma once

#include <stdexcept>

namespace deltami {

// Invalid input: malformed files, bad configuration, violated preconditions.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A numerical routine failed: non-convergence, separation, singular information.
struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace deltami
