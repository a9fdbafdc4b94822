#pragma once

#include <stdexcept>

namespace sembed {

// Error taxonomy mirrored by the CLI exit codes: ConfigError -> 1,
// DataError -> 2, TrainError -> 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sembed
