#pragma once

#include <stdexcept>
#include <string>

namespace femloc {

/// Invalid configuration: dimension mismatches, bad hyperparameters, bad config keys.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or unusable input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Broken internal contract, e.g. a forward cache reused with the wrong network.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace femloc
