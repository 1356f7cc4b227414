#pragma once

#include <stdexcept>
#include <string>

namespace udaliver {

// Tensor or array shapes that do not fit the operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Values outside an operation's domain (probabilities outside [0,1], etc).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inconsistent or unsupported configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// A loss evaluated to NaN or Inf during training.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& term, const std::string& what)
      : std::runtime_error(term + ": " + what), term_(term) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace udaliver
