#pragma once

#include <stdexcept>
#include <string>

namespace posekey {

// Every error carries a short machine-parsable category, used by the CLI
// for its one-line failure report.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct ArgumentError : Error {
  explicit ArgumentError(const std::string& w) : Error("argument", w) {}
};
struct DegeneratePoseError : Error {
  explicit DegeneratePoseError(const std::string& w) : Error("degenerate-pose", w) {}
};
struct GenerationError : Error {
  explicit GenerationError(const std::string& w) : Error("generation", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};
struct LoadError : Error {
  explicit LoadError(const std::string& w) : Error("load", w) {}
};
struct DetectorError : Error {
  DetectorError(const std::string& w, std::string raw_line)
      : Error("detector", w), raw_line_(std::move(raw_line)) {}
  const std::string& raw_line() const noexcept { return raw_line_; }

 private:
  std::string raw_line_;
};
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& w) : Error("divergence", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};

}  // namespace posekey
