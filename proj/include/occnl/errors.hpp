#pragma once

#include <stdexcept>
#include <string>

namespace occnl {

// Grid contents disagree with the label space or declared shape.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A generator spec that cannot be realized (e.g. an object larger than the grid).
class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An operation invoked in the wrong training stage.
class StageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Parameter containers with mismatched shapes.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Configuration problem tied to one key of the config file.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error("config key '" + key + "': " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace occnl
