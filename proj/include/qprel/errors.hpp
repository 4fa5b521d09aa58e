#pragma once

#include <stdexcept>
#include <string>

namespace qprel {

/// Invalid configuration values (sizes, rates, mismatched model shapes).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Data references something the world does not define.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or vector dimensions disagree.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage input is absent on disk.
class MissingArtifactError : public std::runtime_error {
 public:
  MissingArtifactError(std::string artifact, const std::string& what)
      : std::runtime_error(what), artifact_(std::move(artifact)) {}
  const std::string& artifact() const noexcept { return artifact_; }

 private:
  std::string artifact_;
};

}  // namespace qprel
