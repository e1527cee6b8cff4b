#pragma once

#include <stdexcept>
#include <string>

namespace cafewidth {

// Every failure the library reports derives from Error. The CLI maps each
// kind to its own exit code.
enum class ErrorKind {
  InvalidGraph,
  InvalidWidth,
  EmptyPlan,
  InfeasibleBudget,
  Training,
  Data,
  Config,
  Checkpoint,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidGraphError : public Error {
 public:
  explicit InvalidGraphError(const std::string& what) : Error(ErrorKind::InvalidGraph, what) {}
};

class InvalidWidthError : public Error {
 public:
  explicit InvalidWidthError(const std::string& what) : Error(ErrorKind::InvalidWidth, what) {}
};

class EmptyPlanError : public Error {
 public:
  explicit EmptyPlanError(const std::string& what) : Error(ErrorKind::EmptyPlan, what) {}
};

class InfeasibleBudgetError : public Error {
 public:
  explicit InfeasibleBudgetError(const std::string& what)
      : Error(ErrorKind::InfeasibleBudget, what) {}
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int layer = -1, long long iteration = -1)
      : Error(ErrorKind::Training, what), layer_(layer), iteration_(iteration) {}
  int layer() const noexcept { return layer_; }
  long long iteration() const noexcept { return iteration_; }

 private:
  int layer_;
  long long iteration_;
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(ErrorKind::Checkpoint, what) {}
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidGraph: return "invalid-graph";
    case ErrorKind::InvalidWidth: return "invalid-width";
    case ErrorKind::EmptyPlan: return "empty-plan";
    case ErrorKind::InfeasibleBudget: return "infeasible-budget";
    case ErrorKind::Training: return "training";
    case ErrorKind::Data: return "data";
    case ErrorKind::Config: return "config";
    case ErrorKind::Checkpoint: return "checkpoint";
  }
  return "unknown";
}

}  // namespace cafewidth
