#pragma once

#include <stdexcept>

namespace pudet {

class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Caller broke an operation's precondition.
class UsageError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Invalid configuration (bad prior, unknown key, unknown loss kind, ...).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed or out-of-range input data.
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during optimization.
class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace pudet
