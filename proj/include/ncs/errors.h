#pragma once

#include <stdexcept>
#include <string>

namespace ncs {

// Error categories map onto CLI exit codes (see tools/ncs.cpp).
enum class ErrorKind { Generic = 1, Config = 2, Topology = 3, Numeric = 4 };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class TopologyError : public Error {
public:
  explicit TopologyError(const std::string& what) : Error(ErrorKind::Topology, what) {}
};

class NumericError : public Error {
public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class IoError : public Error {
public:
  explicit IoError(const std::string& what) : Error(ErrorKind::Generic, what) {}
};

} // namespace ncs
