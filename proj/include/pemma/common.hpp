// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pemma {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor/layer dimension mismatches.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// API misuse (backward on a non-scalar, missing gradient on a trainable param).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values (unknown group tag, w_c outside [0,1], ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operations applied in an invalid object state (double LoRA injection, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

/// On-disk format violations (bad magic, truncated payload, version skew).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad data values (labels outside the class set, NaN/Inf in a forward pass).
class DataError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, T&& v, Rest&&... rest) {
  os << std::forward<T>(v);
  format_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  detail::format_into(os, std::forward<Args>(args)...);
  return os.str();
}

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

/// Current level, read once from the PEMMA_LOG env var (error|info|debug).
LogLevel log_level();
void log_line(LogLevel level, const std::string& msg);

template <typename... Args>
void log_info(Args&&... args) {
  if (log_level() >= LogLevel::kInfo) log_line(LogLevel::kInfo, format_msg(std::forward<Args>(args)...));
}

template <typename... Args>
void log_debug(Args&&... args) {
  if (log_level() >= LogLevel::kDebug) log_line(LogLevel::kDebug, format_msg(std::forward<Args>(args)...));
}

template <typename... Args>
void log_error(Args&&... args) {
  log_line(LogLevel::kError, format_msg(std::forward<Args>(args)...));
}

/// FNV-1a over arbitrary bytes; used for seed derivation and weight hashing.
uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace pemma
