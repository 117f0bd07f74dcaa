// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/common.hpp"

#include <cstdlib>
#include <cstring>
#include <iostream>
#include <mutex>

namespace pemma {

LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("PEMMA_LOG");
    if (env == nullptr) return LogLevel::kError;
    if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
    if (std::strcmp(env, "info") == 0) return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

void log_line(LogLevel level, const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  const char* tag = level == LogLevel::kError ? "error" : (level == LogLevel::kInfo ? "info" : "debug");
  std::cerr << "[pemma:" << tag << "] " << msg << "\n";
}

uint64_t fnv1a(const void* data, size_t len, uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a(std::string_view s, uint64_t seed) { return fnv1a(s.data(), s.size(), seed); }

}  // namespace pemma
