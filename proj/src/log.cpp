#include "mkd/log.hpp"

#include <cstdlib>
#include <string_view>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace mkd {

namespace {

spdlog::level::level_enum level_from_env() {
  const char* raw = std::getenv("MKD_LOG_LEVEL");
  if (raw == nullptr) return spdlog::level::warn;
  std::string_view v(raw);
  if (v == "error") return spdlog::level::err;
  if (v == "info") return spdlog::level::info;
  if (v == "debug") return spdlog::level::debug;
  return spdlog::level::warn;
}

}  // namespace

spdlog::logger& log() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto logger = spdlog::stderr_color_mt("mkd");
    logger->set_level(level_from_env());
    logger->set_pattern("[%l] %v");
    return logger;
  }();
  return *instance;
}

}  // namespace mkd
