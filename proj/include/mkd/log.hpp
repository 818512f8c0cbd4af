#pragma once

#include <spdlog/spdlog.h>

namespace mkd {

/// Process-wide stderr logger. Level comes from MKD_LOG_LEVEL
/// (error|warn|info|debug), default warn.
spdlog::logger& log();

}  // namespace mkd
