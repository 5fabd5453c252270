#pragma once

#include <memory>

#include <spdlog/logger.h>

namespace kgalign {

// Library-wide logger, stderr by default. Tests swap in a ringbuffer sink.
std::shared_ptr<spdlog::logger> logger();
void set_logger(std::shared_ptr<spdlog::logger> replacement);

}  // namespace kgalign
