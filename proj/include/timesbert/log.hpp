#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace timesbert {

// Shared stderr logger; level from TIMESBERT_LOG (error|info|debug, default info).
inline spdlog::logger& log() {
    static std::shared_ptr<spdlog::logger> logger = [] {
        auto l = spdlog::get("timesbert");
        if (!l) l = spdlog::stderr_color_mt("timesbert");
        l->set_pattern("[%l] %v");
        const char* env = std::getenv("TIMESBERT_LOG");
        const std::string level = env ? env : "info";
        if (level == "error") {
            l->set_level(spdlog::level::err);
        } else if (level == "debug") {
            l->set_level(spdlog::level::debug);
        } else {
            l->set_level(spdlog::level::info);
        }
        return l;
    }();
    return *logger;
}

}  // namespace timesbert
