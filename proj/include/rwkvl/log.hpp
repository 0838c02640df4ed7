#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace rwkvl {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from RWKVL_LOG ("error" | "info" | "debug"), default "error".
inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("RWKVL_LOG");
        if (env == nullptr) return LogLevel::kError;
        if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
        if (std::strcmp(env, "info") == 0) return LogLevel::kInfo;
        return LogLevel::kError;
    }();
    return level;
}

template <typename... Args>
void log_at(LogLevel level, const char* fmt, Args... args) {
    if (level > log_level()) return;
    const char* tag = level == LogLevel::kError  ? "error"
                      : level == LogLevel::kInfo ? "info"
                                                 : "debug";
    std::fprintf(stderr, "[rwkvl:%s] ", tag);
    if constexpr (sizeof...(Args) == 0) {
        std::fputs(fmt, stderr);
    } else {
        std::fprintf(stderr, fmt, args...);
    }
    std::fputc('\n', stderr);
}

template <typename... Args>
void log_info(const char* fmt, Args... args) {
    log_at(LogLevel::kInfo, fmt, args...);
}

template <typename... Args>
void log_debug(const char* fmt, Args... args) {
    log_at(LogLevel::kDebug, fmt, args...);
}

template <typename... Args>
void log_error(const char* fmt, Args... args) {
    log_at(LogLevel::kError, fmt, args...);
}

}  // namespace rwkvl
