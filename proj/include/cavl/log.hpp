#pragma once

#include <string>

namespace cavl {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

/// Level comes from CAVL_LOG (error|info|debug), default info.
LogLevel log_level();

/// Optional timestamped sink; stderr output stays timestamp-free so that
/// captured streams remain reproducible.
void log_open_file(const std::string& path);
void log_close_file();

void log_message(LogLevel level, const std::string& msg);

inline void log_error(const std::string& msg) { log_message(LogLevel::Error, msg); }
inline void log_info(const std::string& msg) { log_message(LogLevel::Info, msg); }
inline void log_debug(const std::string& msg) { log_message(LogLevel::Debug, msg); }

}  // namespace cavl
