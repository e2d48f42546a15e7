#include "cavl/log.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>

namespace cavl {

namespace {

std::ofstream g_file;

LogLevel parse_level() {
  const char* env = std::getenv("CAVL_LOG");
  if (!env) return LogLevel::Info;
  const std::string v(env);
  if (v == "error") return LogLevel::Error;
  if (v == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

const char* level_tag(LogLevel l) {
  switch (l) {
    case LogLevel::Error: return "error";
    case LogLevel::Info: return "info";
    case LogLevel::Debug: return "debug";
  }
  return "info";
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc;
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace

LogLevel log_level() {
  static const LogLevel level = parse_level();
  return level;
}

void log_open_file(const std::string& path) {
  g_file.close();
  g_file.clear();
  g_file.open(path, std::ios::app);
}

void log_close_file() { g_file.close(); }

void log_message(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  std::cerr << "[cavl][" << level_tag(level) << "] " << msg << '\n';
  if (g_file.is_open()) {
    g_file << timestamp() << " [" << level_tag(level) << "] " << msg << '\n';
    g_file.flush();
  }
}

}  // namespace cavl
