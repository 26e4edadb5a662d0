#include "ccrs/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace ccrs::log {

namespace {

std::atomic<Level> g_level{Level::info};
std::mutex g_mutex;

void emit(Level lvl, const char* tag, const std::string& msg) {
  if (lvl < g_level.load()) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::clog << '[' << tag << "] " << msg << '\n';
}

}  // namespace

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

void debug(const std::string& msg) { emit(Level::debug, "debug", msg); }
void info(const std::string& msg) { emit(Level::info, "info", msg); }
void warn(const std::string& msg) { emit(Level::warn, "warn", msg); }
void error(const std::string& msg) { emit(Level::error, "error", msg); }

}  // namespace ccrs::log
