#include <atomic>
#include <iostream>
#include <mutex>
#include <sstream>

#include "tempo/core/log.hpp"
#include "tempo/core/rng.hpp"
#include "tempo/core/tensor.hpp"

namespace tempo {

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw ConfigError("invalid rng state string");
}

}  // namespace tempo

namespace tempo {

namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::Info)};
std::mutex g_log_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }
LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }

void log(LogLevel level, std::string_view message) {
  if (static_cast<int>(level) < g_level.load()) return;
  static constexpr const char* kNames[] = {"debug", "info", "warning", "error"};
  std::lock_guard lock(g_log_mutex);
  std::cerr << "[" << kNames[static_cast<int>(level)] << "] " << message << "\n";
}

}  // namespace tempo
