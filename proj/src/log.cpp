#include "milfuse/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <string>
#include <vector>

namespace milfuse::log {

namespace {

Level parse_env() {
  const char* v = std::getenv("MILFUSE_LOG");
  if (!v) return Level::Info;
  std::string s(v);
  if (s == "error") return Level::Error;
  if (s == "warn") return Level::Warn;
  if (s == "info") return Level::Info;
  if (s == "debug") return Level::Debug;
  return Level::Info;
}

Level g_level = parse_env();
std::mutex g_mutex;

const char* tag(Level lv) {
  switch (lv) {
    case Level::Error: return "error";
    case Level::Warn: return "warn";
    case Level::Info: return "info";
    case Level::Debug: return "debug";
  }
  return "?";
}

}  // namespace

Level level() { return g_level; }
void set_level(Level lv) { g_level = lv; }

void vwrite(Level lv, const char* fmt, std::va_list ap) {
  if (lv > level()) return;
  std::va_list ap2;
  va_copy(ap2, ap);
  const int n = std::vsnprintf(nullptr, 0, fmt, ap);
  std::string msg;
  if (n > 0) {
    msg.resize(static_cast<std::size_t>(n));
    std::vsnprintf(msg.data(), msg.size() + 1, fmt, ap2);
  }
  va_end(ap2);
  std::lock_guard<std::mutex> lock(g_mutex);
  std::fprintf(stderr, "[%s] %s\n", tag(lv), msg.c_str());
}

#define MILFUSE_LOG_BODY(lv)      \
  std::va_list ap;                \
  va_start(ap, fmt);              \
  vwrite(lv, fmt, ap);            \
  va_end(ap)

void error(const char* fmt, ...) { MILFUSE_LOG_BODY(Level::Error); }
void warn(const char* fmt, ...) { MILFUSE_LOG_BODY(Level::Warn); }
void info(const char* fmt, ...) { MILFUSE_LOG_BODY(Level::Info); }
void debug(const char* fmt, ...) { MILFUSE_LOG_BODY(Level::Debug); }

#undef MILFUSE_LOG_BODY

}  // namespace milfuse::log
