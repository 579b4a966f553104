#pragma once

#include <cstdarg>

namespace milfuse::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

// Current threshold. Initialized from the MILFUSE_LOG environment variable
// (error|warn|info|debug), defaulting to info.
Level level();
void set_level(Level lv);

void vwrite(Level lv, const char* fmt, std::va_list ap);

#if defined(__GNUC__) || defined(__clang__)
#define MILFUSE_PRINTF(fmt_idx, arg_idx) __attribute__((format(printf, fmt_idx, arg_idx)))
#else
#define MILFUSE_PRINTF(fmt_idx, arg_idx)
#endif

void error(const char* fmt, ...) MILFUSE_PRINTF(1, 2);
void warn(const char* fmt, ...) MILFUSE_PRINTF(1, 2);
void info(const char* fmt, ...) MILFUSE_PRINTF(1, 2);
void debug(const char* fmt, ...) MILFUSE_PRINTF(1, 2);

#undef MILFUSE_PRINTF

}  // namespace milfuse::log
