// SPDX-License-Identifier: Apache-2.0
#include "cobo/util.hpp"

#include <cstdlib>
#include <iostream>

namespace cobo {

namespace {
LogLevel g_level = [] {
    const char* env = std::getenv("COBO_LOG_LEVEL");
    if (!env) return LogLevel::kInfo;
    const std::string s(env);
    if (s == "error") return LogLevel::kError;
    if (s == "debug") return LogLevel::kDebug;
    return LogLevel::kInfo;
}();
}  // namespace

LogLevel log_level() { return g_level; }
void set_log_level(LogLevel lv) { g_level = lv; }

void log_line(LogLevel lv, const std::string& msg) {
    if (lv > g_level) return;
    const char* tag = lv == LogLevel::kError ? "error" : lv == LogLevel::kInfo ? "info" : "debug";
    std::cerr << "[" << tag << "] " << msg << "\n";
}

}  // namespace cobo
