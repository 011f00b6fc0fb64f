#include "omnimatte/log.hpp"

#include <iostream>
#include <mutex>

namespace omni {

namespace {
std::mutex g_mu;
LogSink g_sink;
} // namespace

void set_log_sink(LogSink sink) {
    std::lock_guard lock(g_mu);
    g_sink = std::move(sink);
}

void log_notice(std::string_view message) {
    std::lock_guard lock(g_mu);
    if (g_sink) g_sink(message);
    else std::cerr << "note: " << message << "\n";
}

} // namespace omni
