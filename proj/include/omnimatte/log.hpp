#pragma once

#include <functional>
#include <string_view>

namespace omni {

// Notices go to stderr unless a sink is installed (tests capture them).
using LogSink = std::function<void(std::string_view)>;
void set_log_sink(LogSink sink);
void log_notice(std::string_view message);

} // namespace omni
