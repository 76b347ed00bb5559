#include "memloom/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace memloom::log {

namespace {

Level initial_level()
{
    const char* env = std::getenv("MEMLOOM_LOG");
    if (env == nullptr) {
        return Level::Warn;
    }
    const std::string v(env);
    if (v == "debug") return Level::Debug;
    if (v == "info") return Level::Info;
    if (v == "error") return Level::Error;
    if (v == "off") return Level::Off;
    return Level::Warn;
}

std::atomic<Level>& threshold()
{
    static std::atomic<Level> t { initial_level() };
    return t;
}

std::mutex& sink_mutex()
{
    static std::mutex m;
    return m;
}

} // namespace

void set_level(Level l) noexcept { threshold().store(l); }
Level level() noexcept { return threshold().load(); }

void write(Level l, std::string_view message)
{
    if (l < threshold().load()) {
        return;
    }
    static constexpr const char* names[] = { "debug", "info", "warn", "error" };
    std::lock_guard lock(sink_mutex());
    std::clog << "[memloom " << names[static_cast<int>(l)] << "] " << message << '\n';
}

} // namespace memloom::log
