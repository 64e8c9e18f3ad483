#include "fewloc/common/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace fewloc {

namespace {
std::mutex g_mutex;
WarningSink g_sink;
std::atomic<std::size_t> g_count{0};
}  // namespace

void warn(std::string_view message) {
  g_count.fetch_add(1);
  std::lock_guard lock(g_mutex);
  if (g_sink) {
    g_sink(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

WarningSink set_warning_sink(WarningSink sink) {
  std::lock_guard lock(g_mutex);
  std::swap(g_sink, sink);
  return sink;
}

std::size_t warning_count() { return g_count.load(); }

}  // namespace fewloc
