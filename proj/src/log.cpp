#include "udaliver/log.hpp"

#include <iostream>
#include <mutex>

namespace udaliver {

namespace {

std::mutex g_mutex;

WarningSink& sink() {
  static WarningSink s = [](const std::string& code, const std::string& message) {
    std::cerr << "warning[" << code << "]: " << message << "\n";
  };
  return s;
}

}  // namespace

void warn(const std::string& code, const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (sink()) sink()(code, message);
}

WarningSink set_warning_sink(WarningSink s) {
  std::lock_guard lock(g_mutex);
  std::swap(sink(), s);
  return s;
}

}  // namespace udaliver
