#pragma once

#include <functional>
#include <string>

namespace udaliver {

// Non-fatal diagnostics (degenerate normalisations, sentinel metrics, ...).
// Default sink writes to stderr; tests install their own to observe records.
using WarningSink = std::function<void(const std::string& code, const std::string& message)>;

void warn(const std::string& code, const std::string& message);
WarningSink set_warning_sink(WarningSink sink);

}  // namespace udaliver
