#pragma once

#include <cstddef>
#include <functional>
#include <string_view>

namespace fewloc {

using WarningSink = std::function<void(std::string_view)>;

/// Reports a recoverable condition. Goes to stderr unless a sink is installed.
void warn(std::string_view message);

/// Installs a sink and returns the previous one. Pass an empty function to
/// restore stderr output.
WarningSink set_warning_sink(WarningSink sink);

/// Number of warnings emitted since process start.
std::size_t warning_count();

}  // namespace fewloc
