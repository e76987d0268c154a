#pragma once

#include <functional>
#include <string>

namespace agfn {

using WarningSink = std::function<void(const std::string&)>;

/// Replaces the warning sink (stderr by default). Returns the previous one.
WarningSink set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace agfn
