#pragma once

namespace stn {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace stn
