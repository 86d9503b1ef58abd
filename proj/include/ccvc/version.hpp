#pragma once

namespace ccvc {
inline constexpr const char* kVersion = "1.0.0";
}
