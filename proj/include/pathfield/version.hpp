// pathfield: toolkit version constant used in run manifests.
#pragma once

namespace pathfield {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pathfield
