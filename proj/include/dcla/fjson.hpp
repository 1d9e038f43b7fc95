#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace dcla {

// JSON with float32 numbers: serializes every float as its shortest
// round-trip decimal (at most 9 significant digits) with sorted keys.
using fjson = nlohmann::basic_json<std::map, std::vector, std::string, bool, std::int64_t,
                                   std::uint64_t, float>;

} // namespace dcla
