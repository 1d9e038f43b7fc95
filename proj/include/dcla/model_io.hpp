#pragma once

#include <filesystem>
#include <string>

#include "dcla/model.hpp"

namespace dcla {

// Model file layout:
//   line 1: UTF-8 JSON header {"format", "spec", "tensors": [{"name","shape","offset"}]}
//           terminated by '\n'
//   rest:   raw little-endian float32 blob; offsets are bytes from the end of line 1
//
// The loader checks every manifest entry against the shapes implied by the spec
// and rejects truncated blobs, overlapping or out-of-range offsets, and
// non-finite values.

inline constexpr const char* kModelFormat = "dcla-model/1";

std::string serialize_model(const Model& model);
Model deserialize_model(const std::string& bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

} // namespace dcla
