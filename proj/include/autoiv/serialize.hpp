#pragma once

#include <filesystem>

#include <json.hpp>

#include "autoiv/graph.hpp"

namespace autoiv {

/// Shape manifest for a store: [{"name", "rows", "cols", "offset"}], offsets
/// counted in doubles into the blob written by write_parameter_blob.
nlohmann::json parameter_manifest(const ParameterStore& store);

/// All parameter values, concatenated in store order, as little-endian float64.
void write_parameter_blob(const ParameterStore& store, const std::filesystem::path& path);

/// Rebuild a store from a manifest and its blob. Throws IoError on a
/// truncated or mismatched blob.
ParameterStore read_parameters(const nlohmann::json& manifest, const std::filesystem::path& blob);

}  // namespace autoiv
