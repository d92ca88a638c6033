#pragma once

#include "trj/transport.hpp"

#include <json.hpp>

#include <filesystem>

namespace trj {

/// Map files are JSON objects {"format": "trj-map", "version": 1, "kind", "n",
/// "params"}. Matrices are flat row-major arrays; reals are written with
/// shortest round-trip decimal representation, so save/load is bit-exact.
nlohmann::json map_to_json(const TransportMap& map);
MapPtr map_from_json(const nlohmann::json& j);

nlohmann::json conditional_map_to_json(const ConditionalMap& map);
ConditionalMapPtr conditional_map_from_json(const nlohmann::json& j);

void save_map(const TransportMap& map, const std::filesystem::path& path);
MapPtr load_map(const std::filesystem::path& path);
void save_conditional_map(const ConditionalMap& map, const std::filesystem::path& path);
ConditionalMapPtr load_conditional_map(const std::filesystem::path& path);

}  // namespace trj
