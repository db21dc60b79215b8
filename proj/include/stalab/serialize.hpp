#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stalab/shift.hpp"

namespace stalab {

using json = nlohmann::ordered_json;

// --- flat binary weight container ------------------------------------------
// header {magic "SALB", version u32}, then per-matrix records
// {name length u32, name bytes, rows u32, cols u32, row-major f64 LE values}.

void save_weights(const std::string& path, const NamedMatrices& weights);
NamedMatrices load_weights(const std::string& path);

// --- JSON reports -----------------------------------------------------------

json to_json(const Matrix& m);
json to_json(const Vector& v);
json to_json(const GaussianSpec& spec);
json to_json(const BoundCheck& check);
json to_json(const ShiftReport& report);

std::uint64_t config_hash(const json& config);

void write_json_file(const std::string& path, const json& j);

} // namespace stalab
