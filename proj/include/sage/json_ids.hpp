#pragma once

#include <string>

#include <json.hpp>

#include "sage/model.hpp"

namespace sage {

// Shortest decimal that round-trips a double ("%.17g"); scores and other
// scalars are stored as strings so JSON readers never lose precision.
std::string format_double(double v);
double parse_double(const std::string& s);

NodeKind node_kind_from_string(const std::string& s);
ReadKind read_kind_from_string(const std::string& s);

nlohmann::json node_to_json(const NodeId& node);
NodeId node_from_json(const nlohmann::json& j);
nlohmann::json edge_to_json(const EdgeId& edge);
EdgeId edge_from_json(const nlohmann::json& j);

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace sage
