#include "sage/json_ids.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "sage/error.hpp"

namespace sage {

using nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  require(end != s.c_str() && *end == '\0', "invalid_json", "not a number: '" + s + "'");
  return v;
}

NodeKind node_kind_from_string(const std::string& s) {
  for (auto k : {NodeKind::Embed, NodeKind::AttnHeadOut, NodeKind::MlpOut, NodeKind::ResidPost, NodeKind::Logits})
    if (to_string(k) == s) return k;
  throw Error("invalid_json", "unknown node kind: " + s);
}

ReadKind read_kind_from_string(const std::string& s) {
  for (auto k : {ReadKind::AttnQ, ReadKind::AttnK, ReadKind::AttnV, ReadKind::MlpIn, ReadKind::LogitsIn})
    if (to_string(k) == s) return k;
  throw Error("invalid_json", "unknown read kind: " + s);
}

json node_to_json(const NodeId& n) {
  return {{"kind", to_string(n.kind)}, {"layer", n.layer}, {"head", n.head}, {"position", n.position}};
}

NodeId node_from_json(const json& j) {
  return {node_kind_from_string(j.at("kind").get<std::string>()), j.at("layer").get<int>(), j.at("head").get<int>(),
          j.at("position").get<int>()};
}

json edge_to_json(const EdgeId& e) {
  return {{"upstream", node_to_json(e.upstream)},
          {"downstream",
           {{"kind", to_string(e.downstream.kind)}, {"layer", e.downstream.layer}, {"head", e.downstream.head}}},
          {"downstream_position", e.downstream_position}};
}

EdgeId edge_from_json(const json& j) {
  EdgeId e;
  e.upstream = node_from_json(j.at("upstream"));
  const auto& d = j.at("downstream");
  e.downstream = {read_kind_from_string(d.at("kind").get<std::string>()), d.at("layer").get<int>(),
                  d.at("head").get<int>()};
  e.downstream_position = j.at("downstream_position").get<int>();
  return e;
}

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
          {"d_head", c.d_head},     {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},
          {"max_seq", c.max_seq},   {"seed", std::to_string(c.seed)}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_head = j.value("d_head", c.d_head);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq = j.value("max_seq", c.max_seq);
  if (j.contains("seed")) {
    const auto& s = j.at("seed");
    c.seed = s.is_string() ? std::stoull(s.get<std::string>()) : s.get<std::uint64_t>();
  }
  c.validate();
  return c;
}

}  // namespace sage
