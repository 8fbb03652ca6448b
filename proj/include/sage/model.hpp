#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sage/linalg.hpp"

namespace sage {

using Token = int;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_mlp = 0;  // 0 = attention-only
  int vocab_size = 64;
  int max_seq = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct HeadWeights {
  Matrix w_q;  // d_head × d_model
  Matrix w_k;
  Matrix w_v;
  Matrix w_o;  // d_model × d_head
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Matrix w_in;  // d_mlp × d_model
  Vector b_in;
  Matrix w_out;  // d_model × d_mlp
  Vector b_out;
};

struct ModelWeights {
  ModelConfig config;
  Matrix embed;    // vocab × d_model
  Matrix pos;      // max_seq × d_model
  std::vector<LayerWeights> layers;
  Matrix unembed;  // vocab × d_model

  static ModelWeights zeros(const ModelConfig& config);
  // Gaussian initialization drawn from config.seed.
  static ModelWeights init(const ModelConfig& config);

  // Visits every parameter tensor in a fixed order. dims is the logical shape.
  void for_each_tensor(
      const std::function<void(const std::string& name, std::vector<double>& data,
                               const std::vector<std::uint32_t>& dims)>& fn);
  void for_each_tensor(
      const std::function<void(const std::string& name, const std::vector<double>& data,
                               const std::vector<std::uint32_t>& dims)>& fn) const;

  std::size_t parameter_count() const;
  // Rounds every parameter to the nearest 32-bit float.
  void round_to_float();
};

// --- graph addressing ---------------------------------------------------------

enum class NodeKind : std::uint8_t { Embed, AttnHeadOut, MlpOut, ResidPost, Logits };

struct NodeId {
  NodeKind kind = NodeKind::Embed;
  int layer = 0;
  int head = 0;
  int position = 0;

  static NodeId embed(int position) { return {NodeKind::Embed, 0, 0, position}; }
  static NodeId head_out(int layer, int head, int position) {
    return {NodeKind::AttnHeadOut, layer, head, position};
  }
  static NodeId mlp_out(int layer, int position) { return {NodeKind::MlpOut, layer, 0, position}; }
  static NodeId resid_post(int layer, int position) {
    return {NodeKind::ResidPost, layer, 0, position};
  }
  static NodeId logits(int position) { return {NodeKind::Logits, 0, 0, position}; }

  auto operator<=>(const NodeId&) const = default;
};

enum class ReadKind : std::uint8_t { AttnQ, AttnK, AttnV, MlpIn, LogitsIn };

struct ReadPoint {
  ReadKind kind = ReadKind::LogitsIn;
  int layer = 0;
  int head = 0;

  auto operator<=>(const ReadPoint&) const = default;
};

// An edge carries the upstream node's write into one downstream read. For key
// and value reads the upstream position is the key position and
// downstream_position the attending query position.
struct EdgeId {
  NodeId upstream;
  ReadPoint downstream;
  int downstream_position = 0;

  auto operator<=>(const EdgeId&) const = default;
};

std::string to_string(NodeKind kind);
std::string to_string(ReadKind kind);
std::string to_string(const NodeId& node);
std::string to_string(const EdgeId& edge);

// Stage ordering of writes and reads along the residual stream: Embed writes
// before layer 0 attention reads, attention of layer l writes before the MLP
// of layer l reads, and so on.
int write_stage(const NodeId& node);
int read_stage(const ReadPoint& read, int n_layers);

void validate_node(const ModelConfig& config, const NodeId& node, int seq_len);
void validate_edge(const ModelConfig& config, const EdgeId& edge, int seq_len);

// --- caches -------------------------------------------------------------------

// Per-node tensors for one sequence. Used for both activations and node
// gradients.
struct NodeTensors {
  int seq_len = 0;
  int n_layers = 0;
  int n_heads = 0;
  bool has_mlp = false;

  Matrix embed;                   // T × d
  std::vector<Matrix> head_out;   // [layer * n_heads + head], T × d
  std::vector<Matrix> mlp_out;    // [layer], T × d (empty when attention-only)
  std::vector<Matrix> resid_post; // [layer], T × d
  Matrix logits;                  // T × vocab

  static NodeTensors zeros(const ModelConfig& config, int seq_len);

  bool contains(const NodeId& node) const;
  std::span<const double> at(const NodeId& node) const;
  std::span<double> at(const NodeId& node);
};

using ActivationCache = NodeTensors;

// Scalar function of the logits at one position: Σ coef·logit[tok] +
// quadratic_coef·logit[quadratic_token]² + cross-entropy(target).
struct Metric {
  int position = -1;  // -1 = final position
  std::vector<std::pair<Token, double>> linear;
  std::optional<Token> quadratic_token;
  double quadratic_coef = 0.0;
  std::optional<Token> ce_target;

  static Metric logit_diff(Token a, Token b, int position = -1);
  static Metric single_logit(Token t, int position = -1);
  static Metric cross_entropy(Token target, int position = -1);

  int resolved_position(int seq_len) const;
  double value(const Matrix& logits) const;
  // d metric / d logits at resolved_position.
  Vector gradient(const Matrix& logits) const;
};

// logits[final, a] − logits[final, b].
double logit_diff(const Matrix& logits, Token a, Token b);

struct EdgePatch {
  EdgeId edge;
  Vector replacement;
};

struct NodePatch {
  NodeId node;
  Vector replacement;
};

struct Interventions {
  std::vector<EdgePatch> edges;
  std::vector<NodePatch> nodes;
  bool empty() const { return edges.empty() && nodes.empty(); }
};

// Intermediate values of one forward pass that backward needs.
struct ForwardTrace {
  std::vector<Matrix> resid_pre;  // [layer] T × d, input to attention
  std::vector<Matrix> resid_mid;  // [layer] T × d, input to MLP
  std::vector<Matrix> q;          // [layer*H+h] T × d_head
  std::vector<Matrix> k;          // unpatched keys, T × d_head
  std::vector<Matrix> v;
  std::vector<Matrix> probs;      // T × T attention pattern (row = query)
  std::vector<Matrix> z;          // T × d_head
  std::vector<Matrix> mlp_pre;    // [layer] T × d_mlp
  // Edge-patched key/value vectors: (l*H+h) -> (query, key pos) -> vector.
  std::vector<std::map<std::pair<int, int>, Vector>> k_override;
  std::vector<std::map<std::pair<int, int>, Vector>> v_override;
  Interventions interventions;
};

struct ForwardResult {
  std::vector<Token> tokens;
  ActivationCache cache;
  ForwardTrace trace;

  const Matrix& logits() const { return cache.logits; }
};

// Node gradients plus gradients at every read point. Key and value read
// gradients are kept per (query, key) pair in head space and mapped back to
// the residual stream on request.
struct GradientCache {
  NodeTensors nodes;
  std::vector<Matrix> dq;                 // [l*H+h] T × d_head
  std::vector<std::vector<double>> dk;    // [l*H+h] (q*T + p) * d_head
  std::vector<std::vector<double>> dv;
  std::vector<Matrix> mlp_in;             // [layer] T × d
  Matrix logits_in;                       // T × d
};

class Model {
 public:
  explicit Model(ModelWeights weights);

  const ModelConfig& config() const { return weights_.config; }
  const ModelWeights& weights() const { return weights_; }
  ModelWeights& mutable_weights() { return weights_; }

  ForwardResult forward(std::span<const Token> tokens) const;
  ForwardResult run(std::span<const Token> tokens, const Interventions& interventions) const;
  ForwardResult run_with_edge_patch(std::span<const Token> tokens,
                                    std::span<const EdgePatch> patches) const;
  ForwardResult run_with_node_patch(std::span<const Token> tokens,
                                    std::span<const NodePatch> patches) const;

  // Reverse-mode pass through a (possibly patched) run. When param_grad is
  // non-null, parameter gradients are accumulated into it.
  GradientCache backward(const ForwardResult& run, const Metric& metric,
                         ModelWeights* param_grad = nullptr) const;

  // Gradient of the metric with respect to the residual-stream vector seen by
  // a read point. For key/value reads, upstream_position is the key position.
  Vector read_gradient(const GradientCache& grads, const ReadPoint& read, int downstream_position,
                       int upstream_position) const;
  Vector read_gradient(const GradientCache& grads, const EdgeId& edge) const {
    return read_gradient(grads, edge.downstream, edge.downstream_position, edge.upstream.position);
  }

 private:
  void check_tokens(std::span<const Token> tokens) const;

  ModelWeights weights_;
};

}  // namespace sage
