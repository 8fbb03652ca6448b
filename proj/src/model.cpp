#include "sage/model.hpp"

#include <cmath>
#include <random>
#include <set>

#include "sage/error.hpp"

namespace sage {

void ModelConfig::validate() const {
  require(n_layers >= 0, "invalid_config", "n_layers must be >= 0");
  require(n_heads >= 1 && d_model >= 1 && d_head >= 1, "invalid_config",
          "n_heads, d_model and d_head must be >= 1");
  require(d_mlp >= 0, "invalid_config", "d_mlp must be >= 0");
  require(vocab_size >= 1 && max_seq >= 1, "invalid_config", "vocab_size and max_seq must be >= 1");
}

ModelWeights ModelWeights::zeros(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto dh = static_cast<std::size_t>(config.d_head);
  const auto dm = static_cast<std::size_t>(config.d_mlp);
  ModelWeights w;
  w.config = config;
  w.embed = Matrix(config.vocab_size, d);
  w.pos = Matrix(config.max_seq, d);
  w.unembed = Matrix(config.vocab_size, d);
  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers) {
    layer.heads.resize(config.n_heads);
    for (auto& head : layer.heads) {
      head.w_q = Matrix(dh, d);
      head.w_k = Matrix(dh, d);
      head.w_v = Matrix(dh, d);
      head.w_o = Matrix(d, dh);
    }
    if (dm > 0) {
      layer.w_in = Matrix(dm, d);
      layer.b_in = Vector(dm, 0.0);
      layer.w_out = Matrix(d, dm);
      layer.b_out = Vector(d, 0.0);
    }
  }
  return w;
}

ModelWeights ModelWeights::init(const ModelConfig& config) {
  ModelWeights w = zeros(config);
  std::mt19937_64 rng(config.seed);
  const double d = config.d_model;
  auto fill = [&rng](std::vector<double>& v, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : v) x = dist(rng);
  };
  fill(w.embed.data(), 1.0);
  fill(w.pos.data(), 1.0);
  const double depth = std::sqrt(2.0 * std::max(1, config.n_layers));
  for (auto& layer : w.layers) {
    for (auto& head : layer.heads) {
      fill(head.w_q.data(), 1.0 / std::sqrt(d));
      fill(head.w_k.data(), 1.0 / std::sqrt(d));
      fill(head.w_v.data(), 1.0 / std::sqrt(d));
      fill(head.w_o.data(), 1.0 / std::sqrt(static_cast<double>(config.d_head)) / depth);
    }
    if (config.d_mlp > 0) {
      fill(layer.w_in.data(), 1.0 / std::sqrt(d));
      fill(layer.w_out.data(), 1.0 / std::sqrt(static_cast<double>(config.d_mlp)) / depth);
    }
  }
  fill(w.unembed.data(), 1.0 / std::sqrt(d));
  return w;
}

namespace {

template <class Self, class Fn>
void visit_tensors(Self& self, Fn&& fn) {
  using U = std::uint32_t;
  const auto& c = self.config;
  fn("embed", self.embed.data(), std::vector<U>{U(c.vocab_size), U(c.d_model)});
  fn("pos", self.pos.data(), std::vector<U>{U(c.max_seq), U(c.d_model)});
  for (std::size_t l = 0; l < self.layers.size(); ++l) {
    auto& layer = self.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      auto& head = layer.heads[h];
      const std::string hp = pre + "heads." + std::to_string(h) + ".";
      fn(hp + "w_q", head.w_q.data(), std::vector<U>{U(c.d_head), U(c.d_model)});
      fn(hp + "w_k", head.w_k.data(), std::vector<U>{U(c.d_head), U(c.d_model)});
      fn(hp + "w_v", head.w_v.data(), std::vector<U>{U(c.d_head), U(c.d_model)});
      fn(hp + "w_o", head.w_o.data(), std::vector<U>{U(c.d_model), U(c.d_head)});
    }
    if (c.d_mlp > 0) {
      fn(pre + "w_in", layer.w_in.data(), std::vector<U>{U(c.d_mlp), U(c.d_model)});
      fn(pre + "b_in", layer.b_in, std::vector<U>{U(c.d_mlp)});
      fn(pre + "w_out", layer.w_out.data(), std::vector<U>{U(c.d_model), U(c.d_mlp)});
      fn(pre + "b_out", layer.b_out, std::vector<U>{U(c.d_model)});
    }
  }
  fn("unembed", self.unembed.data(), std::vector<U>{U(c.vocab_size), U(c.d_model)});
}

}  // namespace

void ModelWeights::for_each_tensor(
    const std::function<void(const std::string&, std::vector<double>&,
                             const std::vector<std::uint32_t>&)>& fn) {
  visit_tensors(*this, fn);
}

void ModelWeights::for_each_tensor(
    const std::function<void(const std::string&, const std::vector<double>&,
                             const std::vector<std::uint32_t>&)>& fn) const {
  visit_tensors(*this, fn);
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&n](const std::string&, const std::vector<double>& data,
                       const std::vector<std::uint32_t>&) { n += data.size(); });
  return n;
}

void ModelWeights::round_to_float() {
  for_each_tensor([](const std::string&, std::vector<double>& data, const std::vector<std::uint32_t>&) {
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
  });
}

// --- addressing ---------------------------------------------------------------

std::string to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Embed: return "embed";
    case NodeKind::AttnHeadOut: return "attn_head_out";
    case NodeKind::MlpOut: return "mlp_out";
    case NodeKind::ResidPost: return "resid_post";
    case NodeKind::Logits: return "logits";
  }
  return "?";
}

std::string to_string(ReadKind kind) {
  switch (kind) {
    case ReadKind::AttnQ: return "attn_q";
    case ReadKind::AttnK: return "attn_k";
    case ReadKind::AttnV: return "attn_v";
    case ReadKind::MlpIn: return "mlp_in";
    case ReadKind::LogitsIn: return "logits_in";
  }
  return "?";
}

std::string to_string(const NodeId& node) {
  switch (node.kind) {
    case NodeKind::Embed: return "embed@" + std::to_string(node.position);
    case NodeKind::AttnHeadOut:
      return "L" + std::to_string(node.layer) + "H" + std::to_string(node.head) + "@" +
             std::to_string(node.position);
    case NodeKind::MlpOut:
      return "L" + std::to_string(node.layer) + "MLP@" + std::to_string(node.position);
    case NodeKind::ResidPost:
      return "L" + std::to_string(node.layer) + "resid@" + std::to_string(node.position);
    case NodeKind::Logits: return "logits@" + std::to_string(node.position);
  }
  return "?";
}

std::string to_string(const EdgeId& edge) {
  std::string down;
  switch (edge.downstream.kind) {
    case ReadKind::AttnQ:
    case ReadKind::AttnK:
    case ReadKind::AttnV:
      down = "L" + std::to_string(edge.downstream.layer) + "H" + std::to_string(edge.downstream.head) +
             "." + std::string(1, "qkv"[static_cast<int>(edge.downstream.kind)]);
      break;
    case ReadKind::MlpIn: down = "L" + std::to_string(edge.downstream.layer) + "MLP.in"; break;
    case ReadKind::LogitsIn: down = "logits.in"; break;
  }
  return to_string(edge.upstream) + "->" + down + "@" + std::to_string(edge.downstream_position);
}

int write_stage(const NodeId& node) {
  switch (node.kind) {
    case NodeKind::Embed: return -1;
    case NodeKind::AttnHeadOut: return 2 * node.layer;
    case NodeKind::MlpOut: return 2 * node.layer + 1;
    default: return -2;  // not a writer
  }
}

int read_stage(const ReadPoint& read, int n_layers) {
  switch (read.kind) {
    case ReadKind::AttnQ:
    case ReadKind::AttnK:
    case ReadKind::AttnV: return 2 * read.layer;
    case ReadKind::MlpIn: return 2 * read.layer + 1;
    case ReadKind::LogitsIn: return 2 * n_layers;
  }
  return 0;
}

void validate_node(const ModelConfig& config, const NodeId& node, int seq_len) {
  require(node.position >= 0 && node.position < seq_len, "invalid_node",
          "node position out of range: " + to_string(node));
  switch (node.kind) {
    case NodeKind::Embed:
    case NodeKind::Logits: break;
    case NodeKind::AttnHeadOut:
      require(node.layer >= 0 && node.layer < config.n_layers && node.head >= 0 &&
                  node.head < config.n_heads,
              "invalid_node", "head out of range: " + to_string(node));
      break;
    case NodeKind::MlpOut:
      require(config.d_mlp > 0, "invalid_node", "model has no MLP: " + to_string(node));
      [[fallthrough]];
    case NodeKind::ResidPost:
      require(node.layer >= 0 && node.layer < config.n_layers, "invalid_node",
              "layer out of range: " + to_string(node));
      break;
  }
}

void validate_edge(const ModelConfig& config, const EdgeId& edge, int seq_len) {
  validate_node(config, edge.upstream, seq_len);
  const auto& up = edge.upstream;
  require(up.kind == NodeKind::Embed || up.kind == NodeKind::AttnHeadOut || up.kind == NodeKind::MlpOut,
          "invalid_edge", "edge upstream must be embed, head or mlp output: " + to_string(edge));
  const auto& r = edge.downstream;
  require(edge.downstream_position >= 0 && edge.downstream_position < seq_len, "invalid_edge",
          "downstream position out of range: " + to_string(edge));
  switch (r.kind) {
    case ReadKind::AttnQ:
    case ReadKind::AttnK:
    case ReadKind::AttnV:
      require(r.layer >= 0 && r.layer < config.n_layers && r.head >= 0 && r.head < config.n_heads,
              "invalid_edge", "read head out of range: " + to_string(edge));
      break;
    case ReadKind::MlpIn:
      require(config.d_mlp > 0 && r.layer >= 0 && r.layer < config.n_layers, "invalid_edge",
              "mlp read out of range: " + to_string(edge));
      break;
    case ReadKind::LogitsIn: break;
  }
  require(write_stage(up) < read_stage(r, config.n_layers), "invalid_edge",
          "upstream does not precede downstream: " + to_string(edge));
  if (r.kind == ReadKind::AttnK || r.kind == ReadKind::AttnV) {
    require(up.position <= edge.downstream_position, "invalid_edge",
            "key/value edge from a future position: " + to_string(edge));
  } else {
    require(up.position == edge.downstream_position, "invalid_edge",
            "query/mlp/logits edge must stay at one position: " + to_string(edge));
  }
}

// --- caches -------------------------------------------------------------------

NodeTensors NodeTensors::zeros(const ModelConfig& config, int seq_len) {
  NodeTensors t;
  t.seq_len = seq_len;
  t.n_layers = config.n_layers;
  t.n_heads = config.n_heads;
  t.has_mlp = config.d_mlp > 0;
  const auto T = static_cast<std::size_t>(seq_len);
  const auto d = static_cast<std::size_t>(config.d_model);
  t.embed = Matrix(T, d);
  t.head_out.assign(static_cast<std::size_t>(config.n_layers * config.n_heads), Matrix(T, d));
  if (t.has_mlp) t.mlp_out.assign(static_cast<std::size_t>(config.n_layers), Matrix(T, d));
  t.resid_post.assign(static_cast<std::size_t>(config.n_layers), Matrix(T, d));
  t.logits = Matrix(T, static_cast<std::size_t>(config.vocab_size));
  return t;
}

bool NodeTensors::contains(const NodeId& node) const {
  if (node.position < 0 || node.position >= seq_len) return false;
  switch (node.kind) {
    case NodeKind::Embed:
    case NodeKind::Logits: return true;
    case NodeKind::AttnHeadOut:
      return node.layer >= 0 && node.layer < n_layers && node.head >= 0 && node.head < n_heads;
    case NodeKind::MlpOut: return has_mlp && node.layer >= 0 && node.layer < n_layers;
    case NodeKind::ResidPost: return node.layer >= 0 && node.layer < n_layers;
  }
  return false;
}

std::span<double> NodeTensors::at(const NodeId& node) {
  require(contains(node), "invalid_node", "node not in cache: " + to_string(node));
  const auto p = static_cast<std::size_t>(node.position);
  switch (node.kind) {
    case NodeKind::Embed: return embed.row(p);
    case NodeKind::AttnHeadOut:
      return head_out[static_cast<std::size_t>(node.layer * n_heads + node.head)].row(p);
    case NodeKind::MlpOut: return mlp_out[static_cast<std::size_t>(node.layer)].row(p);
    case NodeKind::ResidPost: return resid_post[static_cast<std::size_t>(node.layer)].row(p);
    case NodeKind::Logits: return logits.row(p);
  }
  return {};
}

std::span<const double> NodeTensors::at(const NodeId& node) const {
  return const_cast<NodeTensors*>(this)->at(node);
}

// --- metric -------------------------------------------------------------------

Metric Metric::logit_diff(Token a, Token b, int position) {
  Metric m;
  m.position = position;
  m.linear = {{a, 1.0}, {b, -1.0}};
  return m;
}

Metric Metric::single_logit(Token t, int position) {
  Metric m;
  m.position = position;
  m.linear = {{t, 1.0}};
  return m;
}

Metric Metric::cross_entropy(Token target, int position) {
  Metric m;
  m.position = position;
  m.ce_target = target;
  return m;
}

int Metric::resolved_position(int seq_len) const {
  const int p = position < 0 ? seq_len + position : position;
  require(p >= 0 && p < seq_len, "invalid_metric", "metric position outside the sequence");
  return p;
}

namespace {
void check_metric_tokens(const Metric& m, std::size_t vocab) {
  auto ok = [vocab](Token t) { return t >= 0 && static_cast<std::size_t>(t) < vocab; };
  for (const auto& [t, c] : m.linear) require(ok(t), "invalid_metric", "metric token out of vocabulary");
  if (m.quadratic_token) require(ok(*m.quadratic_token), "invalid_metric", "metric token out of vocabulary");
  if (m.ce_target) require(ok(*m.ce_target), "invalid_metric", "metric token out of vocabulary");
}
}  // namespace

double Metric::value(const Matrix& logits) const {
  check_metric_tokens(*this, logits.cols());
  const auto row = logits.row(static_cast<std::size_t>(resolved_position(static_cast<int>(logits.rows()))));
  double v = 0.0;
  for (const auto& [t, c] : linear) v += c * row[static_cast<std::size_t>(t)];
  if (quadratic_token) {
    const double x = row[static_cast<std::size_t>(*quadratic_token)];
    v += quadratic_coef * x * x;
  }
  if (ce_target) v += sage::cross_entropy(row, static_cast<std::size_t>(*ce_target));
  return v;
}

Vector Metric::gradient(const Matrix& logits) const {
  check_metric_tokens(*this, logits.cols());
  const auto row = logits.row(static_cast<std::size_t>(resolved_position(static_cast<int>(logits.rows()))));
  Vector g(row.size(), 0.0);
  for (const auto& [t, c] : linear) g[static_cast<std::size_t>(t)] += c;
  if (quadratic_token) {
    const auto q = static_cast<std::size_t>(*quadratic_token);
    g[q] += 2.0 * quadratic_coef * row[q];
  }
  if (ce_target) {
    const Vector p = softmax(row);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += p[i];
    g[static_cast<std::size_t>(*ce_target)] -= 1.0;
  }
  return g;
}

double logit_diff(const Matrix& logits, Token a, Token b) {
  require(logits.rows() >= 1, "invalid_argument", "logit_diff: empty logits");
  require(a >= 0 && b >= 0 && static_cast<std::size_t>(a) < logits.cols() &&
              static_cast<std::size_t>(b) < logits.cols(),
          "invalid_argument", "logit_diff: token out of vocabulary");
  const auto row = logits.row(logits.rows() - 1);
  return row[static_cast<std::size_t>(a)] - row[static_cast<std::size_t>(b)];
}

// --- model --------------------------------------------------------------------

Model::Model(ModelWeights weights) : weights_(std::move(weights)) { weights_.config.validate(); }

void Model::check_tokens(std::span<const Token> tokens) const {
  const auto& c = config();
  require(!tokens.empty(), "invalid_input", "empty token sequence");
  require(static_cast<int>(tokens.size()) <= c.max_seq, "invalid_input",
          "sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " + std::to_string(c.max_seq));
  for (Token t : tokens) {
    require(t >= 0 && t < c.vocab_size, "invalid_input", "token " + std::to_string(t) + " out of vocabulary");
  }
}

ForwardResult Model::forward(std::span<const Token> tokens) const { return run(tokens, {}); }

ForwardResult Model::run_with_edge_patch(std::span<const Token> tokens,
                                         std::span<const EdgePatch> patches) const {
  Interventions iv;
  iv.edges.assign(patches.begin(), patches.end());
  return run(tokens, iv);
}

ForwardResult Model::run_with_node_patch(std::span<const Token> tokens,
                                         std::span<const NodePatch> patches) const {
  Interventions iv;
  iv.nodes.assign(patches.begin(), patches.end());
  return run(tokens, iv);
}

namespace {

// W x for row-major W (rows × cols).
inline void mv(const Matrix& w, const double* x, double* out) {
  const std::size_t rows = w.rows(), cols = w.cols();
  const double* wp = w.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = wp + r * cols;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
    out[r] = s;
  }
}

// out += Wᵀ g
inline void mtv_acc(const Matrix& w, const double* g, double* out) {
  const std::size_t rows = w.rows(), cols = w.cols();
  const double* wp = w.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const double* wr = wp + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += gr * wr[c];
  }
}

// dW += g ⊗ x
inline void outer_acc(Matrix& dw, const double* g, const double* x) {
  const std::size_t rows = dw.rows(), cols = dw.cols();
  double* wp = dw.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    double* wr = wp + r * cols;
    for (std::size_t c = 0; c < cols; ++c) wr[c] += gr * x[c];
  }
}

struct PendingDelta {
  NodeId upstream;
  const Vector* replacement;
};

// Patched edges bucketed by their downstream read.
struct EdgeBuckets {
  std::vector<std::map<int, std::vector<PendingDelta>>> q;                   // [l*H+h] pos
  std::vector<std::map<std::pair<int, int>, std::vector<PendingDelta>>> k;   // (query, key)
  std::vector<std::map<std::pair<int, int>, std::vector<PendingDelta>>> v;
  std::vector<std::map<int, std::vector<PendingDelta>>> mlp;                 // [layer] pos
  std::map<int, std::vector<PendingDelta>> logits;
};

// Σ (replacement − current upstream value) over pending deltas.
Vector delta_sum(const std::vector<PendingDelta>& deltas, const ActivationCache& cache, std::size_t d) {
  Vector s(d, 0.0);
  for (const auto& pd : deltas) {
    const auto u = cache.at(pd.upstream);
    for (std::size_t i = 0; i < d; ++i) s[i] += (*pd.replacement)[i] - u[i];
  }
  return s;
}

}  // namespace

ForwardResult Model::run(std::span<const Token> tokens, const Interventions& interventions) const {
  check_tokens(tokens);
  const auto& c = config();
  const int T = static_cast<int>(tokens.size());
  const auto Tz = static_cast<std::size_t>(T);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto dm = static_cast<std::size_t>(c.d_mlp);
  const int H = c.n_heads;
  const auto LH = static_cast<std::size_t>(c.n_layers * H);

  std::map<NodeId, const Vector*> node_patch;
  for (const auto& np : interventions.nodes) {
    validate_node(c, np.node, T);
    const std::size_t want = np.node.kind == NodeKind::Logits ? static_cast<std::size_t>(c.vocab_size) : d;
    require(np.replacement.size() == want, "invalid_patch", "node patch has wrong dimension: " + to_string(np.node));
    require(all_finite(np.replacement), "non_finite", "node patch is not finite: " + to_string(np.node));
    require(node_patch.emplace(np.node, &np.replacement).second, "conflicting_patch",
            "node patched twice: " + to_string(np.node));
  }

  EdgeBuckets buckets;
  buckets.q.resize(LH);
  buckets.k.resize(LH);
  buckets.v.resize(LH);
  buckets.mlp.resize(static_cast<std::size_t>(c.n_layers));
  {
    std::set<EdgeId> seen;
    for (const auto& ep : interventions.edges) {
      validate_edge(c, ep.edge, T);
      require(ep.replacement.size() == d, "invalid_patch", "edge patch has wrong dimension: " + to_string(ep.edge));
      require(all_finite(ep.replacement), "non_finite", "edge patch is not finite: " + to_string(ep.edge));
      require(seen.insert(ep.edge).second, "conflicting_patch", "edge patched twice: " + to_string(ep.edge));
      const PendingDelta pd{ep.edge.upstream, &ep.replacement};
      const auto& r = ep.edge.downstream;
      const auto idx = static_cast<std::size_t>(r.layer * H + r.head);
      const int q = ep.edge.downstream_position;
      switch (r.kind) {
        case ReadKind::AttnQ: buckets.q[idx][q].push_back(pd); break;
        case ReadKind::AttnK: buckets.k[idx][{q, ep.edge.upstream.position}].push_back(pd); break;
        case ReadKind::AttnV: buckets.v[idx][{q, ep.edge.upstream.position}].push_back(pd); break;
        case ReadKind::MlpIn: buckets.mlp[static_cast<std::size_t>(r.layer)][q].push_back(pd); break;
        case ReadKind::LogitsIn: buckets.logits[q].push_back(pd); break;
      }
    }
  }

  ForwardResult out;
  out.tokens.assign(tokens.begin(), tokens.end());
  out.cache = NodeTensors::zeros(c, T);
  auto& cache = out.cache;
  auto& tr = out.trace;
  tr.interventions = interventions;
  tr.resid_pre.resize(static_cast<std::size_t>(c.n_layers));
  tr.resid_mid.resize(static_cast<std::size_t>(c.n_layers));
  tr.q.assign(LH, Matrix(Tz, dh));
  tr.k.assign(LH, Matrix(Tz, dh));
  tr.v.assign(LH, Matrix(Tz, dh));
  tr.probs.assign(LH, Matrix(Tz, Tz));
  tr.z.assign(LH, Matrix(Tz, dh));
  tr.k_override.resize(LH);
  tr.v_override.resize(LH);
  if (dm > 0) tr.mlp_pre.assign(static_cast<std::size_t>(c.n_layers), Matrix(Tz, dm));

  auto apply_node_patch = [&](const NodeId& n, std::span<double> dst) {
    if (node_patch.empty()) return;
    auto it = node_patch.find(n);
    if (it != node_patch.end()) std::copy(it->second->begin(), it->second->end(), dst.begin());
  };

  Matrix resid(Tz, d);
  for (int t = 0; t < T; ++t) {
    auto e = cache.embed.row(static_cast<std::size_t>(t));
    const auto te = weights_.embed.row(static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]));
    const auto pe = weights_.pos.row(static_cast<std::size_t>(t));
    for (std::size_t i = 0; i < d; ++i) e[i] = te[i] + pe[i];
    apply_node_patch(NodeId::embed(t), e);
    std::copy(e.begin(), e.end(), resid.row(static_cast<std::size_t>(t)).begin());
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Vector x(d), tmp(dh), sc(Tz);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto lz = static_cast<std::size_t>(l);
    tr.resid_pre[lz] = resid;
    const auto& layer = weights_.layers[lz];
    for (int h = 0; h < H; ++h) {
      const auto idx = static_cast<std::size_t>(l * H + h);
      const auto& hw = layer.heads[static_cast<std::size_t>(h)];
      auto& Q = tr.q[idx];
      auto& K = tr.k[idx];
      auto& V = tr.v[idx];
      for (int t = 0; t < T; ++t) {
        const auto tz = static_cast<std::size_t>(t);
        const double* xr = tr.resid_pre[lz].row(tz).data();
        mv(hw.w_k, xr, K.row(tz).data());
        mv(hw.w_v, xr, V.row(tz).data());
        auto qit = buckets.q[idx].find(t);
        if (qit != buckets.q[idx].end()) {
          const Vector delta = delta_sum(qit->second, cache, d);
          for (std::size_t i = 0; i < d; ++i) x[i] = xr[i] + delta[i];
          mv(hw.w_q, x.data(), Q.row(tz).data());
        } else {
          mv(hw.w_q, xr, Q.row(tz).data());
        }
      }
      for (const auto& [qp, deltas] : buckets.k[idx]) {
        const Vector delta = delta_sum(deltas, cache, d);
        Vector kv(dh);
        mv(hw.w_k, delta.data(), kv.data());
        const auto base = K.row(static_cast<std::size_t>(qp.second));
        for (std::size_t i = 0; i < dh; ++i) kv[i] += base[i];
        tr.k_override[idx][qp] = std::move(kv);
      }
      for (const auto& [qp, deltas] : buckets.v[idx]) {
        const Vector delta = delta_sum(deltas, cache, d);
        Vector vv(dh);
        mv(hw.w_v, delta.data(), vv.data());
        const auto base = V.row(static_cast<std::size_t>(qp.second));
        for (std::size_t i = 0; i < dh; ++i) vv[i] += base[i];
        tr.v_override[idx][qp] = std::move(vv);
      }
      const auto& kov = tr.k_override[idx];
      const auto& vov = tr.v_override[idx];
      auto& P = tr.probs[idx];
      auto& Z = tr.z[idx];
      auto& O = cache.head_out[idx];
      for (int q = 0; q < T; ++q) {
        const auto qz = static_cast<std::size_t>(q);
        const auto qrow = Q.row(qz);
        double mx = -1e300;
        for (int p = 0; p <= q; ++p) {
          const double* kr = K.row(static_cast<std::size_t>(p)).data();
          if (!kov.empty()) {
            auto it = kov.find({q, p});
            if (it != kov.end()) kr = it->second.data();
          }
          double s = 0.0;
          for (std::size_t i = 0; i < dh; ++i) s += qrow[i] * kr[i];
          sc[static_cast<std::size_t>(p)] = s * scale;
          mx = std::max(mx, sc[static_cast<std::size_t>(p)]);
        }
        double zsum = 0.0;
        for (int p = 0; p <= q; ++p) {
          const double e = std::exp(sc[static_cast<std::size_t>(p)] - mx);
          P(qz, static_cast<std::size_t>(p)) = e;
          zsum += e;
        }
        auto zr = Z.row(qz);
        for (int p = 0; p <= q; ++p) {
          const double a = P(qz, static_cast<std::size_t>(p)) / zsum;
          P(qz, static_cast<std::size_t>(p)) = a;
          const double* vr = V.row(static_cast<std::size_t>(p)).data();
          if (!vov.empty()) {
            auto it = vov.find({q, p});
            if (it != vov.end()) vr = it->second.data();
          }
          for (std::size_t i = 0; i < dh; ++i) zr[i] += a * vr[i];
        }
        auto orow = O.row(qz);
        mv(hw.w_o, zr.data(), orow.data());
        apply_node_patch(NodeId::head_out(l, h, q), orow);
      }
    }
    for (int h = 0; h < H; ++h) {
      const auto& O = cache.head_out[static_cast<std::size_t>(l * H + h)];
      for (std::size_t i = 0; i < resid.data().size(); ++i) resid.data()[i] += O.data()[i];
    }
    tr.resid_mid[lz] = resid;
    if (dm > 0) {
      auto& pre = tr.mlp_pre[lz];
      auto& mo = cache.mlp_out[lz];
      Vector hidden(dm);
      for (int t = 0; t < T; ++t) {
        const auto tz = static_cast<std::size_t>(t);
        const double* xr = tr.resid_mid[lz].row(tz).data();
        auto mit = buckets.mlp[lz].find(t);
        if (mit != buckets.mlp[lz].end()) {
          const Vector delta = delta_sum(mit->second, cache, d);
          for (std::size_t i = 0; i < d; ++i) x[i] = xr[i] + delta[i];
          xr = x.data();
        }
        auto pr = pre.row(tz);
        mv(layer.w_in, xr, pr.data());
        for (std::size_t i = 0; i < dm; ++i) {
          pr[i] += layer.b_in[i];
          hidden[i] = gelu(pr[i]);
        }
        auto orow = mo.row(tz);
        mv(layer.w_out, hidden.data(), orow.data());
        for (std::size_t i = 0; i < d; ++i) orow[i] += layer.b_out[i];
        apply_node_patch(NodeId::mlp_out(l, t), orow);
        auto rr = resid.row(tz);
        for (std::size_t i = 0; i < d; ++i) rr[i] += orow[i];
      }
    }
    for (int t = 0; t < T; ++t) apply_node_patch(NodeId::resid_post(l, t), resid.row(static_cast<std::size_t>(t)));
    cache.resid_post[lz] = resid;
  }

  for (int t = 0; t < T; ++t) {
    const auto tz = static_cast<std::size_t>(t);
    const double* xr = resid.row(tz).data();
    auto lit = buckets.logits.find(t);
    if (lit != buckets.logits.end()) {
      const Vector delta = delta_sum(lit->second, cache, d);
      for (std::size_t i = 0; i < d; ++i) x[i] = xr[i] + delta[i];
      xr = x.data();
    }
    auto lr = cache.logits.row(tz);
    mv(weights_.unembed, xr, lr.data());
    apply_node_patch(NodeId::logits(t), lr);
  }
  return out;
}

Vector Model::read_gradient(const GradientCache& g, const ReadPoint& read, int downstream_position,
                            int upstream_position) const {
  const auto& c = config();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto T = static_cast<std::size_t>(g.nodes.seq_len);
  require(downstream_position >= 0 && static_cast<std::size_t>(downstream_position) < T &&
              upstream_position >= 0 && upstream_position <= downstream_position,
          "invalid_edge", "read gradient position out of range");
  const auto q = static_cast<std::size_t>(downstream_position);
  const auto p = static_cast<std::size_t>(upstream_position);
  Vector out(d, 0.0);
  switch (read.kind) {
    case ReadKind::AttnQ: {
      const auto idx = static_cast<std::size_t>(read.layer * c.n_heads + read.head);
      require(!g.dq.empty(), "invalid_state", "gradient cache has no read gradients");
      mtv_acc(weights_.layers[static_cast<std::size_t>(read.layer)].heads[static_cast<std::size_t>(read.head)].w_q,
              g.dq[idx].row(q).data(), out.data());
      break;
    }
    case ReadKind::AttnK:
    case ReadKind::AttnV: {
      const auto idx = static_cast<std::size_t>(read.layer * c.n_heads + read.head);
      require(!g.dk.empty(), "invalid_state", "gradient cache has no read gradients");
      const auto& hw = weights_.layers[static_cast<std::size_t>(read.layer)].heads[static_cast<std::size_t>(read.head)];
      const auto& src = read.kind == ReadKind::AttnK ? g.dk[idx] : g.dv[idx];
      mtv_acc(read.kind == ReadKind::AttnK ? hw.w_k : hw.w_v, src.data() + (q * T + p) * dh, out.data());
      break;
    }
    case ReadKind::MlpIn: {
      const auto r = g.mlp_in[static_cast<std::size_t>(read.layer)].row(q);
      std::copy(r.begin(), r.end(), out.begin());
      break;
    }
    case ReadKind::LogitsIn: {
      const auto r = g.logits_in.row(q);
      std::copy(r.begin(), r.end(), out.begin());
      break;
    }
  }
  return out;
}

GradientCache Model::backward(const ForwardResult& run, const Metric& metric, ModelWeights* param_grad) const {
  const auto& c = config();
  const auto& cache = run.cache;
  const auto& tr = run.trace;
  const int T = cache.seq_len;
  const auto Tz = static_cast<std::size_t>(T);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto dm = static_cast<std::size_t>(c.d_mlp);
  const int H = c.n_heads;
  const auto LH = static_cast<std::size_t>(c.n_layers * H);
  const int mpos = metric.resolved_position(T);
  require(param_grad == nullptr || tr.interventions.empty(), "invalid_argument",
          "parameter gradients are only defined for unpatched runs");
  const bool keep_reads = param_grad == nullptr;

  std::set<NodeId> patched_nodes;
  for (const auto& np : tr.interventions.nodes) patched_nodes.insert(np.node);
  std::map<NodeId, std::vector<const EdgeId*>> patched_from;
  for (const auto& ep : tr.interventions.edges) patched_from[ep.edge.upstream].push_back(&ep.edge);

  GradientCache g;
  g.nodes = NodeTensors::zeros(c, T);
  if (keep_reads) {
    g.dq.assign(LH, Matrix(Tz, dh));
    g.dk.assign(LH, std::vector<double>(Tz * Tz * dh, 0.0));
    g.dv.assign(LH, std::vector<double>(Tz * Tz * dh, 0.0));
    if (dm > 0) g.mlp_in.assign(static_cast<std::size_t>(c.n_layers), Matrix(Tz, d));
    g.logits_in = Matrix(Tz, d);
  }

  // Node gradient = residual gradient at its write point, minus reads that were
  // edge-patched away from it.
  auto node_grad = [&](const NodeId& n, std::span<const double> resid_grad, std::span<double> dst) {
    std::copy(resid_grad.begin(), resid_grad.end(), dst.begin());
    auto it = patched_from.find(n);
    if (it == patched_from.end()) return;
    for (const EdgeId* e : it->second) {
      const Vector rg = read_gradient(g, *e);
      for (std::size_t i = 0; i < d; ++i) dst[i] -= rg[i];
    }
  };

  Matrix G(Tz, d);
  {
    const Vector dl = metric.gradient(cache.logits);
    const auto mz = static_cast<std::size_t>(mpos);
    std::copy(dl.begin(), dl.end(), g.nodes.logits.row(mz).begin());
    if (!patched_nodes.contains(NodeId::logits(mpos))) {
      auto gr = G.row(mz);
      mtv_acc(weights_.unembed, dl.data(), gr.data());
      if (keep_reads) std::copy(gr.begin(), gr.end(), g.logits_in.row(mz).begin());
      if (param_grad) {
        // unembed read input = final residual (no patches in this mode)
        const auto& fin = c.n_layers > 0 ? cache.resid_post.back() : cache.embed;
        outer_acc(param_grad->unembed, dl.data(), fin.row(mz).data());
      }
    }
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Vector dz(dh), da(Tz), ds(Tz), dkp(dh), dvp(dh), dqv(dh);
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto lz = static_cast<std::size_t>(l);
    const auto& layer = weights_.layers[lz];
    g.nodes.resid_post[lz] = G;
    for (int t = 0; t < T; ++t) {
      if (patched_nodes.contains(NodeId::resid_post(l, t))) {
        auto gr = G.row(static_cast<std::size_t>(t));
        std::fill(gr.begin(), gr.end(), 0.0);
      }
    }

    if (dm > 0) {
      Vector dhid(dm), dpre(dm), dxin(d);
      LayerWeights* lg = param_grad ? &param_grad->layers[lz] : nullptr;
      for (int t = 0; t < T; ++t) {
        const auto tz = static_cast<std::size_t>(t);
        const NodeId n = NodeId::mlp_out(l, t);
        auto dout = g.nodes.mlp_out[lz].row(tz);
        node_grad(n, G.row(tz), dout);
        std::fill(dxin.begin(), dxin.end(), 0.0);
        if (!patched_nodes.contains(n)) {
          std::fill(dhid.begin(), dhid.end(), 0.0);
          mtv_acc(layer.w_out, dout.data(), dhid.data());
          const auto pre = tr.mlp_pre[lz].row(tz);
          for (std::size_t i = 0; i < dm; ++i) dpre[i] = dhid[i] * gelu_grad(pre[i]);
          mtv_acc(layer.w_in, dpre.data(), dxin.data());
          if (lg) {
            Vector hidden(dm);
            for (std::size_t i = 0; i < dm; ++i) hidden[i] = gelu(pre[i]);
            outer_acc(lg->w_out, dout.data(), hidden.data());
            for (std::size_t i = 0; i < d; ++i) lg->b_out[i] += dout[i];
            outer_acc(lg->w_in, dpre.data(), tr.resid_mid[lz].row(tz).data());
            for (std::size_t i = 0; i < dm; ++i) lg->b_in[i] += dpre[i];
          }
        }
        if (keep_reads) std::copy(dxin.begin(), dxin.end(), g.mlp_in[lz].row(tz).begin());
        auto gr = G.row(tz);
        for (std::size_t i = 0; i < d; ++i) gr[i] += dxin[i];
      }
    }

    // Node gradients for this layer's heads use G after the MLP read.
    for (int h = 0; h < H; ++h) {
      const auto idx = static_cast<std::size_t>(l * H + h);
      for (int t = 0; t < T; ++t) {
        node_grad(NodeId::head_out(l, h, t), G.row(static_cast<std::size_t>(t)),
                  g.nodes.head_out[idx].row(static_cast<std::size_t>(t)));
      }
    }

    Matrix Gin(Tz, d);  // read gradients of this attention layer, summed per position
    for (int h = 0; h < H; ++h) {
      const auto idx = static_cast<std::size_t>(l * H + h);
      const auto& hw = layer.heads[static_cast<std::size_t>(h)];
      const auto& Q = tr.q[idx];
      const auto& K = tr.k[idx];
      const auto& V = tr.v[idx];
      const auto& P = tr.probs[idx];
      const auto& Z = tr.z[idx];
      const auto& kov = tr.k_override[idx];
      const auto& vov = tr.v_override[idx];
      Matrix dQ(Tz, dh), dK(Tz, dh), dV(Tz, dh);
      HeadWeights* hg = param_grad ? &param_grad->layers[lz].heads[static_cast<std::size_t>(h)] : nullptr;
      for (int q = 0; q < T; ++q) {
        const auto qz = static_cast<std::size_t>(q);
        if (patched_nodes.contains(NodeId::head_out(l, h, q))) continue;
        const auto dout = g.nodes.head_out[idx].row(qz);
        std::fill(dz.begin(), dz.end(), 0.0);
        mtv_acc(hw.w_o, dout.data(), dz.data());
        if (hg) outer_acc(hg->w_o, dout.data(), Z.row(qz).data());
        double dot_pa = 0.0;
        for (int p = 0; p <= q; ++p) {
          const auto pz = static_cast<std::size_t>(p);
          const double* vr = V.row(pz).data();
          if (!vov.empty()) {
            auto it = vov.find({q, p});
            if (it != vov.end()) vr = it->second.data();
          }
          double s = 0.0;
          for (std::size_t i = 0; i < dh; ++i) s += dz[i] * vr[i];
          da[pz] = s;
          dot_pa += P(qz, pz) * s;
        }
        std::fill(dqv.begin(), dqv.end(), 0.0);
        const auto qrow = Q.row(qz);
        for (int p = 0; p <= q; ++p) {
          const auto pz = static_cast<std::size_t>(p);
          const double a = P(qz, pz);
          ds[pz] = a * (da[pz] - dot_pa) * scale;
          const double* kr = K.row(pz).data();
          if (!kov.empty()) {
            auto it = kov.find({q, p});
            if (it != kov.end()) kr = it->second.data();
          }
          for (std::size_t i = 0; i < dh; ++i) dqv[i] += ds[pz] * kr[i];
          for (std::size_t i = 0; i < dh; ++i) {
            dkp[i] = ds[pz] * qrow[i];
            dvp[i] = a * dz[i];
          }
          auto dKr = dK.row(pz);
          auto dVr = dV.row(pz);
          for (std::size_t i = 0; i < dh; ++i) {
            dKr[i] += dkp[i];
            dVr[i] += dvp[i];
          }
          if (keep_reads) {
            double* kd = g.dk[idx].data() + (qz * Tz + pz) * dh;
            double* vd = g.dv[idx].data() + (qz * Tz + pz) * dh;
            std::copy(dkp.begin(), dkp.end(), kd);
            std::copy(dvp.begin(), dvp.end(), vd);
          }
        }
        auto dQr = dQ.row(qz);
        std::copy(dqv.begin(), dqv.end(), dQr.begin());
        if (keep_reads) std::copy(dqv.begin(), dqv.end(), g.dq[idx].row(qz).begin());
      }
      for (int t = 0; t < T; ++t) {
        const auto tz = static_cast<std::size_t>(t);
        auto gi = Gin.row(tz);
        mtv_acc(hw.w_q, dQ.row(tz).data(), gi.data());
        mtv_acc(hw.w_k, dK.row(tz).data(), gi.data());
        mtv_acc(hw.w_v, dV.row(tz).data(), gi.data());
        if (hg) {
          const double* xr = tr.resid_pre[lz].row(tz).data();
          outer_acc(hg->w_q, dQ.row(tz).data(), xr);
          outer_acc(hg->w_k, dK.row(tz).data(), xr);
          outer_acc(hg->w_v, dV.row(tz).data(), xr);
        }
      }
    }
    for (std::size_t i = 0; i < G.data().size(); ++i) G.data()[i] += Gin.data()[i];
  }

  for (int t = 0; t < T; ++t) {
    const auto tz = static_cast<std::size_t>(t);
    const NodeId n = NodeId::embed(t);
    auto dst = g.nodes.embed.row(tz);
    node_grad(n, G.row(tz), dst);
    if (param_grad && !patched_nodes.contains(n)) {
      auto te = param_grad->embed.row(static_cast<std::size_t>(run.tokens[tz]));
      auto pe = param_grad->pos.row(tz);
      for (std::size_t i = 0; i < d; ++i) {
        te[i] += dst[i];
        pe[i] += dst[i];
      }
    }
  }
  return g;
}

}  // namespace sage
