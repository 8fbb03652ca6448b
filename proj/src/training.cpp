#include "sage/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "sage/parallel.hpp"

namespace sage {

// --- Adam ---------------------------------------------------------------------

Adam::Adam(AdamConfig config, std::size_t total_steps) : config_(config), total_steps_(total_steps) {
  require(config.learning_rate > 0.0, "invalid_config", "learning rate must be positive");
  require(config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 && config.beta2 < 1.0,
          "invalid_config", "Adam betas must lie in [0, 1)");
}

double Adam::current_lr() const {
  const double base = config_.learning_rate;
  const auto step = static_cast<double>(t_ + 1);
  if (config_.warmup_steps > 0 && step <= config_.warmup_steps) return base * step / config_.warmup_steps;
  if (total_steps_ <= static_cast<std::size_t>(std::max(config_.warmup_steps, 0))) return base;
  const double span = static_cast<double>(total_steps_ - std::max(config_.warmup_steps, 0));
  const double progress = std::clamp((step - std::max(config_.warmup_steps, 0)) / span, 0.0, 1.0);
  const double floor = config_.min_lr_fraction;
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void Adam::step(std::span<std::vector<double>*> params, std::span<const std::vector<double>*> grads) {
  require(params.size() == grads.size(), "invalid_argument", "parameter/gradient count mismatch");
  if (m_.size() < params.size()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    require(p.size() == g.size(), "invalid_argument", "parameter/gradient shape mismatch");
    if (m_[i].size() != p.size()) {
      m_[i].assign(p.size(), 0.0);
      v_[i].assign(p.size(), 0.0);
    }
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.epsilon);
    }
  }
}

// --- model training -----------------------------------------------------------

namespace {

std::vector<std::vector<double>*> tensor_list(ModelWeights& w) {
  std::vector<std::vector<double>*> out;
  w.for_each_tensor([&out](const std::string&, std::vector<double>& data, const std::vector<std::uint32_t>&) {
    out.push_back(&data);
  });
  return out;
}

void add_into(ModelWeights& dst, ModelWeights& src) {
  auto d = tensor_list(dst);
  auto s = tensor_list(src);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d[i]->size(); ++j) (*d[i])[j] += (*s[i])[j];
}

void scale_all(ModelWeights& w, double s) {
  for (auto* t : tensor_list(w))
    for (double& x : *t) x *= s;
}

double example_loss_and_grad(const Model& model, const Example& ex, ModelWeights& grad) {
  const auto run = model.forward(ex.tokens);
  const Metric metric = Metric::cross_entropy(ex.target);
  const double loss = metric.value(run.logits());
  model.backward(run, metric, &grad);
  return loss;
}

double chunked_loss_and_grad(const Model& model, std::span<const Example> batch, ModelWeights& grad,
                             bool parallel) {
  require(!batch.empty(), "invalid_argument", "empty batch");
  const auto chunks = fixed_chunks(batch.size());
  std::vector<ModelWeights> partial(chunks.size());
  std::vector<double> losses(chunks.size(), 0.0);
  auto work = [&](std::size_t c) {
    partial[c] = ModelWeights::zeros(model.config());
    for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i)
      losses[c] += example_loss_and_grad(model, batch[i], partial[c]);
  };
  if (parallel) {
    parallel_for(chunks.size(), work);
  } else {
    for (std::size_t c = 0; c < chunks.size(); ++c) work(c);
  }
  double loss = 0.0;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    add_into(grad, partial[c]);
    loss += losses[c];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  scale_all(grad, inv);
  return loss * inv;
}

}  // namespace

double batch_loss_and_grad(const Model& model, std::span<const Example> batch, ModelWeights& grad) {
  return chunked_loss_and_grad(model, batch, grad, true);
}

double batch_loss_and_grad_serial(const Model& model, std::span<const Example> batch, ModelWeights& grad) {
  return chunked_loss_and_grad(model, batch, grad, false);
}

TrainResult train_model(const ModelConfig& config, std::span<const Example> train_data,
                        std::span<const Example> heldout, const ModelTrainConfig& tc) {
  require(!train_data.empty(), "invalid_argument", "no training data");
  require(tc.batch_size >= 1 && tc.epochs >= 1, "invalid_config", "batch_size and epochs must be >= 1");
  Model model(ModelWeights::init(config));
  const std::size_t bs = static_cast<std::size_t>(tc.batch_size);
  const std::size_t steps_per_epoch = (train_data.size() + bs - 1) / bs;
  Adam adam(tc.adam, steps_per_epoch * static_cast<std::size_t>(tc.epochs));
  Rng rng(tc.shuffle_seed);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  std::vector<Example> batch;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_data[order[i]]);
      ModelWeights grad = ModelWeights::zeros(config);
      const double loss = batch_loss_and_grad(model, batch, grad);
      require(std::isfinite(loss), "non_finite", "training loss became non-finite");
      epoch_loss += loss * static_cast<double>(end - start);
      auto params = tensor_list(model.mutable_weights());
      auto grads_mut = tensor_list(grad);
      std::vector<const std::vector<double>*> grads(grads_mut.begin(), grads_mut.end());
      adam.step(params, grads);
      ++report.steps;
    }
    report.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
    report.epochs = epoch + 1;
    if (tc.stop_at_target && !heldout.empty() && eval_accuracy(model, heldout) >= tc.target_accuracy) break;
  }

  model.mutable_weights().round_to_float();
  report.accuracy = heldout.empty() ? eval_accuracy(model, train_data) : eval_accuracy(model, heldout);
  if (tc.require_target && report.accuracy < tc.target_accuracy) {
    throw TrainingError("held-out accuracy " + std::to_string(report.accuracy) + " below target " +
                            std::to_string(tc.target_accuracy),
                        report);
  }
  return {model.weights(), std::move(report)};
}

namespace {

bool argmax_is(const Matrix& logits, Token target) {
  const auto row = logits.row(logits.rows() - 1);
  const auto best = std::max_element(row.begin(), row.end()) - row.begin();
  return best == target;
}

}  // namespace

double eval_accuracy(const Model& model, std::span<const Example> examples) {
  if (examples.empty()) return 0.0;
  std::vector<char> hit(examples.size(), 0);
  parallel_for(examples.size(), [&](std::size_t i) {
    hit[i] = argmax_is(model.forward(examples[i].tokens).logits(), examples[i].target) ? 1 : 0;
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(examples.size());
}

double eval_accuracy(const Model& model, std::span<const TaskPrompt> prompts) {
  std::vector<Example> ex;
  ex.reserve(prompts.size());
  for (const auto& p : prompts) ex.push_back({p.tokens, p.target});
  return eval_accuracy(model, ex);
}

Matrix collect_residual_activations(const Model& model, std::span<const std::vector<Token>> sequences, int layer,
                                    std::span<const int> positions) {
  require(positions.size() == sequences.size(), "invalid_argument", "one position per sequence required");
  require(layer >= 0 && layer < model.config().n_layers, "invalid_argument", "layer out of range");
  Matrix out(sequences.size(), static_cast<std::size_t>(model.config().d_model));
  parallel_for(sequences.size(), [&](std::size_t i) {
    const auto run = model.forward(sequences[i]);
    const int T = static_cast<int>(sequences[i].size());
    const int p = positions[i] < 0 ? T + positions[i] : positions[i];
    require(p >= 0 && p < T, "invalid_argument", "position out of range");
    const auto row = run.cache.resid_post[layer].row(p);
    std::copy(row.begin(), row.end(), out.row(i).begin());
  });
  return out;
}

Matrix collect_residual_activations_all(const Model& model, std::span<const std::vector<Token>> sequences,
                                        int layer) {
  require(layer >= 0 && layer < model.config().n_layers, "invalid_argument", "layer out of range");
  std::vector<std::size_t> offset(sequences.size() + 1, 0);
  for (std::size_t i = 0; i < sequences.size(); ++i) offset[i + 1] = offset[i] + sequences[i].size();
  Matrix out(offset.back(), static_cast<std::size_t>(model.config().d_model));
  parallel_for(sequences.size(), [&](std::size_t i) {
    const auto run = model.forward(sequences[i]);
    const auto& r = run.cache.resid_post[layer];
    std::copy(r.data().begin(), r.data().end(), out.row(offset[i]).begin());
  });
  return out;
}

// --- data generation ----------------------------------------------------------

std::vector<Example> make_task_examples(const Task& task, Split split, std::size_t count, Rng& rng) {
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto p = sample_prompt(task, split, rng);
    out.push_back({std::move(p.tokens), p.target});
  }
  return out;
}

std::vector<Example> make_induction_training_data(const Task& skeleton, const InductionDataConfig& cfg, Rng& rng) {
  const auto& def = skeleton.definition();
  require(def.has_seq_placeholder(), "invalid_task", "induction training data needs {seq} templates");
  require(cfg.min_prefix >= 1 && cfg.max_prefix >= cfg.min_prefix, "invalid_config", "bad prefix length range");
  const auto filler = skeleton.filler_tokens();
  require(!filler.empty(), "invalid_task", "task has no filler tokens");
  const auto templates = skeleton.templates(Split::Train);

  // Repeated-prefix sequences draw from every word token, so copying is learned
  // independently of which tokens fill the task's {seq} slot.
  std::vector<Token> words;
  for (std::size_t t = 0; t < skeleton.tokenizer().size(); ++t)
    if (!Tokenizer::is_punctuation(skeleton.tokenizer().word(static_cast<Token>(t))))
      words.push_back(static_cast<Token>(t));

  auto draw = [&rng](std::span<const Token> pool) {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  };

  std::vector<Example> out;
  out.reserve(cfg.task_examples + cfg.repeat_examples);
  std::vector<Token> seq(static_cast<std::size_t>(def.seq_length));
  for (std::size_t i = 0; i < cfg.task_examples; ++i) {
    for (auto& t : seq) t = draw(filler);
    const Assignment a = sample_assignment(def.schema, rng);
    const auto& tmpl = templates[pick_template(templates, a, rng)];
    out.push_back({render_tokens(skeleton, tmpl, a, seq), skeleton.tokenizer().id(a.at(def.target_attribute))});
  }
  std::uniform_int_distribution<int> len_dist(cfg.min_prefix, cfg.max_prefix);
  for (std::size_t i = 0; i < cfg.repeat_examples; ++i) {
    const int n = len_dist(rng);
    std::vector<Token> r(static_cast<std::size_t>(n));
    for (auto& t : r) t = draw(words);
    const Token probe = draw(words);
    // r + t + r[:j] predicts the token that followed r[:j] the first time.
    const int j = std::uniform_int_distribution<int>(1, n)(rng);
    std::vector<Token> tokens = r;
    tokens.push_back(probe);
    tokens.insert(tokens.end(), r.begin(), r.begin() + j);
    out.push_back({std::move(tokens), j < n ? r[static_cast<std::size_t>(j)] : probe});
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace sage
