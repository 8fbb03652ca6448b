#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sage/error.hpp"
#include "sage/linalg.hpp"
#include "sage/model.hpp"
#include "sage/tasks.hpp"

namespace sage {

// A sequence whose final position should predict target.
struct Example {
  std::vector<Token> tokens;
  Token target = 0;
};

struct AdamConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double min_lr_fraction = 0.05;  // cosine decay floor
  int warmup_steps = 50;
};

// Adam over a flat list of parameter tensors with cosine-decayed step size.
class Adam {
 public:
  Adam(AdamConfig config, std::size_t total_steps);

  // params[i] -= step(grads[i]); moments are allocated lazily per tensor index.
  void step(std::span<std::vector<double>*> params, std::span<const std::vector<double>*> grads);
  double current_lr() const;
  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::size_t total_steps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct ModelTrainConfig {
  AdamConfig adam;
  int batch_size = 32;
  int epochs = 8;
  double target_accuracy = 0.95;
  bool stop_at_target = false;
  bool require_target = true;
  std::uint64_t shuffle_seed = 0;
};

struct TrainReport {
  double accuracy = 0.0;
  std::vector<double> loss_curve;  // mean loss per epoch
  int epochs = 0;
  std::size_t steps = 0;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& message, TrainReport report)
      : Error("training_failed", message), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

struct TrainResult {
  ModelWeights weights;
  TrainReport report;
};

// Mean cross-entropy of the final-position prediction over a batch, with
// parameter gradients averaged into grad (which must be zero-initialized and
// shaped like the model). Deterministic regardless of the thread count.
double batch_loss_and_grad(const Model& model, std::span<const Example> batch, ModelWeights& grad);
double batch_loss_and_grad_serial(const Model& model, std::span<const Example> batch, ModelWeights& grad);

TrainResult train_model(const ModelConfig& config, std::span<const Example> train_data,
                        std::span<const Example> heldout, const ModelTrainConfig& train_config);

// Fraction of examples whose argmax final-position logit equals the target.
double eval_accuracy(const Model& model, std::span<const Example> examples);
double eval_accuracy(const Model& model, std::span<const TaskPrompt> prompts);

// Row i is ResidPost(layer) of sequence i at positions[i] (negative = from the end).
Matrix collect_residual_activations(const Model& model, std::span<const std::vector<Token>> sequences, int layer,
                                    std::span<const int> positions);
// Every position of every sequence, in order.
Matrix collect_residual_activations_all(const Model& model, std::span<const std::vector<Token>> sequences, int layer);

// Training data for the induction task: task-form prompts with random {seq}
// fills plus generic repeated-prefix sequences r + t + r predicting t.
struct InductionDataConfig {
  std::size_t task_examples = 20000;
  std::size_t repeat_examples = 20000;
  int min_prefix = 4;
  int max_prefix = 12;
};

std::vector<Example> make_induction_training_data(const Task& skeleton, const InductionDataConfig& config, Rng& rng);
std::vector<Example> make_task_examples(const Task& task, Split split, std::size_t count, Rng& rng);

// --- sparse autoencoders --------------------------------------------------------

struct SparseAutoencoder {
  Matrix w_enc;  // m × d
  Vector b_enc;  // m
  Matrix w_dec;  // d × m, columns are feature directions
  Vector b_dec;  // d
  int layer = 0;

  std::size_t input_dim() const { return w_dec.rows(); }
  std::size_t latent_dim() const { return w_dec.cols(); }

  Vector encode(std::span<const double> x) const;
  Vector decode(std::span<const double> codes) const;
  Vector feature(std::size_t i) const { return w_dec.column(i); }
};

struct SaeConfig {
  int latent_dim = 256;
  double l1_coef = 1e-3;
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct SaeTrainReport {
  std::vector<double> epoch_loss;  // mean ‖x − x̂‖² + α‖c‖₁ per epoch
  double reconstruction_mse = 0.0;  // mean over rows and dims, after training
  double mean_l0 = 0.0;
  double dead_fraction = 0.0;
};

struct SaeTrainResult {
  SparseAutoencoder sae;
  SaeTrainReport report;
};

// ‖x − x̂‖² + α‖c‖₁ for one input.
double sae_loss(const SparseAutoencoder& sae, std::span<const double> x, double l1_coef);
// Parameter gradients of sae_loss, accumulated into grad (same shapes as sae).
void sae_loss_gradient(const SparseAutoencoder& sae, std::span<const double> x, double l1_coef,
                       SparseAutoencoder& grad);
// Rescales decoder columns to unit norm, folding each norm into the encoder row
// and bias so that decode(encode(x)) is unchanged.
void normalize_decoder(SparseAutoencoder& sae);

SaeTrainResult train_sae(const Matrix& activations, const SaeConfig& config);

}  // namespace sage
