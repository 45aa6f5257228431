#pragma once

// Progressive multi-expert classifier.
//
// Expert 1 sees the whole electrode graph. Its thresholded attention decides
// which nodes expert 2 keeps, and expert 2's attention does the same for
// expert 3. A per-sample gate mixes the experts' feature maps, and a final
// linear head classifies the mixture. Training minimises
//   mean_n [ CE(fused) + lambda * sum_i CE(expert_i) - beta * JS(Phi'_1, Phi'_2) ]
// where Phi'_i is the channel softmax of expert i's masked attention map.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apagnn/data.hpp"
#include "apagnn/expert.hpp"
#include "apagnn/graph.hpp"
#include "apagnn/tensor.hpp"

namespace apagnn {

enum class AttentionMode { Dynamic, Static };

// Maximize: the diversity term enters the minimised loss as -beta * JS.
// Literal: +beta * JS.
enum class DiversitySign { Maximize, Literal };

struct TrainConfig {
  int K = 3;
  int D = 32;
  double eta = 0.5;
  int E = 3;
  double lr = 1e-3;
  int batch_size = 64;
  int epochs = 100;
  double lambda = 1.0;
  double beta = 0.1;
  DiversitySign diversity_sign = DiversitySign::Maximize;
  int expert_count = 3;
  AttentionMode attention_mode = AttentionMode::Dynamic;
  // Channel names kept after expert 1 / expert 2 in static mode.
  std::vector<std::string> static_channels_1;
  std::vector<std::string> static_channels_2;
  std::uint64_t seed = 42;
  AdjacencyRule adjacency = AdjacencyRule::knn(4);
  bool standardize = true;

  void validate() const;
};

struct Parameter {
  std::string name;
  Matrix value;
  Matrix m;  // Adam first moment
  Matrix v;  // Adam second moment
};

// All learnable tensors plus optimizer state. Parameter order is fixed:
// expert{1,2,3}.{cheb_weights,head_weights,head_bias}, gate.weights,
// gate.bias, final.weights, final.bias.
struct ModelState {
  ModelShape shape;
  int expert_count = 3;
  std::vector<Parameter> params;
  std::int64_t step = 0;

  static ModelState init(const ModelShape& shape, int expert_count, std::uint64_t seed);

  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  ExpertParams expert(int index) const;
};

struct ModelVars {
  std::array<ExpertVars, 3> experts;
  Var gate_weights;  // (n*D) x n, n = expert_count
  Var gate_bias;     // 1 x n
  Var final_weights; // (C*D) x E
  Var final_bias;    // 1 x E
};

ModelVars bind(Tape& tape, const ModelState& state);

// Keep masks applied after expert 1 and expert 2 in static attention mode.
struct StaticMasks {
  KeepMask after_first;
  KeepMask after_second;
};

StaticMasks resolve_static_masks(const TrainConfig& cfg, const std::vector<std::string>& channels);

struct FusionResult {
  Var weights;  // xi, 1 x n
  Var fused;    // H_o, C x D
};

// Column-mean pooling of each map, concatenation, affine map, softmax.
FusionResult fuse(std::span<const Var> features, const Var& gate_weights, const Var& gate_bias);

struct ProgressiveResult {
  std::vector<ExpertForward> experts;
  std::vector<ExpertAttention> attention;
  std::vector<int> targets;
  FusionResult fusion;
  Var logits;
  Var probs;
};

// `target` is the class used for every expert's attention; when empty each
// expert attends to its own predicted class.
ProgressiveResult progressive_forward(Tape& tape, const ModelVars& vars, const EegGraph& graph,
                                      const TrainConfig& cfg, std::optional<int> target,
                                      const StaticMasks* static_masks = nullptr);

// JS divergence of two probability rows (KL terms use log(max(., 1e-12))).
Var js_divergence(const Var& p, const Var& q);

// Channel softmax of both attention maps, then their JS divergence.
Var diversity_loss(const Var& phi_first, const Var& phi_second);

struct SampleLosses {
  Var fused;                 // L_c
  std::vector<Var> experts;  // L_e per active expert
  Var diversity;             // L_d
};

SampleLosses sample_losses(const ProgressiveResult& forward, int label);

Var total_loss(std::span<const SampleLosses> batch, const TrainConfig& cfg);

// Adam (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected). `grads` is
// matched to state.params by name.
void adam_step(ModelState& state, std::span<const std::pair<std::string, Matrix>> grads, double lr);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double mean_js = 0.0;
};

struct Prediction {
  std::size_t index = 0;
  int label = 0;
  int predicted = 0;
  std::string subject;
  Matrix probs;
};

struct Evaluation {
  double accuracy = 0.0;
  Eigen::MatrixXi confusion;  // rows: true class, cols: predicted class
  std::vector<Prediction> predictions;
  double mean_js = 0.0;
  std::map<std::string, double> subject_accuracy;
};

struct TrainResult {
  ModelState state;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Samples are used as given (standardise beforehand). `test` may be empty, in
// which case test accuracy is reported as 0.
TrainResult train(std::span<const Sample> train_set, std::span<const Sample> test_set,
                  const Matrix& adjacency, const std::vector<std::string>& channels,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Inference: each expert attends to its own predicted class. `threads` > 1
// splits samples across worker threads; results do not depend on it.
Evaluation evaluate(std::span<const Sample> samples, const ModelState& state, const Matrix& adjacency,
                    const std::vector<std::string>& channels, const TrainConfig& cfg, int threads = 1);

// Forward pass in inference mode returning value snapshots for export.
struct SampleInspection {
  std::vector<ExpertOutput> experts;
  Eigen::VectorXd gate;
  Matrix fused;
  Matrix probs;
  int predicted = 0;
};

SampleInspection inspect(const Sample& sample, const ModelState& state, const Matrix& adjacency,
                         const std::vector<std::string>& channels, const TrainConfig& cfg);

}  // namespace apagnn
