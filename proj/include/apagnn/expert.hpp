#pragma once

// One expert: a single Chebyshev graph convolution, a linear classifier head
// over the flattened feature map, and a gradient-weighted channel attention
// map that decides which nodes the next expert keeps.

#include <vector>

#include "apagnn/graph.hpp"
#include "apagnn/tensor.hpp"

namespace apagnn {

// Sizes shared by all experts: channels, bands, filters, Chebyshev order, classes.
struct ModelShape {
  int channels = 0;
  int bands = 0;
  int filters = 32;
  int order = 3;
  int classes = 3;
};

struct ExpertParams {
  Matrix cheb_weights;  // (K*F) x D
  Matrix head_weights;  // (C*D) x E
  Matrix head_bias;     // 1 x E
};

// Expert parameters registered on a tape.
struct ExpertVars {
  Var cheb_weights;
  Var head_weights;
  Var head_bias;
};

struct ExpertForward {
  Var features;  // H, C x D
  Var logits;    // 1 x E
  Var probs;     // 1 x E
};

struct ExpertAttention {
  Var importance;  // I, 1 x C
  Var normalized;  // I~, 1 x C in [0,1]
  Var masked;      // Phi = I~ on kept channels, 0 elsewhere
  KeepMask keep;
};

// Plain-value view of one expert's results for reporting and export.
struct ExpertOutput {
  Matrix features;
  Matrix logits;
  Matrix probs;
  Eigen::VectorXd importance;
  Eigen::VectorXd normalized;
  Eigen::VectorXd masked;
  KeepMask keep;
};

ExpertVars bind(Tape& tape, const ExpertParams& params, const std::string& prefix);

// Masks X and prunes A with keep_in, recomputes the scaled Laplacian, then
// H = ReLU([X_0 .. X_{K-1}] Theta), z = flatten(H) W + b, S = softmax(z).
ExpertForward expert_forward(Tape& tape, const EegGraph& graph, const KeepMask& keep_in,
                             const ExpertVars& params, int order);

// -log(max(S[label], 1e-12)).
Var expert_loss(const Var& probs, int label);

// alpha_d = (1/C) sum_c dS^target/dH_{c,d}, with the derivative taken in closed
// form through the head and zeroed where H is not positive. Built from taped
// operations so that losses on the attention map differentiate through it.
Var gradcam_alpha(const Var& probs, const Var& head_weights, const Var& features, int target);

// I_c = ReLU(sum_d alpha_d H_{c,d}) as a 1 x C row.
Var channel_importance(const Var& features, const Var& alpha);

// Min-max scaling to [0,1]; a range below 1e-12 yields all ones.
Var normalize_attention(const Var& importance);

struct ThresholdResult {
  KeepMask keep;
  Var masked;
};

// keep_c = [I~_c >= eta]; the mask is a constant for differentiation.
ThresholdResult threshold_mask(const Var& normalized, double eta);

ExpertAttention expert_attention(const ExpertForward& forward, const ExpertVars& params, int target,
                                 double eta);

ExpertOutput snapshot(const ExpertForward& forward, const ExpertAttention& attention);

int argmax(const Matrix& row);

}  // namespace apagnn
