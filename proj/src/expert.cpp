#include "apagnn/expert.hpp"

#include <cmath>

#include <fmt/format.h>

namespace apagnn {

ExpertVars bind(Tape& tape, const ExpertParams& params, const std::string& prefix) {
  return {tape.parameter(params.cheb_weights, prefix + ".cheb_weights"),
          tape.parameter(params.head_weights, prefix + ".head_weights"),
          tape.parameter(params.head_bias, prefix + ".head_bias")};
}

ExpertForward expert_forward(Tape& tape, const EegGraph& graph, const KeepMask& keep_in,
                             const ExpertVars& params, int order) {
  const Eigen::Index c = graph.channel_count();
  const Eigen::Index f = graph.band_count();
  if (keep_in.size() != c) throw ShapeError("keep mask length differs from channel count");
  if (params.cheb_weights.rows() != order * f)
    throw ShapeError(fmt::format("Chebyshev weights have {} rows, expected K*F = {}",
                                 params.cheb_weights.rows(), order * f));
  const Eigen::Index d = params.cheb_weights.cols();
  if (params.head_weights.rows() != c * d)
    throw ShapeError(fmt::format("head weights have {} rows, expected C*D = {}",
                                 params.head_weights.rows(), c * d));
  if (params.head_bias.rows() != 1 || params.head_bias.cols() != params.head_weights.cols())
    throw ShapeError("head bias must be 1 x E");

  const Matrix x = mask_rows(graph.features, keep_in);
  const Matrix a = prune_graph(graph.adjacency, keep_in);
  const Var basis = tape.constant(chebyshev_features(x, scaled_laplacian(a), order));

  const Var h = relu(matmul(basis, params.cheb_weights));
  const Var z = add(matmul(reshape(h, 1, c * d), params.head_weights), params.head_bias);
  return {h, z, softmax_row(z)};
}

Var expert_loss(const Var& probs, int label) {
  if (label < 0 || label >= probs.cols())
    throw ContractError(fmt::format("label {} outside [0, {})", label, probs.cols()));
  return scale(log_clamped(select(probs, 0, label)), -1.0);
}

Var gradcam_alpha(const Var& probs, const Var& head_weights, const Var& features, int target) {
  Tape& tape = *probs.tape();
  const Eigen::Index e = probs.cols();
  if (target < 0 || target >= e)
    throw ContractError(fmt::format("attention target {} outside [0, {})", target, e));
  const Eigen::Index c = features.rows();
  const Eigen::Index d = features.cols();

  // dS^l/dz_e = S^l (delta_{l,e} - S^e)
  Matrix onehot = Matrix::Zero(1, e);
  onehot(0, target) = 1.0;
  const Var s_target = broadcast(select(probs, 0, target), 1, e);
  const Var dsdz = mul(s_target, sub(tape.constant(onehot), probs));

  // dS^l/dH = reshape(W dS/dz^T), restricted to active ReLU units.
  const Var dsdh = reshape(matmul(head_weights, transpose(dsdz)), c, d);
  const Matrix active = (features.value().array() > 0.0).cast<double>().matrix();
  return mean(mul(dsdh, tape.constant(active)), Axis::Rows);
}

Var channel_importance(const Var& features, const Var& alpha) {
  if (alpha.rows() != 1 || alpha.cols() != features.cols())
    throw ShapeError("alpha must be 1 x D");
  return transpose(relu(matmul(features, transpose(alpha))));
}

Var normalize_attention(const Var& importance) {
  const Var lo = min_all(importance);
  const Var hi = max_all(importance);
  const double range = hi.item() - lo.item();
  if (range < 1e-12)
    return importance.tape()->constant(Matrix::Ones(importance.rows(), importance.cols()));
  const Var shifted = sub(importance, broadcast(lo, importance.rows(), importance.cols()));
  const Var inv = reciprocal(sub(hi, lo));
  return mul(shifted, broadcast(inv, importance.rows(), importance.cols()));
}

ThresholdResult threshold_mask(const Var& normalized, double eta) {
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError(fmt::format("eta must lie in (0,1), got {}", eta));
  Tape& tape = *normalized.tape();
  const Matrix& v = normalized.value();
  KeepMask keep(v.size());
  Matrix weights(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    keep(i) = v.data()[i] >= eta;
    weights.data()[i] = keep(i) ? 1.0 : 0.0;
    tape.note_kink(std::abs(v.data()[i] - eta));
  }
  return {std::move(keep), mul(normalized, tape.constant(weights))};
}

ExpertAttention expert_attention(const ExpertForward& forward, const ExpertVars& params, int target,
                                 double eta) {
  const Var alpha = gradcam_alpha(forward.probs, params.head_weights, forward.features, target);
  const Var importance = channel_importance(forward.features, alpha);
  const Var normalized = normalize_attention(importance);
  auto [keep, masked] = threshold_mask(normalized, eta);
  return {importance, normalized, masked, std::move(keep)};
}

ExpertOutput snapshot(const ExpertForward& forward, const ExpertAttention& attention) {
  auto row = [](const Var& v) -> Eigen::VectorXd {
    return Eigen::Map<const Eigen::VectorXd>(v.value().data(), v.value().size());
  };
  return {forward.features.value(), forward.logits.value(), forward.probs.value(),
          row(attention.importance), row(attention.normalized), row(attention.masked), attention.keep};
}

int argmax(const Matrix& row) {
  Eigen::Index r = 0;
  Eigen::Index c = 0;
  row.maxCoeff(&r, &c);
  return static_cast<int>(c);
}

}  // namespace apagnn
