#include "apagnn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_map>

#include <fmt/format.h>

namespace apagnn {

void TrainConfig::validate() const {
  if (K < 1) throw ConfigError("K must be >= 1");
  if (D < 1) throw ConfigError("D must be >= 1");
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError(fmt::format("eta must lie in (0,1), got {}", eta));
  if (E < 1) throw ConfigError("E must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!std::isfinite(lambda) || lambda < 0.0) throw ConfigError("lambda must be finite and >= 0");
  if (!std::isfinite(beta) || beta < 0.0) throw ConfigError("beta must be finite and >= 0");
  if (expert_count != 2 && expert_count != 3) throw ConfigError("expert_count must be 2 or 3");
  if (attention_mode == AttentionMode::Static &&
      (static_channels_1.empty() || static_channels_2.empty()))
    throw ConfigError("static attention needs both channel lists");
  if (adjacency.kind == AdjacencyRule::Kind::Knn && adjacency.k < 1)
    throw ConfigError("adjacency k must be >= 1");
  if (adjacency.kind == AdjacencyRule::Kind::Radius && !(adjacency.radius > 0.0))
    throw ConfigError("adjacency radius must be > 0");
}

namespace {

const char* kExpertNames[3] = {"expert1", "expert2", "expert3"};

Matrix glorot(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void add_param(ModelState& s, std::string name, Matrix value) {
  const auto r = value.rows();
  const auto c = value.cols();
  s.params.push_back({std::move(name), std::move(value), Matrix::Zero(r, c), Matrix::Zero(r, c)});
}

KeepMask all_kept(Eigen::Index n) { return KeepMask::Constant(n, true); }

Matrix mask_row(const KeepMask& keep) {
  Matrix m(1, keep.size());
  for (Eigen::Index i = 0; i < keep.size(); ++i) m(0, i) = keep(i) ? 1.0 : 0.0;
  return m;
}

}  // namespace

ModelState ModelState::init(const ModelShape& shape, int expert_count, std::uint64_t seed) {
  if (shape.channels < 1 || shape.bands < 1 || shape.filters < 1 || shape.order < 1 || shape.classes < 1)
    throw ConfigError("model shape entries must be positive");
  if (expert_count != 2 && expert_count != 3) throw ConfigError("expert_count must be 2 or 3");
  ModelState s;
  s.shape = shape;
  s.expert_count = expert_count;
  std::mt19937_64 rng(seed);
  const Eigen::Index cd = static_cast<Eigen::Index>(shape.channels) * shape.filters;
  for (const char* name : kExpertNames) {
    const std::string p(name);
    add_param(s, p + ".cheb_weights", glorot(shape.order * shape.bands, shape.filters, rng));
    add_param(s, p + ".head_weights", glorot(cd, shape.classes, rng));
    add_param(s, p + ".head_bias", Matrix::Zero(1, shape.classes));
  }
  add_param(s, "gate.weights", glorot(expert_count * shape.filters, expert_count, rng));
  add_param(s, "gate.bias", Matrix::Zero(1, expert_count));
  add_param(s, "final.weights", glorot(cd, shape.classes, rng));
  add_param(s, "final.bias", Matrix::Zero(1, shape.classes));
  return s;
}

Parameter& ModelState::at(const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return p;
  throw ContractError(fmt::format("unknown parameter '{}'", name));
}

const Parameter& ModelState::at(const std::string& name) const {
  return const_cast<ModelState*>(this)->at(name);
}

ExpertParams ModelState::expert(int index) const {
  const std::string p(kExpertNames[index]);
  return {at(p + ".cheb_weights").value, at(p + ".head_weights").value, at(p + ".head_bias").value};
}

ModelVars bind(Tape& tape, const ModelState& state) {
  ModelVars v;
  for (int i = 0; i < 3; ++i) v.experts[i] = bind(tape, state.expert(i), kExpertNames[i]);
  v.gate_weights = tape.parameter(state.at("gate.weights").value, "gate.weights");
  v.gate_bias = tape.parameter(state.at("gate.bias").value, "gate.bias");
  v.final_weights = tape.parameter(state.at("final.weights").value, "final.weights");
  v.final_bias = tape.parameter(state.at("final.bias").value, "final.bias");
  return v;
}

StaticMasks resolve_static_masks(const TrainConfig& cfg, const std::vector<std::string>& channels) {
  auto build = [&](const std::vector<std::string>& names, const char* which) {
    KeepMask keep = KeepMask::Constant(static_cast<Eigen::Index>(channels.size()), false);
    for (const auto& name : names) {
      auto it = std::find_if(channels.begin(), channels.end(), [&](const std::string& c) {
        return std::equal(c.begin(), c.end(), name.begin(), name.end(),
                          [](char a, char b) { return std::toupper(a) == std::toupper(b); });
      });
      if (it == channels.end())
        throw ConfigError(fmt::format("static channel '{}' ({}) is not in the dataset", name, which));
      keep(it - channels.begin()) = true;
    }
    return keep;
  };
  return {build(cfg.static_channels_1, "expert 1 list"), build(cfg.static_channels_2, "expert 2 list")};
}

FusionResult fuse(std::span<const Var> features, const Var& gate_weights, const Var& gate_bias) {
  if (features.empty()) throw ShapeError("fusion needs at least one feature map");
  const Eigen::Index c = features.front().rows();
  const Eigen::Index d = features.front().cols();
  std::vector<Var> pooled;
  for (const Var& h : features) {
    if (h.rows() != c || h.cols() != d) throw ShapeError("expert feature maps differ in shape");
    pooled.push_back(mean(h, Axis::Rows));
  }
  const Var gate_in = concat_cols(std::span<const Var>(pooled));
  if (gate_weights.rows() != gate_in.cols() ||
      gate_weights.cols() != static_cast<Eigen::Index>(features.size()))
    throw ShapeError(fmt::format("gate weights are {}x{}, expected {}x{}", gate_weights.rows(),
                                 gate_weights.cols(), gate_in.cols(), features.size()));
  const Var xi = softmax_row(add(matmul(gate_in, gate_weights), gate_bias));

  Var fused;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Var term = mul(features[i], broadcast(select(xi, 0, static_cast<Eigen::Index>(i)), c, d));
    fused = i == 0 ? term : add(fused, term);
  }
  return {xi, fused};
}

ProgressiveResult progressive_forward(Tape& tape, const ModelVars& vars, const EegGraph& graph,
                                      const TrainConfig& cfg, std::optional<int> target,
                                      const StaticMasks* static_masks) {
  const Eigen::Index c = graph.channel_count();
  if (cfg.attention_mode == AttentionMode::Static && static_masks == nullptr)
    throw ContractError("static attention mode needs resolved channel masks");

  ProgressiveResult out;
  KeepMask keep = all_kept(c);
  for (int i = 0; i < cfg.expert_count; ++i) {
    ExpertForward fwd = expert_forward(tape, graph, keep, vars.experts[i], cfg.K);
    const int tgt = target ? *target : argmax(fwd.probs.value());
    ExpertAttention att;
    if (cfg.attention_mode == AttentionMode::Static) {
      const KeepMask next = i == 0   ? static_masks->after_first
                            : i == 1 ? static_masks->after_second
                                     : all_kept(c);
      const Var phi = tape.constant(mask_row(next));
      att = {phi, phi, phi, next};
    } else {
      att = expert_attention(fwd, vars.experts[i], tgt, cfg.eta);
    }
    keep = att.keep;
    out.experts.push_back(fwd);
    out.attention.push_back(std::move(att));
    out.targets.push_back(tgt);
  }

  std::vector<Var> maps;
  for (const auto& e : out.experts) maps.push_back(e.features);
  out.fusion = fuse(maps, vars.gate_weights, vars.gate_bias);
  const Eigen::Index d = out.fusion.fused.cols();
  out.logits = add(matmul(reshape(out.fusion.fused, 1, c * d), vars.final_weights), vars.final_bias);
  out.probs = softmax_row(out.logits);
  return out;
}

Var js_divergence(const Var& p, const Var& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw ShapeError("JS operands differ in shape");
  const Var m = scale(add(p, q), 0.5);
  const Var log_m = log_clamped(m);
  const Var kl_p = sum(mul(p, sub(log_clamped(p), log_m)));
  const Var kl_q = sum(mul(q, sub(log_clamped(q), log_m)));
  return scale(add(kl_p, kl_q), 0.5);
}

Var diversity_loss(const Var& phi_first, const Var& phi_second) {
  return js_divergence(softmax_row(phi_first), softmax_row(phi_second));
}

SampleLosses sample_losses(const ProgressiveResult& forward, int label) {
  SampleLosses out;
  out.fused = expert_loss(forward.probs, label);
  for (const auto& e : forward.experts) out.experts.push_back(expert_loss(e.probs, label));
  if (forward.attention.size() >= 2)
    out.diversity = diversity_loss(forward.attention[0].masked, forward.attention[1].masked);
  return out;
}

Var total_loss(std::span<const SampleLosses> batch, const TrainConfig& cfg) {
  if (batch.empty()) throw ContractError("total_loss on an empty batch");
  const double sign = cfg.diversity_sign == DiversitySign::Maximize ? -1.0 : 1.0;
  Var acc;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const SampleLosses& s = batch[n];
    Var term = s.fused;
    if (cfg.lambda != 0.0 && !s.experts.empty()) {
      Var experts = s.experts.front();
      for (std::size_t i = 1; i < s.experts.size(); ++i) experts = add(experts, s.experts[i]);
      term = add(term, scale(experts, cfg.lambda));
    }
    if (cfg.beta != 0.0 && s.diversity.valid()) term = add(term, scale(s.diversity, sign * cfg.beta));
    acc = n == 0 ? term : add(acc, term);
  }
  return scale(acc, 1.0 / static_cast<double>(batch.size()));
}

void adam_step(ModelState& state, std::span<const std::pair<std::string, Matrix>> grads, double lr) {
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  const std::int64_t step = state.step + 1;
  std::unordered_map<std::string, const Matrix*> by_name;
  for (const auto& [name, g] : grads) {
    if (!g.allFinite())
      throw TrainingError(fmt::format("non-finite gradient for '{}' at step {}", name, step));
    by_name[name] = &g;
  }
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (auto& p : state.params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) continue;
    const Matrix& g = *it->second;
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
      throw ShapeError(fmt::format("gradient for '{}' has the wrong shape", p.name));
    p.m = beta1 * p.m + (1.0 - beta1) * g;
    p.v = beta2 * p.v + (1.0 - beta2) * g.cwiseAbs2();
    p.value.array() -= lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + eps);
    if (!p.value.allFinite())
      throw TrainingError(fmt::format("parameter '{}' became non-finite at step {}", p.name, step));
  }
  state.step = step;
}

namespace {

void check_samples(std::span<const Sample> samples, const ModelShape& shape) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.features.rows() != shape.channels || s.features.cols() != shape.bands)
      throw ConfigError(fmt::format("sample {} is {}x{}, model expects {}x{}", i, s.features.rows(),
                                    s.features.cols(), shape.channels, shape.bands));
    if (s.label < 0 || s.label >= shape.classes)
      throw ConfigError(fmt::format("sample {} label {} outside [0, {})", i, s.label, shape.classes));
  }
}

std::optional<StaticMasks> masks_for(const TrainConfig& cfg, const std::vector<std::string>& channels) {
  if (cfg.attention_mode != AttentionMode::Static) return std::nullopt;
  return resolve_static_masks(cfg, channels);
}

}  // namespace

TrainResult train(std::span<const Sample> train_set, std::span<const Sample> test_set,
                  const Matrix& adjacency, const std::vector<std::string>& channels,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  const ModelShape shape{static_cast<int>(train_set.front().features.rows()),
                         static_cast<int>(train_set.front().features.cols()), cfg.D, cfg.K, cfg.E};
  check_samples(train_set, shape);
  check_samples(test_set, shape);
  if (adjacency.rows() != shape.channels) throw ConfigError("adjacency size differs from channel count");
  const auto static_masks = masks_for(cfg, channels);

  TrainResult result{ModelState::init(shape, cfg.expert_count, cfg.seed), {}};
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    double js_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Tape tape;
      const ModelVars vars = bind(tape, result.state);
      std::vector<SampleLosses> losses;
      for (std::size_t k = start; k < stop; ++k) {
        const Sample& s = train_set[order[k]];
        const EegGraph graph{s.features, adjacency, {}};
        const auto fwd = progressive_forward(tape, vars, graph, cfg, s.label,
                                             static_masks ? &*static_masks : nullptr);
        if (argmax(fwd.probs.value()) == s.label) ++correct;
        losses.push_back(sample_losses(fwd, s.label));
        js_sum += losses.back().diversity.item();
      }
      const Var loss = total_loss(losses, cfg);
      loss_sum += loss.item() * static_cast<double>(stop - start);
      tape.backward(loss);
      adam_step(result.state, tape.gradient_table(), cfg.lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const double n = static_cast<double>(train_set.size());
    rec.train_loss = loss_sum / n;
    rec.train_acc = static_cast<double>(correct) / n;
    rec.mean_js = js_sum / n;
    if (!test_set.empty())
      rec.test_acc = evaluate(test_set, result.state, adjacency, channels, cfg).accuracy;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

Evaluation evaluate(std::span<const Sample> samples, const ModelState& state, const Matrix& adjacency,
                    const std::vector<std::string>& channels, const TrainConfig& cfg, int threads) {
  check_samples(samples, state.shape);
  const auto static_masks = masks_for(cfg, channels);
  TrainConfig run_cfg = cfg;
  run_cfg.expert_count = state.expert_count;

  Evaluation ev;
  ev.predictions.resize(samples.size());
  std::vector<double> js(samples.size(), 0.0);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Tape tape;
      const ModelVars vars = bind(tape, state);
      const EegGraph graph{samples[i].features, adjacency, {}};
      const auto fwd = progressive_forward(tape, vars, graph, run_cfg, std::nullopt,
                                           static_masks ? &*static_masks : nullptr);
      js[i] = diversity_loss(fwd.attention[0].masked, fwd.attention[1].masked).item();
      ev.predictions[i] = {i, samples[i].label, argmax(fwd.probs.value()), samples[i].subject,
                           fwd.probs.value()};
    }
  };

  const std::size_t workers =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(samples.size(), 1));
  if (workers == 1) {
    work(0, samples.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (samples.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(samples.size(), begin + chunk);
      if (begin < end) pool.emplace_back(work, begin, end);
    }
  }

  const int e = state.shape.classes;
  ev.confusion = Eigen::MatrixXi::Zero(e, e);
  std::map<std::string, std::pair<int, int>> per_subject;
  std::size_t correct = 0;
  double js_sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& p = ev.predictions[i];
    ev.confusion(p.label, p.predicted) += 1;
    const bool hit = p.label == p.predicted;
    correct += hit ? 1 : 0;
    auto& [hits, total] = per_subject[p.subject];
    hits += hit ? 1 : 0;
    total += 1;
    js_sum += js[i];
  }
  if (!samples.empty()) {
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    ev.mean_js = js_sum / static_cast<double>(samples.size());
  }
  for (const auto& [subject, counts] : per_subject)
    ev.subject_accuracy[subject] = static_cast<double>(counts.first) / counts.second;
  return ev;
}

SampleInspection inspect(const Sample& sample, const ModelState& state, const Matrix& adjacency,
                         const std::vector<std::string>& channels, const TrainConfig& cfg) {
  TrainConfig run_cfg = cfg;
  run_cfg.expert_count = state.expert_count;
  const auto static_masks = masks_for(run_cfg, channels);
  Tape tape;
  const ModelVars vars = bind(tape, state);
  const EegGraph graph{sample.features, adjacency, channels};
  const auto fwd = progressive_forward(tape, vars, graph, run_cfg, std::nullopt,
                                       static_masks ? &*static_masks : nullptr);
  SampleInspection out;
  for (std::size_t i = 0; i < fwd.experts.size(); ++i)
    out.experts.push_back(snapshot(fwd.experts[i], fwd.attention[i]));
  const Matrix& xi = fwd.fusion.weights.value();
  out.gate = Eigen::Map<const Eigen::VectorXd>(xi.data(), xi.size());
  out.fused = fwd.fusion.fused.value();
  out.probs = fwd.probs.value();
  out.predicted = argmax(out.probs);
  return out;
}

}  // namespace apagnn
