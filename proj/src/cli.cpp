#include "apagnn/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <variant>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "apagnn/checkpoint.hpp"
#include "apagnn/config.hpp"
#include "apagnn/data.hpp"
#include "apagnn/pipeline.hpp"

#ifndef APAGNN_DATA_DIR
#define APAGNN_DATA_DIR "data"
#endif

namespace apagnn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TrainOptions {
  std::string config;
  std::string data;
  std::string out;
  std::optional<int> experts;
  std::optional<double> beta;
  std::optional<double> lambda;
  std::optional<double> eta;
  std::optional<std::string> attention;
  bool channels_v1 = false;
  bool channels_v2 = false;
  std::string channels_dir = APAGNN_DATA_DIR;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  int threads = 1;
  bool quiet = false;
};

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  int threads = 1;
  bool features = false;
};

struct SynthOptions {
  std::string out;
  SynthParams params;
  std::string format = "csv";
};

void write_json(const json& doc, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError(fmt::format("cannot write {}", path.string()));
  out << doc.dump(2) << '\n';
}

json matrix_rows(const Eigen::MatrixXi& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

json vec(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// Percentages as "mm.mm ± ss.ss" with zero padding to two integer digits.
std::string mean_pm_std(const std::vector<double>& values) {
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return fmt::format("{:05.2f} ± {:05.2f}", 100.0 * mean, 100.0 * std::sqrt(var));
}

TrainConfig resolve_config(const TrainOptions& o, const Dataset& ds) {
  TrainConfig cfg;
  bool explicit_e = false;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError(fmt::format("cannot open config {}", o.config));
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(fmt::format("config {}: {}", o.config, e.what()));
    }
    explicit_e = doc.is_object() && doc.contains("E");
    cfg = config_from_json(doc);
  }
  if (!explicit_e) cfg.E = ds.classes;
  if (cfg.E != ds.classes)
    throw ConfigError(fmt::format("config E = {} but the dataset has {} classes", cfg.E, ds.classes));

  if (o.experts) cfg.expert_count = *o.experts;
  if (o.beta) cfg.beta = *o.beta;
  if (o.lambda) cfg.lambda = *o.lambda;
  if (o.eta) cfg.eta = *o.eta;
  if (o.seed) cfg.seed = *o.seed;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.attention) {
    if (*o.attention == "dynamic")
      cfg.attention_mode = AttentionMode::Dynamic;
    else if (*o.attention == "static")
      cfg.attention_mode = AttentionMode::Static;
    else
      throw ConfigError(fmt::format("--attention must be dynamic or static, got '{}'", *o.attention));
  }
  if (o.channels_v1 && o.channels_v2) throw ConfigError("choose one of --channels-v1 / --channels-v2");
  const bool default_lists = cfg.attention_mode == AttentionMode::Static && cfg.static_channels_1.empty() &&
                             cfg.static_channels_2.empty();
  if (o.channels_v1 || o.channels_v2 || default_lists) {
    const fs::path dir(o.channels_dir);
    cfg.static_channels_1 = load_channel_list(dir / "static_channels_expert1.json");
    cfg.static_channels_2 = load_channel_list(
        dir / (!o.channels_v2 ? "static_channels_expert2_v1.json" : "static_channels_expert2_v2.json"));
  }
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  const auto started = std::chrono::steady_clock::now();
  Dataset ds;
  try {
    ds = load_manifest(o.data);
  } catch (const LoadError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  const TrainConfig cfg = resolve_config(o, ds);
  if (ds.split.train_trials.empty()) {
    err << "data error: manifest has no train/test split\n";
    return kExitData;
  }
  SplitResult parts;
  try {
    parts = split(ds, ds.split);
  } catch (const ConfigError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  std::optional<Standardizer> standardizer;
  if (cfg.standardize) {
    standardizer = Standardizer::fit(parts.train);
    standardizer->apply(parts.train);
    standardizer->apply(parts.test);
  }
  const Matrix adjacency = build_adjacency(ds.montage, cfg.adjacency);

  const auto result = train(parts.train, parts.test, adjacency, ds.channels, cfg, [&](const EpochRecord& r) {
    if (!o.quiet)
      err << fmt::format("epoch {:>4}/{}  loss {:.5f}  train_acc {:.4f}  test_acc {:.4f}  js {:.3e}\n",
                         r.epoch, cfg.epochs, r.train_loss, r.train_acc, r.test_acc, r.mean_js);
  });
  const auto& final_split = parts.test.empty() ? parts.train : parts.test;
  const Evaluation ev = evaluate(final_split, result.state, adjacency, ds.channels, cfg, o.threads);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  const fs::path dir(o.out);
  fs::create_directories(dir);
  save_checkpoint({cfg, result.state, ds.channels, ds.montage, standardizer}, dir / "checkpoint.json");

  json epochs = json::array();
  std::ofstream csv(dir / "metrics.csv");
  csv << "epoch,train_loss,train_acc,test_acc,mean_js\n";
  for (const auto& r : result.history) {
    epochs.push_back({{"epoch", r.epoch},
                      {"train_loss", r.train_loss},
                      {"train_acc", r.train_acc},
                      {"test_acc", r.test_acc},
                      {"mean_js", r.mean_js}});
    csv << fmt::format("{},{},{},{},{}\n", r.epoch, r.train_loss, r.train_acc, r.test_acc, r.mean_js);
  }
  json report = {
      {"config", to_json(cfg)},
      {"seed", cfg.seed},
      {"epochs", epochs},
      {"final_accuracy", ev.accuracy},
      {"final_split", parts.test.empty() ? "train" : "test"},
      {"confusion", matrix_rows(ev.confusion)},
      {"test_mean_js", ev.mean_js},
      {"samples", {{"train", parts.train.size()}, {"test", parts.test.size()}}},
      {"wall_clock_seconds", seconds},
  };
  write_json(report, dir / "report.json");
  out << fmt::format("accuracy {:.4f} on {} {} samples; wrote {}\n", ev.accuracy, final_split.size(),
                     parts.test.empty() ? "train" : "test", dir.string());
  return kExitOk;
}

struct LoadedEval {
  Checkpoint checkpoint;
  Dataset dataset;
  std::vector<Sample> samples;
  Matrix adjacency;
};

// Returns an exit code on failure.
std::variant<LoadedEval, int> load_for_eval(const EvalOptions& o, std::ostream& err) {
  LoadedEval le;
  try {
    le.checkpoint = load_checkpoint(o.checkpoint);
    le.dataset = load_manifest(o.data);
  } catch (const LoadError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  try {
    check_compatible(le.checkpoint, le.dataset);
  } catch (const ShapeError& e) {
    err << "shape mismatch: " << e.what() << '\n';
    return kExitShape;
  }
  if (o.split == "all") {
    le.samples = le.dataset.samples;
  } else if (o.split == "train" || o.split == "test") {
    if (le.dataset.split.train_trials.empty() && le.dataset.split.test_trials.empty()) {
      le.samples = le.dataset.samples;
    } else {
      auto parts = split(le.dataset, le.dataset.split);
      le.samples = o.split == "train" ? std::move(parts.train) : std::move(parts.test);
    }
  } else {
    throw ConfigError(fmt::format("--split must be train, test or all, got '{}'", o.split));
  }
  if (le.samples.empty()) {
    err << "data error: selected split is empty\n";
    return kExitData;
  }
  if (le.checkpoint.standardizer) le.checkpoint.standardizer->apply(le.samples);
  le.adjacency = build_adjacency(le.checkpoint.montage, le.checkpoint.config.adjacency);
  return le;
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  auto loaded = load_for_eval(o, err);
  if (auto* code = std::get_if<int>(&loaded)) return *code;
  const auto& le = std::get<LoadedEval>(loaded);
  const auto& ck = le.checkpoint;
  const Evaluation ev = evaluate(le.samples, ck.state, le.adjacency, ck.channels, ck.config, o.threads);

  const fs::path dir(o.out);
  fs::create_directories(dir);
  std::ofstream csv(dir / "predictions.csv");
  csv << "index,subject,trial,label,predicted";
  for (int e = 0; e < ck.state.shape.classes; ++e) csv << ",p" << e;
  csv << '\n';
  for (const auto& p : ev.predictions) {
    csv << fmt::format("{},{},{},{},{}", p.index, p.subject, le.samples[p.index].trial, p.label, p.predicted);
    for (Eigen::Index e = 0; e < p.probs.cols(); ++e) csv << fmt::format(",{}", p.probs(0, e));
    csv << '\n';
  }

  std::vector<double> accs;
  json subjects = json::object();
  for (const auto& [s, a] : ev.subject_accuracy) {
    subjects[s] = a;
    accs.push_back(a);
  }
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= static_cast<double>(accs.size());
  double var = 0.0;
  for (double a : accs) var += (a - mean) * (a - mean);
  var /= static_cast<double>(accs.size());
  json metrics = {
      {"accuracy", ev.accuracy},
      {"count", le.samples.size()},
      {"split", o.split},
      {"confusion", matrix_rows(ev.confusion)},
      {"mean_js", ev.mean_js},
      {"subjects", subjects},
      {"aggregate", {{"mean", mean}, {"std", std::sqrt(var)}, {"formatted", mean_pm_std(accs)}}},
  };
  write_json(metrics, dir / "metrics.json");
  out << fmt::format("accuracy {:.4f} over {} samples; per-subject {}\n", ev.accuracy, le.samples.size(),
                     mean_pm_std(accs));
  return kExitOk;
}

int cmd_attn_export(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  auto loaded = load_for_eval(o, err);
  if (auto* code = std::get_if<int>(&loaded)) return *code;
  const auto& le = std::get<LoadedEval>(loaded);
  const auto& ck = le.checkpoint;

  json montage = json::array();
  for (const auto& e : ck.montage) montage.push_back({{"name", e.name}, {"x", e.x}, {"y", e.y}});
  json samples = json::array();
  std::ofstream features;
  const fs::path dir(o.out);
  fs::create_directories(dir);
  if (o.features) {
    features.open(dir / "features.csv");
    features << "index,label,stage,values\n";
  }
  auto dump_features = [&](std::size_t index, int label, int stage, const Matrix& m) {
    features << index << ',' << label << ',' << stage;
    for (Eigen::Index i = 0; i < m.size(); ++i) features << fmt::format(",{}", m.data()[i]);
    features << '\n';
  };

  for (std::size_t i = 0; i < le.samples.size(); ++i) {
    const Sample& s = le.samples[i];
    const SampleInspection ins = inspect(s, ck.state, le.adjacency, ck.channels, ck.config);
    json experts = json::array();
    for (const auto& e : ins.experts) {
      std::vector<int> keep(static_cast<std::size_t>(e.keep.size()));
      for (Eigen::Index c = 0; c < e.keep.size(); ++c) keep[c] = e.keep(c) ? 1 : 0;
      experts.push_back({{"importance", vec(e.importance)},
                         {"normalized", vec(e.normalized)},
                         {"masked", vec(e.masked)},
                         {"keep_mask", keep}});
    }
    samples.push_back({{"index", i},
                       {"subject", s.subject},
                       {"trial", s.trial},
                       {"label", s.label},
                       {"predicted", ins.predicted},
                       {"gate", vec(ins.gate)},
                       {"experts", experts}});
    if (o.features) {
      dump_features(i, s.label, 0, s.features);
      for (std::size_t e = 0; e < ins.experts.size(); ++e)
        dump_features(i, s.label, static_cast<int>(e + 1), ins.experts[e].features);
    }
  }
  write_json({{"channels", ck.channels}, {"montage", montage}, {"samples", samples}}, dir / "attention.json");
  out << fmt::format("exported attention for {} samples to {}\n", le.samples.size(), dir.string());
  return kExitOk;
}

int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err) {
  FeatureFormat format;
  if (o.format == "csv")
    format = FeatureFormat::Csv;
  else if (o.format == "bin")
    format = FeatureFormat::Binary;
  else
    throw ConfigError(fmt::format("--format must be csv or bin, got '{}'", o.format));
  const SynthResult r = synth_generate(o.params);
  for (const auto& w : r.warnings) err << "warning: " << w << '\n';
  write_dataset(r.dataset, o.out, format);
  json planted = r.planted;
  write_json({{"planted_channels", planted}, {"snr", o.params.snr}, {"seed", o.params.seed}},
             fs::path(o.out) / "synth.json");
  out << fmt::format("wrote {} samples to {}\n", r.dataset.samples.size(), o.out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Progressive multi-expert graph classifier for EEG features", "apagnn"};
  app.require_subcommand(1);

  TrainOptions train_o;
  auto* train_cmd = app.add_subcommand("train", "train a model and write report, metrics and checkpoint");
  train_cmd->add_option("--config", train_o.config, "JSON config (keys mirror TrainConfig)");
  train_cmd->add_option("--data", train_o.data, "dataset directory or manifest")->required();
  train_cmd->add_option("--out", train_o.out, "output directory")->required();
  train_cmd->add_option("--experts", train_o.experts, "number of experts (2 or 3)");
  train_cmd->add_option("--beta", train_o.beta, "diversity weight");
  train_cmd->add_option("--lambda", train_o.lambda, "expert-loss weight");
  train_cmd->add_option("--eta", train_o.eta, "node-pruning threshold in (0,1)");
  train_cmd->add_option("--attention", train_o.attention, "dynamic or static");
  train_cmd->add_flag("--channels-v1", train_o.channels_v1, "static lists: temporal/parietal set for expert 2");
  train_cmd->add_flag("--channels-v2", train_o.channels_v2, "static lists: frontal/occipital set for expert 2");
  train_cmd->add_option("--channels-dir", train_o.channels_dir, "directory holding static channel lists");
  train_cmd->add_option("--seed", train_o.seed, "random seed");
  train_cmd->add_option("--epochs", train_o.epochs, "override epoch count");
  train_cmd->add_option("--threads", train_o.threads, "evaluation worker threads");
  train_cmd->add_flag("--quiet", train_o.quiet, "suppress per-epoch log lines");

  EvalOptions eval_o;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  EvalOptions attn_o;
  auto* attn_cmd = app.add_subcommand("attn-export", "export per-sample attention maps");
  for (auto [cmd, opts] : {std::pair{eval_cmd, &eval_o}, std::pair{attn_cmd, &attn_o}}) {
    cmd->add_option("--checkpoint", opts->checkpoint, "checkpoint.json from train")->required();
    cmd->add_option("--data", opts->data, "dataset directory or manifest")->required();
    cmd->add_option("--out", opts->out, "output directory")->required();
    cmd->add_option("--split", opts->split, "train, test or all")->capture_default_str();
    cmd->add_option("--threads", opts->threads, "worker threads");
  }
  attn_cmd->add_flag("--features", attn_o.features, "also write per-expert feature maps (features.csv)");

  SynthOptions synth_o;
  auto* synth_cmd = app.add_subcommand("synth", "generate a planted-signal synthetic dataset");
  auto& sp = synth_o.params;
  synth_cmd->add_option("--out", synth_o.out, "output directory")->required();
  synth_cmd->add_option("--seed", sp.seed)->capture_default_str();
  synth_cmd->add_option("--snr", sp.snr, "norm of the planted mean vector")->capture_default_str();
  synth_cmd->add_option("--channels", sp.channels)->capture_default_str();
  synth_cmd->add_option("--bands", sp.bands)->capture_default_str();
  synth_cmd->add_option("--classes", sp.classes)->capture_default_str();
  synth_cmd->add_option("--per-class", sp.per_class, "samples per class and subject")->capture_default_str();
  synth_cmd->add_option("--planted", sp.planted_count, "planted channels per class")->capture_default_str();
  synth_cmd->add_option("--trials", sp.trials)->capture_default_str();
  synth_cmd->add_option("--train-trials", sp.train_trials)->capture_default_str();
  synth_cmd->add_option("--subjects", sp.subjects)->capture_default_str();
  synth_cmd->add_option("--format", synth_o.format, "csv or bin")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_o, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval_o, out, err);
    if (attn_cmd->parsed()) return cmd_attn_export(attn_o, out, err);
    if (synth_cmd->parsed()) return cmd_synth(synth_o, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const LoadError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    err << "shape mismatch: " << e.what() << '\n';
    return kExitShape;
  } catch (const TrainingError& e) {
    err << "training error: " << e.what() << '\n';
    return kExitTraining;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace apagnn
