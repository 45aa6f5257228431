#include "apagnn/config.hpp"

#include <fstream>
#include <set>

#include <fmt/format.h>

namespace apagnn {

using nlohmann::json;

json to_json(const TrainConfig& cfg) {
  json adj;
  if (cfg.adjacency.kind == AdjacencyRule::Kind::Knn)
    adj = {{"rule", "knn"}, {"k", cfg.adjacency.k}};
  else
    adj = {{"rule", "radius"}, {"radius", cfg.adjacency.radius}};
  return {
      {"K", cfg.K},
      {"D", cfg.D},
      {"eta", cfg.eta},
      {"E", cfg.E},
      {"lr", cfg.lr},
      {"batch_size", cfg.batch_size},
      {"epochs", cfg.epochs},
      {"lambda", cfg.lambda},
      {"beta", cfg.beta},
      {"diversity_sign", cfg.diversity_sign == DiversitySign::Maximize ? "maximize" : "literal"},
      {"expert_count", cfg.expert_count},
      {"attention_mode", cfg.attention_mode == AttentionMode::Dynamic ? "dynamic" : "static"},
      {"static_channels", {{"expert1", cfg.static_channels_1}, {"expert2", cfg.static_channels_2}}},
      {"seed", cfg.seed},
      {"adjacency", adj},
      {"standardize", cfg.standardize},
  };
}

TrainConfig config_from_json(const json& doc, TrainConfig cfg) {
  static const std::set<std::string> known = {
      "K",     "D",              "eta",          "E",              "lr",
      "batch_size", "epochs",    "lambda",       "beta",           "diversity_sign",
      "expert_count", "attention_mode", "static_channels", "seed", "adjacency",
      "standardize"};
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : doc.items())
    if (!known.contains(key)) throw ConfigError(fmt::format("unknown config key '{}'", key));

  try {
    if (doc.contains("K")) cfg.K = doc["K"].get<int>();
    if (doc.contains("D")) cfg.D = doc["D"].get<int>();
    if (doc.contains("eta")) cfg.eta = doc["eta"].get<double>();
    if (doc.contains("E")) cfg.E = doc["E"].get<int>();
    if (doc.contains("lr")) cfg.lr = doc["lr"].get<double>();
    if (doc.contains("batch_size")) cfg.batch_size = doc["batch_size"].get<int>();
    if (doc.contains("epochs")) cfg.epochs = doc["epochs"].get<int>();
    if (doc.contains("lambda")) cfg.lambda = doc["lambda"].get<double>();
    if (doc.contains("beta")) cfg.beta = doc["beta"].get<double>();
    if (doc.contains("diversity_sign")) {
      const auto s = doc["diversity_sign"].get<std::string>();
      if (s == "maximize")
        cfg.diversity_sign = DiversitySign::Maximize;
      else if (s == "literal")
        cfg.diversity_sign = DiversitySign::Literal;
      else
        throw ConfigError(fmt::format("diversity_sign must be 'maximize' or 'literal', got '{}'", s));
    }
    if (doc.contains("expert_count")) cfg.expert_count = doc["expert_count"].get<int>();
    if (doc.contains("attention_mode")) {
      const auto s = doc["attention_mode"].get<std::string>();
      if (s == "dynamic")
        cfg.attention_mode = AttentionMode::Dynamic;
      else if (s == "static")
        cfg.attention_mode = AttentionMode::Static;
      else
        throw ConfigError(fmt::format("attention_mode must be 'dynamic' or 'static', got '{}'", s));
    }
    if (doc.contains("static_channels")) {
      const auto& sc = doc["static_channels"];
      cfg.static_channels_1 = sc.value("expert1", std::vector<std::string>{});
      cfg.static_channels_2 = sc.value("expert2", std::vector<std::string>{});
    }
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("adjacency")) {
      const auto& a = doc["adjacency"];
      const auto rule = a.value("rule", std::string("knn"));
      if (rule == "knn")
        cfg.adjacency = AdjacencyRule::knn(a.value("k", 4));
      else if (rule == "radius")
        cfg.adjacency = AdjacencyRule::within(a.at("radius").get<double>());
      else
        throw ConfigError(fmt::format("adjacency rule must be 'knn' or 'radius', got '{}'", rule));
    }
    if (doc.contains("standardize")) cfg.standardize = doc["standardize"].get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config: {}", e.what()));
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
  try {
    return config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config {}: {}", path.string(), e.what()));
  }
}

std::vector<std::string> load_channel_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open channel list {}", path.string()));
  try {
    const json doc = json::parse(in);
    return doc.get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("channel list {}: {}", path.string(), e.what()));
  }
}

}  // namespace apagnn
