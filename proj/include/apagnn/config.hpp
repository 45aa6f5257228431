#pragma once

// JSON form of TrainConfig. Keys mirror the struct fields:
//   K, D, eta, E, lr, batch_size, epochs, lambda, beta,
//   diversity_sign ("maximize" | "literal"), expert_count,
//   attention_mode ("dynamic" | "static"),
//   static_channels {"expert1": [names], "expert2": [names]}, seed,
//   adjacency {"rule": "knn" | "radius", "k": int, "radius": float},
//   standardize.
// Unknown keys are rejected.

#include <filesystem>

#include <nlohmann/json.hpp>

#include "apagnn/pipeline.hpp"

namespace apagnn {

nlohmann::json to_json(const TrainConfig& cfg);

// Overlays the keys present in `doc` onto `base`.
TrainConfig config_from_json(const nlohmann::json& doc, TrainConfig base = {});

TrainConfig load_config(const std::filesystem::path& path);

// Reads a JSON array of channel names.
std::vector<std::string> load_channel_list(const std::filesystem::path& path);

}  // namespace apagnn
