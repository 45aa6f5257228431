#pragma once

// Checkpoints are JSON documents:
//   {"format": "apagnn-checkpoint", "version": 1,
//    "config": {...TrainConfig...},
//    "shape": {"channels", "bands", "filters", "order", "classes"},
//    "expert_count": n, "step": t,
//    "channels": [names], "montage": [{name, x, y}],
//    "standardizer": null | {"mean": T, "stddev": T},
//    "tensors": {"<param>": {"value": T, "m": T, "v": T}}}
// where T = {"rows": r, "cols": c, "data": [row-major doubles]}.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "apagnn/data.hpp"
#include "apagnn/graph.hpp"
#include "apagnn/pipeline.hpp"

namespace apagnn {

struct Checkpoint {
  TrainConfig config;
  ModelState state;
  std::vector<std::string> channels;
  Montage montage;
  std::optional<Standardizer> standardizer;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

// Throws LoadError on malformed files and when tensor shapes disagree with
// the stored configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws ShapeError when the dataset's channels/bands/classes differ.
void check_compatible(const Checkpoint& checkpoint, const Dataset& dataset);

}  // namespace apagnn
