#include "apagnn/graph.hpp"

#include <fstream>
#include <numbers>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace apagnn {

void EegGraph::validate() const {
  const Eigen::Index c = features.rows();
  if (adjacency.rows() != c || adjacency.cols() != c)
    throw ShapeError(fmt::format("adjacency is {}x{} but features have {} channels", adjacency.rows(),
                                 adjacency.cols(), c));
  if (!channels.empty() && static_cast<Eigen::Index>(channels.size()) != c)
    throw ShapeError("channel label count differs from feature rows");
  if (!features.allFinite()) throw ContractError("graph features contain non-finite values");
  if (!is_symmetric(adjacency, 0.0)) throw ContractError("adjacency is not symmetric");
  for (Eigen::Index i = 0; i < c; ++i) {
    if (adjacency(i, i) != 0.0) throw ContractError("adjacency has a non-zero diagonal");
    for (Eigen::Index j = 0; j < c; ++j)
      if (adjacency(i, j) != 0.0 && adjacency(i, j) != 1.0)
        throw ContractError("adjacency entries must be 0 or 1");
  }
}

Matrix build_adjacency(const Montage& montage, const AdjacencyRule& rule) {
  const auto n = static_cast<Eigen::Index>(montage.size());
  if (n == 0) throw ConfigError("montage is empty");

  Matrix dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double dx = montage[i].x - montage[j].x;
      const double dy = montage[i].y - montage[j].y;
      dist(i, j) = std::hypot(dx, dy);
      if (i != j && dist(i, j) < 1e-12)
        throw ConfigError(fmt::format("duplicate electrode coordinates for '{}' and '{}'",
                                      montage[i].name, montage[j].name));
    }
  }

  Matrix adj = Matrix::Zero(n, n);
  if (rule.kind == AdjacencyRule::Kind::Knn) {
    if (rule.k < 1 || rule.k >= n)
      throw ConfigError(fmt::format("knn requires 1 <= k < C (k={}, C={})", rule.k, n));
    std::vector<Eigen::Index> order;
    for (Eigen::Index i = 0; i < n; ++i) {
      order.clear();
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) order.push_back(j);
      std::stable_sort(order.begin(), order.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return dist(i, a) < dist(i, b); });
      for (int r = 0; r < rule.k; ++r) {
        adj(i, order[r]) = 1.0;
        adj(order[r], i) = 1.0;
      }
    }
  } else {
    if (!(rule.radius > 0.0)) throw ConfigError("radius rule requires r > 0");
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j && dist(i, j) <= rule.radius + 1e-12) adj(i, j) = 1.0;
  }
  return adj;
}

Montage ring_montage(int channels) {
  Montage out;
  out.reserve(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    const double angle = 2.0 * std::numbers::pi * c / channels;
    out.push_back({fmt::format("CH{:02d}", c + 1), std::cos(angle), std::sin(angle)});
  }
  return out;
}

Montage load_montage(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(fmt::format("cannot open montage file {}", path.string()));
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(fmt::format("montage {}: {}", path.string(), e.what()));
  }
  if (!doc.is_array()) throw LoadError("montage must be a JSON array of {name, x, y}");
  Montage out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    if (!e.is_object() || !e.contains("name") || !e.contains("x") || !e.contains("y") ||
        !e["name"].is_string() || !e["x"].is_number() || !e["y"].is_number())
      throw LoadError(fmt::format("montage entry {} must have string name and numeric x, y", i));
    Electrode el{e["name"].get<std::string>(), e["x"].get<double>(), e["y"].get<double>()};
    if (!seen.insert(el.name).second)
      throw LoadError(fmt::format("montage entry {} repeats channel '{}'", i, el.name));
    out.push_back(std::move(el));
  }
  return out;
}

void save_montage(const Montage& montage, const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& e : montage) doc.push_back({{"name", e.name}, {"x", e.x}, {"y", e.y}});
  std::ofstream out(path);
  if (!out) throw LoadError(fmt::format("cannot write montage file {}", path.string()));
  out << doc.dump(2) << '\n';
}

}  // namespace apagnn
