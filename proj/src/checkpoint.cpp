#include "apagnn/checkpoint.hpp"

#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "apagnn/config.hpp"

namespace apagnn {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "apagnn-checkpoint";
constexpr int kVersion = 1;

json tensor_json(const Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix tensor_from(const json& j, const std::string& what) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw LoadError(fmt::format("tensor '{}' header {}x{} disagrees with {} values", what, rows, cols,
                                data.size()));
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  json doc;
  doc["format"] = kFormat;
  doc["version"] = kVersion;
  doc["config"] = to_json(ck.config);
  const auto& s = ck.state.shape;
  doc["shape"] = {{"channels", s.channels}, {"bands", s.bands}, {"filters", s.filters},
                  {"order", s.order}, {"classes", s.classes}};
  doc["expert_count"] = ck.state.expert_count;
  doc["step"] = ck.state.step;
  doc["channels"] = ck.channels;
  doc["montage"] = json::array();
  for (const auto& e : ck.montage) doc["montage"].push_back({{"name", e.name}, {"x", e.x}, {"y", e.y}});
  doc["standardizer"] = ck.standardizer ? json{{"mean", tensor_json(ck.standardizer->mean)},
                                               {"stddev", tensor_json(ck.standardizer->stddev)}}
                                        : json(nullptr);
  json tensors = json::object();
  for (const auto& p : ck.state.params)
    tensors[p.name] = {{"value", tensor_json(p.value)}, {"m", tensor_json(p.m)}, {"v", tensor_json(p.v)}};
  doc["tensors"] = std::move(tensors);

  std::ofstream out(path);
  if (!out) throw LoadError(fmt::format("cannot write checkpoint {}", path.string()));
  out << doc.dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(fmt::format("cannot open checkpoint {}", path.string()));
  Checkpoint ck;
  try {
    const json doc = json::parse(in);
    if (doc.value("format", std::string{}) != kFormat) throw LoadError("not an apagnn checkpoint");
    if (doc.value("version", 0) != kVersion)
      throw LoadError(fmt::format("unsupported checkpoint version {}", doc.value("version", 0)));
    ck.config = config_from_json(doc.at("config"));
    const auto& sh = doc.at("shape");
    const ModelShape shape{sh.at("channels").get<int>(), sh.at("bands").get<int>(),
                           sh.at("filters").get<int>(), sh.at("order").get<int>(),
                           sh.at("classes").get<int>()};
    if (shape.filters != ck.config.D || shape.order != ck.config.K || shape.classes != ck.config.E)
      throw LoadError("checkpoint shape disagrees with its config (D, K, E)");
    const int experts = doc.at("expert_count").get<int>();
    if (experts != ck.config.expert_count) throw LoadError("checkpoint expert_count disagrees with config");

    // Shapes come from a fresh initialisation with the stored config.
    ck.state = ModelState::init(shape, experts, 0);
    ck.state.step = doc.at("step").get<std::int64_t>();
    const auto& tensors = doc.at("tensors");
    if (tensors.size() != ck.state.params.size())
      throw LoadError(fmt::format("checkpoint holds {} tensors, expected {}", tensors.size(),
                                  ck.state.params.size()));
    for (auto& p : ck.state.params) {
      if (!tensors.contains(p.name)) throw LoadError(fmt::format("checkpoint lacks tensor '{}'", p.name));
      const auto& t = tensors[p.name];
      Matrix value = tensor_from(t.at("value"), p.name);
      Matrix m = tensor_from(t.at("m"), p.name + ".m");
      Matrix v = tensor_from(t.at("v"), p.name + ".v");
      for (const Matrix* x : {&value, &m, &v})
        if (x->rows() != p.value.rows() || x->cols() != p.value.cols())
          throw LoadError(fmt::format("tensor '{}' is {}x{}, config implies {}x{}", p.name, x->rows(),
                                      x->cols(), p.value.rows(), p.value.cols()));
      p.value = std::move(value);
      p.m = std::move(m);
      p.v = std::move(v);
    }

    ck.channels = doc.at("channels").get<std::vector<std::string>>();
    if (static_cast<int>(ck.channels.size()) != shape.channels)
      throw LoadError("checkpoint channel list disagrees with its shape");
    for (const auto& e : doc.at("montage"))
      ck.montage.push_back({e.at("name").get<std::string>(), e.at("x").get<double>(), e.at("y").get<double>()});
    if (!doc.at("standardizer").is_null())
      ck.standardizer = Standardizer{tensor_from(doc["standardizer"].at("mean"), "standardizer.mean"),
                                     tensor_from(doc["standardizer"].at("stddev"), "standardizer.stddev")};
  } catch (const json::exception& e) {
    throw LoadError(fmt::format("checkpoint {}: {}", path.string(), e.what()));
  } catch (const ConfigError& e) {
    throw LoadError(fmt::format("checkpoint {}: {}", path.string(), e.what()));
  }
  return ck;
}

void check_compatible(const Checkpoint& ck, const Dataset& ds) {
  const auto& s = ck.state.shape;
  if (ds.channel_count() != s.channels || ds.band_count() != s.bands)
    throw ShapeError(fmt::format("data is {}x{} (C x F) but the checkpoint expects {}x{}",
                                 ds.channel_count(), ds.band_count(), s.channels, s.bands));
  if (ds.classes > s.classes)
    throw ShapeError(fmt::format("data has {} classes but the checkpoint has {}", ds.classes, s.classes));
  if (ds.channels != ck.channels) throw ShapeError("data channel names differ from the checkpoint's");
}

}  // namespace apagnn
