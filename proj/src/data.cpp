#include "apagnn/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace apagnn {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Band> default_bands() {
  return {{"delta", 1, 4}, {"theta", 4, 8}, {"alpha", 8, 14}, {"beta", 14, 31}, {"gamma", 31, 50}};
}

Matrix read_feature_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(fmt::format("cannot open feature file {}", path.string()));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (start <= line.size()) {
      std::size_t end = line.find(',', start);
      if (end == std::string::npos) end = line.size();
      std::string_view cell(line.data() + start, end - start);
      while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
      while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
      double value = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      if (ec != std::errc() || ptr != cell.data() + cell.size())
        throw LoadError(fmt::format("{}: line {}: '{}' is not a number", path.string(),
                                    rows.size() + 1, cell));
      row.push_back(value);
      start = end + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw LoadError(fmt::format("{}: ragged row {}", path.string(), rows.size() + 1));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw LoadError(fmt::format("{}: no feature rows", path.string()));
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) out(r, c) = rows[r][c];
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "binary feature IO assumes little-endian");

template <typename T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

Matrix read_feature_bin(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(fmt::format("cannot open feature file {}", path.string()));
  const auto rows = read_le<std::uint32_t>(in);
  const auto cols = read_le<std::uint32_t>(in);
  if (!in) throw LoadError(fmt::format("{}: truncated header", path.string()));
  Matrix out(rows, cols);
  in.read(reinterpret_cast<char*>(out.data()),
          static_cast<std::streamsize>(sizeof(double) * rows * cols));
  if (!in) throw LoadError(fmt::format("{}: expected {}x{} float64 payload", path.string(), rows, cols));
  in.peek();
  if (!in.eof()) throw LoadError(fmt::format("{}: trailing bytes after payload", path.string()));
  return out;
}

void write_feature_csv(const Matrix& features, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError(fmt::format("cannot write {}", path.string()));
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    for (Eigen::Index c = 0; c < features.cols(); ++c)
      out << (c ? "," : "") << fmt::format("{}", features(r, c));
    out << '\n';
  }
}

void write_feature_bin(const Matrix& features, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError(fmt::format("cannot write {}", path.string()));
  const auto rows = static_cast<std::uint32_t>(features.rows());
  const auto cols = static_cast<std::uint32_t>(features.cols());
  out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  out.write(reinterpret_cast<const char*>(features.data()),
            static_cast<std::streamsize>(sizeof(double) * features.size()));
}

namespace {

std::vector<int> int_list(const json& j, const std::string& what) {
  if (!j.is_array()) throw LoadError(fmt::format("{} must be an array of integers", what));
  std::vector<int> out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw LoadError(fmt::format("{} must be an array of integers", what));
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace

Dataset load_manifest(const fs::path& path) {
  const fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
  const fs::path root = manifest.parent_path();
  std::ifstream in(manifest);
  if (!in) throw LoadError(fmt::format("cannot open manifest {}", manifest.string()));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw LoadError(fmt::format("manifest {}: {}", manifest.string(), e.what()));
  }
  if (!doc.is_object()) throw LoadError("manifest must be a JSON object");

  Dataset ds;
  try {
    if (!doc.contains("channels") || !doc["channels"].is_array())
      throw LoadError("manifest needs a 'channels' array");
    ds.channels = doc["channels"].get<std::vector<std::string>>();
    if (ds.channels.empty()) throw LoadError("manifest lists no channels");

    if (!doc.contains("bands") || !doc["bands"].is_array() || doc["bands"].empty())
      throw LoadError("manifest needs a non-empty 'bands' array");
    for (const auto& b : doc["bands"])
      ds.bands.push_back({b.at("name").get<std::string>(), b.at("low_hz").get<double>(),
                          b.at("high_hz").get<double>()});

    if (doc.contains("montage")) {
      const auto& m = doc["montage"];
      if (m.is_string()) {
        ds.montage = load_montage(root / m.get<std::string>());
      } else {
        for (const auto& e : m)
          ds.montage.push_back({e.at("name").get<std::string>(), e.at("x").get<double>(),
                                e.at("y").get<double>()});
      }
      if (ds.montage.size() != ds.channels.size())
        throw LoadError("montage and channel list differ in length");
      for (std::size_t i = 0; i < ds.channels.size(); ++i)
        if (ds.montage[i].name != ds.channels[i])
          throw LoadError(fmt::format("montage entry {} is '{}' but channel {} is '{}'", i,
                                      ds.montage[i].name, i, ds.channels[i]));
    } else {
      ds.montage = ring_montage(ds.channel_count());
      for (std::size_t i = 0; i < ds.channels.size(); ++i) ds.montage[i].name = ds.channels[i];
    }

    if (!doc.contains("samples") || !doc["samples"].is_array())
      throw LoadError("manifest needs a 'samples' array");
    if (doc["samples"].empty()) throw LoadError("empty dataset");

    if (doc.contains("split")) {
      ds.split.train_trials = int_list(doc["split"].at("train_trials"), "split.train_trials");
      ds.split.test_trials = int_list(doc["split"].at("test_trials"), "split.test_trials");
    }
  } catch (const json::exception& e) {
    throw LoadError(fmt::format("manifest {}: {}", manifest.string(), e.what()));
  }

  const auto& records = doc["samples"];
  int max_label = -1;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    auto fail = [&](const std::string& why) {
      return LoadError(fmt::format("sample record {}: {}", i, why));
    };
    if (!rec.is_object()) throw fail("must be an object");
    Sample s;
    try {
      if (!rec.contains("label") || !rec["label"].is_number_integer()) throw fail("missing integer label");
      s.label = rec["label"].get<int>();
      if (rec.contains("subject"))
        s.subject = rec["subject"].is_string() ? rec["subject"].get<std::string>()
                                               : rec["subject"].dump();
      s.trial = rec.value("trial", 0);
      if (rec.contains("file")) {
        const fs::path file = root / rec["file"].get<std::string>();
        s.features = file.extension() == ".bin" ? read_feature_bin(file) : read_feature_csv(file);
      } else if (rec.contains("values")) {
        const auto rows = rec["values"].get<std::vector<std::vector<double>>>();
        if (rows.empty()) throw fail("empty values");
        s.features.resize(static_cast<Eigen::Index>(rows.size()),
                          static_cast<Eigen::Index>(rows.front().size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].size() != rows.front().size()) throw fail("ragged values");
          for (std::size_t c = 0; c < rows[r].size(); ++c) s.features(r, c) = rows[r][c];
        }
      } else {
        throw fail("needs 'file' or 'values'");
      }
    } catch (const json::exception& e) {
      throw fail(e.what());
    } catch (const LoadError& e) {
      if (std::string_view(e.what()).starts_with("sample record")) throw;
      throw fail(e.what());
    }
    if (s.features.rows() != ds.channel_count() || s.features.cols() != ds.band_count())
      throw fail(fmt::format("features are {}x{}, expected {}x{} (C x F)", s.features.rows(),
                             s.features.cols(), ds.channel_count(), ds.band_count()));
    if (!s.features.allFinite()) throw fail("non-finite feature value");
    if (s.label < 0) throw fail(fmt::format("unknown label {}", s.label));
    max_label = std::max(max_label, s.label);
    ds.samples.push_back(std::move(s));
  }

  ds.classes = doc.contains("classes") ? doc["classes"].get<int>() : max_label + 1;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].label >= ds.classes)
      throw LoadError(fmt::format("sample record {}: unknown label {} (classes = {})", i,
                                  ds.samples[i].label, ds.classes));

  if (!ds.split.train_trials.empty() || !ds.split.test_trials.empty()) {
    const std::set<int> train(ds.split.train_trials.begin(), ds.split.train_trials.end());
    const std::set<int> test(ds.split.test_trials.begin(), ds.split.test_trials.end());
    for (int t : train)
      if (test.contains(t)) throw LoadError(fmt::format("trial {} is in both splits", t));
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const int t = ds.samples[i].trial;
      if (!train.contains(t) && !test.contains(t))
        throw LoadError(fmt::format("sample record {}: trial {} is in neither split", i, t));
    }
  }
  return ds;
}

void write_dataset(const Dataset& ds, const fs::path& dir, FeatureFormat format) {
  fs::create_directories(dir / "features");
  save_montage(ds.montage, dir / "montage.json");

  json doc;
  doc["format_version"] = 1;
  doc["channels"] = ds.channels;
  doc["bands"] = json::array();
  for (const auto& b : ds.bands)
    doc["bands"].push_back({{"name", b.name}, {"low_hz", b.low_hz}, {"high_hz", b.high_hz}});
  doc["classes"] = ds.classes;
  doc["montage"] = "montage.json";
  doc["samples"] = json::array();
  const char* ext = format == FeatureFormat::Csv ? "csv" : "bin";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    const std::string rel = fmt::format("features/{:05d}.{}", i, ext);
    if (format == FeatureFormat::Csv)
      write_feature_csv(s.features, dir / rel);
    else
      write_feature_bin(s.features, dir / rel);
    doc["samples"].push_back({{"file", rel}, {"label", s.label}, {"subject", s.subject}, {"trial", s.trial}});
  }
  doc["split"] = {{"train_trials", ds.split.train_trials}, {"test_trials", ds.split.test_trials}};

  std::ofstream out(dir / "manifest.json");
  if (!out) throw LoadError(fmt::format("cannot write {}", (dir / "manifest.json").string()));
  out << doc.dump(2) << '\n';
}

SplitResult split(const Dataset& ds, const SplitRule& rule) {
  const std::set<int> train(rule.train_trials.begin(), rule.train_trials.end());
  const std::set<int> test(rule.test_trials.begin(), rule.test_trials.end());
  for (int t : train)
    if (test.contains(t)) throw ConfigError(fmt::format("trial {} listed for both train and test", t));
  std::set<int> present;
  for (const auto& s : ds.samples) present.insert(s.trial);
  for (int t : train)
    if (!present.contains(t)) throw ConfigError(fmt::format("train trial {} has no samples", t));
  for (int t : test)
    if (!present.contains(t)) throw ConfigError(fmt::format("test trial {} has no samples", t));

  SplitResult out;
  for (const auto& s : ds.samples) {
    if (train.contains(s.trial))
      out.train.push_back(s);
    else if (test.contains(s.trial))
      out.test.push_back(s);
  }
  return out;
}

Standardizer Standardizer::fit(std::span<const Sample> samples) {
  if (samples.empty()) throw ContractError("cannot fit a standardizer on zero samples");
  const auto& first = samples.front().features;
  Matrix sum = Matrix::Zero(first.rows(), first.cols());
  Matrix sq = Matrix::Zero(first.rows(), first.cols());
  for (const auto& s : samples) sum += s.features;
  const double n = static_cast<double>(samples.size());
  Matrix mean = sum / n;
  for (const auto& s : samples) sq += (s.features - mean).cwiseAbs2();
  Matrix sd = (sq / n).cwiseSqrt();
  sd = (sd.array() < 1e-12).select(1.0, sd);
  return {std::move(mean), std::move(sd)};
}

Matrix Standardizer::apply(const Matrix& features) const {
  if (features.rows() != mean.rows() || features.cols() != mean.cols())
    throw ShapeError("standardizer shape differs from features");
  return ((features - mean).array() / stddev.array()).matrix();
}

void Standardizer::apply(std::vector<Sample>& samples) const {
  for (auto& s : samples) s.features = apply(s.features);
}

std::vector<std::vector<int>> default_planted(int channels, int classes, int count) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(classes));
  const int stride = std::max(1, channels / std::max(1, classes));
  for (int e = 0; e < classes; ++e)
    for (int i = 0; i < count; ++i) out[e].push_back((e * stride + i) % channels);
  return out;
}

SynthResult synth_generate(const SynthParams& p) {
  if (p.channels < 2 || p.bands < 1 || p.classes < 1 || p.per_class < 1)
    throw ConfigError("synthetic dataset needs channels >= 2, bands >= 1, classes >= 1, per_class >= 1");
  if (!(p.snr >= 0.0) || !std::isfinite(p.snr)) throw ConfigError("snr must be finite and >= 0");
  if (p.trials < p.classes) throw ConfigError("need at least one trial per class");
  if (p.train_trials < 1 || p.train_trials >= p.trials)
    throw ConfigError("train_trials must lie in [1, trials)");
  if (p.subjects < 1) throw ConfigError("subjects must be >= 1");

  SynthResult result;
  result.planted = p.planted.empty() ? default_planted(p.channels, p.classes, p.planted_count) : p.planted;
  if (static_cast<int>(result.planted.size()) != p.classes)
    throw ConfigError("planted channel sets must be given for every class");
  std::vector<std::set<int>> sets;
  for (const auto& planted : result.planted) {
    for (int c : planted)
      if (c < 0 || c >= p.channels) throw ConfigError(fmt::format("planted channel {} out of range", c));
    sets.emplace_back(planted.begin(), planted.end());
  }
  if (p.classes > 1 && std::all_of(sets.begin(), sets.end(), [&](const auto& s) { return s == sets.front(); }))
    result.warnings.push_back("all classes share the same planted channels; classes are indistinguishable");

  Dataset& ds = result.dataset;
  ds.montage = ring_montage(p.channels);
  for (const auto& e : ds.montage) ds.channels.push_back(e.name);
  if (p.bands == 5) {
    ds.bands = default_bands();
  } else {
    for (int f = 0; f < p.bands; ++f)
      ds.bands.push_back({fmt::format("band{}", f + 1), 1.0 + 4.0 * f, 5.0 + 4.0 * f});
  }
  ds.classes = p.classes;
  for (int t = 1; t <= p.trials; ++t)
    (t <= p.train_trials ? ds.split.train_trials : ds.split.test_trials).push_back(t);

  std::vector<std::vector<int>> class_trials(static_cast<std::size_t>(p.classes));
  for (int t = 1; t <= p.trials; ++t) class_trials[(t - 1) % p.classes].push_back(t);

  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double shift = p.snr / std::sqrt(static_cast<double>(p.bands));
  for (int subject = 0; subject < p.subjects; ++subject) {
    for (int e = 0; e < p.classes; ++e) {
      const auto& trials = class_trials[e];
      for (int k = 0; k < p.per_class; ++k) {
        Sample s;
        s.features.resize(p.channels, p.bands);
        for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = noise(rng);
        for (int c : sets[e]) s.features.row(c).array() += shift;
        s.label = e;
        s.subject = fmt::format("s{:02d}", subject + 1);
        s.trial = trials[static_cast<std::size_t>(k) % trials.size()];
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return result;
}

}  // namespace apagnn
