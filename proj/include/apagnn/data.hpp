#pragma once

// EEG feature datasets: manifest loading, feature file formats, trial-based
// splits, per-channel standardisation and a planted-signal generator.
//
// Feature files hold one sample's C x F matrix in one of two formats:
//   .csv  C lines of F comma-separated decimal numbers, no header.
//   .bin  little-endian: uint32 C, uint32 F, then C*F IEEE-754 float64
//         values in row-major order (8-byte header, 8*C*F payload bytes).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apagnn/graph.hpp"
#include "apagnn/tensor.hpp"

namespace apagnn {

struct Band {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// delta 1-4, theta 4-8, alpha 8-14, beta 14-31, gamma 31-50 Hz.
std::vector<Band> default_bands();

struct SplitRule {
  std::vector<int> train_trials;
  std::vector<int> test_trials;
};

struct Sample {
  Matrix features;  // C x F
  int label = 0;
  std::string subject;
  int trial = 0;
};

struct Dataset {
  std::vector<std::string> channels;
  std::vector<Band> bands;
  Montage montage;
  int classes = 0;
  std::vector<Sample> samples;
  SplitRule split;

  int channel_count() const { return static_cast<int>(channels.size()); }
  int band_count() const { return static_cast<int>(bands.size()); }
};

enum class FeatureFormat { Csv, Binary };

// `path` is a manifest JSON file or a directory containing manifest.json.
Dataset load_manifest(const std::filesystem::path& path);

// Writes manifest.json, montage.json and features/<index>.{csv,bin}.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir, FeatureFormat format);

Matrix read_feature_csv(const std::filesystem::path& path);
Matrix read_feature_bin(const std::filesystem::path& path);
void write_feature_csv(const Matrix& features, const std::filesystem::path& path);
void write_feature_bin(const Matrix& features, const std::filesystem::path& path);

struct SplitResult {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Subject-dependent split: within every subject, samples of train trials go
// to train and samples of test trials to test. Samples of unlisted trials are
// left out.
SplitResult split(const Dataset& dataset, const SplitRule& rule);

// z-score per (channel, band), fitted on the training split.
struct Standardizer {
  Matrix mean;
  Matrix stddev;

  static Standardizer fit(std::span<const Sample> samples);
  void apply(std::vector<Sample>& samples) const;
  Matrix apply(const Matrix& features) const;
};

struct SynthParams {
  int channels = 16;
  int bands = 5;
  int classes = 3;
  int per_class = 200;
  // Planted channel indices per class; empty means contiguous blocks of
  // `planted_count` starting at class * (channels / classes).
  std::vector<std::vector<int>> planted;
  int planted_count = 4;
  double snr = 3.0;
  std::uint64_t seed = 42;
  int trials = 15;
  int train_trials = 9;
  int subjects = 1;
};

struct SynthResult {
  Dataset dataset;
  std::vector<std::vector<int>> planted;
  std::vector<std::string> warnings;
};

// Background features are standard normal. Planted channels of class e get an
// additive mean vector of Euclidean norm snr spread evenly over the bands.
// Trial t carries label (t-1) mod E; the first `train_trials` trials train.
SynthResult synth_generate(const SynthParams& params);

std::vector<std::vector<int>> default_planted(int channels, int classes, int count);

}  // namespace apagnn
