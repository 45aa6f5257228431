#include "apagnn/de.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace apagnn {

namespace {

constexpr double kButterworthQ = 0.70710678118654752440;

struct Coefficients {
  double w0, cosw, alpha;
};

Coefficients prewarp(double cutoff_hz, double fs) {
  const double w0 = 2.0 * std::numbers::pi * cutoff_hz / fs;
  return {w0, std::cos(w0), std::sin(w0) / (2.0 * kButterworthQ)};
}

}  // namespace

Biquad Biquad::highpass(double cutoff_hz, double fs) {
  const auto [w0, cosw, alpha] = prewarp(cutoff_hz, fs);
  const double a0 = 1.0 + alpha;
  return {(1.0 + cosw) / 2.0 / a0, -(1.0 + cosw) / a0, (1.0 + cosw) / 2.0 / a0, -2.0 * cosw / a0,
          (1.0 - alpha) / a0};
}

Biquad Biquad::lowpass(double cutoff_hz, double fs) {
  const auto [w0, cosw, alpha] = prewarp(cutoff_hz, fs);
  const double a0 = 1.0 + alpha;
  return {(1.0 - cosw) / 2.0 / a0, (1.0 - cosw) / a0, (1.0 - cosw) / 2.0 / a0, -2.0 * cosw / a0,
          (1.0 - alpha) / a0};
}

std::vector<double> Biquad::run(std::span<const double> x) const {
  std::vector<double> y(x.size());
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    const double out = b0 * x[n] + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x[n];
    y2 = y1;
    y1 = out;
    y[n] = out;
  }
  return y;
}

std::vector<double> bandpass_zero_phase(std::span<const double> x, double fs, double low_hz,
                                        double high_hz) {
  const Biquad hp = Biquad::highpass(low_hz, fs);
  const Biquad lp = Biquad::lowpass(high_hz, fs);
  std::vector<double> y = lp.run(hp.run(x));
  std::reverse(y.begin(), y.end());
  y = lp.run(hp.run(y));
  std::reverse(y.begin(), y.end());
  return y;
}

double gaussian_entropy(double variance) {
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * std::max(variance, 1e-12));
}

double unbiased_variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(x.size() - 1);
}

Matrix compute_de(const Matrix& raw, double fs, std::span<const Band> bands) {
  if (!(fs > 0.0)) throw ConfigError("sampling rate must be positive");
  if (bands.empty()) throw ConfigError("no frequency bands given");
  double lowest = bands.front().low_hz;
  for (const Band& b : bands) {
    if (!(b.low_hz > 0.0) || !(b.high_hz > b.low_hz))
      throw ConfigError(fmt::format("band '{}' needs 0 < low < high", b.name));
    if (b.high_hz >= fs / 2.0)
      throw ConfigError(fmt::format("band '{}' edge {} Hz is at or above Nyquist ({} Hz)", b.name,
                                    b.high_hz, fs / 2.0));
    lowest = std::min(lowest, b.low_hz);
  }
  if (static_cast<double>(raw.cols()) < 2.0 * fs / lowest)
    throw ConfigError(fmt::format("signal has {} samples; need at least 2*fs/low = {}", raw.cols(),
                                  2.0 * fs / lowest));

  Matrix out(raw.rows(), static_cast<Eigen::Index>(bands.size()));
  std::vector<double> channel(static_cast<std::size_t>(raw.cols()));
  for (Eigen::Index c = 0; c < raw.rows(); ++c) {
    for (Eigen::Index t = 0; t < raw.cols(); ++t) channel[t] = raw(c, t);
    for (std::size_t f = 0; f < bands.size(); ++f) {
      const auto filtered = bandpass_zero_phase(channel, fs, bands[f].low_hz, bands[f].high_hz);
      out(c, static_cast<Eigen::Index>(f)) = gaussian_entropy(unbiased_variance(filtered));
    }
  }
  return out;
}

}  // namespace apagnn
