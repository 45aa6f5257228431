#pragma once

#include <span>
#include <vector>

#include "apagnn/data.hpp"
#include "apagnn/tensor.hpp"

namespace apagnn {

// Second-order section in direct form I, a0 normalised to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

  static Biquad highpass(double cutoff_hz, double fs);
  static Biquad lowpass(double cutoff_hz, double fs);
  std::vector<double> run(std::span<const double> x) const;
};

// Butterworth high-pass at low_hz cascaded with Butterworth low-pass at
// high_hz (4th-order band-pass), run forward then backward for zero phase.
std::vector<double> bandpass_zero_phase(std::span<const double> x, double fs, double low_hz,
                                        double high_hz);

// 0.5 * ln(2 pi e var), var clamped below at 1e-12.
double gaussian_entropy(double variance);

double unbiased_variance(std::span<const double> x);

// raw is C x T; returns the C x F matrix of band differential entropies.
Matrix compute_de(const Matrix& raw, double fs, std::span<const Band> bands);

}  // namespace apagnn
