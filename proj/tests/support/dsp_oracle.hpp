#pragma once

// Direct-summation spectra for DSP tests; independent of the FFT used by the
// library.

#include <cmath>
#include <numbers>
#include <vector>

#include "epift/waveform.hpp"

namespace epift::testing {

inline std::vector<float> sine(double hz, double rate, std::size_t n, double amp = 0.5, double phase = 0.0) {
  std::vector<float> x(n);
  for (std::size_t i = 0; i < n; ++i)
    x[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * hz * static_cast<double>(i) / rate + phase));
  return x;
}

inline Waveform sine_wave(double hz, double rate, std::size_t n, double amp = 0.5) {
  return Waveform{sine(hz, rate, n, amp), rate};
}

// |DFT| at bin k of the first n samples (Hann windowed).
inline double dft_magnitude(const std::vector<float>& x, std::size_t n, std::size_t k) {
  double re = 0, im = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    const double a = -2 * std::numbers::pi * static_cast<double>(k * i) / static_cast<double>(n);
    re += w * x[i] * std::cos(a);
    im += w * x[i] * std::sin(a);
  }
  return std::hypot(re, im);
}

// Bin with the largest magnitude among 1..n/2, over the first n samples.
inline std::size_t peak_bin(const std::vector<float>& x, std::size_t n) {
  std::size_t best = 1;
  double top = -1;
  for (std::size_t k = 1; k <= n / 2; ++k) {
    const double m = dft_magnitude(x, n, k);
    if (m > top) {
      top = m;
      best = k;
    }
  }
  return best;
}

inline std::size_t nearest_bin(double hz, double rate, std::size_t n) {
  return static_cast<std::size_t>(std::lround(hz * static_cast<double>(n) / rate));
}

// Energy of the DFT (no window) summed over bins whose frequency is in [lo, hi).
inline double band_energy(const std::vector<float>& x, double rate, double lo, double hi) {
  const std::size_t n = x.size();
  double e = 0;
  for (std::size_t k = 1; k <= n / 2; ++k) {
    const double f = static_cast<double>(k) * rate / static_cast<double>(n);
    if (f < lo || f >= hi) continue;
    double re = 0, im = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = -2 * std::numbers::pi * static_cast<double>(k * i % n) / static_cast<double>(n);
      re += x[i] * std::cos(a);
      im += x[i] * std::sin(a);
    }
    e += re * re + im * im;
  }
  return e;
}

}  // namespace epift::testing
