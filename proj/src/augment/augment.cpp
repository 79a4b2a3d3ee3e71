#include "epift/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "epift/error.hpp"

namespace epift {

const char* to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::none: return "none";
    case AugmentKind::noise: return "noise";
    case AugmentKind::equalizer: return "equalizer";
    case AugmentKind::pitch: return "pitch";
    case AugmentKind::random: return "random";
  }
  return "?";
}

AugmentKind parse_augment(const std::string& text) {
  for (auto k : {AugmentKind::none, AugmentKind::noise, AugmentKind::equalizer, AugmentKind::pitch,
                 AugmentKind::random})
    if (text == to_string(k)) return k;
  throw ConfigError("unknown augmentation '" + text + "' (expected none, noise, equalizer, pitch or random)");
}

Waveform add_colored_noise(const Waveform& w, double gamma, double snr_db, std::mt19937_64& rng,
                           AugmentStats* stats) {
  const double signal = rms(w.samples);
  if (signal == 0.0) {
    if (stats) ++stats->silent_inputs;
    return w;
  }
  const std::size_t n = w.samples.size();
  std::size_t p = 1;
  while (p < n) p <<= 1;
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> white(p);
  for (auto& v : white) v = g(rng);

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, white);
  spec[0] = 0.0;
  for (std::size_t k = 1; k < p; ++k) {
    const double f = static_cast<double>(std::min(k, p - k));
    spec[k] *= std::pow(f, -gamma / 2.0);
  }
  std::vector<double> shaped;
  fft.inv(shaped, spec);
  shaped.resize(n);

  double noise = 0.0;
  for (double v : shaped) noise += v * v;
  noise = std::sqrt(noise / static_cast<double>(n));
  const double target = signal / std::pow(10.0, snr_db / 20.0);
  const double k = noise > 0 ? target / noise : 0.0;

  Waveform out = w;
  for (std::size_t i = 0; i < n; ++i)
    out.samples[i] = static_cast<float>(std::clamp(static_cast<double>(w.samples[i]) + k * shaped[i], -1.0, 1.0));
  return out;
}

Waveform add_colored_noise(const Waveform& w, std::mt19937_64& rng, AugmentStats* stats) {
  std::uniform_real_distribution<double> gamma(-2.0, 2.0), snr(12.0, 100.0);
  const double gm = gamma(rng);
  const double s = snr(rng);
  return add_colored_noise(w, gm, s, rng, stats);
}

Biquad peaking_biquad(const PeakingBand& band, double rate) {
  const double A = std::pow(10.0, band.gain_db / 40.0);
  const double w0 = 2.0 * std::numbers::pi * band.center_hz / rate;
  const double alpha = std::sin(w0) / (2.0 * band.q);
  const double c = std::cos(w0);
  const double a0 = 1.0 + alpha / A;
  Biquad f;
  f.b0 = (1.0 + alpha * A) / a0;
  f.b1 = -2.0 * c / a0;
  f.b2 = (1.0 - alpha * A) / a0;
  f.a1 = -2.0 * c / a0;
  f.a2 = (1.0 - alpha / A) / a0;
  return f;
}

std::vector<float> apply_biquad(const Biquad& f, const std::vector<float>& x) {
  std::vector<float> y(x.size());
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double yi = f.b0 * xi + f.b1 * x1 + f.b2 * x2 - f.a1 * y1 - f.a2 * y2;
    x2 = x1;
    x1 = xi;
    y2 = y1;
    y1 = yi;
    y[i] = static_cast<float>(yi);
  }
  return y;
}

Waveform equalizer_chain(const Waveform& w, const std::vector<PeakingBand>& bands) {
  if (w.sample_rate <= 6000.0)
    throw ConfigError("equalizer needs a sample rate above 6000 Hz, got " + std::to_string(w.sample_rate));
  Waveform out = w;
  for (const auto& b : bands) out.samples = apply_biquad(peaking_biquad(b, w.sample_rate), out.samples);
  for (auto& v : out.samples) v = std::clamp(v, -1.0f, 1.0f);
  return out;
}

std::vector<PeakingBand> random_bands(int s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> logf(std::log(30.0), std::log(3000.0)), gain(-8.0, 8.0);
  std::vector<PeakingBand> bands;
  for (int i = 0; i < s; ++i) {
    PeakingBand b;
    b.center_hz = std::exp(logf(rng));
    b.gain_db = gain(rng);
    bands.push_back(b);
  }
  return bands;
}

Waveform equalizer_chain(const Waveform& w, std::mt19937_64& rng, int s) {
  return equalizer_chain(w, random_bands(s, rng));
}

Waveform pitch_shift(const Waveform& w, int semitones, bool extended) {
  const bool allowed = semitones == -2 || semitones == -1 || semitones == 1 || semitones == 2 ||
                       (extended && (semitones == 12 || semitones == -12));
  if (!allowed) throw ConfigError("pitch shift of " + std::to_string(semitones) + " semitones is not allowed");
  // fewer samples played at the same rate raise the pitch
  const auto [up, down] = rational_approx(std::pow(2.0, -semitones / 12.0), 1000);
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = resample_ratio(w.samples, up, down);
  out.samples.resize(w.samples.size(), 0.0f);
  for (auto& v : out.samples) v = std::clamp(v, -1.0f, 1.0f);
  return out;
}

Waveform pitch_shift(const Waveform& w, std::mt19937_64& rng) {
  static constexpr int choices[] = {-2, -1, 1, 2};
  std::uniform_int_distribution<int> pick(0, 3);
  return pitch_shift(w, choices[pick(rng)]);
}

Waveform random_augment(const Waveform& w, std::mt19937_64& rng, AugmentKind* chosen, AugmentStats* stats) {
  std::uniform_int_distribution<int> pick(0, 2);
  const AugmentKind k = std::array{AugmentKind::noise, AugmentKind::equalizer, AugmentKind::pitch}[pick(rng)];
  if (chosen) *chosen = k;
  return apply_augment(k, w, rng, stats);
}

Waveform apply_augment(AugmentKind kind, const Waveform& w, std::mt19937_64& rng, AugmentStats* stats) {
  switch (kind) {
    case AugmentKind::none: return w;
    case AugmentKind::noise: return add_colored_noise(w, rng, stats);
    case AugmentKind::equalizer: return equalizer_chain(w, rng);
    case AugmentKind::pitch: return pitch_shift(w, rng);
    case AugmentKind::random: return random_augment(w, rng, nullptr, stats);
  }
  return w;
}

Augmenter make_augmenter(AugmentKind kind, const MelConfig& mel, AugmentStats* stats) {
  return [kind, mel, stats](const Sample& s, std::mt19937_64& rng) {
    if (!s.waveform) throw DataError("sample " + s.source_id + " has no waveform to augment");
    auto w = std::make_shared<Waveform>(apply_augment(kind, *s.waveform, rng, stats));
    Sample out = s;
    out.features = std::make_shared<Tensor<float>>(log_mel(*w, mel));
    out.waveform = std::move(w);
    out.augmented = true;
    return out;
  };
}

}  // namespace epift
