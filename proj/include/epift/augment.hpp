#pragma once

#include <atomic>
#include <random>
#include <string>
#include <vector>

#include "epift/audio.hpp"
#include "epift/episodes.hpp"
#include "epift/waveform.hpp"

namespace epift {

enum class AugmentKind { none, noise, equalizer, pitch, random };
const char* to_string(AugmentKind k);
AugmentKind parse_augment(const std::string& text);

struct AugmentStats {
  std::atomic<std::size_t> silent_inputs{0};  // noise requested on an all-zero clip
};

// Gaussian noise shaped by |f|^(-gamma/2), scaled to the requested SNR
// against the input RMS, added, then clipped to [-1, 1]. Silent input comes
// back unchanged and bumps stats->silent_inputs.
Waveform add_colored_noise(const Waveform& w, double gamma, double snr_db, std::mt19937_64& rng,
                           AugmentStats* stats = nullptr);
// gamma ~ U[-2, 2], SNR ~ U[12, 100] dB.
Waveform add_colored_noise(const Waveform& w, std::mt19937_64& rng, AugmentStats* stats = nullptr);

struct PeakingBand {
  double center_hz = 1000.0;
  double gain_db = 0.0;
  double q = 0.707;
};

struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;  // normalized, a0 = 1
};

Biquad peaking_biquad(const PeakingBand& band, double rate);
std::vector<float> apply_biquad(const Biquad& f, const std::vector<float>& x);

// Applies the bands in series. Rates at or below 6 kHz are rejected.
Waveform equalizer_chain(const Waveform& w, const std::vector<PeakingBand>& bands);
// s bands, centres log-uniform in [30, 3000] Hz, gains U[-8, 8] dB.
std::vector<PeakingBand> random_bands(int s, std::mt19937_64& rng);
Waveform equalizer_chain(const Waveform& w, std::mt19937_64& rng, int s = 4);

// Resamples by 2^(-semitones/12) and pads or truncates back to the input
// length. Semitones must be in {-2, -1, 1, 2}; extended also admits +-12.
Waveform pitch_shift(const Waveform& w, int semitones, bool extended = false);
Waveform pitch_shift(const Waveform& w, std::mt19937_64& rng);

// Uniform choice among noise, equalizer and pitch. `chosen` receives the pick.
Waveform random_augment(const Waveform& w, std::mt19937_64& rng, AugmentKind* chosen = nullptr,
                        AugmentStats* stats = nullptr);

Waveform apply_augment(AugmentKind kind, const Waveform& w, std::mt19937_64& rng, AugmentStats* stats = nullptr);

// ADFT hook: augments the sample's waveform and recomputes its features.
// Samples without a waveform throw DataError, which makes the splitter keep
// the raw copy.
Augmenter make_augmenter(AugmentKind kind, const MelConfig& mel, AugmentStats* stats = nullptr);

}  // namespace epift
