#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "epift/episodes.hpp"
#include "epift/tensor.hpp"
#include "epift/waveform.hpp"

namespace epift {

double rms(const std::vector<float>& x);

enum class WavEncoding { pcm16, float32 };

// RIFF/WAVE, PCM 16-bit or IEEE float 32-bit, mono or stereo (averaged).
Waveform parse_wav(std::span<const std::uint8_t> bytes);
Waveform load_wav(const std::string& path);
std::vector<std::uint8_t> encode_wav(const Waveform& w, WavEncoding enc = WavEncoding::pcm16);
void write_wav(const std::string& path, const Waveform& w, WavEncoding enc = WavEncoding::pcm16);

// Band-limited rational resampling by up/down (Kaiser-windowed sinc,
// polyphase). Output length is ceil(len * up / down).
std::vector<float> resample_ratio(std::span<const float> x, long up, long down);

// Best rational approximation p/q of x with q <= max_den.
std::pair<long, long> rational_approx(double x, long max_den);

Waveform resample(const Waveform& w, double target_rate);

// Zero-pads or truncates on the right to round(seconds * rate) samples.
Waveform fix_duration(const Waveform& w, double seconds);

struct MelConfig {
  int bins = 128;
  int window = 1024;
  int hop = 512;
  int fft = 1024;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means rate / 2
  double eps = 1e-10;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Centre frequencies of the mel filters, ascending.
std::vector<double> mel_centers(const MelConfig& cfg, double rate);

// (bins, fft/2 + 1) triangular filters on the HTK mel scale.
std::vector<std::vector<double>> mel_filterbank(const MelConfig& cfg, double rate);

// Magnitude of the real FFT of x (zero-padded to n), n/2 + 1 values.
std::vector<double> magnitude_spectrum(std::span<const float> x, int n);

// (bins, frames) log-mel of the magnitude STFT with a Hann window.
// frames = floor((len - window) / hop) + 1.
Tensor<float> log_mel(const Waveform& w, const MelConfig& cfg = {});

struct SynthClass {
  double fundamental = 220.0;      // Hz
  std::vector<double> harmonics;   // amplitude of harmonic h+1
};

struct SynthTaskSpec {
  std::vector<SynthClass> classes;
  double jitter_cents = 0.0;     // fundamental drawn within +-cents
  double jitter_db = 0.0;        // each harmonic amplitude within +-dB
  double noise_floor_db = -120;  // white noise RMS relative to full scale
  double clip_seconds = 0.5;
  double sample_rate = 16000.0;

  // Throws ConfigError on overlapping fundamentals (< 1 semitone apart),
  // bad durations or rates, or fundamentals above Nyquist.
  void validate() const;
};

// Random harmonic templates: fundamentals on distinct semitones of
// [fmin, fmax], harmonic amplitudes decaying with random per-class shape.
SynthTaskSpec random_synth_spec(int classes, std::mt19937_64& rng, int harmonics = 6, double fmin = 110.0,
                                double fmax = 880.0);

Waveform render_tone(const SynthClass& c, const SynthTaskSpec& spec, std::mt19937_64& rng);

// per_class samples for each class; class ids are template indices.
// Waveforms are kept on the samples so ADFT can augment them.
SamplePool synth_dataset(const SynthTaskSpec& spec, int per_class, std::mt19937_64& rng, const MelConfig& mel);

}  // namespace epift
