#include "epift/audio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>

#include <unsupported/Eigen/FFT>

#include "epift/error.hpp"

namespace epift {

namespace {

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > bytes.size())
      throw ParseError(std::string("truncated WAV: expected ") + what, static_cast<long long>(pos));
  }
  std::uint32_t u32() {
    need(4, "32-bit field");
    std::uint32_t v = bytes[pos] | bytes[pos + 1] << 8 | bytes[pos + 2] << 16 | std::uint32_t(bytes[pos + 3]) << 24;
    pos += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2, "16-bit field");
    std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | bytes[pos + 1] << 8);
    pos += 2;
    return v;
  }
  std::string tag() {
    need(4, "chunk tag");
    std::string t(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    pos += 4;
    return t;
  }
};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_tag(std::vector<std::uint8_t>& out, const char* t) { out.insert(out.end(), t, t + 4); }

}  // namespace

double rms(const std::vector<float>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (float v : x) s += static_cast<double>(v) * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

Waveform parse_wav(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  if (r.tag() != "RIFF") throw ParseError("not a RIFF file", 0);
  r.u32();
  if (r.tag() != "WAVE") throw ParseError("RIFF form is not WAVE", 8);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (true) {
    const std::size_t chunk_at = r.pos;
    const std::string id = r.tag();
    const std::uint32_t size = r.u32();
    const std::size_t body = r.pos;
    if (id == "fmt ") {
      if (size < 16) throw ParseError("fmt chunk too short", static_cast<long long>(chunk_at));
      format = r.u16();
      channels = r.u16();
      rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      if (format == 0xFFFE) {
        if (size < 40) throw ParseError("extensible fmt chunk too short", static_cast<long long>(chunk_at));
        r.pos = body + 24;
        format = r.u16();  // first two bytes of the subformat GUID
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw ParseError("data chunk before fmt chunk", static_cast<long long>(chunk_at));
      const bool pcm16 = format == 1 && bits == 16;
      const bool f32 = format == 3 && bits == 32;
      if (!pcm16 && !f32)
        throw ParseError("unsupported WAV encoding (format " + std::to_string(format) + ", " + std::to_string(bits) +
                             " bits)",
                         static_cast<long long>(chunk_at));
      if (channels < 1 || channels > 2)
        throw ParseError("unsupported channel count " + std::to_string(channels), static_cast<long long>(chunk_at));
      if (rate == 0) throw ParseError("zero sample rate", static_cast<long long>(chunk_at));
      const std::size_t frame = static_cast<std::size_t>(channels) * (bits / 8);
      r.need(size, "data payload");
      const std::size_t frames = size / frame;
      Waveform w;
      w.sample_rate = rate;
      w.samples.resize(frames);
      const std::uint8_t* p = bytes.data() + r.pos;
      for (std::size_t i = 0; i < frames; ++i) {
        float acc = 0.0f;
        for (std::size_t c = 0; c < channels; ++c) {
          const std::uint8_t* s = p + i * frame + c * (bits / 8);
          if (pcm16) {
            const auto v = static_cast<std::int16_t>(s[0] | s[1] << 8);
            acc += static_cast<float>(v) / 32768.0f;
          } else {
            std::uint32_t u = s[0] | s[1] << 8 | s[2] << 16 | std::uint32_t(s[3]) << 24;
            float f;
            std::memcpy(&f, &u, 4);
            acc += f;
          }
        }
        w.samples[i] = channels == 2 ? acc * 0.5f : acc;
      }
      return w;
    }
    r.pos = body;
    r.need(size, "chunk body");
    r.pos = std::min(body + size + (size & 1u), bytes.size());
  }
}

Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

std::vector<std::uint8_t> encode_wav(const Waveform& w, WavEncoding enc) {
  const std::uint16_t bits = enc == WavEncoding::pcm16 ? 16 : 32;
  const std::uint32_t rate = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  const std::uint32_t data = static_cast<std::uint32_t>(w.samples.size() * (bits / 8));
  std::vector<std::uint8_t> out;
  out.reserve(44 + data);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, enc == WavEncoding::pcm16 ? 1 : 3);
  put_u16(out, 1);
  put_u32(out, rate);
  put_u32(out, rate * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  put_tag(out, "data");
  put_u32(out, data);
  for (float s : w.samples) {
    if (enc == WavEncoding::pcm16) {
      const long v = std::lround(std::clamp(static_cast<double>(s), -1.0, 1.0) * 32768.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(v, -32768L, 32767L))));
    } else {
      std::uint32_t u;
      std::memcpy(&u, &s, 4);
      put_u32(out, u);
    }
  }
  return out;
}

void write_wav(const std::string& path, const Waveform& w, WavEncoding enc) {
  const auto bytes = encode_wav(w, enc);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

std::pair<long, long> rational_approx(double x, long max_den) {
  // continued fraction convergents
  long p0 = 0, q0 = 1, p1 = 1, q1 = 0;
  double v = x;
  for (int i = 0; i < 64; ++i) {
    const double a = std::floor(v);
    const long ai = static_cast<long>(a);
    const long p2 = ai * p1 + p0, q2 = ai * q1 + q0;
    if (q2 > max_den) break;
    p0 = p1;
    q0 = q1;
    p1 = p2;
    q1 = q2;
    if (v - a < 1e-12) break;
    v = 1.0 / (v - a);
  }
  return {p1, q1};
}

std::vector<float> resample_ratio(std::span<const float> x, long up, long down) {
  if (up <= 0 || down <= 0) throw ConfigError("resampling factors must be positive");
  const long g = std::gcd(up, down);
  up /= g;
  down /= g;
  if (up == down) return {x.begin(), x.end()};

  const double fc = 0.95 * std::min(1.0, static_cast<double>(up) / static_cast<double>(down));
  const long zeros = 16;
  const long R = static_cast<long>(std::ceil(static_cast<double>(zeros) / fc));
  const long taps = 2 * R;
  const double beta = 8.6;
  const double i0b = std::cyl_bessel_i(0.0, beta);

  // table[phase][j] weights x[base - R + 1 + j] for output at base + phase/up
  std::vector<double> table(static_cast<std::size_t>(up * taps));
  for (long ph = 0; ph < up; ++ph) {
    const double frac = static_cast<double>(ph) / static_cast<double>(up);
    double sum = 0.0;
    for (long j = 0; j < taps; ++j) {
      const double d = static_cast<double>(R - 1 - j) + frac;
      const double u = d / static_cast<double>(R);
      double h = 0.0;
      if (std::abs(u) < 1.0) {
        const double arg = std::numbers::pi * fc * d;
        const double sinc = d == 0.0 ? 1.0 : std::sin(arg) / arg;
        h = fc * sinc * std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - u * u)) / i0b;
      }
      table[static_cast<std::size_t>(ph * taps + j)] = h;
      sum += h;
    }
    for (long j = 0; j < taps; ++j) table[static_cast<std::size_t>(ph * taps + j)] /= sum;
  }

  const long n_in = static_cast<long>(x.size());
  const long n_out = (n_in * up + down - 1) / down;
  std::vector<float> y(static_cast<std::size_t>(n_out));
  for (long n = 0; n < n_out; ++n) {
    const long num = n * down;
    const long base = num / up, ph = num % up;
    const double* h = &table[static_cast<std::size_t>(ph * taps)];
    double acc = 0.0;
    const long first = base - R + 1;
    const long lo = std::max(0L, -first), hi = std::min(taps, n_in - first);
    for (long j = lo; j < hi; ++j) acc += h[j] * x[static_cast<std::size_t>(first + j)];
    y[static_cast<std::size_t>(n)] = static_cast<float>(acc);
  }
  return y;
}

Waveform resample(const Waveform& w, double target_rate) {
  if (!(target_rate > 0)) throw ConfigError("target sample rate must be positive");
  if (target_rate == w.sample_rate) return w;
  long up, down;
  const double a = std::round(target_rate), b = std::round(w.sample_rate);
  if (a == target_rate && b == w.sample_rate) {
    up = static_cast<long>(a);
    down = static_cast<long>(b);
  } else {
    std::tie(up, down) = rational_approx(target_rate / w.sample_rate, 4096);
  }
  Waveform out;
  out.sample_rate = target_rate;
  out.samples = resample_ratio(w.samples, up, down);
  return out;
}

Waveform fix_duration(const Waveform& w, double seconds) {
  if (!(seconds > 0)) throw ConfigError("duration must be positive");
  Waveform out = w;
  out.samples.resize(static_cast<std::size_t>(std::llround(seconds * w.sample_rate)), 0.0f);
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

double top_frequency(const MelConfig& cfg, double rate) { return cfg.fmax > 0 ? cfg.fmax : rate / 2; }

std::vector<double> mel_edges(const MelConfig& cfg, double rate) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(top_frequency(cfg, rate));
  std::vector<double> hz(static_cast<std::size_t>(cfg.bins + 2));
  for (std::size_t i = 0; i < hz.size(); ++i)
    hz[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.bins + 1));
  return hz;
}

void check_mel(const MelConfig& cfg, double rate) {
  if (cfg.bins < 1) throw ConfigError("mel bins must be >= 1");
  if (cfg.hop < 1 || cfg.window < cfg.hop || cfg.fft < cfg.window)
    throw ConfigError("STFT needs fft >= window >= hop >= 1");
  if (cfg.fmin < 0 || top_frequency(cfg, rate) <= cfg.fmin || top_frequency(cfg, rate) > rate / 2)
    throw ConfigError("mel range must satisfy 0 <= fmin < fmax <= rate / 2");
}

}  // namespace

std::vector<double> mel_centers(const MelConfig& cfg, double rate) {
  auto e = mel_edges(cfg, rate);
  return {e.begin() + 1, e.end() - 1};
}

std::vector<std::vector<double>> mel_filterbank(const MelConfig& cfg, double rate) {
  check_mel(cfg, rate);
  const auto edges = mel_edges(cfg, rate);
  const int n_freq = cfg.fft / 2 + 1;
  std::vector<std::vector<double>> fb(static_cast<std::size_t>(cfg.bins), std::vector<double>(n_freq, 0.0));
  for (int m = 0; m < cfg.bins; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < n_freq; ++k) {
      const double f = k * rate / cfg.fft;
      double v = 0.0;
      if (f > lo && f <= c)
        v = (f - lo) / (c - lo);
      else if (f > c && f < hi)
        v = (hi - f) / (hi - c);
      fb[m][k] = v;
    }
  }
  return fb;
}

std::vector<double> magnitude_spectrum(std::span<const float> x, int n) {
  std::vector<double> buf(static_cast<std::size_t>(n), 0.0);
  for (std::size_t i = 0; i < std::min(x.size(), buf.size()); ++i) buf[i] = x[i];
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, buf);
  std::vector<double> mag(static_cast<std::size_t>(n / 2 + 1));
  for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(spec[k]);
  return mag;
}

Tensor<float> log_mel(const Waveform& w, const MelConfig& cfg) {
  check_mel(cfg, w.sample_rate);
  const long len = static_cast<long>(w.samples.size());
  if (len < cfg.window)
    throw DataError("clip of " + std::to_string(len) + " samples is shorter than one window (" +
                    std::to_string(cfg.window) + ")");
  const long frames = (len - cfg.window) / cfg.hop + 1;
  const auto fb = mel_filterbank(cfg, w.sample_rate);
  // sparse rows: first and last nonzero frequency per filter
  std::vector<std::pair<int, int>> span(fb.size(), {0, -1});
  for (std::size_t m = 0; m < fb.size(); ++m)
    for (int k = 0; k < static_cast<int>(fb[m].size()); ++k)
      if (fb[m][k] != 0.0) {
        if (span[m].second < 0) span[m].first = k;
        span[m].second = k;
      }

  std::vector<double> hann(static_cast<std::size_t>(cfg.window));
  for (int i = 0; i < cfg.window; ++i) hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / cfg.window);

  Eigen::FFT<double> fft;
  std::vector<double> buf(static_cast<std::size_t>(cfg.fft));
  std::vector<std::complex<double>> spec;
  Tensor<float> out({cfg.bins, static_cast<Index>(frames)});
  for (long f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const float* x = w.samples.data() + f * cfg.hop;
    for (int i = 0; i < cfg.window; ++i) buf[i] = x[i] * hann[i];
    fft.fwd(spec, buf);
    for (int m = 0; m < cfg.bins; ++m) {
      double e = 0.0;
      for (int k = span[m].first; k <= span[m].second; ++k) e += fb[m][k] * std::abs(spec[k]);
      out[m * frames + f] = static_cast<float>(std::log(e + cfg.eps));
    }
  }
  return out;
}

void SynthTaskSpec::validate() const {
  if (classes.empty()) throw ConfigError("synthetic task needs at least one class");
  if (!(clip_seconds > 0)) throw ConfigError("clip length must be positive");
  if (!(sample_rate > 0)) throw ConfigError("sample rate must be positive");
  if (jitter_cents < 0 || jitter_db < 0) throw ConfigError("jitter ranges must be non-negative");
  std::vector<double> f;
  for (const auto& c : classes) {
    if (!(c.fundamental > 0) || c.fundamental >= sample_rate / 2)
      throw ConfigError("fundamental " + std::to_string(c.fundamental) + " Hz outside (0, Nyquist)");
    if (c.harmonics.empty()) throw ConfigError("harmonic template is empty");
    f.push_back(c.fundamental);
  }
  std::sort(f.begin(), f.end());
  for (std::size_t i = 1; i < f.size(); ++i)
    if (1200.0 * std::log2(f[i] / f[i - 1]) < 100.0 - 1e-9)
      throw ConfigError("fundamentals " + std::to_string(f[i - 1]) + " and " + std::to_string(f[i]) +
                        " Hz are less than one semitone apart");
}

SynthTaskSpec random_synth_spec(int classes, std::mt19937_64& rng, int harmonics, double fmin, double fmax) {
  const int span = static_cast<int>(std::floor(12.0 * std::log2(fmax / fmin))) + 1;
  if (classes < 1 || classes > span)
    throw ConfigError("cannot place " + std::to_string(classes) + " classes on " + std::to_string(span) +
                      " semitones");
  std::vector<int> steps(static_cast<std::size_t>(span));
  std::iota(steps.begin(), steps.end(), 0);
  // partial Fisher-Yates keeps the draw independent of libstdc++ shuffle
  for (int i = 0; i < classes; ++i) {
    std::uniform_int_distribution<int> pick(i, span - 1);
    std::swap(steps[i], steps[pick(rng)]);
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SynthTaskSpec spec;
  for (int c = 0; c < classes; ++c) {
    SynthClass sc;
    sc.fundamental = fmin * std::pow(2.0, steps[c] / 12.0);
    const double decay = 0.3 + 1.2 * u(rng);
    for (int h = 0; h < harmonics; ++h) sc.harmonics.push_back(std::pow(h + 1.0, -decay) * (0.2 + 0.8 * u(rng)));
    spec.classes.push_back(std::move(sc));
  }
  return spec;
}

Waveform render_tone(const SynthClass& c, const SynthTaskSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  const double f0 = c.fundamental * std::pow(2.0, spec.jitter_cents * u(rng) / 1200.0);
  std::vector<double> amp(c.harmonics.size());
  double total = 0.0;
  for (std::size_t h = 0; h < amp.size(); ++h) {
    amp[h] = c.harmonics[h] * std::pow(10.0, spec.jitter_db * u(rng) / 20.0);
    if (f0 * static_cast<double>(h + 1) >= spec.sample_rate / 2) amp[h] = 0.0;
    total += amp[h];
  }
  const double norm = total > 0 ? 0.5 / total : 0.0;
  const double noise = std::pow(10.0, spec.noise_floor_db / 20.0);
  Waveform w;
  w.sample_rate = spec.sample_rate;
  w.samples.resize(static_cast<std::size_t>(std::llround(spec.clip_seconds * spec.sample_rate)));
  const double step = 2.0 * std::numbers::pi * f0 / spec.sample_rate;
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    double v = 0.0;
    for (std::size_t h = 0; h < amp.size(); ++h) v += amp[h] * std::sin(step * static_cast<double>((h + 1) * i));
    v = v * norm + noise * n(rng);
    w.samples[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return w;
}

SamplePool synth_dataset(const SynthTaskSpec& spec, int per_class, std::mt19937_64& rng, const MelConfig& mel) {
  spec.validate();
  if (per_class < 1) throw ConfigError("per_class must be >= 1");
  SamplePool pool;
  for (std::size_t c = 0; c < spec.classes.size(); ++c)
    for (int i = 0; i < per_class; ++i) {
      auto w = std::make_shared<Waveform>(render_tone(spec.classes[c], spec, rng));
      Sample s;
      s.features = std::make_shared<Tensor<float>>(log_mel(*w, mel));
      s.class_id = static_cast<int>(c);
      s.source_id = "synth/c" + std::to_string(c) + "/" + std::to_string(i);
      s.waveform = std::move(w);
      pool.samples.push_back(std::move(s));
    }
  return pool;
}

}  // namespace epift
