#pragma once

#include <vector>

namespace epift {

struct Waveform {
  std::vector<float> samples;  // mono, nominally in [-1, 1]
  double sample_rate = 16000.0;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

}  // namespace epift
