#pragma once

// Filtering, resampling and cropping of continuous multichannel recordings.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "ecl/error.hpp"

namespace ecl {

struct Event {
  std::size_t onset = 0;  // sample index
  std::uint16_t label = 0;
};

/// Channels x samples, row-major.
struct RawRecording {
  std::vector<double> data;
  std::size_t channels = 0;
  std::size_t samples = 0;
  double fs = 0.0;
  std::vector<Event> events;
  std::uint32_t subject = 0;
  std::uint16_t session = 0;

  double* channel(std::size_t c) { return data.data() + c * samples; }
  const double* channel(std::size_t c) const { return data.data() + c * samples; }

  void validate() const {
    if (!(fs > 0.0)) throw ParameterError("recording: fs must be positive");
    if (data.size() != channels * samples) {
      throw DimensionError("recording: " + std::to_string(data.size()) + " values for " +
                           std::to_string(channels) + "x" + std::to_string(samples));
    }
    for (const auto& e : events) {
      if (e.onset >= samples) throw ParameterError("recording: event onset beyond end of data");
    }
  }
};

/// One biquad, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

using Sos = std::vector<Biquad>;

/// Second-order IIR notch (same design as scipy.signal.iirnotch).
inline Biquad design_notch(double freq, double quality, double fs) {
  if (!(freq > 0.0) || !(freq < fs / 2.0)) {
    throw ParameterError("notch: frequency " + std::to_string(freq) + " Hz outside (0, " +
                         std::to_string(fs / 2.0) + ")");
  }
  if (!(quality > 0.0)) throw ParameterError("notch: quality must be positive");
  const double w0 = freq / (fs / 2.0);
  const double bw = w0 / quality;
  const double beta = std::tan(bw * std::numbers::pi / 2.0);
  const double gain = 1.0 / (1.0 + beta);
  const double c = std::cos(w0 * std::numbers::pi);
  return {gain, -2.0 * gain * c, gain, -2.0 * gain * c, 2.0 * gain - 1.0};
}

inline std::complex<double> sos_response(const Sos& sos, double omega) {
  const std::complex<double> z1 = std::polar(1.0, -omega), z2 = z1 * z1;
  std::complex<double> h = 1.0;
  for (const auto& s : sos) h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  return h;
}

/// Butterworth bandpass of prototype order `order` (even), as second-order
/// sections: analog prototype -> lowpass-to-bandpass -> bilinear transform.
/// Unit gain at the center frequency.
inline Sos design_butter_bandpass(double low, double high, int order, double fs) {
  if (!(low > 0.0) || !(low < high) || !(high < fs / 2.0)) {
    throw ParameterError("bandpass: need 0 < low < high < fs/2, got low=" + std::to_string(low) +
                         " high=" + std::to_string(high) + " fs=" + std::to_string(fs));
  }
  if (order < 2 || order % 2 != 0) throw ParameterError("bandpass: order must be even and >= 2");
  const double k = 2.0 * fs;
  const double w_lo = k * std::tan(std::numbers::pi * low / fs);
  const double w_hi = k * std::tan(std::numbers::pi * high / fs);
  const double bw = w_hi - w_lo, w0sq = w_lo * w_hi;
  Sos sos;
  for (int i = 0; i < order / 2; ++i) {
    // upper-half-plane prototype pole; its conjugate gives the mirrored sections
    const std::complex<double> p = std::polar(1.0, std::numbers::pi * (2.0 * i + order + 1) / (2.0 * order));
    const std::complex<double> half = p * bw / 2.0;
    const std::complex<double> root = std::sqrt(half * half - w0sq);
    for (const auto& s : {half + root, half - root}) {
      const std::complex<double> z = (k + s) / (k - s);
      sos.push_back({1.0, 0.0, -1.0, -2.0 * z.real(), std::norm(z)});
    }
  }
  const double center = 2.0 * std::atan(std::sqrt(w0sq) / k);
  const double g = 1.0 / std::abs(sos_response(sos, center));
  sos[0].b0 *= g;
  sos[0].b1 *= g;
  sos[0].b2 *= g;
  return sos;
}

namespace detail {

/// Steady-state state of one transposed direct-form II section for a unit step.
inline std::array<double, 2> step_state(const Biquad& s) {
  const double z0 = (s.b1 - s.a1 * s.b0 + s.b2 - s.a2 * s.b0) / (1.0 + s.a1 + s.a2);
  const double z1 = s.b2 - s.a2 * s.b0 - s.a2 * z0;
  return {z0, z1};
}

inline void sosfilt_inplace(const Sos& sos, std::vector<double>& x) {
  if (x.empty()) return;
  // Initial conditions for a step of height x[0] through the cascade.
  double scale = x[0];
  for (const auto& s : sos) {
    auto [z0, z1] = step_state(s);
    z0 *= scale;
    z1 *= scale;
    for (auto& v : x) {
      const double y = s.b0 * v + z0;
      z0 = s.b1 * v - s.a1 * y + z1;
      z1 = s.b2 * v - s.a2 * y;
      v = y;
    }
    scale *= (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  }
}

}  // namespace detail

/// Zero-phase forward-backward filtering with odd-extension padding.
inline std::vector<double> sosfiltfilt(const Sos& sos, const double* x, std::size_t n) {
  const std::size_t pad = 3 * (2 * sos.size() + 1);
  if (n <= pad) {
    throw ParameterError("filtfilt: signal of " + std::to_string(n) + " samples is too short (need > " +
                         std::to_string(pad) + ")");
  }
  std::vector<double> ext(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) {
    ext[i] = 2.0 * x[0] - x[pad - i];
    ext[pad + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];
  }
  std::copy(x, x + n, ext.begin() + static_cast<std::ptrdiff_t>(pad));
  detail::sosfilt_inplace(sos, ext);
  std::reverse(ext.begin(), ext.end());
  detail::sosfilt_inplace(sos, ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

inline RawRecording apply_zero_phase(const Sos& sos, RawRecording rec) {
  rec.validate();
  for (std::size_t c = 0; c < rec.channels; ++c) {
    const auto y = sosfiltfilt(sos, rec.channel(c), rec.samples);
    std::copy(y.begin(), y.end(), rec.channel(c));
  }
  return rec;
}

inline RawRecording notch_filter(RawRecording rec, double freq = 50.0, double quality = 30.0) {
  const Sos sos{design_notch(freq, quality, rec.fs)};
  return apply_zero_phase(sos, std::move(rec));
}

inline RawRecording bandpass(RawRecording rec, double low = 4.0, double high = 38.0, int order = 4) {
  return apply_zero_phase(design_butter_bandpass(low, high, order, rec.fs), std::move(rec));
}

/// Kaiser-windowed sinc lowpass for rational resampling by up/down.
/// Length 2*half_len+1, cutoff at the lower of the two Nyquist rates, DC gain `up`.
inline std::vector<double> resample_filter(std::size_t up, std::size_t down, double kaiser_beta = 5.0) {
  const std::size_t max_rate = std::max(up, down);
  const std::size_t half_len = 10 * max_rate;
  const double cutoff = 1.0 / static_cast<double>(max_rate);
  const std::size_t n = 2 * half_len + 1;
  std::vector<double> h(n);
  const double i0_beta = std::cyl_bessel_i(0.0, kaiser_beta);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = static_cast<double>(i) - static_cast<double>(half_len);
    const double arg = std::numbers::pi * cutoff * m;
    const double sinc = m == 0.0 ? 1.0 : std::sin(arg) / arg;
    const double r = m / static_cast<double>(half_len);
    const double w = std::cyl_bessel_i(0.0, kaiser_beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
    h[i] = cutoff * sinc * w;
    total += h[i];
  }
  for (auto& v : h) v *= static_cast<double>(up) / total;
  return h;
}

/// Polyphase rational resampling to `target_fs`. Both rates must be whole
/// numbers of Hz. Events are rescaled and rounded to the nearest sample.
inline RawRecording resample(const RawRecording& rec, double target_fs = 100.0) {
  rec.validate();
  if (!(target_fs > 0.0)) throw ParameterError("resample: target rate must be positive");
  if (target_fs > rec.fs) {
    throw ParameterError("resample: upsampling from " + std::to_string(rec.fs) + " to " + std::to_string(target_fs) +
                         " Hz is not supported");
  }
  if (std::round(rec.fs) != rec.fs || std::round(target_fs) != target_fs) {
    throw ParameterError("resample: rates must be integral in Hz");
  }
  const auto fs_i = static_cast<std::size_t>(rec.fs), tgt_i = static_cast<std::size_t>(target_fs);
  const std::size_t g = std::gcd(fs_i, tgt_i);
  const std::size_t up = tgt_i / g, down = fs_i / g;

  RawRecording out;
  out.channels = rec.channels;
  out.fs = target_fs;
  out.subject = rec.subject;
  out.session = rec.session;
  out.samples = static_cast<std::size_t>(
      std::llround(static_cast<double>(rec.samples) * static_cast<double>(up) / static_cast<double>(down)));
  out.data.assign(out.channels * out.samples, 0.0);
  for (const auto& e : rec.events) {
    const auto onset = static_cast<std::size_t>(
        std::llround(static_cast<double>(e.onset) * static_cast<double>(up) / static_cast<double>(down)));
    if (onset < out.samples) out.events.push_back({onset, e.label});
  }
  if (up == down) {
    out.data = rec.data;
    return out;
  }

  const auto h = resample_filter(up, down);
  const auto half = static_cast<std::int64_t>((h.size() - 1) / 2);
  const auto iup = static_cast<std::int64_t>(up), idown = static_cast<std::int64_t>(down);
  const auto n_in = static_cast<std::int64_t>(rec.samples);
  for (std::size_t c = 0; c < rec.channels; ++c) {
    const double* x = rec.channel(c);
    double* y = out.channel(c);
    for (std::size_t m = 0; m < out.samples; ++m) {
      // y[m] = sum_j x[j] h(m*down - j*up), h centered at 0
      const std::int64_t t = static_cast<std::int64_t>(m) * idown;
      std::int64_t j_lo = (t - half + iup - 1) / iup;
      if (t - half < 0) j_lo = 0;
      const std::int64_t j_hi = std::min((t + half) / iup, n_in - 1);
      double acc = 0.0;
      for (std::int64_t j = std::max<std::int64_t>(j_lo, 0); j <= j_hi; ++j) {
        acc += x[j] * h[static_cast<std::size_t>(t - j * iup + half)];
      }
      y[m] = acc;
    }
  }
  return out;
}

/// One labelled C x T window.
struct Trial {
  std::vector<double> data;  // row-major C x T
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::uint16_t label = 0;
  std::uint32_t subject = 0;
  std::uint16_t session = 0;
};

struct CropResult {
  std::vector<Trial> trials;
  std::size_t dropped = 0;  // events whose window runs past the end
};

/// Window of `window_seconds` starting at each event onset, in event order.
inline CropResult crop_trials(const RawRecording& rec, double window_seconds = 4.0) {
  rec.validate();
  const auto len = static_cast<std::size_t>(std::llround(window_seconds * rec.fs));
  if (len == 0) throw ParameterError("crop: empty window");
  CropResult out;
  for (const auto& e : rec.events) {
    if (e.onset + len > rec.samples) {
      ++out.dropped;
      continue;
    }
    Trial t;
    t.channels = rec.channels;
    t.samples = len;
    t.label = e.label;
    t.subject = rec.subject;
    t.session = rec.session;
    t.data.resize(rec.channels * len);
    for (std::size_t c = 0; c < rec.channels; ++c) {
      std::copy_n(rec.channel(c) + e.onset, len, t.data.data() + c * len);
    }
    out.trials.push_back(std::move(t));
  }
  return out;
}

struct PipelineConfig {
  double notch_hz = 50.0;
  double notch_quality = 30.0;
  double band_low = 4.0;
  double band_high = 38.0;
  int band_order = 4;
  double target_fs = 100.0;
  double window_seconds = 4.0;
};

/// notch -> bandpass -> resample -> crop.
inline CropResult preprocess(RawRecording rec, const PipelineConfig& cfg = {}) {
  rec = notch_filter(std::move(rec), cfg.notch_hz, cfg.notch_quality);
  rec = bandpass(std::move(rec), cfg.band_low, cfg.band_high, cfg.band_order);
  return crop_trials(resample(rec, cfg.target_fs), cfg.window_seconds);
}

}  // namespace ecl
