#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <ostream>
#include <vector>

#include "nisqa/audio_io.hpp"
#include "nisqa/common.hpp"
#include "nisqa/tensor.hpp"

// Log-mel spectrogram (48 bands, 20 ms Hann window, 10 ms hop, f_max 20 kHz)
// and the overlapping 48x15 segmentation with segment hop 4. A 10 s signal
// yields exactly 250 segments.

namespace nisqa {

constexpr std::size_t kMelBands = 48;
constexpr std::size_t kWindowSamples = 960;  // 20 ms at 48 kHz
constexpr std::size_t kHopSamples = 480;     // 10 ms
constexpr std::size_t kFftSize = 1024;
constexpr std::size_t kSegmentWidth = 15;    // 150 ms
constexpr std::size_t kSegmentHop = 4;       // 40 ms
constexpr double kFMax = 20000.0;
constexpr double kLogPowerFloor = 1e-7;

struct MelSpectrogram {
    // frames: kMelBands x F, row-major (band-major)
    Tensor<double> frames;
    std::size_t num_frames() const { return frames.dim(1); }
};

struct MelSegments {
    // each segment 48 x 15
    std::vector<Tensor<double>> segments;
    std::vector<bool> mask;  // true at valid (non-padding) segments
    double source_duration_s = 0.0;

    std::size_t valid_length() const {
        std::size_t n = 0;
        for (bool b : mask) n += b ? 1 : 0;
        return n;
    }
};

namespace feat_detail {

// iterative radix-2 complex FFT, in place, size must be a power of two
inline void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        double ang = -2.0 * 3.14159265358979323846 / double(len);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                auto u = a[i + j];
                auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// 48 triangular filters, HTK mel scale, band edges equally spaced in mel
// on [0, 20 kHz], unit peak. Rows: band, cols: FFT bin (kFftSize/2+1).
inline const std::vector<double>& mel_filterbank() {
    static const std::vector<double> fb = [] {
        const std::size_t nbins = kFftSize / 2 + 1;
        std::vector<double> fb(kMelBands * nbins, 0.0);
        const double mel_max = hz_to_mel(kFMax);
        std::vector<double> edges_hz(kMelBands + 2);
        for (std::size_t i = 0; i < kMelBands + 2; ++i)
            edges_hz[i] = mel_to_hz(mel_max * double(i) / double(kMelBands + 1));
        for (std::size_t b = 0; b < kMelBands; ++b) {
            double lo = edges_hz[b], mid = edges_hz[b + 1], hi = edges_hz[b + 2];
            for (std::size_t k = 0; k < nbins; ++k) {
                double f = double(k) * double(kCanonicalRate) / double(kFftSize);
                double v = 0.0;
                if (f > lo && f < mid)
                    v = (f - lo) / (mid - lo);
                else if (f >= mid && f < hi)
                    v = (hi - f) / (hi - mid);
                fb[b * nbins + k] = v;
            }
        }
        return fb;
    }();
    return fb;
}

inline double mel_band_center_hz(std::size_t band) {
    const double mel_max = hz_to_mel(kFMax);
    return mel_to_hz(mel_max * double(band + 1) / double(kMelBands + 1));
}

}  // namespace feat_detail

inline MelSpectrogram compute_melspec(const AudioBuffer& buffer) {
    if (buffer.sample_rate != kCanonicalRate) throw DataError("compute_melspec: buffer not at 48 kHz");
    if (buffer.samples.size() < kWindowSamples) throw DataError("signal too short");
    const std::size_t f = buffer.samples.size() / kHopSamples;
    const std::size_t nbins = kFftSize / 2 + 1;

    static const std::vector<double> hann = [] {
        std::vector<double> w(kWindowSamples);
        for (std::size_t i = 0; i < kWindowSamples; ++i)
            w[i] = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * double(i) / double(kWindowSamples));
        return w;
    }();

    MelSpectrogram mel;
    mel.frames = Tensor<double>({kMelBands, f});
    const auto& fb = feat_detail::mel_filterbank();
    std::vector<std::complex<double>> buf(kFftSize);
    std::vector<double> power(nbins);
    for (std::size_t t = 0; t < f; ++t) {
        const std::size_t start = t * kHopSamples;
        for (std::size_t i = 0; i < kFftSize; ++i) {
            // frames whose window overruns the signal are zero-padded
            double s = (i < kWindowSamples && start + i < buffer.samples.size())
                           ? buffer.samples[start + i] * hann[i]
                           : 0.0;
            buf[i] = {s, 0.0};
        }
        feat_detail::fft(buf);
        for (std::size_t k = 0; k < nbins; ++k) power[k] = std::norm(buf[k]);
        for (std::size_t b = 0; b < kMelBands; ++b) {
            double e = 0.0;
            const double* row = fb.data() + b * nbins;
            for (std::size_t k = 0; k < nbins; ++k) e += row[k] * power[k];
            mel.frames.at(b, t) = std::log10(std::max(e, kLogPowerFloor));
        }
    }
    return mel;
}

// Segment k is centered on frame 4k (columns 4k-7 .. 4k+7); out-of-range
// columns are zero-filled, so L = ceil(F/4).
inline MelSegments segment_melspec(const MelSpectrogram& mel) {
    const std::size_t f = mel.num_frames();
    if (f == 0) throw DataError("segment_melspec: empty spectrogram");
    const std::size_t l = (f + kSegmentHop - 1) / kSegmentHop;
    MelSegments segs;
    segs.segments.reserve(l);
    segs.mask.assign(l, true);
    segs.source_duration_s = double(f) * 0.010;
    const std::ptrdiff_t halfw = std::ptrdiff_t(kSegmentWidth / 2);
    for (std::size_t k = 0; k < l; ++k) {
        Tensor<double> seg({kMelBands, kSegmentWidth});
        const std::ptrdiff_t center = std::ptrdiff_t(k * kSegmentHop);
        for (std::ptrdiff_t c = -halfw; c <= halfw; ++c) {
            std::ptrdiff_t src = center + c;
            if (src < 0 || src >= std::ptrdiff_t(f)) continue;
            for (std::size_t b = 0; b < kMelBands; ++b)
                seg.at(b, std::size_t(c + halfw)) = mel.frames.at(b, std::size_t(src));
        }
        segs.segments.push_back(std::move(seg));
    }
    return segs;
}

// Appends all-zero segments up to target_l; mask keeps exactly the original
// valid prefix true.
inline MelSegments zero_pad_segments(const MelSegments& segs, std::size_t target_l) {
    const std::size_t l = segs.segments.size();
    if (target_l < l) throw DataError("zero_pad_segments: target shorter than sequence");
    MelSegments out = segs;
    out.segments.reserve(target_l);
    out.mask.resize(target_l, false);
    for (std::size_t i = l; i < target_l; ++i)
        out.segments.emplace_back(Tensor<double>({kMelBands, kSegmentWidth}));
    return out;
}

// Debug dump: one CSV row per mel band.
inline void dump_melspec_csv(const MelSpectrogram& mel, std::ostream& out) {
    for (std::size_t b = 0; b < kMelBands; ++b) {
        for (std::size_t t = 0; t < mel.num_frames(); ++t) {
            if (t) out << ',';
            out << mel.frames.at(b, t);
        }
        out << '\n';
    }
}

}  // namespace nisqa
