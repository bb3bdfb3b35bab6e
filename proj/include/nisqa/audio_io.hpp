#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "nisqa/common.hpp"

// WAV decode/encode and resampling. Every input becomes a mono 48 kHz
// buffer; amplitudes are scaled to [-1, 1] but the level itself is never
// normalized.

namespace nisqa {

constexpr std::uint32_t kCanonicalRate = 48000;

struct AudioBuffer {
    std::vector<double> samples;  // mono, [-1, 1]
    std::uint32_t sample_rate = kCanonicalRate;
    std::string source_path;

    double duration_s() const { return double(samples.size()) / double(sample_rate); }
};

namespace wav_detail {

template <typename T>
T read_le(std::istream& in) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(buf[i]) << (8 * i);
    return v;
}

template <typename T>
void write_le(std::ostream& out, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = (v >> (8 * i)) & 0xff;
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

inline double bessel_i0(double x) {
    // power series; converges fast for the beta values used here
    double sum = 1.0, term = 1.0;
    for (int k = 1; k < 64; ++k) {
        term *= (x / (2.0 * k)) * (x / (2.0 * k));
        sum += term;
        if (term < 1e-16 * sum) break;
    }
    return sum;
}

inline double sinc(double x) {
    if (std::abs(x) < 1e-12) return 1.0;
    double px = 3.14159265358979323846 * x;
    return std::sin(px) / px;
}

}  // namespace wav_detail

// Rational polyphase resampler: windowed-sinc prototype, Kaiser window,
// 64 taps per phase, cutoff at 0.9 x Nyquist of the lower rate.
inline std::vector<double> resample(const std::vector<double>& in, std::uint32_t rate_in,
                                    std::uint32_t rate_out) {
    if (rate_in == rate_out) return in;
    if (in.empty()) return {};
    std::uint32_t g = std::gcd(rate_in, rate_out);
    std::size_t up = rate_out / g;    // interpolation factor L
    std::size_t down = rate_in / g;   // decimation factor M

    constexpr std::size_t kTapsPerPhase = 64;
    constexpr double kBeta = 8.6;
    const std::size_t ntaps = kTapsPerPhase * up;
    const double center = double(ntaps - 1) / 2.0;
    // cutoff relative to the upsampled rate rate_in*up
    const double fc_hz = 0.9 * 0.5 * double(std::min(rate_in, rate_out));
    const double fc_n = fc_hz / (double(rate_in) * double(up));  // cycles/sample at hi rate

    std::vector<double> h(ntaps);
    const double i0b = wav_detail::bessel_i0(kBeta);
    for (std::size_t i = 0; i < ntaps; ++i) {
        double t = double(i) - center;
        double w_arg = 2.0 * double(i) / double(ntaps - 1) - 1.0;
        double window = wav_detail::bessel_i0(kBeta * std::sqrt(std::max(0.0, 1.0 - w_arg * w_arg))) / i0b;
        h[i] = 2.0 * fc_n * wav_detail::sinc(2.0 * fc_n * t) * window * double(up);
    }

    const std::size_t out_len = std::size_t(std::llround(double(in.size()) * double(rate_out) / double(rate_in)));
    std::vector<double> out(out_len);
    const std::ptrdiff_t in_len = std::ptrdiff_t(in.size());
    for (std::size_t n = 0; n < out_len; ++n) {
        // position in the upsampled stream, centered on the filter
        std::size_t pos = n * down;
        std::size_t phase = pos % up;
        std::ptrdiff_t base = std::ptrdiff_t(pos / up);
        double acc = 0.0;
        // h index i such that i % up == (up - 1 - ... ); iterate taps of this phase:
        // upsampled sample at (base - t) contributes h[phase + t*up] shifted by center
        const std::ptrdiff_t half = std::ptrdiff_t(kTapsPerPhase / 2);
        for (std::ptrdiff_t t = -half; t < half; ++t) {
            std::ptrdiff_t k = base - t;
            if (k < 0 || k >= in_len) continue;
            std::ptrdiff_t hi = std::ptrdiff_t(phase) + (t + half) * std::ptrdiff_t(up);
            double coeff = h[std::size_t(hi)];
            acc += in[std::size_t(k)] * coeff;
        }
        out[n] = acc;
    }
    return out;
}

// Reads a RIFF/WAVE file (PCM16 or IEEE float32, 1-2 channels, 8-48 kHz),
// averages stereo to mono, resamples to 48 kHz. No gain normalization.
inline AudioBuffer load_audio(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open audio file: " + path);

    char riff[4], wave[4];
    in.read(riff, 4);
    std::uint32_t riff_size = wav_detail::read_le<std::uint32_t>(in);
    (void)riff_size;
    in.read(wave, 4);
    if (!in || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
        throw DataError("not a RIFF/WAVE file: " + path);

    std::uint16_t fmt_tag = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    std::vector<char> raw;
    bool have_data = false;

    while (in) {
        char id[4];
        in.read(id, 4);
        if (!in) break;
        std::uint32_t sz = wav_detail::read_le<std::uint32_t>(in);
        if (!in) break;
        if (std::memcmp(id, "fmt ", 4) == 0) {
            fmt_tag = wav_detail::read_le<std::uint16_t>(in);
            channels = wav_detail::read_le<std::uint16_t>(in);
            rate = wav_detail::read_le<std::uint32_t>(in);
            wav_detail::read_le<std::uint32_t>(in);  // byte rate
            wav_detail::read_le<std::uint16_t>(in);  // block align
            bits = wav_detail::read_le<std::uint16_t>(in);
            if (sz > 16) in.seekg(sz - 16, std::ios::cur);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            raw.resize(sz);
            in.read(raw.data(), sz);
            have_data = true;
        } else {
            in.seekg(sz + (sz & 1), std::ios::cur);
            continue;
        }
        if (sz & 1) in.seekg(1, std::ios::cur);
    }
    if (!have_fmt || !have_data) throw DataError("missing fmt/data chunk: " + path);
    if (fmt_tag != 1 && fmt_tag != 3 && fmt_tag != 0xfffe)
        throw DataError("unsupported codec (format tag " + std::to_string(fmt_tag) + "): " + path);
    bool is_float = (fmt_tag == 3) || (fmt_tag == 0xfffe && bits == 32);
    if (!is_float && bits != 16)
        throw DataError("unsupported bit depth " + std::to_string(bits) + ": " + path);
    if (is_float && bits != 32) throw DataError("unsupported float bit depth: " + path);
    if (channels < 1 || channels > 2)
        throw DataError("unsupported channel count " + std::to_string(channels) + ": " + path);
    if (rate < 8000 || rate > 48000)
        throw DataError("unsupported sample rate " + std::to_string(rate) + ": " + path);

    std::size_t bytes_per = bits / 8;
    std::size_t frames = raw.size() / (bytes_per * channels);
    if (frames == 0) throw DataError("zero-length audio stream: " + path);

    std::vector<double> mono(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c) {
            const unsigned char* p =
                reinterpret_cast<const unsigned char*>(raw.data()) + (i * channels + c) * bytes_per;
            if (is_float) {
                std::uint32_t u = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                                  std::uint32_t(p[3]) << 24;
                float f;
                std::memcpy(&f, &u, 4);
                acc += double(f);
            } else {
                std::int16_t s = std::int16_t(std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8));
                acc += double(s) / 32768.0;
            }
        }
        mono[i] = acc / double(channels);
    }

    AudioBuffer buf;
    buf.samples = resample(mono, rate, kCanonicalRate);
    buf.sample_rate = kCanonicalRate;
    buf.source_path = path;
    return buf;
}

// PCM16 WAV at 48 kHz; values outside [-1, 1] clip to the PCM16 range.
inline void write_audio(const AudioBuffer& buffer, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open output file: " + path);
    std::uint32_t data_bytes = std::uint32_t(buffer.samples.size() * 2);
    out.write("RIFF", 4);
    wav_detail::write_le<std::uint32_t>(out, 36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    wav_detail::write_le<std::uint32_t>(out, 16);
    wav_detail::write_le<std::uint16_t>(out, 1);  // PCM
    wav_detail::write_le<std::uint16_t>(out, 1);  // mono
    wav_detail::write_le<std::uint32_t>(out, buffer.sample_rate);
    wav_detail::write_le<std::uint32_t>(out, buffer.sample_rate * 2);
    wav_detail::write_le<std::uint16_t>(out, 2);
    wav_detail::write_le<std::uint16_t>(out, 16);
    out.write("data", 4);
    wav_detail::write_le<std::uint32_t>(out, data_bytes);
    for (double v : buffer.samples) {
        long q = std::lround(v * 32768.0);
        q = std::clamp(q, -32768l, 32767l);
        wav_detail::write_le<std::uint16_t>(out, std::uint16_t(std::int16_t(q)));
    }
    if (!out) throw DataError("failed writing audio: " + path);
}

}  // namespace nisqa
