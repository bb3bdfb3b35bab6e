#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <sstream>
#include <vector>

#include "nisqa/common.hpp"
#include "nisqa/features.hpp"

using namespace nisqa;

namespace {

AudioBuffer make_noise(std::size_t n, std::uint64_t seed) {
    AudioBuffer b;
    b.samples.resize(n);
    Rng rng(seed);
    for (auto& v : b.samples) v = rng.uniform(-0.5, 0.5);
    return b;
}

// quadratic-time DFT power spectrum of one windowed frame
std::vector<double> naive_frame_power(const std::vector<double>& x, std::size_t start) {
    std::vector<double> frame(kFftSize, 0.0);
    for (std::size_t i = 0; i < kWindowSamples; ++i) {
        double w = 0.5 - 0.5 * std::cos(2.0 * M_PI * double(i) / double(kWindowSamples));
        if (start + i < x.size()) frame[i] = x[start + i] * w;
    }
    std::vector<double> power(kFftSize / 2 + 1);
    for (std::size_t k = 0; k < power.size(); ++k) {
        double re = 0.0, im = 0.0;
        for (std::size_t n = 0; n < kFftSize; ++n) {
            double ang = -2.0 * M_PI * double(k) * double(n) / double(kFftSize);
            re += frame[n] * std::cos(ang);
            im += frame[n] * std::sin(ang);
        }
        power[k] = re * re + im * im;
    }
    return power;
}

}  // namespace

TEST_CASE("mel frames match a quadratic-time DFT oracle") {
    auto b = make_noise(kHopSamples * 6 + kWindowSamples, 42);
    auto mel = compute_melspec(b);
    const auto& fb = feat_detail::mel_filterbank();
    const std::size_t nbins = kFftSize / 2 + 1;
    for (std::size_t t : {std::size_t(0), std::size_t(2), std::size_t(5)}) {
        auto power = naive_frame_power(b.samples, t * kHopSamples);
        for (std::size_t band = 0; band < kMelBands; ++band) {
            double e = 0.0;
            for (std::size_t k = 0; k < nbins; ++k) e += fb[band * nbins + k] * power[k];
            double expected = std::log10(std::max(e, kLogPowerFloor));
            REQUIRE(mel.frames.at(band, t) == Catch::Approx(expected).margin(1e-9));
        }
    }
}

TEST_CASE("frame and segment counts") {
    SECTION("10 s gives 1000 frames and 250 segments") {
        auto b = make_noise(480000, 1);
        auto mel = compute_melspec(b);
        REQUIRE(mel.frames.dim(0) == kMelBands);
        REQUIRE(mel.num_frames() == 1000u);
        auto segs = segment_melspec(mel);
        REQUIRE(segs.segments.size() == 250u);
        REQUIRE(segs.valid_length() == 250u);
    }
    SECTION("L = ceil(F/4) across durations") {
        for (std::size_t secs : {1u, 3u, 7u}) {
            auto b = make_noise(48000u * secs, secs);
            auto segs = segment_melspec(compute_melspec(b));
            std::size_t f = 100u * secs;
            REQUIRE(segs.segments.size() == (f + 3) / 4);
        }
    }
    SECTION("signal shorter than one window is rejected") {
        auto b = make_noise(kWindowSamples - 1, 9);
        REQUIRE_THROWS_WITH(compute_melspec(b), Catch::Matchers::ContainsSubstring("signal too short"));
    }
}

TEST_CASE("segments are windows over the spectrogram, centered on frame 4k") {
    auto b = make_noise(48000 * 2, 17);
    auto mel = compute_melspec(b);
    auto segs = segment_melspec(mel);
    const std::size_t f = mel.num_frames();
    for (std::size_t k : {std::size_t(0), std::size_t(3), segs.segments.size() - 1}) {
        const auto& seg = segs.segments[k];
        REQUIRE(seg.dim(0) == kMelBands);
        REQUIRE(seg.dim(1) == kSegmentWidth);
        for (std::ptrdiff_t c = -7; c <= 7; ++c) {
            std::ptrdiff_t src = std::ptrdiff_t(4 * k) + c;
            for (std::size_t band = 0; band < kMelBands; band += 5) {
                double got = seg.at(band, std::size_t(c + 7));
                if (src < 0 || src >= std::ptrdiff_t(f))
                    REQUIRE(got == 0.0);
                else
                    REQUIRE(got == mel.frames.at(band, std::size_t(src)));
            }
        }
    }
}

TEST_CASE("mel filterbank properties") {
    const auto& fb = feat_detail::mel_filterbank();
    const std::size_t nbins = kFftSize / 2 + 1;
    SECTION("every band peaks at 1 near its center") {
        for (std::size_t band = 0; band < kMelBands; ++band) {
            double peak = 0.0;
            for (std::size_t k = 0; k < nbins; ++k) peak = std::max(peak, fb[band * nbins + k]);
            // sampled on the FFT grid; narrow low bands land between bins
            REQUIRE(peak > 0.5);
            REQUIRE(peak <= 1.0 + 1e-12);
        }
    }
    SECTION("band centers are monotone and inside (0, 20 kHz)") {
        double prev = 0.0;
        for (std::size_t band = 0; band < kMelBands; ++band) {
            double c = feat_detail::mel_band_center_hz(band);
            REQUIRE(c > prev);
            REQUIRE(c < kFMax);
            prev = c;
        }
    }
    SECTION("hz/mel maps are inverse of each other") {
        for (double f : {100.0, 1000.0, 8000.0, 20000.0})
            REQUIRE(feat_detail::mel_to_hz(feat_detail::hz_to_mel(f)) == Catch::Approx(f).epsilon(1e-12));
    }
}

TEST_CASE("silence hits the log-power floor everywhere") {
    AudioBuffer b;
    b.samples.assign(48000, 0.0);
    auto mel = compute_melspec(b);
    for (std::size_t band = 0; band < kMelBands; ++band)
        for (std::size_t t = 0; t < mel.num_frames(); ++t)
            REQUIRE(mel.frames.at(band, t) == Catch::Approx(std::log10(kLogPowerFloor)));
}

TEST_CASE("a pure tone concentrates energy in the matching band") {
    AudioBuffer b;
    b.samples.resize(48000);
    const double f0 = 1000.0;
    for (std::size_t i = 0; i < b.samples.size(); ++i)
        b.samples[i] = 0.5 * std::sin(2.0 * M_PI * f0 * double(i) / 48000.0);
    auto mel = compute_melspec(b);
    // find the band whose center is closest to f0
    std::size_t target = 0;
    double bestd = 1e18;
    for (std::size_t band = 0; band < kMelBands; ++band) {
        double d = std::abs(feat_detail::mel_band_center_hz(band) - f0);
        if (d < bestd) {
            bestd = d;
            target = band;
        }
    }
    std::size_t argmax = 0;
    double best = -1e18;
    for (std::size_t band = 0; band < kMelBands; ++band) {
        double v = mel.frames.at(band, 10);
        if (v > best) {
            best = v;
            argmax = band;
        }
    }
    REQUIRE(std::abs(std::ptrdiff_t(argmax) - std::ptrdiff_t(target)) <= 1);
}

TEST_CASE("zero padding appends silence and extends the mask with false") {
    auto b = make_noise(48000, 23);
    auto segs = segment_melspec(compute_melspec(b));
    auto padded = zero_pad_segments(segs, 40);
    REQUIRE(padded.segments.size() == 40u);
    REQUIRE(padded.mask.size() == 40u);
    REQUIRE(padded.valid_length() == segs.segments.size());
    for (std::size_t i = 0; i < segs.segments.size(); ++i) {
        REQUIRE(padded.mask[i]);
        REQUIRE(padded.segments[i].data == segs.segments[i].data);
    }
    for (std::size_t i = segs.segments.size(); i < 40; ++i) {
        REQUIRE_FALSE(padded.mask[i]);
        for (double v : padded.segments[i].data) REQUIRE(v == 0.0);
    }
    REQUIRE_THROWS_AS(zero_pad_segments(segs, 3), DataError);
}

TEST_CASE("feature extraction is deterministic") {
    auto b = make_noise(48000, 5);
    auto m1 = compute_melspec(b);
    auto m2 = compute_melspec(b);
    REQUIRE(m1.frames.data == m2.frames.data);
}

TEST_CASE("csv dump has one row per band") {
    auto b = make_noise(kWindowSamples * 2, 2);
    auto mel = compute_melspec(b);
    std::ostringstream ss;
    dump_melspec_csv(mel, ss);
    std::size_t rows = 0;
    for (char c : ss.str())
        if (c == '\n') ++rows;
    REQUIRE(rows == kMelBands);
}
