#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "nisqa/audio_io.hpp"
#include "nisqa/common.hpp"
#include "nisqa/manifest.hpp"
#include "nisqa/model.hpp"
#include "nisqa/parallel.hpp"

// Synthetic degradation generator with deterministic rule-based labels.
// Codec-style distortions are approximated by bandpass + frame-erasure
// composites; the label rules are the piecewise-linear tables below.

namespace nisqa {

struct AdditiveNoise {
    double snr_db;  // [-5, 50]
};
struct Bandpass {
    double lo_hz, hi_hz;  // 0 < lo < hi <= 20000
};
struct Clipping {
    double threshold;  // (0, 1], relative to peak
};
struct FrameErasure {
    double loss_rate;  // [0, 1)
    double burst_len;  // mean burst length in 20 ms frames, >= 1
};
struct GainShift {
    double db;  // |db| <= 30
};

struct DegradationSpec {
    std::variant<AdditiveNoise, Bandpass, Clipping, FrameErasure, GainShift> kind;
    std::uint64_t seed = 0;
};

using DegradationChain = std::vector<DegradationSpec>;

namespace sim_detail {

constexpr std::size_t kFrameSamples = 960;  // 20 ms at 48 kHz

inline void validate(const DegradationSpec& s) {
    if (auto* n = std::get_if<AdditiveNoise>(&s.kind)) {
        if (n->snr_db < -5.0 || n->snr_db > 50.0) throw DataError("additive_noise: snr_db out of [-5, 50]");
    } else if (auto* b = std::get_if<Bandpass>(&s.kind)) {
        if (!(b->lo_hz > 0.0 && b->lo_hz < b->hi_hz && b->hi_hz <= 20000.0))
            throw DataError("bandpass: need 0 < lo < hi <= 20000");
    } else if (auto* c = std::get_if<Clipping>(&s.kind)) {
        if (!(c->threshold > 0.0 && c->threshold <= 1.0)) throw DataError("clipping: threshold out of (0, 1]");
    } else if (auto* e = std::get_if<FrameErasure>(&s.kind)) {
        if (!(e->loss_rate >= 0.0 && e->loss_rate < 1.0)) throw DataError("frame_erasure: loss_rate out of [0, 1)");
        if (e->burst_len < 1.0) throw DataError("frame_erasure: burst_len must be >= 1");
    } else if (auto* g = std::get_if<GainShift>(&s.kind)) {
        if (std::abs(g->db) > 30.0) throw DataError("gain_shift: |db| must be <= 30");
    }
}

// Frames within 25 dB of the loudest frame count as active speech.
inline std::vector<bool> active_frames(const std::vector<double>& x) {
    std::size_t nframes = x.size() / kFrameSamples;
    if (nframes == 0) nframes = 1;
    std::vector<double> rms(nframes, 0.0);
    double peak = 0.0;
    for (std::size_t f = 0; f < nframes; ++f) {
        double e = 0.0;
        std::size_t lo = f * kFrameSamples, hi = std::min(x.size(), lo + kFrameSamples);
        for (std::size_t i = lo; i < hi; ++i) e += x[i] * x[i];
        rms[f] = std::sqrt(e / double(hi - lo));
        peak = std::max(peak, rms[f]);
    }
    double thresh = peak * std::pow(10.0, -25.0 / 20.0);
    std::vector<bool> act(nframes);
    for (std::size_t f = 0; f < nframes; ++f) act[f] = rms[f] >= thresh;
    return act;
}

inline double power_over(const std::vector<double>& x, const std::vector<bool>& act) {
    double e = 0.0;
    std::size_t n = 0;
    for (std::size_t f = 0; f < act.size(); ++f) {
        if (!act[f]) continue;
        std::size_t lo = f * kFrameSamples, hi = std::min(x.size(), lo + kFrameSamples);
        for (std::size_t i = lo; i < hi; ++i) e += x[i] * x[i];
        n += hi - lo;
    }
    return n ? e / double(n) : 0.0;
}

struct Biquad {
    double b0, b1, b2, a1, a2;
    void apply(std::vector<double>& x) const {
        double z1 = 0.0, z2 = 0.0;
        for (auto& v : x) {
            double in = v;
            double out = b0 * in + z1;
            z1 = b1 * in - a1 * out + z2;
            z2 = b2 * in - a2 * out;
            v = out;
        }
    }
};

// bilinear-transform Butterworth section
inline Biquad butter_section(double fc_hz, double q, bool highpass) {
    double w0 = 2.0 * 3.14159265358979323846 * fc_hz / double(kCanonicalRate);
    double alpha = std::sin(w0) / (2.0 * q);
    double cw = std::cos(w0);
    double a0 = 1.0 + alpha;
    Biquad s{};
    if (highpass) {
        s.b0 = (1.0 + cw) / 2.0 / a0;
        s.b1 = -(1.0 + cw) / a0;
        s.b2 = (1.0 + cw) / 2.0 / a0;
    } else {
        s.b0 = (1.0 - cw) / 2.0 / a0;
        s.b1 = (1.0 - cw) / a0;
        s.b2 = (1.0 - cw) / 2.0 / a0;
    }
    s.a1 = (-2.0 * cw) / a0;
    s.a2 = (1.0 - alpha) / a0;
    return s;
}

}  // namespace sim_detail

inline AudioBuffer apply_degradation(const AudioBuffer& buffer, const DegradationSpec& spec) {
    sim_detail::validate(spec);
    AudioBuffer out = buffer;
    auto& x = out.samples;

    if (auto* n = std::get_if<AdditiveNoise>(&spec.kind)) {
        Rng rng(Rng::derive(spec.seed, 1));
        std::vector<double> noise(x.size());
        for (auto& v : noise) v = rng.gaussian();
        auto act = sim_detail::active_frames(x);
        double ps = sim_detail::power_over(x, act);
        double pn = sim_detail::power_over(noise, act);
        if (ps > 0.0 && pn > 0.0) {
            double gain = std::sqrt(ps / (pn * std::pow(10.0, n->snr_db / 10.0)));
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += gain * noise[i];
        }
    } else if (auto* b = std::get_if<Bandpass>(&spec.kind)) {
        // 4th-order Butterworth pair: highpass at lo, lowpass at hi
        const double q[2] = {0.54119610, 1.30656296};
        for (double qv : q) sim_detail::butter_section(b->lo_hz, qv, true).apply(x);
        if (b->hi_hz < 0.5 * double(kCanonicalRate))
            for (double qv : q) sim_detail::butter_section(b->hi_hz, qv, false).apply(x);
    } else if (auto* c = std::get_if<Clipping>(&spec.kind)) {
        double peak = 0.0;
        for (double v : x) peak = std::max(peak, std::abs(v));
        double lim = c->threshold * peak;
        if (lim > 0.0)
            for (auto& v : x) v = std::clamp(v, -lim, lim);
    } else if (auto* e = std::get_if<FrameErasure>(&spec.kind)) {
        // two-state Markov burst model over 20 ms frames
        Rng rng(Rng::derive(spec.seed, 2));
        double p_bb = 1.0 - 1.0 / e->burst_len;
        double p_gb = e->loss_rate >= 1.0 ? 1.0 : e->loss_rate / ((1.0 - e->loss_rate) * e->burst_len);
        bool bad = rng.uniform() < e->loss_rate;
        std::size_t nframes = (x.size() + sim_detail::kFrameSamples - 1) / sim_detail::kFrameSamples;
        for (std::size_t f = 0; f < nframes; ++f) {
            if (bad) {
                std::size_t lo = f * sim_detail::kFrameSamples, hi = std::min(x.size(), lo + sim_detail::kFrameSamples);
                for (std::size_t i = lo; i < hi; ++i) x[i] = 0.0;
            }
            double u = rng.uniform();
            bad = bad ? (u < p_bb) : (u < p_gb);
        }
    } else if (auto* g = std::get_if<GainShift>(&spec.kind)) {
        double gain = std::pow(10.0, g->db / 20.0);
        if (g->db != 0.0)
            for (auto& v : x) v *= gain;
    }
    return out;
}

inline AudioBuffer apply_chain(const AudioBuffer& buffer, const DegradationChain& chain) {
    AudioBuffer out = buffer;
    for (const auto& spec : chain) out = apply_degradation(out, spec);
    return out;
}

// ---------------------------------------------------------------------------
// rule-based labels

namespace sim_detail {

struct Breakpoint {
    double x, y;
};

inline double piecewise(double x, const std::vector<Breakpoint>& pts) {
    if (x <= pts.front().x) return pts.front().y;
    if (x >= pts.back().x) return pts.back().y;
    for (std::size_t i = 1; i < pts.size(); ++i)
        if (x <= pts[i].x) {
            double t = (x - pts[i - 1].x) / (pts[i].x - pts[i - 1].x);
            return pts[i - 1].y + t * (pts[i].y - pts[i - 1].y);
        }
    return pts.back().y;
}

// Label breakpoint tables. NOI decreases with SNR, COL with bandwidth
// reduction and clipping severity, DIS with erasure rate, LOU with gain
// deviation. Clean anchors at 5 on every dimension.
inline const std::vector<Breakpoint> kNoiVsSnr = {{-5, 1.0}, {0, 1.5}, {10, 2.5}, {20, 3.5}, {30, 4.5}, {40, 5.0}};
inline const std::vector<Breakpoint> kColPenaltyVsHi = {{500, 4.0}, {1000, 3.5}, {2000, 2.5},
                                                        {4000, 1.5}, {8000, 0.5}, {20000, 0.0}};
inline const std::vector<Breakpoint> kColPenaltyVsLo = {{50, 0.0}, {300, 0.5}, {1000, 1.5}};
inline const std::vector<Breakpoint> kColPenaltyVsClip = {{0.05, 3.0}, {0.1, 2.5}, {0.3, 1.5}, {0.6, 0.5}, {1.0, 0.0}};
inline const std::vector<Breakpoint> kDisVsLoss = {{0.0, 5.0},  {0.02, 4.5}, {0.05, 4.0}, {0.1, 3.2},
                                                   {0.2, 2.2},  {0.4, 1.2},  {0.5, 1.0}};
inline const std::vector<Breakpoint> kLouVsGain = {{0, 5.0}, {3, 4.5}, {6, 4.0}, {12, 3.0}, {20, 2.0}, {30, 1.0}};

}  // namespace sim_detail

// Deterministic monotone label rules; MOS = 0.75*min(dims) + 0.25*mean(dims)
// so poor dimensions dominate the combined score.
inline QualityScores label_sample(const DegradationChain& chain) {
    double noi = 5.0, dis = 5.0, lou = 5.0;
    double col_penalty = 0.0;
    for (const auto& spec : chain) {
        sim_detail::validate(spec);
        if (auto* n = std::get_if<AdditiveNoise>(&spec.kind)) {
            noi = std::min(noi, sim_detail::piecewise(n->snr_db, sim_detail::kNoiVsSnr));
        } else if (auto* b = std::get_if<Bandpass>(&spec.kind)) {
            col_penalty += sim_detail::piecewise(b->hi_hz, sim_detail::kColPenaltyVsHi);
            col_penalty += sim_detail::piecewise(b->lo_hz, sim_detail::kColPenaltyVsLo);
        } else if (auto* c = std::get_if<Clipping>(&spec.kind)) {
            col_penalty += sim_detail::piecewise(c->threshold, sim_detail::kColPenaltyVsClip);
        } else if (auto* e = std::get_if<FrameErasure>(&spec.kind)) {
            dis = std::min(dis, sim_detail::piecewise(e->loss_rate, sim_detail::kDisVsLoss));
        } else if (auto* g = std::get_if<GainShift>(&spec.kind)) {
            lou = std::min(lou, sim_detail::piecewise(std::abs(g->db), sim_detail::kLouVsGain));
        }
    }
    QualityScores q;
    q.noi = noi;
    q.col = std::clamp(5.0 - col_penalty, 1.0, 5.0);
    q.dis = dis;
    q.lou = lou;
    double mn = std::min(std::min(q.noi, q.col), std::min(q.dis, q.lou));
    double mean = (q.noi + q.col + q.dis + q.lou) / 4.0;
    q.mos = 0.75 * mn + 0.25 * mean;
    return q;
}

// ---------------------------------------------------------------------------
// grids and corpora

using ConditionGrid = std::vector<DegradationChain>;

inline void to_json(nlohmann::json& j, const DegradationSpec& s) {
    if (auto* n = std::get_if<AdditiveNoise>(&s.kind))
        j = {{"kind", "additive_noise"}, {"snr_db", n->snr_db}};
    else if (auto* b = std::get_if<Bandpass>(&s.kind))
        j = {{"kind", "bandpass"}, {"lo_hz", b->lo_hz}, {"hi_hz", b->hi_hz}};
    else if (auto* c = std::get_if<Clipping>(&s.kind))
        j = {{"kind", "clipping"}, {"threshold", c->threshold}};
    else if (auto* e = std::get_if<FrameErasure>(&s.kind))
        j = {{"kind", "frame_erasure"}, {"loss_rate", e->loss_rate}, {"burst_len", e->burst_len}};
    else if (auto* g = std::get_if<GainShift>(&s.kind))
        j = {{"kind", "gain_shift"}, {"db", g->db}};
}

inline void from_json(const nlohmann::json& j, DegradationSpec& s) {
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "additive_noise")
        s.kind = AdditiveNoise{j.at("snr_db").get<double>()};
    else if (kind == "bandpass")
        s.kind = Bandpass{j.at("lo_hz").get<double>(), j.at("hi_hz").get<double>()};
    else if (kind == "clipping")
        s.kind = Clipping{j.at("threshold").get<double>()};
    else if (kind == "frame_erasure")
        s.kind = FrameErasure{j.at("loss_rate").get<double>(), j.value("burst_len", 2.0)};
    else if (kind == "gain_shift")
        s.kind = GainShift{j.at("db").get<double>()};
    else
        throw DataError("unknown degradation kind: " + kind);
}

inline ConditionGrid grid_from_json(const nlohmann::json& j) {
    ConditionGrid grid;
    for (const auto& cond : j) grid.push_back(cond.get<DegradationChain>());
    return grid;
}

// A spread over all degradation axes plus a few composites; condition 0 is
// clean.
inline ConditionGrid default_condition_grid() {
    ConditionGrid g;
    g.push_back({});  // clean
    for (double snr : {0.0, 5.0, 10.0, 20.0, 30.0}) g.push_back({{AdditiveNoise{snr}}});
    g.push_back({{Bandpass{300.0, 3400.0}}});
    g.push_back({{Bandpass{100.0, 2000.0}}});
    g.push_back({{Bandpass{50.0, 8000.0}}});
    g.push_back({{Bandpass{300.0, 14000.0}}});
    for (double th : {0.1, 0.3, 0.6}) g.push_back({{Clipping{th}}});
    for (double lr : {0.02, 0.05, 0.1, 0.2, 0.4}) g.push_back({{FrameErasure{lr, 2.0}}});
    for (double db : {-20.0, -12.0, -6.0, 6.0}) g.push_back({{GainShift{db}}});
    // codec-style composites
    g.push_back({{Bandpass{300.0, 3400.0}}, {FrameErasure{0.05, 2.0}}});
    g.push_back({{Bandpass{50.0, 8000.0}}, {FrameErasure{0.1, 3.0}}});
    g.push_back({{AdditiveNoise{15.0}}, {Bandpass{300.0, 3400.0}}});
    g.push_back({{AdditiveNoise{10.0}}, {GainShift{-10.0}}});
    g.push_back({{Clipping{0.3}}, {AdditiveNoise{20.0}}});
    return g;
}

// Synthetic speech-like clean signal: drifting harmonic source with
// formant-shaped spectrum, syllabic amplitude modulation, pauses and
// fricative-like noise bursts. Good enough for the degradations to have
// audible, label-correlated effects.
inline AudioBuffer synth_clean_speech(std::uint64_t seed, double duration_s) {
    Rng rng(Rng::derive(seed, 3));
    AudioBuffer buf;
    buf.sample_rate = kCanonicalRate;
    std::size_t n = std::size_t(duration_s * kCanonicalRate);
    buf.samples.assign(n, 0.0);

    double f0_base = rng.uniform(90.0, 220.0);
    const double formants[3] = {rng.uniform(400.0, 700.0), rng.uniform(1100.0, 1800.0),
                                rng.uniform(2300.0, 3000.0)};
    const int nharm = 60;
    std::vector<double> phase(nharm, 0.0);
    for (auto& p : phase) p = rng.uniform(0.0, 6.283185307179586);
    double syl_rate = rng.uniform(2.5, 4.5);
    double syl_phase = rng.uniform(0.0, 6.283185307179586);

    // precompute harmonic amplitudes from the formant envelope
    std::vector<double> amp(nharm);
    for (int k = 0; k < nharm; ++k) {
        double f = f0_base * (k + 1);
        double a = 1.0 / (k + 1);
        for (double fm : formants) a += 0.8 * std::exp(-0.5 * std::pow((f - fm) / 250.0, 2.0));
        amp[k] = a / (1.0 + f / 4000.0);
    }

    double hp_state = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double t = double(i) / double(kCanonicalRate);
        double f0 = f0_base * (1.0 + 0.08 * std::sin(2.0 * 3.141592653589793 * 0.7 * t));
        double env = std::pow(std::abs(std::sin(3.141592653589793 * syl_rate * t + syl_phase)), 0.7);
        // pauses: gate out every 5th syllable-ish stretch
        double gate = std::fmod(syl_rate * t + syl_phase / 3.141592653589793, 5.0) < 4.0 ? 1.0 : 0.05;
        double v = 0.0;
        for (int k = 0; k < nharm; ++k) {
            double f = f0 * (k + 1);
            if (f > 19000.0) break;
            phase[k] += 2.0 * 3.141592653589793 * f / double(kCanonicalRate);
            v += amp[k] * std::sin(phase[k]);
        }
        // fricative-like high-frequency noise, present between syllables
        double w = rng.gaussian();
        double hp = w - hp_state;  // first difference, high-pass
        hp_state = w;
        v = v * env * gate + 0.35 * hp * (1.0 - env) * gate;
        buf.samples[i] = v;
    }
    double peak = 0.0;
    for (double v : buf.samples) peak = std::max(peak, std::abs(v));
    if (peak > 0.0)
        for (auto& v : buf.samples) v *= 0.5 / peak;
    return buf;
}

// Applies the grid to every clean file; file randomness derives from
// (seed, condition_id, file index) so generation order never changes bytes.
inline DatasetManifest build_corpus(const std::string& clean_dir, const ConditionGrid& grid,
                                    const std::string& out_dir, std::uint64_t seed,
                                    const std::string& dataset_name = "synthetic",
                                    std::size_t jobs = 1) {
    namespace fs = std::filesystem;
    if (grid.empty()) throw DataError("build_corpus: empty condition grid");
    std::vector<std::string> clean_files;
    for (const auto& e : fs::directory_iterator(clean_dir))
        if (e.is_regular_file() && e.path().extension() == ".wav") clean_files.push_back(e.path().string());
    std::sort(clean_files.begin(), clean_files.end());
    if (clean_files.empty()) throw DataError("build_corpus: no clean .wav files in " + clean_dir);
    fs::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.rows.resize(grid.size() * clean_files.size());
    parallel_for(manifest.rows.size(), jobs, [&](std::size_t idx) {
        std::size_t c = idx / clean_files.size();
        std::size_t i = idx % clean_files.size();
        DegradationChain chain = grid[c];
        for (std::size_t k = 0; k < chain.size(); ++k)
            chain[k].seed = Rng::derive(seed, c * 1000 + k, i);
        AudioBuffer clean = load_audio(clean_files[i]);
        AudioBuffer degraded = apply_chain(clean, chain);
        char name[64];
        std::snprintf(name, sizeof(name), "cond%03zu_file%03zu.wav", c, i);
        std::string out_path = (fs::path(out_dir) / name).string();
        write_audio(degraded, out_path);
        ManifestRow row;
        row.filepath = out_path;
        row.condition_id = long(c);
        row.labels = label_sample(chain);
        row.dataset_name = dataset_name;
        manifest.rows[idx] = std::move(row);
    });
    write_manifest(manifest, (fs::path(out_dir) / "manifest.csv").string());
    return manifest;
}

}  // namespace nisqa
