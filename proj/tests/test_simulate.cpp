#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "nisqa/common.hpp"
#include "nisqa/manifest.hpp"
#include "nisqa/simulate.hpp"

using namespace nisqa;

namespace {

double measured_snr_db(const std::vector<double>& clean, const std::vector<double>& degraded) {
    auto act = sim_detail::active_frames(clean);
    std::vector<double> noise(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) noise[i] = degraded[i] - clean[i];
    double ps = sim_detail::power_over(clean, act);
    double pn = sim_detail::power_over(noise, act);
    return 10.0 * std::log10(ps / pn);
}

}  // namespace

TEST_CASE("additive noise hits the requested active-speech SNR") {
    auto clean = synth_clean_speech(1, 6.0);
    for (double snr : {0.0, 10.0, 25.0, 40.0}) {
        DegradationSpec spec{AdditiveNoise{snr}, 99};
        auto out = apply_degradation(clean, spec);
        REQUIRE(measured_snr_db(clean.samples, out.samples) == Catch::Approx(snr).margin(0.1));
    }
}

TEST_CASE("additive noise is deterministic in the seed") {
    auto clean = synth_clean_speech(2, 2.0);
    DegradationSpec spec{AdditiveNoise{10.0}, 5};
    auto a = apply_degradation(clean, spec);
    auto b = apply_degradation(clean, spec);
    REQUIRE(a.samples == b.samples);
    spec.seed = 6;
    auto c = apply_degradation(clean, spec);
    REQUIRE(a.samples != c.samples);
}

TEST_CASE("bandpass attenuates tones outside the passband") {
    auto tone = [](double f) {
        AudioBuffer b;
        b.samples.resize(48000);
        for (std::size_t i = 0; i < b.samples.size(); ++i)
            b.samples[i] = 0.3 * std::sin(2.0 * M_PI * f * double(i) / 48000.0);
        return b;
    };
    auto rms_db = [](const AudioBuffer& b) {
        double e = 0.0;
        // skip the filter transient
        for (std::size_t i = 4800; i < b.samples.size(); ++i) e += b.samples[i] * b.samples[i];
        return 10.0 * std::log10(e / double(b.samples.size() - 4800));
    };
    DegradationSpec spec{Bandpass{300.0, 3400.0}, 0};
    // in-band tone passes nearly untouched
    auto mid = tone(1000.0);
    double drop_mid = rms_db(mid) - rms_db(apply_degradation(mid, spec));
    REQUIRE(std::abs(drop_mid) < 1.0);
    // tones an octave outside each edge drop by at least ~20 dB (4th order)
    auto low = tone(75.0);
    REQUIRE(rms_db(low) - rms_db(apply_degradation(low, spec)) > 20.0);
    auto high = tone(13600.0);
    REQUIRE(rms_db(high) - rms_db(apply_degradation(high, spec)) > 20.0);
}

TEST_CASE("clipping limits samples at threshold times peak") {
    auto clean = synth_clean_speech(3, 2.0);
    double peak = 0.0;
    for (double v : clean.samples) peak = std::max(peak, std::abs(v));
    DegradationSpec spec{Clipping{0.3}, 0};
    auto out = apply_degradation(clean, spec);
    double lim = 0.3 * peak;
    std::size_t at_limit = 0;
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        REQUIRE(std::abs(out.samples[i]) <= lim + 1e-15);
        if (std::abs(out.samples[i]) == lim) ++at_limit;
        if (std::abs(clean.samples[i]) < lim) REQUIRE(out.samples[i] == clean.samples[i]);
    }
    REQUIRE(at_limit > 0);
}

TEST_CASE("frame erasure zeroes the expected fraction of frames") {
    AudioBuffer b;
    b.samples.assign(480000, 0.0);  // 10 s, 500 frames of 20 ms
    Rng rng(8);
    for (auto& v : b.samples) v = rng.uniform(-0.5, 0.5);
    const double loss = 0.1, burst = 2.0;
    const std::size_t nframes = 500;
    // average over several seeds; each count should also stay within loose
    // binomial-style bounds around loss*nframes = 50
    double total = 0.0;
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        DegradationSpec spec{FrameErasure{loss, burst}, seed};
        auto out = apply_degradation(b, spec);
        std::size_t zeroed = 0;
        for (std::size_t f = 0; f < nframes; ++f) {
            bool all_zero = true;
            for (std::size_t i = f * 960; i < (f + 1) * 960; ++i) all_zero = all_zero && out.samples[i] == 0.0;
            if (all_zero) ++zeroed;
        }
        REQUIRE(zeroed >= 15);
        REQUIRE(zeroed <= 110);
        total += double(zeroed);
    }
    REQUIRE(total / 8.0 == Catch::Approx(double(nframes) * loss).margin(15.0));
}

TEST_CASE("frame erasure produces bursts of the configured mean length") {
    AudioBuffer b;
    b.samples.assign(480000 * 2, 0.1);
    const double burst = 3.0;
    std::size_t nbursts = 0, lost = 0;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        DegradationSpec spec{FrameErasure{0.2, burst}, seed};
        auto out = apply_degradation(b, spec);
        bool in_burst = false;
        for (std::size_t f = 0; f < out.samples.size() / 960; ++f) {
            bool z = out.samples[f * 960] == 0.0;
            if (z) {
                ++lost;
                if (!in_burst) ++nbursts;
            }
            in_burst = z;
        }
    }
    REQUIRE(nbursts > 0);
    REQUIRE(double(lost) / double(nbursts) == Catch::Approx(burst).margin(1.0));
}

TEST_CASE("gain shift scales by the exact factor") {
    auto clean = synth_clean_speech(4, 1.0);
    DegradationSpec spec{GainShift{-6.0}, 0};
    auto out = apply_degradation(clean, spec);
    double g = std::pow(10.0, -6.0 / 20.0);
    for (std::size_t i = 0; i < clean.samples.size(); ++i)
        REQUIRE(out.samples[i] == Catch::Approx(clean.samples[i] * g).margin(1e-15));
}

TEST_CASE("parameter validation") {
    AudioBuffer b;
    b.samples.assign(960, 0.1);
    REQUIRE_THROWS_AS(apply_degradation(b, {AdditiveNoise{60.0}, 0}), DataError);
    REQUIRE_THROWS_AS(apply_degradation(b, {Bandpass{3000.0, 300.0}, 0}), DataError);
    REQUIRE_THROWS_AS(apply_degradation(b, {Clipping{0.0}, 0}), DataError);
    REQUIRE_THROWS_AS(apply_degradation(b, {FrameErasure{1.5, 2.0}, 0}), DataError);
    REQUIRE_THROWS_AS(apply_degradation(b, {FrameErasure{0.1, 0.5}, 0}), DataError);
    REQUIRE_THROWS_AS(apply_degradation(b, {GainShift{40.0}, 0}), DataError);
}

TEST_CASE("labels: clean chain anchors at 5 on every dimension") {
    auto q = label_sample({});
    REQUIRE(q.mos == 5.0);
    REQUIRE(q.noi == 5.0);
    REQUIRE(q.col == 5.0);
    REQUIRE(q.dis == 5.0);
    REQUIRE(q.lou == 5.0);
}

TEST_CASE("labels are monotone along each degradation axis") {
    double prev = 6.0;
    for (double snr : {40.0, 30.0, 20.0, 10.0, 0.0, -5.0}) {
        auto q = label_sample({{AdditiveNoise{snr}, 0}});
        REQUIRE(q.noi < prev);
        REQUIRE(q.dis == 5.0);
        prev = q.noi;
    }
    prev = 6.0;
    for (double hi : {16000.0, 8000.0, 4000.0, 2000.0, 1000.0}) {
        auto q = label_sample({{Bandpass{100.0, hi}, 0}});
        REQUIRE(q.col <= prev);
        prev = q.col;
    }
    prev = 6.0;
    for (double lr : {0.0, 0.05, 0.1, 0.2, 0.4}) {
        auto q = label_sample({{FrameErasure{lr, 2.0}, 0}});
        if (lr > 0.0) REQUIRE(q.dis < prev);
        prev = q.dis;
    }
    prev = 6.0;
    for (double db : {0.0, 3.0, 6.0, 12.0, 20.0}) {
        auto q = label_sample({{GainShift{db}, 0}});
        if (db > 0.0) REQUIRE(q.lou < prev);
        REQUIRE(q.lou == label_sample({{GainShift{-db}, 0}}).lou);  // symmetric in |dB|
        prev = q.lou;
    }
    prev = 6.0;
    for (double th : {1.0, 0.6, 0.3, 0.1, 0.05}) {
        auto q = label_sample({{Clipping{th}, 0}});
        REQUIRE(q.col <= prev);
        prev = q.col;
    }
}

TEST_CASE("overall score follows 0.75*min + 0.25*mean") {
    DegradationChain chain = {{AdditiveNoise{10.0}, 0}, {FrameErasure{0.2, 2.0}, 0}};
    auto q = label_sample(chain);
    double mn = std::min({q.noi, q.col, q.dis, q.lou});
    double mean = (q.noi + q.col + q.dis + q.lou) / 4.0;
    REQUIRE(q.mos == Catch::Approx(0.75 * mn + 0.25 * mean).margin(1e-12));
    REQUIRE(q.mos < 5.0);
    // labels depend only on the chain parameters, never on any seed
    DegradationChain seeded = chain;
    seeded[0].seed = 123;
    seeded[1].seed = 456;
    REQUIRE(label_sample(seeded).mos == q.mos);
}

TEST_CASE("degradation spec JSON round trip") {
    ConditionGrid grid = default_condition_grid();
    nlohmann::json j = nlohmann::json::array();
    for (const auto& chain : grid) j.push_back(chain);
    auto back = grid_from_json(j);
    REQUIRE(back.size() == grid.size());
    for (std::size_t c = 0; c < grid.size(); ++c) {
        REQUIRE(back[c].size() == grid[c].size());
        auto qa = label_sample(grid[c]);
        auto qb = label_sample(back[c]);
        for (std::size_t i = 0; i < 5; ++i) REQUIRE(qa.by_index(i) == qb.by_index(i));
    }
    REQUIRE_THROWS_AS(grid_from_json(nlohmann::json::parse(R"([[{"kind":"reverb"}]])")), DataError);
}

TEST_CASE("synthetic clean speech has speech-like structure") {
    auto b = synth_clean_speech(7, 4.0);
    REQUIRE(b.samples.size() == 48000u * 4);
    double peak = 0.0, energy = 0.0;
    for (double v : b.samples) {
        peak = std::max(peak, std::abs(v));
        energy += v * v;
    }
    REQUIRE(peak == Catch::Approx(0.5).margin(1e-9));
    REQUIRE(energy > 0.0);
    // amplitude modulation: frame RMS must vary substantially
    auto act = sim_detail::active_frames(b.samples);
    std::size_t n_active = 0;
    for (bool a : act) n_active += a ? 1 : 0;
    REQUIRE(n_active > act.size() / 4);
    REQUIRE(n_active < act.size());
    // different seeds give different signals
    auto c = synth_clean_speech(8, 4.0);
    REQUIRE(b.samples != c.samples);
}

TEST_CASE("corpus generation writes files, labels and a manifest") {
    namespace fs = std::filesystem;
    auto clean_dir = fs::temp_directory_path() / "sim_clean";
    auto out_dir = fs::temp_directory_path() / "sim_corpus";
    fs::remove_all(clean_dir);
    fs::remove_all(out_dir);
    fs::create_directories(clean_dir);
    for (int i = 0; i < 2; ++i)
        write_audio(synth_clean_speech(100 + std::uint64_t(i), 1.5),
                    (clean_dir / ("clean" + std::to_string(i) + ".wav")).string());

    ConditionGrid grid = {{}, {{AdditiveNoise{10.0}}}, {{FrameErasure{0.2, 2.0}}}};
    auto manifest = build_corpus(clean_dir.string(), grid, out_dir.string(), 42, "testset");
    REQUIRE(manifest.rows.size() == 6);
    for (const auto& row : manifest.rows) {
        REQUIRE(fs::exists(row.filepath));
        REQUIRE(row.dataset_name == "testset");
        auto expect = label_sample(grid[std::size_t(row.condition_id)]);
        REQUIRE(row.labels.mos == expect.mos);
        auto audio = load_audio(row.filepath);
        REQUIRE(audio.samples.size() == 72000u);
    }
    auto reread = read_manifest((out_dir / "manifest.csv").string());
    REQUIRE(reread.rows.size() == 6);
    REQUIRE(reread.rows[0].filepath == manifest.rows[0].filepath);
    REQUIRE(reread.rows[5].labels.dis == Catch::Approx(manifest.rows[5].labels.dis).margin(1e-6));

    // regeneration is byte-identical
    auto out_dir2 = fs::temp_directory_path() / "sim_corpus2";
    fs::remove_all(out_dir2);
    build_corpus(clean_dir.string(), grid, out_dir2.string(), 42, "testset");
    for (const auto& row : manifest.rows) {
        auto rel = fs::path(row.filepath).filename();
        std::ifstream f1(row.filepath, std::ios::binary), f2(out_dir2 / rel, std::ios::binary);
        std::stringstream s1, s2;
        s1 << f1.rdbuf();
        s2 << f2.rdbuf();
        REQUIRE(s1.str() == s2.str());
    }
}
