// nisqa command-line tool: predict / evaluate / train / ablate / synth.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
// The env var NISQA_SEED serves as a global seed fallback.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nisqa/audio_io.hpp"
#include "nisqa/bundle.hpp"
#include "nisqa/evaluate.hpp"
#include "nisqa/manifest.hpp"
#include "nisqa/parallel.hpp"
#include "nisqa/simulate.hpp"
#include "nisqa/train.hpp"

namespace fs = std::filesystem;

namespace {

std::uint64_t env_seed_fallback(std::uint64_t flag_value, bool flag_set) {
    if (flag_set) return flag_value;
    if (const char* env = std::getenv("NISQA_SEED")) return std::strtoull(env, nullptr, 10);
    return flag_value;
}

std::vector<std::string> collect_audio_inputs(const std::string& input) {
    std::vector<std::string> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input))
            if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(input);
    }
    if (files.empty()) throw nisqa::DataError("no .wav files found under " + input);
    return files;
}

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw nisqa::DataError("cannot open json file: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw nisqa::DataError("invalid json in " + path + ": " + e.what());
    }
}

int cmd_predict(const std::string& weights, const std::string& input, const std::string& output,
                bool dump_attention, std::size_t jobs) {
    auto bundle = nisqa::load_bundle(weights);
    auto files = collect_audio_inputs(input);

    std::vector<nisqa::Prediction> preds(files.size());
    std::vector<char> ok(files.size(), 0);
    std::vector<std::string> errors(files.size());
    nisqa::parallel_for(files.size(), jobs, [&](std::size_t i) {
        try {
            preds[i] = nisqa::predict(nisqa::load_audio(files[i]), bundle);
            ok[i] = 1;
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });

    std::ofstream out(output);
    if (!out) throw nisqa::DataError("cannot write output csv: " + output);
    out << "filepath,mos,noi,col,dis,lou,L\n";
    std::size_t n_ok = 0;
    for (std::size_t i = 0; i < files.size(); ++i) {
        if (!ok[i]) {
            std::cerr << "warning: failed on " << files[i] << ": " << errors[i] << "\n";
            continue;
        }
        const auto& s = preds[i].scores;
        out << files[i] << ',' << s.mos << ',' << s.noi << ',' << s.col << ',' << s.dis << ',' << s.lou
            << ',' << preds[i].sequence_length << '\n';
        ++n_ok;
    }
    if (dump_attention) {
        std::ofstream att(output + ".attention.csv");
        if (!att) throw nisqa::DataError("cannot write attention sidecar");
        att << "filepath,task,weights\n";
        for (std::size_t i = 0; i < files.size(); ++i) {
            if (!ok[i]) continue;
            for (const auto& [task, w] : preds[i].attention) {
                att << files[i] << ',' << task << ',';
                for (std::size_t k = 0; k < w.size(); ++k) att << (k ? ";" : "") << w[k];
                att << '\n';
            }
        }
    }
    if (n_ok == 0) throw nisqa::DataError("all input files failed to decode");
    std::cerr << "predicted " << n_ok << "/" << files.size() << " files -> " << output << "\n";
    return 0;
}

int cmd_evaluate(const std::string& weights, const std::string& manifest_path, bool per_condition,
                 const std::string& report_path, const std::string& predictions_csv, std::size_t jobs) {
    auto bundle = nisqa::load_bundle(weights);
    auto manifest = nisqa::read_manifest(manifest_path);
    nisqa::EvalOptions opts;
    opts.per_condition = per_condition;
    opts.predictions_csv = predictions_csv;
    opts.jobs = jobs;
    auto report = nisqa::evaluate_model(bundle, manifest, opts);
    std::ofstream out(report_path);
    if (!out) throw nisqa::DataError("cannot write report: " + report_path);
    nisqa::write_report_csv(report, out);
    std::cerr << "evaluated " << manifest.rows.size() - report.failed_files << " files ("
              << report.failed_files << " failures) -> " << report_path << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& model_config_path,
              const std::string& train_manifest, const std::string& val_manifest,
              const std::string& out_bundle, const std::string& run_csv, std::uint64_t seed) {
    nisqa::TrainConfig tc;
    if (!config_path.empty()) tc = load_json_file(config_path).get<nisqa::TrainConfig>();
    nisqa::ModelConfig mc;
    if (!model_config_path.empty()) mc = load_json_file(model_config_path).get<nisqa::ModelConfig>();
    tc.verbose = true;
    auto train_m = nisqa::read_manifest(train_manifest);
    auto val_m = nisqa::read_manifest(val_manifest);
    auto result = nisqa::train_model(mc, train_m, val_m, tc, seed);
    nisqa::save_bundle(result.bundle, out_bundle);
    if (!run_csv.empty()) {
        std::ofstream out(run_csv);
        if (!out) throw nisqa::DataError("cannot write run record: " + run_csv);
        nisqa::write_run_record_csv(result.record, out);
    }
    std::cerr << "best epoch " << result.record.best_epoch << " val PCC " << result.record.best_val_pcc
              << " -> " << out_bundle << "\n";
    return 0;
}

int cmd_ablate(const std::string& stage_name, const std::vector<std::string>& variants,
               const std::string& config_path, const std::string& model_config_path,
               const std::string& train_manifest, const std::string& val_manifest, std::size_t runs,
               const std::string& out_path, std::uint64_t seed) {
    nisqa::AblationStage stage;
    if (stage_name == "framewise")
        stage = nisqa::AblationStage::Framewise;
    else if (stage_name == "td")
        stage = nisqa::AblationStage::TD;
    else if (stage_name == "pooling")
        stage = nisqa::AblationStage::Pooling;
    else
        throw CLI::ValidationError("--stage must be framewise, td or pooling");

    nisqa::TrainConfig tc;
    if (!config_path.empty()) tc = load_json_file(config_path).get<nisqa::TrainConfig>();
    nisqa::ModelConfig mc;
    if (!model_config_path.empty()) mc = load_json_file(model_config_path).get<nisqa::ModelConfig>();
    if (runs > 0) {
        tc.seeds.clear();
        for (std::size_t i = 0; i < runs; ++i) tc.seeds.push_back(seed + i);
    }
    auto train_m = nisqa::read_manifest(train_manifest);
    auto val_m = nisqa::read_manifest(val_manifest);
    auto table = nisqa::run_ablation(stage, variants, mc, train_m, val_m, tc);
    if (out_path.empty()) {
        nisqa::write_ablation_table(table, std::cout);
    } else {
        std::ofstream out(out_path);
        if (!out) throw nisqa::DataError("cannot write table: " + out_path);
        nisqa::write_ablation_table(table, out);
    }
    return 0;
}

int cmd_synth(const std::string& clean_dir, const std::string& grid_path, const std::string& out_dir,
              std::uint64_t seed, const std::string& dataset_name, std::size_t make_clean,
              double clean_duration, std::size_t jobs) {
    std::string cdir = clean_dir;
    if (make_clean > 0) {
        if (cdir.empty()) cdir = (fs::path(out_dir) / "clean").string();
        fs::create_directories(cdir);
        for (std::size_t i = 0; i < make_clean; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "clean%03zu.wav", i);
            auto buf = nisqa::synth_clean_speech(nisqa::Rng::derive(seed, 0xC1EA, i), clean_duration);
            nisqa::write_audio(buf, (fs::path(cdir) / name).string());
        }
    }
    if (cdir.empty()) throw CLI::ValidationError("need --clean-dir or --make-clean");
    nisqa::ConditionGrid grid = grid_path.empty() ? nisqa::default_condition_grid()
                                                  : nisqa::grid_from_json(load_json_file(grid_path));
    auto manifest = nisqa::build_corpus(cdir, grid, out_dir, seed, dataset_name, jobs);
    std::cerr << "wrote " << manifest.rows.size() << " files over " << grid.size() << " conditions -> "
              << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NISQA-style speech quality prediction: feature extraction, CNN-SA-AP inference, "
                 "training, ablation and evaluation"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    bool seed_set = false;
    app.add_flag_callback("--version", [] { std::cout << "nisqa 1.0\n"; std::exit(0); });

    // predict
    auto* predict = app.add_subcommand("predict", "Predict quality scores for WAV files");
    std::string p_weights, p_input, p_output = "predictions.csv";
    bool p_attention = false;
    std::size_t p_jobs = 1;
    predict->add_option("--weights", p_weights, "weight bundle (.nqw)")->required();
    predict->add_option("--input", p_input, "WAV file or directory")->required();
    predict->add_option("--output", p_output,
                        "output CSV (columns: filepath,mos,noi,col,dis,lou,L)");
    predict->add_flag("--dump-attention", p_attention, "write per-task attention weights sidecar");
    predict->add_option("--jobs", p_jobs, "file-level parallelism");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a bundle against a labeled manifest");
    std::string e_weights, e_manifest, e_report = "report.csv", e_predictions;
    bool e_per_condition = false;
    std::size_t e_jobs = 1;
    evaluate->add_option("--weights", e_weights)->required();
    evaluate->add_option("--manifest", e_manifest, "manifest CSV (" + std::string(nisqa::kManifestHeader) + ")")
        ->required();
    evaluate->add_flag("--per-condition", e_per_condition, "metrics on per-condition means");
    evaluate->add_option("--report", e_report,
                         "report CSV (columns: dataset,task,r,rmse,a,b,n_files,n_conditions)");
    evaluate->add_option("--predictions", e_predictions, "optional per-file predictions CSV");
    evaluate->add_option("--jobs", e_jobs, "file-level parallelism");

    // train
    auto* train = app.add_subcommand("train", "Train a model on labeled manifests");
    std::string t_config, t_model_config, t_train, t_val, t_out = "model.nqw", t_run_csv;
    train->add_option("--config", t_config, "training config JSON");
    train->add_option("--model-config", t_model_config, "model config JSON");
    train->add_option("--train-manifest", t_train)->required();
    train->add_option("--val-manifest", t_val)->required();
    train->add_option("--out", t_out, "output weight bundle");
    train->add_option("--run-record", t_run_csv, "per-epoch CSV record");
    train->add_option("--seed", seed, "seed (fallback: NISQA_SEED env)")->each([&](const std::string&) {
        seed_set = true;
    });

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Ablation harness: median PCC over seeded runs");
    std::string a_stage, a_config, a_model_config, a_train, a_val, a_out;
    std::vector<std::string> a_variants;
    std::size_t a_runs = 12;
    ablate->add_option("--stage", a_stage, "framewise | td | pooling")->required();
    ablate->add_option("--variants", a_variants, "variant names for the stage")->required();
    ablate->add_option("--runs", a_runs, "number of seeded runs per variant (default 12)");
    ablate->add_option("--config", a_config, "training config JSON");
    ablate->add_option("--model-config", a_model_config, "base model config JSON");
    ablate->add_option("--train-manifest", a_train)->required();
    ablate->add_option("--val-manifest", a_val)->required();
    ablate->add_option("--out", a_out, "table output path (default: stdout)");
    ablate->add_option("--seed", seed, "base seed (fallback: NISQA_SEED env)")->each([&](const std::string&) {
        seed_set = true;
    });

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a degraded, labeled synthetic corpus");
    std::string s_clean, s_grid, s_out, s_dataset = "synthetic";
    std::size_t s_make_clean = 0, s_jobs = 1;
    double s_clean_duration = 3.0;
    synth->add_option("--clean-dir", s_clean, "directory of clean WAV sources");
    synth->add_option("--grid", s_grid, "condition grid JSON (default: built-in grid)");
    synth->add_option("--out-dir", s_out)->required();
    synth->add_option("--dataset-name", s_dataset);
    synth->add_option("--make-clean", s_make_clean, "synthesize N clean speech-like files first");
    synth->add_option("--clean-duration", s_clean_duration, "duration of synthesized clean files (s)");
    synth->add_option("--jobs", s_jobs, "file-level parallelism");
    synth->add_option("--seed", seed, "seed (fallback: NISQA_SEED env)")->each([&](const std::string&) {
        seed_set = true;
    });

    try {
        app.parse(argc, argv);
        std::uint64_t eff_seed = env_seed_fallback(seed, seed_set);
        if (*predict) return cmd_predict(p_weights, p_input, p_output, p_attention, p_jobs);
        if (*evaluate)
            return cmd_evaluate(e_weights, e_manifest, e_per_condition, e_report, e_predictions, e_jobs);
        if (*train) return cmd_train(t_config, t_model_config, t_train, t_val, t_out, t_run_csv, eff_seed);
        if (*ablate)
            return cmd_ablate(a_stage, a_variants, a_config, a_model_config, a_train, a_val, a_runs, a_out,
                              eff_seed);
        if (*synth)
            return cmd_synth(s_clean, s_grid, s_out, eff_seed, s_dataset, s_make_clean, s_clean_duration,
                             s_jobs);
        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const nisqa::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nisqa::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}
