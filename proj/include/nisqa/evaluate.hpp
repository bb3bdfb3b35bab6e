#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "nisqa/bundle.hpp"
#include "nisqa/common.hpp"
#include "nisqa/manifest.hpp"
#include "nisqa/parallel.hpp"

// Evaluation metrics: Pearson's correlation and RMSE after first-order
// mapping, per-file and per-condition, per dataset.

namespace nisqa {

// Product-moment correlation, 64-bit two-pass accumulation. Zero variance on
// either side is a data error, not a NaN.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DataError("pearson: length mismatch");
    const std::size_t n = x.size();
    if (n < 2) throw DataError("pearson: need at least 2 points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("pearson: zero variance");
    return sxy / std::sqrt(sxx * syy);
}

struct FirstOrderFit {
    double rmse = 0, a = 0, b = 0;
    bool degenerate = false;  // constant predictions: b = 0, rmse = std(label)
};

// Least-squares fit label ~= a + b*pred, then RMSE of residuals (divisor n).
inline FirstOrderFit rmse_first_order(const std::vector<double>& pred, const std::vector<double>& label) {
    if (pred.size() != label.size()) throw DataError("rmse_first_order: length mismatch");
    const std::size_t n = pred.size();
    if (n < 2) throw DataError("rmse_first_order: need at least 2 points");
    double mp = 0, ml = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mp += pred[i];
        ml += label[i];
    }
    mp /= double(n);
    ml /= double(n);
    double spp = 0, spl = 0;
    for (std::size_t i = 0; i < n; ++i) {
        spp += (pred[i] - mp) * (pred[i] - mp);
        spl += (pred[i] - mp) * (label[i] - ml);
    }
    FirstOrderFit fit;
    if (spp == 0.0) {
        fit.degenerate = true;
        fit.b = 0.0;
        fit.a = ml;
    } else {
        fit.b = spl / spp;
        fit.a = ml - fit.b * mp;
    }
    double se = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double r = label[i] - (fit.a + fit.b * pred[i]);
        se += r * r;
    }
    fit.rmse = std::sqrt(se / double(n));
    return fit;
}

// Mean of labels and predictions within each condition; metrics are then
// computed on those means.
inline void per_condition_aggregate(const std::vector<long>& condition_ids,
                                    const std::vector<double>& pred, const std::vector<double>& label,
                                    std::vector<double>& pred_out, std::vector<double>& label_out) {
    if (condition_ids.size() != pred.size() || pred.size() != label.size())
        throw DataError("per_condition_aggregate: length mismatch");
    std::map<long, std::pair<double, double>> sums;
    std::map<long, std::size_t> counts;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (condition_ids[i] < 0) throw DataError("per_condition_aggregate: missing condition id");
        sums[condition_ids[i]].first += pred[i];
        sums[condition_ids[i]].second += label[i];
        counts[condition_ids[i]] += 1;
    }
    pred_out.clear();
    label_out.clear();
    for (const auto& [cid, s] : sums) {
        pred_out.push_back(s.first / double(counts[cid]));
        label_out.push_back(s.second / double(counts[cid]));
    }
}

struct EvalEntry {
    std::string dataset;
    std::string task;
    double r = 0;
    double rmse_mapped = 0;
    double map_a = 0, map_b = 0;
    std::size_t n_files = 0;
    std::size_t n_conditions = 0;
};

struct EvalReport {
    std::vector<EvalEntry> entries;
    std::size_t failed_files = 0;
};

struct EvalOptions {
    bool per_condition = false;
    std::string predictions_csv;  // optional dump of per-file predictions
    std::size_t jobs = 1;         // file-level prediction parallelism
};

// Runs predict over all rows and reduces to per-task per-dataset metrics.
// Per-file failures are recorded and excluded.
inline EvalReport evaluate_model(const WeightBundle& bundle, const DatasetManifest& manifest,
                                 const EvalOptions& options = {}) {
    struct Row {
        std::string filepath;
        std::string dataset;
        long cid;
        QualityScores pred, label;
    };
    std::vector<Row> slots(manifest.rows.size());
    std::vector<char> ok(manifest.rows.size(), 0);
    std::vector<std::string> errors(manifest.rows.size());
    parallel_for(manifest.rows.size(), options.jobs, [&](std::size_t i) {
        const auto& r = manifest.rows[i];
        try {
            auto p = predict(load_audio(r.filepath), bundle);
            slots[i] = {r.filepath, r.dataset_name, r.condition_id, p.scores, r.labels};
            ok[i] = 1;
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });
    std::vector<Row> rows;
    EvalReport report;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (ok[i]) {
            rows.push_back(std::move(slots[i]));
        } else {
            std::cerr << "warning: skipping " << manifest.rows[i].filepath << ": " << errors[i] << "\n";
            ++report.failed_files;
        }
    }
    if (rows.empty()) throw DataError("evaluate_model: no evaluable files");

    if (!options.predictions_csv.empty()) {
        std::ofstream out(options.predictions_csv);
        if (!out) throw DataError("cannot write predictions csv: " + options.predictions_csv);
        out << "filepath,mos,noi,col,dis,lou\n";
        for (const auto& r : rows)
            out << r.filepath << ',' << r.pred.mos << ',' << r.pred.noi << ',' << r.pred.col << ','
                << r.pred.dis << ',' << r.pred.lou << '\n';
    }

    std::vector<std::string> datasets;
    for (const auto& r : rows)
        if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end())
            datasets.push_back(r.dataset);

    for (const auto& ds : datasets) {
        for (std::size_t t = 0; t < 5; ++t) {
            std::vector<double> pred, label;
            std::vector<long> cids;
            for (const auto& r : rows) {
                if (r.dataset != ds) continue;
                pred.push_back(r.pred.by_index(t));
                label.push_back(r.label.by_index(t));
                cids.push_back(r.cid);
            }
            EvalEntry e;
            e.dataset = ds;
            e.task = kTaskNames[t];
            e.n_files = pred.size();
            std::vector<double> p = pred, l = label;
            if (options.per_condition) {
                per_condition_aggregate(cids, pred, label, p, l);
                e.n_conditions = p.size();
            }
            e.r = pearson(p, l);
            auto fit = rmse_first_order(p, l);
            e.rmse_mapped = fit.rmse;
            e.map_a = fit.a;
            e.map_b = fit.b;
            report.entries.push_back(e);
        }
    }
    return report;
}

inline void write_report_csv(const EvalReport& report, std::ostream& out) {
    out << "dataset,task,r,rmse,a,b,n_files,n_conditions\n";
    for (const auto& e : report.entries)
        out << e.dataset << ',' << e.task << ',' << e.r << ',' << e.rmse_mapped << ',' << e.map_a << ','
            << e.map_b << ',' << e.n_files << ',' << e.n_conditions << '\n';
}

}  // namespace nisqa
