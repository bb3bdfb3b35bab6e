#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nisqa/autodiff.hpp"
#include "nisqa/bundle.hpp"
#include "nisqa/common.hpp"
#include "nisqa/evaluate.hpp"
#include "nisqa/manifest.hpp"
#include "nisqa/model.hpp"

// Training loop (Adam, batch 160, lr 0.001, bias-aware loss, early stopping
// on validation PCC) and the ablation harness (12 seeded runs per variant,
// median PCC).

namespace nisqa {

enum class LossMode { MSE, BiasAware };

struct TrainConfig {
    std::size_t batch_size = 160;
    double lr = 0.001;
    std::size_t patience_epochs = 10;
    std::size_t max_epochs = 100;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
    LossMode loss = LossMode::BiasAware;
    std::vector<std::string> tasks = {"mos", "noi", "col", "dis", "lou"};
    bool per_condition_validation = false;
    bool verbose = false;

    // test hook: replaces the measured validation PCC per epoch
    std::function<double(std::size_t epoch)> val_metric_override;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"patience_epochs", c.patience_epochs},
                       {"max_epochs", c.max_epochs},
                       {"seeds", c.seeds},
                       {"loss", c.loss == LossMode::MSE ? "mse" : "bias_aware"},
                       {"tasks", c.tasks},
                       {"per_condition_validation", c.per_condition_validation}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig def;
    c.batch_size = j.value("batch_size", def.batch_size);
    c.lr = j.value("lr", def.lr);
    c.patience_epochs = j.value("patience_epochs", def.patience_epochs);
    c.max_epochs = j.value("max_epochs", def.max_epochs);
    c.seeds = j.value("seeds", def.seeds);
    std::string loss = j.value("loss", "bias_aware");
    if (loss == "mse")
        c.loss = LossMode::MSE;
    else if (loss == "bias_aware")
        c.loss = LossMode::BiasAware;
    else
        throw DataError("unknown loss mode: " + loss);
    c.tasks = j.value("tasks", def.tasks);
    c.per_condition_validation = j.value("per_condition_validation", def.per_condition_validation);
}

// ---------------------------------------------------------------------------
// loss

namespace train_detail {

struct AffineMap {
    double a = 0.0, b = 1.0;
};

// least squares label ~= a + b*pred; identity when degenerate
inline AffineMap fit_affine(const std::vector<double>& pred, const std::vector<double>& label) {
    const std::size_t n = pred.size();
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
    if (spp == 0.0) return {};
    AffineMap m;
    m.b = spl / spp;
    m.a = ml - m.b * mp;
    return m;
}

inline std::size_t task_index(const std::string& name) {
    for (std::size_t i = 0; i < 5; ++i)
        if (kTaskNames[i] == name) return i;
    throw InternalError("unknown task: " + name);
}

}  // namespace train_detail

// MSE mode: mean squared error over samples x active tasks. BiasAware mode:
// per dataset a first-order map pred -> label is fitted by least squares on
// the given batch, then the MSE of the mapped predictions is taken; datasets
// with fewer than 2 samples fall back to the identity map with a warning.
inline double multitask_loss(const std::vector<QualityScores>& pred,
                             const std::vector<QualityScores>& labels,
                             const std::vector<std::string>& dataset_ids, LossMode mode,
                             const std::vector<std::string>& tasks = {"mos", "noi", "col", "dis", "lou"}) {
    if (pred.size() != labels.size() || pred.size() != dataset_ids.size())
        throw DataError("multitask_loss: batch length mismatch");
    if (pred.empty()) throw DataError("multitask_loss: empty batch");

    std::map<std::string, std::vector<std::size_t>> by_dataset;
    for (std::size_t i = 0; i < pred.size(); ++i) by_dataset[dataset_ids[i]].push_back(i);

    double se = 0.0;
    std::size_t count = 0;
    for (const auto& task : tasks) {
        std::size_t t = train_detail::task_index(task);
        for (const auto& [ds, idxs] : by_dataset) {
            train_detail::AffineMap m;
            if (mode == LossMode::BiasAware) {
                if (idxs.size() < 2) {
                    std::cerr << "warning: bias-aware loss: dataset '" << ds
                              << "' has fewer than 2 samples, using identity map\n";
                } else {
                    std::vector<double> p, l;
                    for (auto i : idxs) {
                        p.push_back(pred[i].by_index(t));
                        l.push_back(labels[i].by_index(t));
                    }
                    m = train_detail::fit_affine(p, l);
                }
            }
            for (auto i : idxs) {
                double e = m.a + m.b * pred[i].by_index(t) - labels[i].by_index(t);
                se += e * e;
                ++count;
            }
        }
    }
    return se / double(count);
}

// ---------------------------------------------------------------------------
// early stopping

// Stops once the validation metric has not increased for more than
// `patience` epochs; tracks the best epoch for weight restoration.
class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

    // returns true if this epoch is a new best
    bool update(double metric) {
        ++epoch_;
        if (!have_best_ || metric > best_) {
            best_ = metric;
            best_epoch_ = epoch_;
            have_best_ = true;
            return true;
        }
        return false;
    }

    bool should_stop() const { return have_best_ && epoch_ - best_epoch_ > patience_; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best_metric() const { return best_; }

private:
    std::size_t patience_;
    std::size_t epoch_ = 0;
    std::size_t best_epoch_ = 0;
    double best_ = 0.0;
    bool have_best_ = false;
};

// ---------------------------------------------------------------------------
// training

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double train_pcc = 0;
    double val_pcc = 0;
    std::uint32_t weight_crc = 0;  // CRC32 of the serialized post-epoch weights
};

struct RunRecord {
    std::string config_id;
    std::uint64_t seed = 0;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val_pcc = 0;
};

inline void write_run_record_csv(const RunRecord& rec, std::ostream& out) {
    out << "epoch,train_loss,train_pcc,val_pcc,weight_crc\n";
    for (const auto& e : rec.epochs)
        out << e.epoch << ',' << e.train_loss << ',' << e.train_pcc << ',' << e.val_pcc << ','
            << e.weight_crc << '\n';
}

namespace train_detail {

struct CachedItem {
    MelSegments segs;
    QualityScores labels;
    std::string dataset;
    long condition_id = -1;
};

inline std::vector<CachedItem> load_items(const DatasetManifest& manifest) {
    if (manifest.rows.empty()) throw DataError("empty manifest");
    std::vector<CachedItem> items;
    items.reserve(manifest.rows.size());
    for (const auto& r : manifest.rows) {
        CachedItem it;
        it.segs = segment_melspec(compute_melspec(load_audio(r.filepath)));
        it.labels = r.labels;
        it.dataset = r.dataset_name;
        it.condition_id = r.condition_id;
        items.push_back(std::move(it));
    }
    return items;
}

// average over datasets of the mean per-task PCC
inline double avg_dataset_pcc(const std::vector<QualityScores>& pred,
                              const std::vector<QualityScores>& label,
                              const std::vector<std::string>& datasets,
                              const std::vector<std::string>& tasks) {
    std::map<std::string, std::vector<std::size_t>> by_ds;
    for (std::size_t i = 0; i < pred.size(); ++i) by_ds[datasets[i]].push_back(i);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [ds, idxs] : by_ds) {
        double tsum = 0.0;
        std::size_t tn = 0;
        for (const auto& task : tasks) {
            std::size_t t = task_index(task);
            std::vector<double> p, l;
            for (auto i : idxs) {
                p.push_back(pred[i].by_index(t));
                l.push_back(label[i].by_index(t));
            }
            try {
                tsum += pearson(p, l);
                ++tn;
            } catch (const DataError&) {
                // zero-variance dataset/task; contributes nothing
            }
        }
        if (tn) {
            sum += tsum / double(tn);
            ++n;
        }
    }
    if (n == 0) throw DataError("validation PCC undefined (all datasets degenerate)");
    return sum / double(n);
}

}  // namespace train_detail

inline std::string config_id(const ModelConfig& c) {
    return model_detail::to_string(c.framewise) + "-" + model_detail::to_string(c.td) + "-" +
           model_detail::to_string(c.pooling);
}

struct TrainResult {
    RunRecord record;
    WeightBundle bundle;
};

// Seeded end-to-end training. Deterministic: same seed + same corpus gives
// identical records and bundle bytes.
inline TrainResult train_model(const ModelConfig& model_config, const DatasetManifest& train_manifest,
                               const DatasetManifest& val_manifest, const TrainConfig& tc,
                               std::uint64_t seed) {
    ModelConfig mc = model_config;
    mc.tasks = tc.tasks;
    auto train_items = train_detail::load_items(train_manifest);
    auto val_items = train_detail::load_items(val_manifest);

    auto params = init_params<float>(mc, seed);
    ad::AdamState<float> adam;
    EarlyStopper stopper(tc.patience_epochs);

    // per (dataset, task) first-order maps; identity in epoch 1, refit once
    // per epoch from that epoch's accumulated training predictions
    std::map<std::pair<std::string, std::size_t>, train_detail::AffineMap> bias_maps;

    TrainResult result;
    result.record.config_id = config_id(mc);
    result.record.seed = seed;
    ad::ParamSet<float> best_params = params;

    const std::size_t ntasks = tc.tasks.size();
    if (ntasks == 0) throw DataError("train_model: no active tasks");

    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(seed, 0x5u, epoch));
        Rng dropout_rng(Rng::derive(seed, 0xDu, epoch));
        std::vector<std::size_t> order(train_items.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.index(i)]);

        double loss_sum = 0.0;
        std::size_t loss_terms = 0;
        std::vector<QualityScores> epoch_preds(train_items.size());

        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            std::size_t bend = std::min(order.size(), start + tc.batch_size);
            std::size_t bsize = bend - start;
            std::vector<Tensor<float>> grad_sum;
            for (std::size_t bi = start; bi < bend; ++bi) {
                const auto& item = train_items[order[bi]];
                auto gp = GraphParams<float>::make(params, true);
                Rng* drop = (mc.dropout > 0.0) ? &dropout_rng : nullptr;
                auto fwd = model_forward(mc, gp, item.segs, drop);

                // per-item loss: sum over tasks of (a + b*score - label)^2,
                // scaled by 1/(batch * ntasks); a,b come from last epoch's fit
                ad::Var<float> loss;
                QualityScores pred{};
                for (std::size_t t = 0; t < ntasks; ++t) {
                    std::size_t ti = train_detail::task_index(tc.tasks[t]);
                    auto score = fwd.heads[t].score;  // [1,1]
                    pred.by_index(ti) = double(score->value[0]);
                    train_detail::AffineMap m;
                    if (tc.loss == LossMode::BiasAware) {
                        auto it = bias_maps.find({item.dataset, ti});
                        if (it != bias_maps.end()) m = it->second;
                    }
                    Tensor<float> offs({1, 1});
                    offs[0] = float(m.a - item.labels.by_index(ti));
                    auto err = ad::add(ad::scale(score, float(m.b)), ad::constant(offs));
                    auto term = ad::mul(err, err);
                    loss = loss ? ad::add(loss, term) : term;
                }
                loss = ad::scale(loss, float(1.0 / double(bsize * ntasks)));
                double lv = double(loss->value[0]);
                if (!std::isfinite(lv))
                    throw InternalError("train_model: NaN/inf loss at epoch " + std::to_string(epoch));
                loss_sum += lv;
                epoch_preds[order[bi]] = pred;

                ad::backward(loss);
                auto grads = gp.grads();
                if (grad_sum.empty()) {
                    grad_sum = std::move(grads);
                } else {
                    for (std::size_t g = 0; g < grads.size(); ++g)
                        for (std::size_t j = 0; j < grads[g].numel(); ++j) grad_sum[g][j] += grads[g][j];
                }
            }
            ad::adam_step(params, grad_sum, adam, tc.lr);
            ++loss_terms;
        }

        // refit bias maps from this epoch's accumulated predictions
        if (tc.loss == LossMode::BiasAware) {
            std::map<std::string, std::vector<std::size_t>> by_ds;
            for (std::size_t i = 0; i < train_items.size(); ++i) by_ds[train_items[i].dataset].push_back(i);
            for (const auto& [ds, idxs] : by_ds) {
                for (const auto& task : tc.tasks) {
                    std::size_t ti = train_detail::task_index(task);
                    if (idxs.size() < 2) {
                        bias_maps[{ds, ti}] = {};
                        continue;
                    }
                    std::vector<double> p, l;
                    for (auto i : idxs) {
                        p.push_back(epoch_preds[i].by_index(ti));
                        l.push_back(train_items[i].labels.by_index(ti));
                    }
                    bias_maps[{ds, ti}] = train_detail::fit_affine(p, l);
                }
            }
        }

        // validation pass (inference path, dropout off)
        double val_pcc;
        if (tc.val_metric_override) {
            val_pcc = tc.val_metric_override(epoch);
        } else {
            std::vector<QualityScores> vp, vl;
            std::vector<std::string> vds;
            std::vector<long> vcid;
            auto gp = GraphParams<float>::make(params, false);
            for (const auto& item : val_items) {
                auto fwd = model_forward(mc, gp, item.segs);
                QualityScores q{};
                for (std::size_t t = 0; t < ntasks; ++t)
                    q.by_name(tc.tasks[t]) = double(fwd.heads[t].score->value[0]);
                vp.push_back(q);
                vl.push_back(item.labels);
                vds.push_back(item.dataset);
                vcid.push_back(item.condition_id);
            }
            if (tc.per_condition_validation) {
                // aggregate to condition means within each dataset, per task
                std::vector<QualityScores> cp, cl;
                std::vector<std::string> cds;
                std::map<std::pair<std::string, long>, std::vector<std::size_t>> groups;
                for (std::size_t i = 0; i < vp.size(); ++i) groups[{vds[i], vcid[i]}].push_back(i);
                for (const auto& [key, idxs] : groups) {
                    QualityScores mp{}, ml{};
                    for (std::size_t t = 0; t < 5; ++t) {
                        double sp = 0, sl = 0;
                        for (auto i : idxs) {
                            sp += vp[i].by_index(t);
                            sl += vl[i].by_index(t);
                        }
                        mp.by_index(t) = sp / double(idxs.size());
                        ml.by_index(t) = sl / double(idxs.size());
                    }
                    cp.push_back(mp);
                    cl.push_back(ml);
                    cds.push_back(key.first);
                }
                val_pcc = train_detail::avg_dataset_pcc(cp, cl, cds, tc.tasks);
            } else {
                val_pcc = train_detail::avg_dataset_pcc(vp, vl, vds, tc.tasks);
            }
        }

        double train_pcc = 0.0;
        {
            std::vector<QualityScores> tl;
            std::vector<std::string> tds;
            for (const auto& it : train_items) {
                tl.push_back(it.labels);
                tds.push_back(it.dataset);
            }
            try {
                train_pcc = train_detail::avg_dataset_pcc(epoch_preds, tl, tds, tc.tasks);
            } catch (const DataError&) {
            }
        }

        EpochRecord er;
        er.epoch = epoch;
        er.train_loss = loss_terms ? loss_sum / double(loss_terms) : 0.0;
        er.train_pcc = train_pcc;
        er.val_pcc = val_pcc;
        {
            // hash the payload without its trailing checksum: hashing the
            // full stream always yields the CRC-32 residue constant
            WeightBundle wb{mc, params};
            std::string bytes = serialize_bundle(wb);
            er.weight_crc = crc32(bytes.data(), bytes.size() - 4);
        }
        result.record.epochs.push_back(er);
        if (tc.verbose)
            std::cerr << "epoch " << epoch << ": loss " << er.train_loss << " train_pcc " << train_pcc
                      << " val_pcc " << val_pcc << "\n";

        if (stopper.update(val_pcc)) best_params = params;
        if (stopper.should_stop()) break;
    }

    result.record.best_epoch = stopper.best_epoch();
    result.record.best_val_pcc = stopper.best_metric();
    result.bundle.config = mc;
    result.bundle.params = best_params;
    return result;
}

// ---------------------------------------------------------------------------
// ablation harness

enum class AblationStage { Framewise, TD, Pooling };

struct AblationTable {
    AblationStage stage = AblationStage::Framewise;
    std::vector<std::string> variants;
    std::vector<double> median_pcc;                 // NaN where every run failed
    std::vector<std::vector<double>> run_pccs;      // per variant, per seed
    std::vector<std::string> run_errors;            // recorded, not fatal
};

inline ModelConfig apply_variant(ModelConfig base, AblationStage stage, const std::string& variant) {
    switch (stage) {
        case AblationStage::Framewise:
            base.framewise = model_detail::framewise_from_string(variant);
            break;
        case AblationStage::TD:
            base.td = model_detail::td_from_string(variant);
            break;
        case AblationStage::Pooling:
            base.pooling = model_detail::pooling_from_string(variant);
            break;
    }
    return base;
}

// Each variant is trained once per seed; the table reports the median over
// those runs of the best validation PCC.
inline AblationTable run_ablation(AblationStage stage, const std::vector<std::string>& variants,
                                  const ModelConfig& base, const DatasetManifest& train_manifest,
                                  const DatasetManifest& val_manifest, const TrainConfig& tc) {
    if (variants.empty()) throw DataError("run_ablation: no variants");
    AblationTable table;
    table.stage = stage;
    table.variants = variants;
    for (const auto& variant : variants) {
        ModelConfig mc = apply_variant(base, stage, variant);
        std::vector<double> pccs;
        for (auto seed : tc.seeds) {
            try {
                auto res = train_model(mc, train_manifest, val_manifest, tc, seed);
                pccs.push_back(res.record.best_val_pcc);
            } catch (const std::exception& e) {
                table.run_errors.push_back(variant + " seed " + std::to_string(seed) + ": " + e.what());
            }
        }
        table.run_pccs.push_back(pccs);
        if (pccs.empty()) {
            table.median_pcc.push_back(std::nan(""));
        } else {
            std::vector<double> s = pccs;
            std::sort(s.begin(), s.end());
            std::size_t n = s.size();
            table.median_pcc.push_back(n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]));
        }
    }
    return table;
}

// Layout mirroring the result tables: a variant header row and a median row.
inline void write_ablation_table(const AblationTable& table, std::ostream& out) {
    out << "Model";
    for (const auto& v : table.variants) out << '\t' << v;
    out << "\nr";
    char buf[32];
    for (double m : table.median_pcc) {
        std::snprintf(buf, sizeof(buf), "%.3f", m);
        out << '\t' << buf;
    }
    out << '\n';
    for (const auto& e : table.run_errors) out << "# run error: " << e << '\n';
}

}  // namespace nisqa
