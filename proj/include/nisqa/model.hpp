#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nisqa/autodiff.hpp"
#include "nisqa/common.hpp"
#include "nisqa/features.hpp"
#include "nisqa/tensor.hpp"

// The four-stage network: framewise model (Skip | CNN | FFN), time-dependency
// model (Skip | SA | LSTM | LSTM-SA | SA-LSTM), and per-task pooling
// (AP | Avg | Max) with five regression heads sharing the trunk.

namespace nisqa {

enum class Framewise { Skip, CNN, FFN };
enum class TimeDependency { Skip, SA, LSTM, LSTM_SA, SA_LSTM };
enum class Pooling { AP, Avg, Max };

inline const std::array<std::string, 5> kTaskNames = {"mos", "noi", "col", "dis", "lou"};

struct ModelConfig {
    Framewise framewise = Framewise::CNN;
    TimeDependency td = TimeDependency::SA;
    Pooling pooling = Pooling::AP;
    std::size_t d_tf = 64;
    std::size_t d_tf_ff = 64;
    std::size_t sa_depth = 2;
    std::size_t sa_heads = 1;
    std::size_t lstm_hidden = 128;
    std::size_t ap_hidden = 128;
    std::size_t ffn_hidden = 2048;
    std::vector<std::string> tasks = {"mos", "noi", "col", "dis", "lou"};
    bool use_positional_encoding = true;
    double dropout = 0.1;

    std::size_t framewise_dim() const {
        return framewise == Framewise::Skip ? kMelBands * kSegmentWidth : 384;
    }
    // output dim of the time-dependency stage
    std::size_t td_dim() const {
        switch (td) {
            case TimeDependency::LSTM:
            case TimeDependency::SA_LSTM:
                return 2 * lstm_hidden;
            default:
                return d_tf;
        }
    }
};

namespace model_detail {

inline std::string to_string(Framewise f) {
    switch (f) {
        case Framewise::Skip: return "Skip";
        case Framewise::CNN: return "CNN";
        default: return "FFN";
    }
}
inline std::string to_string(TimeDependency t) {
    switch (t) {
        case TimeDependency::Skip: return "Skip";
        case TimeDependency::SA: return "SA";
        case TimeDependency::LSTM: return "LSTM";
        case TimeDependency::LSTM_SA: return "LSTM-SA";
        default: return "SA-LSTM";
    }
}
inline std::string to_string(Pooling p) {
    switch (p) {
        case Pooling::AP: return "AP";
        case Pooling::Avg: return "Avg";
        default: return "Max";
    }
}

inline Framewise framewise_from_string(const std::string& s) {
    if (s == "Skip") return Framewise::Skip;
    if (s == "CNN") return Framewise::CNN;
    if (s == "FFN") return Framewise::FFN;
    throw DataError("unknown framewise variant: " + s);
}
inline TimeDependency td_from_string(const std::string& s) {
    if (s == "Skip") return TimeDependency::Skip;
    if (s == "SA") return TimeDependency::SA;
    if (s == "LSTM") return TimeDependency::LSTM;
    if (s == "LSTM-SA") return TimeDependency::LSTM_SA;
    if (s == "SA-LSTM") return TimeDependency::SA_LSTM;
    throw DataError("unknown time-dependency variant: " + s);
}
inline Pooling pooling_from_string(const std::string& s) {
    if (s == "AP") return Pooling::AP;
    if (s == "Avg") return Pooling::Avg;
    if (s == "Max") return Pooling::Max;
    throw DataError("unknown pooling variant: " + s);
}

}  // namespace model_detail

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"framewise", model_detail::to_string(c.framewise)},
                       {"td", model_detail::to_string(c.td)},
                       {"pooling", model_detail::to_string(c.pooling)},
                       {"d_tf", c.d_tf},
                       {"d_tf_ff", c.d_tf_ff},
                       {"sa_depth", c.sa_depth},
                       {"sa_heads", c.sa_heads},
                       {"lstm_hidden", c.lstm_hidden},
                       {"ap_hidden", c.ap_hidden},
                       {"ffn_hidden", c.ffn_hidden},
                       {"tasks", c.tasks},
                       {"use_positional_encoding", c.use_positional_encoding},
                       {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig def;
    c.framewise = model_detail::framewise_from_string(j.value("framewise", "CNN"));
    c.td = model_detail::td_from_string(j.value("td", "SA"));
    c.pooling = model_detail::pooling_from_string(j.value("pooling", "AP"));
    c.d_tf = j.value("d_tf", def.d_tf);
    c.d_tf_ff = j.value("d_tf_ff", def.d_tf_ff);
    c.sa_depth = j.value("sa_depth", def.sa_depth);
    c.sa_heads = j.value("sa_heads", def.sa_heads);
    c.lstm_hidden = j.value("lstm_hidden", def.lstm_hidden);
    c.ap_hidden = j.value("ap_hidden", def.ap_hidden);
    c.ffn_hidden = j.value("ffn_hidden", def.ffn_hidden);
    c.tasks = j.value("tasks", def.tasks);
    c.use_positional_encoding = j.value("use_positional_encoding", def.use_positional_encoding);
    c.dropout = j.value("dropout", def.dropout);
}

// ---------------------------------------------------------------------------
// parameter registry

struct ParamSpec {
    std::string name;
    std::vector<std::size_t> dims;
};

// CNN plan: channels 16,16,32,32,64,64, 3x3 kernels, height/width 'same'
// padding except the last layer which pads height only; max-pools
// (2,2),(2,2),(2,1) after layers 2, 4 and 5. 48x15 -> 6x3 -> 64x6x1.
inline const std::array<std::size_t, 7> kCnnChannels = {1, 16, 16, 32, 32, 64, 64};

inline std::vector<ParamSpec> build_param_specs(const ModelConfig& c) {
    std::vector<ParamSpec> specs;
    auto lin = [&](const std::string& name, std::size_t dout, std::size_t din) {
        specs.push_back({name + ".weight", {dout, din}});
        specs.push_back({name + ".bias", {dout}});
    };
    switch (c.framewise) {
        case Framewise::CNN:
            for (std::size_t i = 1; i <= 6; ++i) {
                specs.push_back({"cnn.conv" + std::to_string(i) + ".weight",
                                 {kCnnChannels[i], kCnnChannels[i - 1], 3, 3}});
                specs.push_back({"cnn.conv" + std::to_string(i) + ".bias", {kCnnChannels[i]}});
            }
            break;
        case Framewise::FFN: {
            std::size_t in = kMelBands * kSegmentWidth;
            for (std::size_t i = 1; i <= 4; ++i) {
                lin("ffn.fc" + std::to_string(i), c.ffn_hidden, in);
                in = c.ffn_hidden;
            }
            lin("ffn.out", 384, in);
            break;
        }
        case Framewise::Skip:
            break;
    }
    lin("proj", c.d_tf, c.framewise_dim());

    auto sa_blocks = [&] {
        for (std::size_t i = 1; i <= c.sa_depth; ++i) {
            std::string pre = "sa.block" + std::to_string(i) + ".";
            lin(pre + "q", c.d_tf, c.d_tf);
            lin(pre + "k", c.d_tf, c.d_tf);
            lin(pre + "v", c.d_tf, c.d_tf);
            lin(pre + "o", c.d_tf, c.d_tf);
            lin(pre + "ff1", c.d_tf_ff, c.d_tf);
            lin(pre + "ff2", c.d_tf, c.d_tf_ff);
            specs.push_back({pre + "norm1.gain", {c.d_tf}});
            specs.push_back({pre + "norm1.shift", {c.d_tf}});
            specs.push_back({pre + "norm2.gain", {c.d_tf}});
            specs.push_back({pre + "norm2.shift", {c.d_tf}});
        }
    };
    auto lstm = [&] {
        std::size_t h = c.lstm_hidden;
        lin("lstm.fw", 4 * h, c.d_tf + h);
        lin("lstm.bw", 4 * h, c.d_tf + h);
    };
    switch (c.td) {
        case TimeDependency::Skip:
            break;
        case TimeDependency::SA:
            sa_blocks();
            break;
        case TimeDependency::LSTM:
            lstm();
            break;
        case TimeDependency::LSTM_SA:
            lstm();
            lin("adapter", c.d_tf, 2 * c.lstm_hidden);
            sa_blocks();
            break;
        case TimeDependency::SA_LSTM:
            sa_blocks();
            lstm();
            break;
    }

    std::size_t d = c.td_dim();
    for (const auto& t : c.tasks) {
        if (c.pooling == Pooling::AP) {
            lin("head." + t + ".att1", c.ap_hidden, d);
            lin("head." + t + ".att2", 1, c.ap_hidden);
        }
        lin("head." + t + ".out", 1, d);
    }
    return specs;
}

// Seeded init: weights uniform +-sqrt(1/fan_in), biases zero, layer-norm
// gain 1 / shift 0.
template <typename T>
ad::ParamSet<T> init_params(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x1717));
    ad::ParamSet<T> ps;
    for (const auto& spec : build_param_specs(c)) {
        Tensor<T> t(spec.dims);
        bool is_bias = spec.name.ends_with(".bias") || spec.name.ends_with(".shift");
        bool is_gain = spec.name.ends_with(".gain");
        if (is_gain) {
            t.fill(T(1));
        } else if (!is_bias) {
            std::size_t fan_in = t.numel() / spec.dims[0];
            double bound = std::sqrt(1.0 / double(fan_in));
            for (auto& v : t.data) v = T(rng.uniform(-bound, bound));
        }
        ps.names.push_back(spec.name);
        ps.tensors.push_back(std::move(t));
    }
    return ps;
}

// ---------------------------------------------------------------------------
// forward graph

struct QualityScores {
    double mos = 0, noi = 0, col = 0, dis = 0, lou = 0;

    double& by_index(std::size_t i) {
        switch (i) {
            case 0: return mos;
            case 1: return noi;
            case 2: return col;
            case 3: return dis;
            default: return lou;
        }
    }
    double by_index(std::size_t i) const { return const_cast<QualityScores*>(this)->by_index(i); }

    double& by_name(const std::string& n) {
        for (std::size_t i = 0; i < 5; ++i)
            if (kTaskNames[i] == n) return by_index(i);
        throw InternalError("unknown task: " + n);
    }
    double by_name(const std::string& n) const { return const_cast<QualityScores*>(this)->by_name(n); }
};

// Per-forward view of the parameter set as graph leaves.
template <typename T>
struct GraphParams {
    const ad::ParamSet<T>* set = nullptr;
    std::vector<ad::Var<T>> leaves;

    static GraphParams make(const ad::ParamSet<T>& ps, bool trainable) {
        GraphParams gp;
        gp.set = &ps;
        gp.leaves.reserve(ps.size());
        for (const auto& t : ps.tensors) gp.leaves.push_back(ad::leaf<T>(t, trainable));
        return gp;
    }

    ad::Var<T> operator()(const std::string& name) const {
        auto i = set->find(name);
        if (i < 0) throw InternalError("missing parameter: " + name);
        return leaves[std::size_t(i)];
    }

    // accumulated gradients after backward, aligned with the ParamSet order
    std::vector<Tensor<T>> grads() const {
        std::vector<Tensor<T>> g;
        g.reserve(leaves.size());
        for (const auto& l : leaves) {
            if (l->grad.dims == l->value.dims)
                g.push_back(l->grad);
            else
                g.push_back(Tensor<T>(l->value.dims));
        }
        return g;
    }
};

namespace model_detail {

template <typename T>
Tensor<T> positional_encoding(std::size_t l, std::size_t d) {
    Tensor<T> pe({l, d});
    for (std::size_t t = 0; t < l; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            double angle = double(t) / std::pow(10000.0, 2.0 * double(i / 2) / double(d));
            pe.at(t, i) = T((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return pe;
}

template <typename T>
ad::Var<T> sa_attention(const ModelConfig& c, const GraphParams<T>& p, const std::string& pre,
                        ad::Var<T> x, const std::vector<bool>& mask) {
    auto q = ad::linear(x, p(pre + "q.weight"), p(pre + "q.bias"));
    auto k = ad::linear(x, p(pre + "k.weight"), p(pre + "k.bias"));
    auto v = ad::linear(x, p(pre + "v.weight"), p(pre + "v.bias"));
    ad::Var<T> att;
    if (c.sa_heads <= 1) {
        att = ad::scaled_dot_attention(q, k, v, mask);
    } else {
        if (c.d_tf % c.sa_heads != 0) throw DataError("d_tf must be divisible by sa_heads");
        std::size_t hd = c.d_tf / c.sa_heads;
        std::vector<ad::Var<T>> parts;
        for (std::size_t h = 0; h < c.sa_heads; ++h) {
            auto qs = ad::slice_cols(q, h * hd, (h + 1) * hd);
            auto ks = ad::slice_cols(k, h * hd, (h + 1) * hd);
            auto vs = ad::slice_cols(v, h * hd, (h + 1) * hd);
            auto part = ad::scaled_dot_attention(qs, ks, vs, mask);
            parts.push_back(part);
        }
        att = parts[0];
        for (std::size_t h = 1; h < parts.size(); ++h) att = ad::concat_cols(att, parts[h]);
    }
    return ad::linear(att, p(pre + "o.weight"), p(pre + "o.bias"));
}

// post-norm Transformer encoder block, single or split heads, ReLU feedforward
template <typename T>
ad::Var<T> sa_block(const ModelConfig& c, const GraphParams<T>& p, const std::string& pre, ad::Var<T> x,
                    const std::vector<bool>& mask, Rng* dropout_rng) {
    auto att = sa_attention(c, p, pre, x, mask);
    if (dropout_rng) att = ad::dropout(att, c.dropout, *dropout_rng);
    x = ad::layer_norm(ad::add(x, att), p(pre + "norm1.gain"), p(pre + "norm1.shift"));
    auto ff = ad::linear(ad::relu(ad::linear(x, p(pre + "ff1.weight"), p(pre + "ff1.bias"))),
                         p(pre + "ff2.weight"), p(pre + "ff2.bias"));
    if (dropout_rng) ff = ad::dropout(ff, c.dropout, *dropout_rng);
    return ad::layer_norm(ad::add(x, ff), p(pre + "norm2.gain"), p(pre + "norm2.shift"));
}

template <typename T>
ad::Var<T> lstm_cell(ad::Var<T> x_t, ad::Var<T>& h, ad::Var<T>& c, ad::Var<T> w, ad::Var<T> b,
                     std::size_t hidden) {
    auto gates = ad::linear(ad::concat_cols(x_t, h), w, b);  // [1, 4H]
    auto i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    auto f = ad::sigmoid(ad::slice_cols(gates, hidden, 2 * hidden));
    auto g = ad::tanh_op(ad::slice_cols(gates, 2 * hidden, 3 * hidden));
    auto o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, 4 * hidden));
    c = ad::add(ad::mul(f, c), ad::mul(i, g));
    h = ad::mul(o, ad::tanh_op(c));
    return h;
}

// Bidirectional LSTM over the valid prefix; padded rows stay zero so the
// output is invariant to extra padding.
template <typename T>
ad::Var<T> bilstm(const GraphParams<T>& p, ad::Var<T> x, const std::vector<bool>& mask,
                  std::size_t hidden) {
    std::size_t l = x->value.dim(0);
    std::size_t nvalid = 0;
    while (nvalid < l && mask[nvalid]) ++nvalid;
    if (nvalid == 0) throw DataError("bilstm: all steps masked");
    auto zero_h = ad::constant<T>(Tensor<T>({1, hidden}));
    auto zero_out = ad::constant<T>(Tensor<T>({1, 2 * hidden}));

    std::vector<ad::Var<T>> fw(nvalid), bw(nvalid);
    {
        auto h = zero_h, c = zero_h;
        for (std::size_t t = 0; t < nvalid; ++t)
            fw[t] = lstm_cell(ad::row(x, t), h, c, p("lstm.fw.weight"), p("lstm.fw.bias"), hidden);
    }
    {
        auto h = zero_h, c = zero_h;
        for (std::size_t t = nvalid; t-- > 0;)
            bw[t] = lstm_cell(ad::row(x, t), h, c, p("lstm.bw.weight"), p("lstm.bw.bias"), hidden);
    }
    std::vector<ad::Var<T>> rows(l);
    for (std::size_t t = 0; t < l; ++t)
        rows[t] = t < nvalid ? ad::concat_cols(fw[t], bw[t]) : zero_out;
    return ad::concat_rows(rows);
}

}  // namespace model_detail

// Mel segments (padded or not) -> input tensor [L, 1, 48, 15]
template <typename T>
Tensor<T> segments_to_tensor(const MelSegments& segs) {
    std::size_t l = segs.segments.size();
    Tensor<T> x({l, 1, kMelBands, kSegmentWidth});
    std::size_t per = kMelBands * kSegmentWidth;
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < per; ++j) x[i * per + j] = T(segs.segments[i].data[j]);
    return x;
}

// Framewise stage: [L,1,48,15] -> [L, D_fw]. When shape_trace is given it
// records the activation shape after every conv (and subsequent pool).
template <typename T>
ad::Var<T> framewise_forward(const ModelConfig& c, const GraphParams<T>& p, ad::Var<T> x,
                             std::vector<std::vector<std::size_t>>* shape_trace = nullptr) {
    std::size_t l = x->value.dim(0);
    switch (c.framewise) {
        case Framewise::CNN: {
            auto h = x;
            for (std::size_t i = 1; i <= 6; ++i) {
                std::string pre = "cnn.conv" + std::to_string(i);
                std::size_t pad_w = (i == 6) ? 0 : 1;  // last layer: height padding only
                h = ad::relu(ad::conv2d(h, p(pre + ".weight"), p(pre + ".bias"), 1, pad_w));
                if (i == 2 || i == 4) h = ad::maxpool2d(h, 2, 2, 2, 2);
                if (i == 5) h = ad::maxpool2d(h, 2, 1, 2, 1);
                if (shape_trace) shape_trace->push_back(h->value.dims);
            }
            return ad::reshape(h, {l, 384});
        }
        case Framewise::FFN: {
            auto h = ad::reshape(x, {l, kMelBands * kSegmentWidth});
            for (std::size_t i = 1; i <= 4; ++i) {
                std::string pre = "ffn.fc" + std::to_string(i);
                h = ad::relu(ad::linear(h, p(pre + ".weight"), p(pre + ".bias")));
            }
            return ad::linear(h, p("ffn.out.weight"), p("ffn.out.bias"));
        }
        default:
            return ad::reshape(x, {l, kMelBands * kSegmentWidth});
    }
}

// Time-dependency stage: [L, D_fw] -> [L, td_dim]
template <typename T>
ad::Var<T> td_forward(const ModelConfig& c, const GraphParams<T>& p, ad::Var<T> feats,
                      const std::vector<bool>& mask, Rng* dropout_rng = nullptr) {
    bool any_valid = false;
    for (bool b : mask) any_valid = any_valid || b;
    if (!any_valid) throw DataError("td_forward: all steps masked");
    std::size_t l = feats->value.dim(0);
    auto h = ad::linear(feats, p("proj.weight"), p("proj.bias"));
    if (c.use_positional_encoding)
        h = ad::add(h, ad::constant(model_detail::positional_encoding<T>(l, c.d_tf)));
    auto sa_stack = [&](ad::Var<T> v) {
        for (std::size_t i = 1; i <= c.sa_depth; ++i)
            v = model_detail::sa_block(c, p, "sa.block" + std::to_string(i) + ".", v, mask, dropout_rng);
        return v;
    };
    switch (c.td) {
        case TimeDependency::Skip:
            return h;
        case TimeDependency::SA:
            return sa_stack(h);
        case TimeDependency::LSTM:
            return model_detail::bilstm(p, h, mask, c.lstm_hidden);
        case TimeDependency::LSTM_SA: {
            auto y = model_detail::bilstm(p, h, mask, c.lstm_hidden);
            y = ad::linear(y, p("adapter.weight"), p("adapter.bias"));
            return sa_stack(y);
        }
        default: {  // SA_LSTM
            auto y = sa_stack(h);
            return model_detail::bilstm(p, y, mask, c.lstm_hidden);
        }
    }
}

template <typename T>
struct HeadOutput {
    ad::Var<T> score;                   // [1,1]
    std::optional<Tensor<T>> weights;   // attention weights over L (AP only)
};

// One pooling head over y[L, d].
template <typename T>
HeadOutput<T> pool_head(const ModelConfig& c, const GraphParams<T>& p, const std::string& task,
                        ad::Var<T> y, const std::vector<bool>& mask) {
    std::string pre = "head." + task + ".";
    HeadOutput<T> out;
    switch (c.pooling) {
        case Pooling::AP: {
            auto s = ad::linear(ad::relu(ad::linear(y, p(pre + "att1.weight"), p(pre + "att1.bias"))),
                                p(pre + "att2.weight"), p(pre + "att2.bias"));  // [L,1]
            auto w = ad::masked_softmax(ad::reshape(s, {y->value.dim(0)}), mask);
            out.weights = w->value;
            auto z = ad::matmul(ad::reshape(w, {std::size_t(1), y->value.dim(0)}), y);  // [1,d]
            out.score = ad::linear(z, p(pre + "out.weight"), p(pre + "out.bias"));
            return out;
        }
        case Pooling::Avg:
            out.score = ad::linear(ad::mean_rows_masked(y, mask), p(pre + "out.weight"), p(pre + "out.bias"));
            return out;
        default:
            out.score = ad::linear(ad::max_rows_masked(y, mask), p(pre + "out.weight"), p(pre + "out.bias"));
            return out;
    }
}

template <typename T>
struct ForwardOutput {
    std::vector<std::string> tasks;
    std::vector<HeadOutput<T>> heads;  // aligned with tasks
    ad::Var<T> td_output;

    ad::Var<T> score(const std::string& task) const {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            if (tasks[i] == task) return heads[i].score;
        throw InternalError("no head for task: " + task);
    }
};

template <typename T>
ForwardOutput<T> model_forward(const ModelConfig& c, const GraphParams<T>& p, const MelSegments& segs,
                               Rng* dropout_rng = nullptr) {
    auto x = ad::leaf(segments_to_tensor<T>(segs), false);
    auto feats = framewise_forward(c, p, x);
    auto y = td_forward(c, p, feats, segs.mask, dropout_rng);
    ForwardOutput<T> out;
    out.td_output = y;
    out.tasks = c.tasks;
    for (const auto& t : c.tasks) out.heads.push_back(pool_head(c, p, t, y, segs.mask));
    return out;
}

}  // namespace nisqa
