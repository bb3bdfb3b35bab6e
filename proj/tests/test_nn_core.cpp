#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "nisqa/autodiff.hpp"
#include "nisqa/common.hpp"
#include "nisqa/tensor.hpp"

using namespace nisqa;
using namespace nisqa::ad;

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(dims);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// central finite differences against the analytic gradient; checks every
// element of every input tensor
using GraphFn = std::function<Var<double>(std::vector<Var<double>>&)>;

void check_gradients(std::vector<Tensor<double>> inputs, const GraphFn& build, double tol = 1e-4,
                     double h = 1e-5) {
    std::vector<Var<double>> vars;
    for (auto& t : inputs) vars.push_back(leaf<double>(t, true));
    auto loss = build(vars);
    REQUIRE(loss->value.numel() == 1);
    backward(loss);

    auto eval = [&](std::vector<Tensor<double>>& pts) {
        std::vector<Var<double>> vs;
        for (auto& t : pts) vs.push_back(leaf<double>(t, false));
        auto out = build(vs);
        return double(out->value[0]);
    };

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        REQUIRE(vars[i]->grad.numel() == inputs[i].numel());
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            auto pts = inputs;
            pts[i][j] = inputs[i][j] + h;
            double fp = eval(pts);
            pts[i][j] = inputs[i][j] - h;
            double fm = eval(pts);
            double fd = (fp - fm) / (2.0 * h);
            double an = vars[i]->grad[j];
            double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            INFO("input " << i << " elem " << j << " fd=" << fd << " an=" << an);
            REQUIRE(std::abs(fd - an) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("conv2d forward matches a nested-loop oracle") {
    Rng rng(101);
    std::size_t n = 2, cin = 3, hgt = 5, wid = 4, cout = 2, kh = 3, kw = 3, ph = 1, pw = 1;
    auto xt = random_tensor({n, cin, hgt, wid}, rng);
    auto wt = random_tensor({cout, cin, kh, kw}, rng);
    auto bt = random_tensor({cout}, rng);
    auto out = conv2d(constant(xt), constant(wt), constant(bt), ph, pw);
    REQUIRE(out->value.dims == std::vector<std::size_t>{n, cout, hgt, wid});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < cout; ++oc)
            for (std::size_t oy = 0; oy < hgt; ++oy)
                for (std::size_t ox = 0; ox < wid; ++ox) {
                    double acc = bt[oc];
                    for (std::size_t ic = 0; ic < cin; ++ic)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(ph);
                                std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(pw);
                                if (iy < 0 || iy >= std::ptrdiff_t(hgt) || ix < 0 || ix >= std::ptrdiff_t(wid))
                                    continue;
                                acc += xt[((b * cin + ic) * hgt + std::size_t(iy)) * wid + std::size_t(ix)] *
                                       wt[((oc * cin + ic) * kh + ky) * kw + kx];
                            }
                    std::size_t oi = ((b * cout + oc) * hgt + oy) * wid + ox;
                    REQUIRE(out->value[oi] == Catch::Approx(acc).margin(1e-12));
                }
}

TEST_CASE("conv2d with asymmetric padding (height only)") {
    Rng rng(102);
    auto xt = random_tensor({1, 2, 6, 3}, rng);
    auto wt = random_tensor({4, 2, 3, 3}, rng);
    auto bt = random_tensor({4}, rng);
    auto out = conv2d(constant(xt), constant(wt), constant(bt), 1, 0);
    REQUIRE(out->value.dims == std::vector<std::size_t>{1, 4, 6, 1});
}

TEST_CASE("linear and matmul match nested loops") {
    Rng rng(103);
    auto xt = random_tensor({4, 7}, rng);
    auto wt = random_tensor({5, 7}, rng);
    auto bt = random_tensor({5}, rng);
    auto y = linear(constant(xt), constant(wt), constant(bt));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t o = 0; o < 5; ++o) {
            double acc = bt[o];
            for (std::size_t k = 0; k < 7; ++k) acc += xt.at(i, k) * wt.at(o, k);
            REQUIRE(y->value.at(i, o) == Catch::Approx(acc).margin(1e-12));
        }

    auto at = random_tensor({3, 6}, rng);
    auto btm = random_tensor({6, 2}, rng);
    auto c = matmul(constant(at), constant(btm));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 6; ++k) acc += at.at(i, k) * btm.at(k, j);
            REQUIRE(c->value.at(i, j) == Catch::Approx(acc).margin(1e-12));
        }
}

TEST_CASE("maxpool2d forward oracle and tie handling") {
    Rng rng(104);
    auto xt = random_tensor({1, 2, 4, 6}, rng);
    auto out = maxpool2d(constant(xt), 2, 2, 2, 2);
    REQUIRE(out->value.dims == std::vector<std::size_t>{1, 2, 2, 3});
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t oy = 0; oy < 2; ++oy)
            for (std::size_t ox = 0; ox < 3; ++ox) {
                double m = -1e18;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx)
                        m = std::max(m, xt[((c) * 4 + oy * 2 + dy) * 6 + ox * 2 + dx]);
                REQUIRE(out->value[(c * 2 + oy) * 3 + ox] == Catch::Approx(m).margin(1e-15));
            }

    // all-equal window: gradient must flow to exactly one element
    Tensor<double> flat({1, 1, 2, 2});
    flat.fill(3.0);
    auto x = leaf<double>(flat, true);
    auto p = maxpool2d(x, 2, 2, 2, 2);
    backward(sum(p));
    double g = 0.0;
    int nonzero = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        g += x->grad[i];
        if (x->grad[i] != 0.0) ++nonzero;
    }
    REQUIRE(g == 1.0);
    REQUIRE(nonzero == 1);
}

TEST_CASE("masked softmax properties") {
    Rng rng(105);
    Tensor<double> s({6});
    for (auto& v : s.data) v = rng.uniform(-3.0, 3.0);
    std::vector<bool> mask = {true, true, false, true, false, true};
    auto y = masked_softmax(constant(s), mask);
    double total = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        if (!mask[i]) REQUIRE(y->value[i] == 0.0);
        REQUIRE(y->value[i] >= 0.0);
        total += y->value[i];
    }
    REQUIRE(total == Catch::Approx(1.0).margin(1e-12));

    // shift invariance
    Tensor<double> s2 = s;
    for (auto& v : s2.data) v += 37.5;
    auto y2 = masked_softmax(constant(s2), mask);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(y2->value[i] == Catch::Approx(y->value[i]).margin(1e-12));

    // exp/sum oracle over the masked entries
    double denom = 0.0, mx = -1e18;
    for (std::size_t i = 0; i < 6; ++i)
        if (mask[i]) mx = std::max(mx, s[i]);
    for (std::size_t i = 0; i < 6; ++i)
        if (mask[i]) denom += std::exp(s[i] - mx);
    for (std::size_t i = 0; i < 6; ++i)
        if (mask[i]) REQUIRE(y->value[i] == Catch::Approx(std::exp(s[i] - mx) / denom).margin(1e-12));

    REQUIRE_THROWS_AS(masked_softmax(constant(s), std::vector<bool>(6, false)), DataError);
}

TEST_CASE("layer_norm normalizes each row") {
    Rng rng(106);
    auto xt = random_tensor({3, 16}, rng, -4.0, 4.0);
    Tensor<double> gain({16}), shift({16});
    gain.fill(1.0);
    auto y = layer_norm(constant(xt), constant(gain), constant(shift));
    for (std::size_t i = 0; i < 3; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 16; ++j) mean += y->value.at(i, j);
        mean /= 16.0;
        for (std::size_t j = 0; j < 16; ++j) var += (y->value.at(i, j) - mean) * (y->value.at(i, j) - mean);
        var /= 16.0;
        REQUIRE(mean == Catch::Approx(0.0).margin(1e-10));
        REQUIRE(var == Catch::Approx(1.0).margin(1e-4));
    }
}

TEST_CASE("gradient checks against central differences") {
    Rng rng(200);

    SECTION("elementwise chain: relu/sigmoid/tanh/mul/scale") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({3, 4}, rng);
        check_gradients({a, b}, [](std::vector<Var<double>>& v) {
            return sum(mul(tanh_op(v[0]), sigmoid(scale(v[1], 1.7))));
        });
        // relu checked away from the kink
        auto c = random_tensor({3, 4}, rng);
        for (auto& x : c.data)
            if (std::abs(x) < 0.05) x += 0.1;
        check_gradients({c}, [](std::vector<Var<double>>& v) { return sum(relu(v[0])); });
    }

    SECTION("linear") {
        auto x = random_tensor({3, 5}, rng);
        auto w = random_tensor({4, 5}, rng);
        auto b = random_tensor({4}, rng);
        check_gradients({x, w, b}, [](std::vector<Var<double>>& v) {
            return sum(tanh_op(linear(v[0], v[1], v[2])));
        });
    }

    SECTION("matmul and transpose") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({3, 2}, rng);
        check_gradients({a, b}, [](std::vector<Var<double>>& v) {
            return sum(tanh_op(matmul(transpose2d(v[0]), v[1])));
        });
    }

    SECTION("conv2d") {
        auto x = random_tensor({2, 2, 4, 3}, rng);
        auto w = random_tensor({3, 2, 3, 3}, rng);
        auto b = random_tensor({3}, rng);
        check_gradients({x, w, b}, [](std::vector<Var<double>>& v) {
            return sum(tanh_op(conv2d(v[0], v[1], v[2], 1, 1)));
        });
    }

    SECTION("maxpool2d") {
        auto x = random_tensor({1, 2, 4, 4}, rng);
        check_gradients({x}, [](std::vector<Var<double>>& v) {
            return sum(mul(maxpool2d(v[0], 2, 2, 2, 2), maxpool2d(v[0], 2, 2, 2, 2)));
        });
    }

    SECTION("masked softmax") {
        Tensor<double> s({5});
        for (auto& v : s.data) v = rng.uniform(-2.0, 2.0);
        std::vector<bool> mask = {true, false, true, true, true};
        Tensor<double> coef({5});
        for (auto& v : coef.data) v = rng.uniform(-1.0, 1.0);
        check_gradients({s}, [&](std::vector<Var<double>>& v) {
            return sum(mul(masked_softmax(v[0], mask), constant(coef)));
        });
    }

    SECTION("row softmax with key mask") {
        auto s = random_tensor({3, 5}, rng);
        std::vector<bool> mask = {true, true, false, true, true};
        auto coef = random_tensor({3, 5}, rng);
        check_gradients({s}, [&](std::vector<Var<double>>& v) {
            return sum(mul(softmax_rows_masked(v[0], mask), constant(coef)));
        });
    }

    SECTION("scaled dot attention") {
        auto q = random_tensor({3, 4}, rng);
        auto k = random_tensor({5, 4}, rng);
        auto v4 = random_tensor({5, 4}, rng);
        std::vector<bool> mask = {true, true, true, false, true};
        check_gradients({q, k, v4}, [&](std::vector<Var<double>>& v) {
            return sum(tanh_op(scaled_dot_attention(v[0], v[1], v[2], mask)));
        });
    }

    SECTION("layer_norm") {
        auto x = random_tensor({2, 6}, rng);
        Tensor<double> gain({6}), shift({6});
        for (auto& v : gain.data) v = rng.uniform(0.5, 1.5);
        for (auto& v : shift.data) v = rng.uniform(-0.5, 0.5);
        check_gradients({x, gain, shift}, [](std::vector<Var<double>>& v) {
            return sum(tanh_op(layer_norm(v[0], v[1], v[2])));
        }, 2e-4);
    }

    SECTION("masked row reductions") {
        auto y = random_tensor({4, 3}, rng);
        std::vector<bool> mask = {true, false, true, true};
        auto coef = random_tensor({1, 3}, rng);
        check_gradients({y}, [&](std::vector<Var<double>>& v) {
            return sum(mul(mean_rows_masked(v[0], mask), constant(coef)));
        });
        check_gradients({y}, [&](std::vector<Var<double>>& v) {
            return sum(mul(max_rows_masked(v[0], mask), constant(coef)));
        });
    }

    SECTION("concat/slice/reshape/row plumbing") {
        auto a = random_tensor({2, 3}, rng);
        auto b = random_tensor({2, 2}, rng);
        check_gradients({a, b}, [](std::vector<Var<double>>& v) {
            auto cc = concat_cols(v[0], v[1]);
            auto sl = slice_cols(cc, 1, 4);
            auto rows = concat_rows<double>({row(sl, 0), row(sl, 1)});
            return sum(tanh_op(reshape(rows, {6})));
        });
    }

    SECTION("mse") {
        auto a = random_tensor({5}, rng);
        auto b = random_tensor({5}, rng);
        check_gradients({a, b}, [](std::vector<Var<double>>& v) { return mse(v[0], v[1]); });
    }

    SECTION("shared subexpression (diamond graph)") {
        auto x = random_tensor({3}, rng);
        check_gradients({x}, [](std::vector<Var<double>>& v) {
            auto t = tanh_op(v[0]);
            return sum(mul(t, t));
        });
    }
}

TEST_CASE("mse matches its closed form") {
    Tensor<double> a({3}), b({3});
    a.data = {1.0, 2.0, 3.0};
    b.data = {1.5, 2.0, 5.0};
    auto v = mse(constant(a), constant(b));
    REQUIRE(v->value[0] == Catch::Approx((0.25 + 0.0 + 4.0) / 3.0).margin(1e-12));
}

TEST_CASE("dropout") {
    Rng r0(1);
    Tensor<double> xt({1000});
    xt.fill(1.0);
    SECTION("rate 0 is identity") {
        auto x = leaf<double>(xt, false);
        auto y = dropout(x, 0.0, r0);
        REQUIRE(y.get() == x.get());
    }
    SECTION("inverted scaling keeps the expected value") {
        double rate = 0.3;
        auto y = dropout(constant(xt), rate, r0);
        double mean = 0.0;
        int dropped = 0;
        for (double v : y->value.data) {
            mean += v;
            if (v == 0.0)
                ++dropped;
            else
                REQUIRE(v == Catch::Approx(1.0 / (1.0 - rate)).margin(1e-12));
        }
        mean /= 1000.0;
        REQUIRE(mean == Catch::Approx(1.0).margin(0.1));
        REQUIRE(dropped > 200);
        REQUIRE(dropped < 400);
    }
    SECTION("gradient respects the dropout mask") {
        Rng r1(2);
        auto x = leaf<double>(xt, true);
        auto y = dropout(x, 0.5, r1);
        backward(sum(y));
        for (std::size_t i = 0; i < 1000; ++i) {
            if (y->value[i] == 0.0)
                REQUIRE(x->grad[i] == 0.0);
            else
                REQUIRE(x->grad[i] == Catch::Approx(2.0).margin(1e-12));
        }
    }
}

TEST_CASE("backward accumulates across reuse and zeroes between runs") {
    Tensor<double> xt({2});
    xt.data = {3.0, -2.0};
    auto x = leaf<double>(xt, true);
    auto y = add(mul(x, x), x);  // d/dx = 2x + 1
    backward(sum(y));
    REQUIRE(x->grad[0] == Catch::Approx(7.0));
    REQUIRE(x->grad[1] == Catch::Approx(-3.0));
    backward(sum(y));  // rerun must not double-count
    REQUIRE(x->grad[0] == Catch::Approx(7.0));
}

TEST_CASE("adam matches a scalar reference implementation") {
    ParamSet<double> params;
    params.names = {"p"};
    Tensor<double> p({3});
    p.data = {1.0, -2.0, 0.5};
    params.tensors = {p};
    AdamState<double> st;

    std::vector<double> ref = p.data;
    std::vector<double> m(3, 0.0), v(3, 0.0);
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Rng rng(7);
    for (int step = 1; step <= 5; ++step) {
        Tensor<double> g({3});
        for (auto& x : g.data) x = rng.uniform(-1.0, 1.0);
        adam_step(params, {g}, st, lr, b1, b2, eps);
        for (std::size_t i = 0; i < 3; ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            double mh = m[i] / (1 - std::pow(b1, step));
            double vh = v[i] / (1 - std::pow(b2, step));
            ref[i] -= lr * mh / (std::sqrt(vh) + eps);
            REQUIRE(params.tensors[0][i] == Catch::Approx(ref[i]).margin(1e-14));
        }
    }
    REQUIRE(st.step == 5);
}

TEST_CASE("first adam step moves by roughly the learning rate") {
    ParamSet<double> params;
    params.names = {"p"};
    Tensor<double> p({1});
    p.data = {0.0};
    params.tensors = {p};
    AdamState<double> st;
    Tensor<double> g({1});
    g.data = {0.37};
    adam_step(params, {g}, st, 0.001);
    REQUIRE(std::abs(params.tensors[0][0] + 0.001) < 1e-6);
}
