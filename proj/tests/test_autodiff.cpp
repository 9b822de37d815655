#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "testutil.hpp"
#include "xfusion/ops.hpp"
#include "xfusion/optim.hpp"
#include "xfusion/rng.hpp"
#include "xfusion/tensor.hpp"

using namespace xfusion;
using testutil::grad_check;

namespace {

// dense reference attention, all queries, no tricks — the oracle for the
// query-subset implementation
std::vector<double> full_attention_oracle(const std::vector<double>& x, int L, int d,
                                          const AttentionWeights<double>& w,
                                          const std::vector<char>& allowed) {
    const int h = w.heads, dh = d / h;
    auto matvec = [&](const std::vector<double>& m, const std::vector<double>& in, int rows, int cols) {
        std::vector<double> out(rows * cols, 0.0);
        for (int i = 0; i < rows; ++i)
            for (int p = 0; p < d; ++p)
                for (int j = 0; j < cols; ++j) out[i * cols + j] += in[i * d + p] * m[p * cols + j];
        return out;
    };
    auto q = matvec(w.wq.data(), x, L, d);
    auto k = matvec(w.wk.data(), x, L, d);
    auto v = matvec(w.wv.data(), x, L, d);
    std::vector<double> ctx(L * d, 0.0);
    for (int a = 0; a < h; ++a)
        for (int i = 0; i < L; ++i) {
            std::vector<double> s(L, -1e300);
            double mx = -1e300;
            for (int j = 0; j < L; ++j) {
                if (!allowed[i * L + j]) continue;
                double acc = 0;
                for (int u = 0; u < dh; ++u) acc += q[i * d + a * dh + u] * k[j * d + a * dh + u];
                s[j] = acc / std::sqrt(double(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0;
            for (int j = 0; j < L; ++j)
                if (allowed[i * L + j]) z += std::exp(s[j] - mx);
            for (int j = 0; j < L; ++j) {
                if (!allowed[i * L + j]) continue;
                const double p = std::exp(s[j] - mx) / z;
                for (int u = 0; u < dh; ++u) ctx[i * d + a * dh + u] += p * v[j * d + a * dh + u];
            }
        }
    return matvec(w.wo.data(), ctx, L, d);
}

AttentionWeights<double> random_weights(int d, int heads, Rng& rng) {
    AttentionWeights<double> w;
    w.wq = Tensor<double>::randn({d, d}, rng, 0.3, true);
    w.wk = Tensor<double>::randn({d, d}, rng, 0.3, true);
    w.wv = Tensor<double>::randn({d, d}, rng, 0.3, true);
    w.wo = Tensor<double>::randn({d, d}, rng, 0.3, true);
    w.heads = heads;
    return w;
}

}  // namespace

TEST_CASE("matmul identity and orthogonal cases") {
    auto i2 = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
    auto a = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
    auto c = matmul(i2, a);
    CHECK(c.data() == std::vector<float>{1, 2, 3, 4});

    auto r = Tensor<float>::from_data({1, 2}, {1, 0});
    auto col = Tensor<float>::from_data({2, 1}, {0, 5});
    CHECK(matmul(r, col).item() == 0.0f);

    CHECK_THROWS_AS(matmul(a, r), std::invalid_argument);
}

TEST_CASE("matmul gradient vs central finite differences") {
    Rng rng(7);
    auto a = Tensor<double>::randn({3, 4}, rng, 1.0, true);
    auto b = Tensor<double>::randn({4, 2}, rng, 1.0, true);
    auto res = grad_check({a, b}, [&] { return sum_all(matmul(a, b)); });
    CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("softmax_rows symmetry, stability, gradient") {
    auto t = softmax_rows(Tensor<float>::from_data({2}, {0, 0}));
    CHECK(t.data()[0] == doctest::Approx(0.5));
    CHECK(t.data()[1] == doctest::Approx(0.5));

    auto big = softmax_rows(Tensor<float>::from_data({2}, {1000, 0}));
    CHECK(std::isfinite(big.data()[0]));
    CHECK(big.data()[0] == doctest::Approx(1.0));
    CHECK(big.data()[1] == doctest::Approx(0.0));

    Rng rng(3);
    auto x = Tensor<double>::randn({2, 5}, rng, 1.0, true);
    auto probe = Tensor<double>::randn({2, 5}, rng, 1.0, false);
    // weighted sum so the gradient is not the trivial all-ones direction
    auto res = grad_check({x}, [&] { return sum_all(mul(softmax_rows(x), probe)); });
    CHECK(res.max_rel_err <= 1e-6);

    // rows sum to one and stay non-negative on random inputs
    auto y = softmax_rows(Tensor<double>::randn({6, 9}, rng, 3.0));
    for (int r = 0; r < 6; ++r) {
        double s = 0;
        for (int j = 0; j < 9; ++j) {
            CHECK(y.data()[r * 9 + j] >= 0.0);
            s += y.data()[r * 9 + j];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("rmsnorm constant vector, zero gain, gradient") {
    auto x = Tensor<float>::from_data({3}, {2, 2, 2});
    auto g1 = Tensor<float>::from_data({3}, {1, 1, 1});
    auto y = rmsnorm(x, g1);
    for (float v : y.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-4));

    auto g0 = Tensor<float>::from_data({3}, {0, 0, 0});
    auto y0 = rmsnorm(x, g0);
    for (float v : y0.data()) CHECK(v == 0.0f);

    Rng rng(11);
    auto xd = Tensor<double>::randn({2, 6}, rng, 1.0, true);
    auto gd = Tensor<double>::randn({6}, rng, 1.0, true);
    auto probe = Tensor<double>::randn({2, 6}, rng, 1.0);
    auto res = grad_check({xd, gd}, [&] { return sum_all(mul(rmsnorm(xd, gd), probe)); });
    CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("attention_query_subset equals full attention") {
    const int L = 8, d = 8, heads = 2;
    Rng rng(21);
    auto w = random_weights(d, heads, rng);
    auto x = Tensor<double>::randn({L, d}, rng, 1.0);
    std::vector<char> causal(L * L, 0);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j <= i; ++j) causal[i * L + j] = 1;

    SUBCASE("full query set matches the dense oracle") {
        std::vector<int> all(L);
        for (int i = 0; i < L; ++i) all[i] = i;
        auto got = attention_query_subset(x, all, causal, w);
        auto want = full_attention_oracle(x.data(), L, d, w, causal);
        for (size_t i = 0; i < want.size(); ++i)
            CHECK(got.data()[i] == doctest::Approx(want[i]).epsilon(1e-9));
    }

    SUBCASE("subset rows equal sliced full attention") {
        std::vector<int> subset{2, 5};
        auto got = attention_query_subset(x, subset, causal, w);
        auto want = full_attention_oracle(x.data(), L, d, w, causal);
        for (size_t qi = 0; qi < subset.size(); ++qi)
            for (int j = 0; j < d; ++j) {
                const double diff = std::abs(got.data()[qi * d + j] - want[subset[qi] * d + j]);
                CHECK(diff <= 1e-6);
            }
    }

    SUBCASE("single query with one unmasked key returns that value row") {
        AttentionWeights<double> id;
        std::vector<double> eye(d * d, 0.0);
        for (int i = 0; i < d; ++i) eye[i * d + i] = 1.0;
        id.wq = Tensor<double>::from_data({d, d}, eye);
        id.wk = Tensor<double>::from_data({d, d}, eye);
        id.wv = Tensor<double>::from_data({d, d}, eye);
        id.wo = Tensor<double>::from_data({d, d}, eye);
        id.heads = 2;
        std::vector<char> one(L * L, 0);
        one[4 * L + 3] = 1;  // query 4 sees only key 3
        auto got = attention_query_subset(x, {4}, one, id);
        for (int j = 0; j < d; ++j) CHECK(got.data()[j] == doctest::Approx(x.data()[3 * d + j]));
    }

    SUBCASE("empty query set yields empty output") {
        auto got = attention_query_subset(x, {}, causal, w);
        CHECK(got.extent(0) == 0);
        CHECK(got.numel() == 0);
    }

    SUBCASE("head count must divide dim") {
        auto bad = random_weights(d, heads, rng);
        bad.heads = 3;
        std::vector<int> all(L);
        for (int i = 0; i < L; ++i) all[i] = i;
        CHECK_THROWS_AS(attention_query_subset(x, all, causal, bad), std::invalid_argument);
    }
}

TEST_CASE("attention gradient check") {
    const int L = 5, d = 4, heads = 2;
    Rng rng(33);
    auto w = random_weights(d, heads, rng);
    auto x = Tensor<double>::randn({L, d}, rng, 0.7, true);
    std::vector<char> causal(L * L, 0);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j <= i; ++j) causal[i * L + j] = 1;
    std::vector<int> subset{1, 3, 4};
    auto probe = Tensor<double>::randn({3, d}, rng, 1.0);
    auto res = grad_check({x, w.wq, w.wk, w.wv, w.wo},
                          [&] { return sum_all(mul(attention_query_subset(x, subset, causal, w), probe)); });
    CHECK(res.max_rel_err <= 1e-5);
}

TEST_CASE("backward populates leaves and rejects non-scalars") {
    auto x = Tensor<float>::from_data({4}, {1, 2, 3, 4}, true);
    auto y = Tensor<float>::from_data({4}, {5, 6, 7, 8}, true);
    x.zero_grad();
    y.zero_grad();
    auto loss = sum_all(x);
    backward(loss);
    CHECK(x.grad() == std::vector<float>{1, 1, 1, 1});
    CHECK(y.grad() == std::vector<float>{0, 0, 0, 0});  // loss independent of y

    CHECK_THROWS_AS(backward(add(x, y)), std::logic_error);

    // repeated backward accumulates until zero_grad
    backward(sum_all(x));
    CHECK(x.grad() == std::vector<float>{2, 2, 2, 2});
}

TEST_CASE("frozen leaves never accumulate gradient") {
    auto x = Tensor<float>::from_data({3}, {1, 2, 3}, true);
    x.set_frozen(true);
    auto y = Tensor<float>::from_data({3}, {1, 1, 1}, true);
    y.zero_grad();
    backward(sum_all(mul(x, y)));
    CHECK(x.grad().empty());
    CHECK(y.grad() == std::vector<float>{1, 2, 3});
}

TEST_CASE("elementwise and structural op gradients") {
    Rng rng(5);
    auto a = Tensor<double>::randn({3, 4}, rng, 1.0, true);
    auto b = Tensor<double>::randn({3, 4}, rng, 1.0, true);
    auto v = Tensor<double>::randn({4}, rng, 1.0, true);
    auto s = Tensor<double>::randn({1}, rng, 1.0, true);
    auto probe = Tensor<double>::randn({3, 4}, rng, 1.0);

    auto res = grad_check({a, b, v, s}, [&] {
        auto t = add(mul(a, b), add_rowvec(scale_by(silu(a), s), v));
        return sum_all(mul(t, probe));
    });
    CHECK(res.max_rel_err <= 1e-6);

    auto g = Tensor<double>::randn({2, 4}, rng, 1.0, true);
    auto res2 = grad_check({a, g}, [&] {
        auto seq = assemble_rows(5, {0, 2, 4}, a, {1, 3}, g);
        auto picked = gather_rows(seq, {4, 1, 0, 1});
        return sum_all(mul(picked, Tensor<double>::filled({4, 4}, 0.5)));
    });
    CHECK(res2.max_rel_err <= 1e-6);

    auto res3 = grad_check({a}, [&] { return mean_all(tanh_t(a)); });
    CHECK(res3.max_rel_err <= 1e-6);
}

TEST_CASE("cross entropy matches per-position formula and gradchecks") {
    Rng rng(17);
    auto logits = Tensor<double>::randn({3, 7}, rng, 1.5, true);
    std::vector<int> targets{2, 0, 6};

    auto ce = cross_entropy_rows(logits, targets);
    double want = 0;
    for (int r = 0; r < 3; ++r) {
        double mx = -1e300, z = 0;
        for (int c = 0; c < 7; ++c) mx = std::max(mx, logits.data()[r * 7 + c]);
        for (int c = 0; c < 7; ++c) z += std::exp(logits.data()[r * 7 + c] - mx);
        want += std::log(z) + mx - logits.data()[r * 7 + targets[r]];
    }
    want /= 3;
    CHECK(ce.item() == doctest::Approx(want).epsilon(1e-12));

    auto res = grad_check({logits}, [&] { return cross_entropy_rows(logits, targets); });
    CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("mse and cosine losses match direct formulas") {
    Rng rng(19);
    auto x = Tensor<double>::randn({2, 5}, rng, 1.0, true);
    std::vector<double> tgt(10);
    for (auto& t : tgt) t = rng.normal();

    double want = 0;
    for (int i = 0; i < 10; ++i) want += (x.data()[i] - tgt[i]) * (x.data()[i] - tgt[i]);
    want /= 10;
    CHECK(mse_const(x, tgt).item() == doctest::Approx(want).epsilon(1e-12));
    auto res = grad_check({x}, [&] { return mse_const(x, tgt); });
    CHECK(res.max_rel_err <= 1e-6);

    // cosine of identical and antipodal directions
    std::vector<double> same(x.data());
    auto cs = mean_cosine_rows(x, same);
    CHECK(cs.item() == doctest::Approx(1.0).epsilon(1e-9));
    std::vector<double> anti(10);
    for (int i = 0; i < 10; ++i) anti[i] = -x.data()[i];
    CHECK(mean_cosine_rows(x, anti).item() == doctest::Approx(-1.0).epsilon(1e-9));

    // against an independent dot/(|a||b|) computation
    std::vector<double> b(10);
    for (auto& t : b) t = rng.normal();
    double direct = 0;
    for (int r = 0; r < 2; ++r) {
        double dot = 0, na = 0, nb = 0;
        for (int j = 0; j < 5; ++j) {
            dot += x.data()[r * 5 + j] * b[r * 5 + j];
            na += x.data()[r * 5 + j] * x.data()[r * 5 + j];
            nb += b[r * 5 + j] * b[r * 5 + j];
        }
        direct += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    direct /= 2;
    CHECK(mean_cosine_rows(x, b).item() == doctest::Approx(direct).epsilon(1e-7));

    auto res2 = grad_check({x}, [&] { return mean_cosine_rows(x, b); });
    CHECK(res2.max_rel_err <= 1e-6);
}

TEST_CASE("adamw contract") {
    ParameterSet<float> ps;
    ps.add("w", Tensor<float>::from_data({2, 2}, {1, 2, 3, 4}));
    ps.add("frozen.w", Tensor<float>::from_data({2}, {5, 6}));
    ps.freeze("frozen.w");

    OptimizerState<float> opt;
    opt.peak_lr = 1e-4;  // defaults accepted as-is
    CHECK(opt.beta1 == 0.9);
    CHECK(opt.beta2 == 0.95);

    SUBCASE("zero gradient and zero decay leave parameters unchanged") {
        ps.zero_grad();
        auto before = ps.at("w").data();
        adamw_step(ps, opt);
        CHECK(ps.at("w").data() == before);
    }

    SUBCASE("frozen parameter ignores injected gradient") {
        ps.zero_grad();
        auto& fr = ps.at("frozen.w");
        // force a gradient buffer behind the freeze flag
        fr.node()->grad.assign(2, 123.0f);
        auto before = fr.data();
        ps.at("w").zero_grad();
        adamw_step(ps, opt);
        CHECK(fr.data() == before);
    }

    SUBCASE("missing gradient on trainable parameter is a hard error") {
        CHECK_THROWS_AS(adamw_step(ps, opt), std::logic_error);
    }

    SUBCASE("linear warmup schedule") {
        OptimizerState<float> o2;
        o2.peak_lr = 1e-3;
        o2.warmup_steps = 10;
        CHECK(o2.lr_at(5) == doctest::Approx(5e-4));
        CHECK(o2.lr_at(10) == doctest::Approx(1e-3));
        CHECK(o2.lr_at(50) == doctest::Approx(1e-3));
    }
}

TEST_CASE("frozen digest invariant across optimizer steps") {
    Rng rng(29);
    ParameterSet<float> ps;
    ps.add("a", Tensor<float>::randn({4, 4}, rng, 1.0f));
    ps.add("b", Tensor<float>::randn({4}, rng, 1.0f));
    ps.freeze("b");
    OptimizerState<float> opt;
    opt.peak_lr = 0.05;
    const uint64_t before = digest(ps, /*frozen_only=*/true);
    for (int s = 0; s < 17; ++s) {
        ps.zero_grad();
        ParamContext<float> ctx(ps);
        auto loss = sum_all(mul(ctx("a"), ctx("a")));
        backward(loss);
        ctx.merge();
        adamw_step(ps, opt);
    }
    CHECK(digest(ps, true) == before);
    CHECK(digest(ps, false) != before);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Rng rng(31);
    ParameterSet<float> ps;
    ps.add("layer.w", Tensor<float>::randn({3, 5}, rng, 1.0f));
    ps.add("layer.b", Tensor<float>::randn({5}, rng, 1.0f));
    ps.freeze("layer.b");
    OptimizerState<float> opt;
    opt.step = 42;
    opt.peak_lr = 3e-4;
    opt.warmup_steps = 7;
    opt.m["layer.w"] = std::vector<float>(15, 0.25f);
    opt.v["layer.w"] = std::vector<float>(15, 0.125f);

    const std::string path = "ckpt_roundtrip_test.bin";
    save_checkpoint(path, ps, &opt);
    ParameterSet<float> back;
    OptimizerState<float> opt2;
    load_checkpoint(path, back, &opt2);
    std::remove(path.c_str());

    CHECK(digest(back) == digest(ps));
    CHECK(back.is_frozen("layer.b"));
    CHECK_FALSE(back.is_frozen("layer.w"));
    CHECK(opt2.step == 42);
    CHECK(opt2.peak_lr == doctest::Approx(3e-4));
    CHECK(opt2.warmup_steps == 7);
    CHECK(opt2.m.at("layer.w") == opt.m.at("layer.w"));
    CHECK(opt2.v.at("layer.w") == opt.v.at("layer.w"));
}

TEST_CASE("deterministic replay of a seeded op sequence") {
    auto run = [] {
        Rng rng(63);
        auto a = Tensor<float>::randn({6, 6}, rng, 1.0f, true);
        auto b = Tensor<float>::randn({6, 6}, rng, 1.0f, true);
        a.zero_grad();
        b.zero_grad();
        auto loss = sum_all(mul(matmul(a, b), matmul(b, a)));
        backward(loss);
        uint64_t h = testutil::fnv1a_bytes(a.grad().data(), a.grad().size() * sizeof(float));
        h = testutil::fnv1a_bytes(b.grad().data(), b.grad().size() * sizeof(float), h);
        h = testutil::fnv1a_bytes(&loss.data()[0], sizeof(float), h);
        return h;
    };
    CHECK(run() == run());
}

TEST_CASE("param context merges per-sample gradients in name order") {
    ParameterSet<float> ps;
    ps.add("w", Tensor<float>::from_data({2}, {1.0f, 2.0f}));
    ps.zero_grad();
    for (int sample = 0; sample < 3; ++sample) {
        ParamContext<float> ctx(ps);
        auto loss = sum_all(ctx("w"));
        backward(loss);
        ctx.merge();
    }
    CHECK(ps.at("w").grad() == std::vector<float>{3, 3});
}
