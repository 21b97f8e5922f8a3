#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "meat/error.hpp"
#include "meat/grad_check.hpp"
#include "meat/ops.hpp"
#include "meat/rng.hpp"
#include "meat/tensor.hpp"
#include "oracles.hpp"

using namespace meat;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0,
                     double hi = 2.0, bool rg = false) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v), rg);
}

}  // namespace

TEST_CASE("matmul basics") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor col = Tensor::from({2, 1}, {3, 4});
    Tensor r = matmul(eye, col);
    CHECK(r.shape() == std::vector<std::size_t>{2, 1});
    CHECK(r.at(0) == 3.0);
    CHECK(r.at(1) == 4.0);

    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11.0));

    CHECK_THROWS_AS(matmul(a, Tensor::from({3, 1}, {1, 2, 3})), ShapeError);
    try {
        matmul(a, Tensor::from({3, 1}, {1, 2, 3}));
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[1,2]") != std::string::npos);
        CHECK(msg.find("[3,1]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient") {
    Tensor a = Tensor::from({1, 2}, {1, 2}, true);
    Tensor b = Tensor::from({2, 1}, {3, 4});
    backward(sum(matmul(a, b)));
    CHECK(a.grad()[0] == doctest::Approx(3.0));
    CHECK(a.grad()[1] == doctest::Approx(4.0));

    auto f = [&](const Tensor& x) { return sum(matmul(x, b)); };
    CHECK(grad_check(f, Tensor::from({1, 2}, {1, 2}), 1e-6) < 1e-6);
}

TEST_CASE("softmax rows") {
    Tensor sym = softmax_rows(Tensor::from({2}, {0, 0}));
    CHECK(sym.at(0) == doctest::Approx(0.5));
    CHECK(sym.at(1) == doctest::Approx(0.5));

    Tensor r = softmax_rows(Tensor::from({2}, {std::log(2.0), 0.0}));
    CHECK(r.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(r.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    Tensor big = softmax_rows(Tensor::from({2}, {1000.0, 0.0}));
    CHECK(std::abs(big.at(0) - 1.0) < 1e-12);
    CHECK(std::abs(big.at(1)) < 1e-12);

    CHECK_THROWS_AS(softmax_rows(Tensor::from({2}, {std::nan(""), 0.0})), NumericError);
    CHECK_THROWS_AS(
        softmax_rows(Tensor::from({2}, {std::numeric_limits<double>::infinity(), 0.0})),
        NumericError);
}

TEST_CASE("masked softmax values") {
    Tensor w = Tensor::from({3}, {1, 1, 0});
    Tensor r = masked_softmax_rows(Tensor::from({3}, {0, 0, 0}), w);
    CHECK(r.at(0) == doctest::Approx(0.5));
    CHECK(r.at(1) == doctest::Approx(0.5));
    CHECK(r.at(2) == 0.0);

    // Masked logit ignored even when it is the row maximum.
    Tensor r2 = masked_softmax_rows(Tensor::from({3}, {std::log(2.0), 0.0, 5.0}), w);
    CHECK(r2.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(r2.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(r2.at(2) == 0.0);

    CHECK_THROWS_AS(masked_softmax_rows(Tensor::from({2}, {1, 2}), Tensor::zeros({2})),
                    NumericError);
    CHECK_THROWS_AS(masked_softmax_rows(Tensor::from({2}, {1, 2}), Tensor::from({2}, {1.0, 1.5})),
                    NumericError);
}

TEST_CASE("masked softmax vs delete-and-renormalize oracle") {
    Rng rng(101);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.index(7);
        std::vector<double> row(n), w(n);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) {
            row[i] = rng.uniform(-5.0, 5.0);
            w[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
            any = any || w[i] > 0.0;
        }
        if (!any) w[rng.index(n)] = 1.0;
        Tensor got = masked_softmax_rows(Tensor::from({n}, row), Tensor::from({n}, w));
        std::vector<double> want = oracle::delete_and_renormalize(row, w);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(std::abs(got.at(i) - want[i]) < 1e-12);
        }
    }
}

TEST_CASE("masked softmax with all-ones weights equals softmax") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor a = random_tensor({4, 6}, rng, -8.0, 8.0);
        Tensor plain = softmax_rows(a);
        Tensor masked = masked_softmax_rows(a, Tensor::ones({6}));
        for (std::size_t i = 0; i < a.numel(); ++i) {
            CHECK(std::abs(plain.at(i) - masked.at(i)) <= 1e-15);
        }
    }
}

TEST_CASE("softmax outputs are probability rows") {
    Rng rng(5150);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 2 + rng.index(7);
        Tensor a = random_tensor({3, n}, rng, -10.0, 10.0);
        std::vector<double> w(n);
        bool any = false;
        for (double& x : w) {
            x = rng.uniform() < 0.4 ? 0.0 : rng.uniform_open();
            any = any || x > 0.0;
        }
        if (!any) w[0] = 1.0;
        Tensor y = masked_softmax_rows(a, Tensor::from({n}, w));
        for (std::size_t r = 0; r < 3; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double v = y.at(r, j);
                CHECK(v >= 0.0);
                if (w[j] == 0.0) CHECK(v == 0.0);
                total += v;
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("masked softmax gradient flows to logits and weights") {
    Rng rng(303);
    for (int seed = 0; seed < 20; ++seed) {
        Tensor a = random_tensor({2, 5}, rng, -3.0, 3.0);
        std::vector<double> w(5);
        for (double& x : w) x = rng.uniform(0.05, 0.95);
        Tensor wt = Tensor::from({5}, w);

        auto fa = [&](const Tensor& x) { return sum(mul(masked_softmax_rows(x, wt), x)); };
        CHECK(grad_check(fa, a, 1e-5) < 1e-4);

        auto fw = [&](const Tensor& ws) {
            return sum(mul(masked_softmax_rows(a, ws), a));
        };
        CHECK(grad_check(fw, wt, 1e-5) < 1e-4);
    }
}

TEST_CASE("gelu") {
    CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(std::abs(gelu(Tensor::scalar(10.0)).item() - 10.0) < 1e-9);

    Tensor x = Tensor::scalar(0.5, true);
    backward(gelu(x));
    const double analytic = x.grad()[0];
    const double h = 1e-6;
    const double fd = (gelu(Tensor::scalar(0.5 + h)).item() -
                       gelu(Tensor::scalar(0.5 - h)).item()) /
                      (2 * h);
    CHECK(std::abs(analytic - fd) < 1e-6);
}

TEST_CASE("layer_norm") {
    Tensor g = Tensor::ones({3});
    Tensor b = Tensor::zeros({3});
    Tensor flat = layer_norm(Tensor::from({3}, {1, 1, 1}), g, b);
    for (std::size_t i = 0; i < 3; ++i) CHECK(flat.at(i) == doctest::Approx(0.0));

    Tensor two = layer_norm(Tensor::from({2}, {1, 3}), Tensor::ones({2}), Tensor::zeros({2}));
    CHECK(std::abs(two.at(0) - (-1.0)) < 1e-6);
    CHECK(std::abs(two.at(1) - 1.0) < 1e-6);

    Rng rng(99);
    for (int seed = 0; seed < 20; ++seed) {
        Tensor x = random_tensor({3, 4}, rng);
        Tensor gain = random_tensor({4}, rng, 0.5, 1.5);
        Tensor bias = random_tensor({4}, rng, -0.5, 0.5);
        auto f = [&](const Tensor& t) { return sum(mul(layer_norm(t, gain, bias), t)); };
        CHECK(grad_check(f, x, 1e-5) < 1e-4);
        auto fg = [&](const Tensor& t) { return sum(layer_norm(x, t, bias)); };
        CHECK(grad_check(fg, gain, 1e-5) < 1e-4);
    }
}

TEST_CASE("cross_entropy") {
    CHECK(cross_entropy(Tensor::from({1, 2}, {0, 0}), {0}).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(cross_entropy(Tensor::from({1, 2}, {10, -10}), {0}).item() < 1e-8);
    CHECK_THROWS_AS(cross_entropy(Tensor::from({1, 2}, {0, 0}), {2}), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(Tensor::from({1, 2}, {0, 0}), {-1}), std::out_of_range);

    // Gradient equals softmax(logits) - onehot(label), scaled by 1/batch.
    Tensor logits = Tensor::from({1, 3}, {0.2, -1.0, 0.7}, true);
    backward(cross_entropy(logits, {2}));
    std::vector<double> p = oracle::plain_softmax({0.2, -1.0, 0.7});
    CHECK(logits.grad()[0] == doctest::Approx(p[0]).epsilon(1e-12));
    CHECK(logits.grad()[1] == doctest::Approx(p[1]).epsilon(1e-12));
    CHECK(logits.grad()[2] == doctest::Approx(p[2] - 1.0).epsilon(1e-12));

    Rng rng(42);
    Tensor x = random_tensor({3, 4}, rng);
    auto f = [&](const Tensor& t) { return cross_entropy(t, {1, 3, 0}); };
    CHECK(grad_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from({3}, {5, -2, 7}, true);
    backward(sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    Tensor y = Tensor::from({2}, {1, 2}, true);
    backward(sum(mul(y, y)));
    CHECK(y.grad()[0] == doctest::Approx(2.0));
    CHECK(y.grad()[1] == doctest::Approx(4.0));

    CHECK_THROWS_AS(backward(Tensor::from({2}, {1, 2}, true)), ContractError);
}

TEST_CASE("backward accumulates additively and is deterministic") {
    Tensor x = Tensor::from({2}, {1.5, -0.5}, true);
    auto build = [&]() { return sum(mul(x, x)); };

    Tensor loss = build();
    backward(loss);
    std::vector<double> once = x.grad();
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(2.0 * once[i]));
    }

    x.zero_grad();
    backward(loss);
    CHECK(x.grad() == once);
}

TEST_CASE("composed graphs match finite differences over many seeds") {
    for (std::uint64_t seed = 1; seed <= 22; ++seed) {
        Rng rng(seed);
        Tensor w1 = random_tensor({4, 5}, rng, -1.0, 1.0);
        Tensor b1 = random_tensor({5}, rng, -0.3, 0.3);
        Tensor w2 = random_tensor({5, 3}, rng, -1.0, 1.0);
        Tensor gain = random_tensor({5}, rng, 0.7, 1.3);
        Tensor bias = random_tensor({5}, rng, -0.2, 0.2);
        auto f = [&](const Tensor& x) {
            Tensor h = gelu(add_rowvec(matmul(x, w1), b1));
            h = layer_norm(h, gain, bias);
            Tensor logits = matmul(h, w2);
            return cross_entropy(logits, {0, 2, 1});
        };
        Tensor x = random_tensor({3, 4}, rng);
        CHECK(grad_check(f, x, 1e-5) < 1e-4);
    }
}

TEST_CASE("structural ops gradients") {
    Rng rng(808);
    Tensor x = random_tensor({4, 6}, rng);

    auto f_slice = [](const Tensor& t) { return sum(slice_cols(t, 1, 4)); };
    CHECK(grad_check(f_slice, x, 1e-5) < 1e-8);

    auto f_cat = [](const Tensor& t) {
        return sum(mul(concat_cols({slice_cols(t, 0, 3), slice_cols(t, 3, 6)}), t));
    };
    CHECK(grad_check(f_cat, x, 1e-5) < 1e-4);

    Tensor v = random_tensor({6}, rng);
    auto f_rowvec = [&](const Tensor& t) { return sum(mul(add_rowvec(x, t), x)); };
    CHECK(grad_check(f_rowvec, v, 1e-5) < 1e-4);

    auto f_pre = [](const Tensor& t) {
        Tensor w = prepend_one(t);
        return sum(mul(w, w));
    };
    CHECK(grad_check(f_pre, random_tensor({5}, rng, 0.1, 0.9), 1e-5) < 1e-4);

    Tensor blockmat = random_tensor({6, 3}, rng);  // batch=2, S=3
    auto f_blockadd = [&](const Tensor& t) { return sum(mul(add_per_block(blockmat, t, 2), blockmat)); };
    CHECK(grad_check(f_blockadd, random_tensor({3, 3}, rng), 1e-5) < 1e-4);

    auto f_row0 = [&](const Tensor& t) { return sum(mul(take_block_row0(t, 2), take_block_row0(t, 2))); };
    CHECK(grad_check(f_row0, blockmat, 1e-5) < 1e-4);

    Tensor cls = random_tensor({3}, rng);
    auto f_prep = [&](const Tensor& t) {
        Tensor y = prepend_row_per_block(blockmat, t, 2);
        return sum(mul(y, y));
    };
    CHECK(grad_check(f_prep, cls, 1e-5) < 1e-4);
}

TEST_CASE("attention block ops match per-example matmuls") {
    Rng rng(606);
    const std::size_t batch = 2, s = 3, dk = 4;
    Tensor q = random_tensor({batch * s, dk}, rng);
    Tensor k = random_tensor({batch * s, dk}, rng);
    Tensor scores = attn_scores(q, k, batch, 0.5);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) {
                double dot = 0.0;
                for (std::size_t t = 0; t < dk; ++t) {
                    dot += q.at(b * s + i, t) * k.at(b * s + j, t);
                }
                CHECK(scores.at(b * s + i, j) == doctest::Approx(0.5 * dot).epsilon(1e-12));
            }
        }
    }

    auto fq = [&](const Tensor& t) { return sum(mul(attn_scores(t, k, batch, 0.5), scores)); };
    CHECK(grad_check(fq, q, 1e-5) < 1e-4);
    auto fk = [&](const Tensor& t) { return sum(mul(attn_scores(q, t, batch, 0.5), scores)); };
    CHECK(grad_check(fk, k, 1e-5) < 1e-4);

    Tensor p = random_tensor({batch * s, s}, rng, 0.0, 1.0);
    Tensor v = random_tensor({batch * s, dk}, rng);
    Tensor ctx = attn_apply(p, v, batch);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t t = 0; t < dk; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j < s; ++j) {
                    acc += p.at(b * s + i, j) * v.at(b * s + j, t);
                }
                CHECK(ctx.at(b * s + i, t) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
    auto fp = [&](const Tensor& t) { return sum(mul(attn_apply(t, v, batch), ctx)); };
    CHECK(grad_check(fp, p, 1e-5) < 1e-4);
    auto fv = [&](const Tensor& t) { return sum(mul(attn_apply(p, t, batch), ctx)); };
    CHECK(grad_check(fv, v, 1e-5) < 1e-4);
}

TEST_CASE("grad_check contract") {
    auto fsum = [](const Tensor& x) { return sum(x); };
    Rng rng(17);
    CHECK(grad_check(fsum, random_tensor({7}, rng), 1e-5) < 1e-10);

    Tensor w = random_tensor({4, 4}, rng);
    auto fcm = [&](const Tensor& x) { return cross_entropy(matmul(x, w), {0, 1, 2, 3}); };
    CHECK(grad_check(fcm, random_tensor({4, 4}, rng), 1e-5) < 1e-4);

    Tensor a = random_tensor({3, 4}, rng);
    auto fms = [&](const Tensor& ws) { return sum(mul(masked_softmax_rows(a, ws), a)); };
    CHECK(grad_check(fms, random_tensor({4}, rng, 0.1, 0.9), 1e-5) < 1e-4);

    int calls = 0;
    auto nondet = [&](const Tensor& x) {
        ++calls;
        return scale(sum(x), static_cast<double>(calls));
    };
    CHECK_THROWS_AS(grad_check(nondet, random_tensor({3}, rng), 1e-5), ContractError);
}

TEST_CASE("gumbel_relax values and gradients") {
    Tensor logits = Tensor::from({1, 2}, {0.0, 0.0});
    Tensor m = gumbel_relax(logits, {0.0, 0.0}, 1.0);
    CHECK(m.item() == doctest::Approx(0.5));

    Tensor wide = gumbel_relax(Tensor::from({1, 2}, {10.0, -10.0}), {0.0, 0.0}, 1.0);
    CHECK(wide.item() > 1.0 - 1e-8);
    CHECK(wide.item() < 1.0);

    CHECK_THROWS_AS(gumbel_relax(logits, {0.0, 0.0}, 0.0), ConfigError);
    CHECK_THROWS_AS(gumbel_relax(logits, {0.0, 0.0}, -1.0), ConfigError);

    Rng rng(2024);
    for (int seed = 0; seed < 20; ++seed) {
        std::vector<double> noise = {rng.gumbel(), rng.gumbel(), rng.gumbel(), rng.gumbel()};
        const double tau = rng.uniform(0.5, 2.0);
        auto f = [&](const Tensor& t) {
            Tensor mm = gumbel_relax(t, noise, tau);
            return sum(mul(mm, mm));
        };
        CHECK(grad_check(f, random_tensor({2, 2}, rng, -3.0, 3.0), 1e-5) < 1e-4);
    }
}

TEST_CASE("scalar plumbing ops") {
    Tensor a = Tensor::from({3}, {1, 2, 3}, true);
    CHECK(mean(a).item() == doctest::Approx(2.0));
    CHECK(sum(a).item() == doctest::Approx(6.0));

    Tensor s = Tensor::scalar(2.5, true);
    Tensor scaled = scale_by(a, s);
    CHECK(scaled.at(2) == doctest::Approx(7.5));
    backward(sum(scaled));
    CHECK(s.grad()[0] == doctest::Approx(6.0));

    Rng rng(11);
    Tensor r = random_tensor({2, 3}, rng);
    auto f = [&](const Tensor& x) {
        Tensor d = sub(mean(x), Tensor::scalar(0.9));
        return add(mul(d, d), scale(sum(mul(x, r)), 0.25));
    };
    CHECK(grad_check(f, random_tensor({2, 3}, rng), 1e-5) < 1e-4);

    CHECK(reshape(r, {3, 2}).shape() == std::vector<std::size_t>{3, 2});
    CHECK_THROWS_AS(reshape(r, {4, 2}), ShapeError);
}
