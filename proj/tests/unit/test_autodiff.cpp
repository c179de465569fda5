// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "t4dg/checkpoint.hpp"
#include "t4dg/rng.hpp"
#include "t4dg/tensor.hpp"

using namespace t4dg;
using ad::Tensor;

namespace {

// Reference matmul, triple loop in double, independent of the library kernel.
std::vector<float> naive_matmul(const std::vector<float>& a, const std::vector<float>& b,
                                int m, int k, int n) {
    std::vector<float> c(static_cast<size_t>(m) * n, 0.0f);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p)
                acc += static_cast<double>(a[i * k + p]) * static_cast<double>(b[p * n + j]);
            c[static_cast<size_t>(i * n + j)] = static_cast<float>(acc);
        }
    return c;
}

Tensor rand_tensor(std::vector<int> shape, Rng& rng, bool rg = false) {
    return Tensor::randn(std::move(shape), rng, 1.0f, rg);
}

} // namespace

TEST_SUITE("autodiff") {

TEST_CASE("matmul matches naive triple loop") {
    Rng rng(11);
    for (auto [m, k, n] : {std::tuple{3, 4, 5}, std::tuple{1, 7, 2}, std::tuple{8, 8, 8}}) {
        Tensor a = rand_tensor({m, k}, rng);
        Tensor b = rand_tensor({k, n}, rng);
        Tensor c = ad::matmul(a, b);
        auto ref = naive_matmul(a.data(), b.data(), m, k, n);
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(c.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    }
}

TEST_CASE("matmul shape errors") {
    Rng rng(1);
    Tensor a = rand_tensor({2, 3}, rng);
    Tensor b = rand_tensor({4, 2}, rng);
    CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
    Tensor c = rand_tensor({2, 3, 4}, rng);
    CHECK_THROWS_AS(ad::matmul(c, a), ShapeError);
}

TEST_CASE("softmax rows sum to one and mask works") {
    Rng rng(5);
    Tensor x = rand_tensor({4, 7}, rng);
    Tensor p = ad::softmax_lastdim(x);
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) s += p.data()[static_cast<size_t>(r * 7 + j)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor mask = Tensor::zeros({4, 7});
    mask.data()[2] = ninf; // row 0, col 2 removed
    Tensor pm = ad::softmax_lastdim(x, &mask);
    CHECK(pm.data()[2] == 0.0f);
    double s0 = 0.0;
    for (int j = 0; j < 7; ++j) s0 += pm.data()[static_cast<size_t>(j)];
    CHECK(s0 == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("softmax with a fully masked row throws") {
    Rng rng(6);
    Tensor x = rand_tensor({2, 3}, rng);
    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor mask = Tensor::zeros({2, 3});
    for (int j = 0; j < 3; ++j) mask.data()[static_cast<size_t>(3 + j)] = ninf;
    CHECK_THROWS(ad::softmax_lastdim(x, &mask));
}

TEST_CASE("backward on non-scalar throws") {
    Rng rng(2);
    Tensor x = rand_tensor({3, 3}, rng, true);
    Tensor y = ad::mul(x, x);
    CHECK_THROWS_AS(ad::backward(y), ShapeError);
    ad::clear_tape();
}

TEST_CASE("repeated backward accumulates gradients") {
    Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
    Tensor loss = ad::sum_all(ad::mul(x, x));
    ad::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
    CHECK(x.grad()[1] == doctest::Approx(4.0f));
    ad::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0f));
    CHECK(x.grad()[1] == doctest::Approx(8.0f));
    ad::clear_tape();
}

namespace {

// Scalar functional with O(1) per-coordinate gradients: a fixed random
// weighting keeps finite differences well conditioned in float32.
Tensor weighted(const Tensor& y, const Tensor& r) { return ad::sum_all(ad::mul(y, r)); }

// Random signs with magnitudes in [0.5, 1.5], bounded away from zero.
Tensor probe_weights(std::vector<int> shape, Rng& rng) {
    Tensor r = Tensor::zeros(std::move(shape));
    for (auto& v : r.data()) {
        const float mag = rng.uniform(0.5f, 1.5f);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return r;
}

// Finite differences in float32 cannot resolve coordinates whose true
// gradient is incidentally tiny, so redraw the probe until every coordinate
// that depends on the input at all has a measurable gradient. Structural
// zeros are kept and still verified exactly by the check itself.
template <class Builder>
Tensor conditioned_probe(const Builder& builder, const Tensor& x, Rng& rng) {
    Tensor best;
    for (int attempt = 0; attempt < 40; ++attempt) {
        Tensor probe_shape_ref = builder(x);
        Tensor r = probe_weights(probe_shape_ref.shape(), rng);
        ad::clear_tape();
        Tensor xi = Tensor::from_data(x.shape(), x.data(), true);
        ad::backward(weighted(builder(xi), r));
        float min_nonzero = 1e30f;
        for (float g : xi.grad())
            if (g != 0.0f) min_nonzero = std::min(min_nonzero, std::fabs(g));
        ad::clear_tape();
        best = r;
        if (min_nonzero >= 0.05f || min_nonzero == 1e30f) return r;
    }
    return best;
}

} // namespace

TEST_CASE("grad_check across a composite op chain, 10 seeds") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed + 100);
        // Sample away from the flat tail of gelu; the saturated region is
        // exercised by the per-primitive tests, and here it would starve the
        // direct gradient path below what float32 differences resolve.
        Tensor x = Tensor::zeros({4, 6});
        for (auto& v : x.data()) v = rng.uniform(-1.0f, 2.5f);
        // Near-identity mixing keeps a strong direct gradient path to every
        // input coordinate, which float32 finite differences can resolve; the
        // column offset keeps rows entering layer norm well spread.
        Tensor w = Tensor::randn({6, 6}, rng, 0.15f, true);
        for (int i = 0; i < 6; ++i) w.data()[static_cast<size_t>(i * 6 + i)] += 1.0f;
        Tensor coloff = Tensor::from_data({6}, {0.0f, 0.8f, 1.6f, 2.4f, 3.2f, 4.0f});
        auto chain = [&](const Tensor& v) {
            Tensor h = ad::add(ad::gelu(ad::matmul(v, w)), coloff);
            return ad::layer_norm_lastdim(h);
        };
        Tensor r = conditioned_probe(chain, x, rng);
        auto f = [&](const Tensor& v) { return weighted(chain(v), r); };
        // Composite chains get the same bound as the fused-op checks; the
        // tighter 1e-3 bound applies per primitive above.
        CHECK(ad::grad_check(f, x) <= 2e-3);
        ad::clear_tape();
    }
}

TEST_CASE("grad_check covers every primitive on 10 seeds") {
    auto check1 = [](const char* name, auto builder) {
        for (uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed * 31 + 7);
            Tensor x = rand_tensor({3, 4}, rng);
            // Keep values away from non-differentiable points.
            for (auto& v : x.data()) v = 0.25f + 0.5f * std::fabs(v);
            Tensor r = conditioned_probe(builder, x, rng);
            const double err = ad::grad_check(
                [&](const Tensor& v) { return weighted(builder(v), r); }, x);
            INFO(doctest::String(name), " seed ", seed);
            CHECK(err <= 1e-3);
            ad::clear_tape();
        }
    };
    check1("exp", [](const Tensor& v) { return ad::exp(v); });
    check1("log", [](const Tensor& v) { return ad::log(v); });
    check1("sqrt", [](const Tensor& v) { return ad::sqrt(v); });
    check1("tanh", [](const Tensor& v) { return ad::tanh(v); });
    check1("sigmoid", [](const Tensor& v) { return ad::sigmoid(v); });
    check1("softplus", [](const Tensor& v) { return ad::softplus(v); });
    check1("gelu", [](const Tensor& v) { return ad::gelu(v); });
    check1("square", [](const Tensor& v) { return ad::square(v); });
    check1("reciprocal", [](const Tensor& v) { return ad::reciprocal(v); });
    check1("neg", [](const Tensor& v) { return ad::neg(v); });
    check1("softmax", [](const Tensor& v) { return ad::softmax_lastdim(v); });
    // Spread each row before normalizing; see the composite-chain test.
    Tensor ln_off = Tensor::from_data({4}, {0.0f, 1.2f, 2.4f, 3.6f});
    check1("layer_norm", [&](const Tensor& v) {
        return ad::layer_norm_lastdim(ad::add(v, ln_off));
    });
    check1("l2n", [](const Tensor& v) { return ad::l2_normalize_lastdim(v); });
    check1("transpose", [](const Tensor& v) { return ad::transpose2d(v); });
    check1("reshape", [](const Tensor& v) { return ad::reshape(v, {4, 3}); });
    check1("slice", [](const Tensor& v) { return ad::slice(v, 1, 1, 3); });
    check1("gather", [](const Tensor& v) { return ad::gather_rows(v, {2, 0, 2}); });
    check1("abs", [](const Tensor& v) { return ad::abs(v); });
    check1("scale", [](const Tensor& v) { return ad::scale(v, -1.7f); });
    check1("add_scalar", [](const Tensor& v) { return ad::add_scalar(v, 0.3f); });

    Rng rng(42);
    Tensor b = rand_tensor({4}, rng, true);
    Tensor s = rand_tensor({3}, rng, true);
    Tensor w = rand_tensor({4, 2}, rng, true);
    check1("add_b", [&](const Tensor& v) { return ad::add(v, b); });
    check1("sub_b", [&](const Tensor& v) { return ad::sub(v, b); });
    check1("mul_b", [&](const Tensor& v) { return ad::mul(v, b); });
    check1("matmul", [&](const Tensor& v) { return ad::matmul(v, w); });
    check1("scale_rows", [&](const Tensor& v) { return ad::scale_rows(v, s); });
    check1("concat", [&](const Tensor& v) {
        return ad::concat({v, ad::scale(v, 2.0f)}, 0);
    });
    check1("sum_all", [](const Tensor& v) { return ad::sum_all(v); });
    check1("mean_all", [](const Tensor& v) { return ad::mean_all(v); });
}

TEST_CASE("grad_check clamp away from its kinks") {
    // Inputs sit a wide margin from both clamp boundaries so the
    // finite-difference stencil never straddles a kink.
    Tensor x = Tensor::from_data({6}, {0.2f, 0.5f, 0.8f, 1.05f, 1.3f, 1.6f});
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed + 400);
        Tensor r = probe_weights({6}, rng);
        const double err = ad::grad_check(
            [&](const Tensor& v) { return weighted(ad::clamp(v, 0.35f, 1.15f), r); }, x);
        CHECK(err <= 1e-3);
        ad::clear_tape();
    }
}

TEST_CASE("grad_check worst case is relative and flags NaN") {
    Tensor x = Tensor::from_data({2}, {0.5f, 0.25f});
    auto f_nan = [](const Tensor& v) { return ad::mean_all(ad::log(ad::add_scalar(v, -0.5f))); };
    CHECK(std::isinf(ad::grad_check(f_nan, x)));
    ad::clear_tape();
}

TEST_CASE("determinism: same seed gives bit-identical results") {
    auto run = [] {
        Rng rng(77);
        Tensor x = Tensor::randn({8, 8}, rng, 1.0f, true);
        Tensor w = Tensor::randn({8, 8}, rng, 0.5f, true);
        Tensor y = ad::mean_all(ad::gelu(ad::matmul(ad::layer_norm_lastdim(x), w)));
        ad::backward(y);
        std::vector<float> out = w.node->grad;
        out.push_back(y.item());
        ad::clear_tape();
        return out;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("no-grad evaluation records nothing") {
    Rng rng(3);
    Tensor x = rand_tensor({2, 2}, rng, true);
    const size_t before = ad::tape_size();
    {
        ad::NoGradGuard ng;
        Tensor y = ad::mul(x, x);
        CHECK(!y.requires_grad());
    }
    CHECK(ad::tape_size() == before);
    ad::clear_tape();
}

TEST_CASE("parameter store enforces unique names") {
    ParamStore store;
    Rng rng(9);
    store.create_randn("w", {2, 2}, rng, 1.0f);
    CHECK_THROWS_AS(store.create_zeros("w", {1}), ConfigError);
}

TEST_CASE("container round-trip is bit exact") {
    ParamStore store;
    Rng rng(123);
    Tensor w = store.create_randn("layer.weight", {7, 3}, rng, 0.37f);
    Tensor b = store.create_randn("layer.bias", {3}, rng, 1.1f);
    // Include awkward values.
    w.data()[0] = 0.0f;
    w.data()[1] = -0.0f;
    w.data()[2] = 1e-38f;
    w.data()[3] = 3.4e38f;

    const std::string path = (std::filesystem::temp_directory_path() / "t4dg_ckpt_test.t4dg").string();
    store.save(path);

    ParamStore reload;
    reload.create_zeros("layer.weight", {7, 3});
    reload.create_zeros("layer.bias", {3});
    reload.load(path);
    const auto& w2 = reload.get("layer.weight").data();
    for (size_t i = 0; i < w2.size(); ++i)
        CHECK(std::memcmp(&w2[i], &w.data()[i], sizeof(float)) == 0);
    const auto& b2 = reload.get("layer.bias").data();
    for (size_t i = 0; i < b2.size(); ++i) CHECK(b2[i] == b.data()[i]);

    ParamStore wrong;
    wrong.create_zeros("layer.weight", {7, 4});
    CHECK_THROWS_AS(wrong.load(path), IoError);
    ParamStore missing;
    missing.create_zeros("layer.weight", {7, 3});
    missing.create_zeros("other", {2});
    CHECK_THROWS_AS(missing.load(path), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("adam reduces a quadratic and respects zero lr") {
    ParamStore store;
    Tensor x = store.create("x", {2}, {4.0f, -3.0f});
    Adam opt(store, 0.05f);
    auto loss_of = [&] {
        Tensor l = ad::sum_all(ad::square(x));
        return l;
    };
    float first = loss_of().item();
    ad::clear_tape();
    for (int i = 0; i < 200; ++i) {
        Tensor l = loss_of();
        ad::backward(l);
        opt.step();
        ad::clear_tape();
    }
    CHECK(loss_of().item() < 0.05f * first);
    ad::clear_tape();

    // lr == 0 leaves parameters unchanged.
    std::vector<float> before = x.data();
    opt.set_lr(0.0f);
    Tensor l = loss_of();
    ad::backward(l);
    opt.step();
    ad::clear_tape();
    CHECK(x.data() == before);
}

} // TEST_SUITE
