#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dce/nn/optim.hpp"
#include "dce/nn/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace dce;
using namespace dce::nn;

namespace {

std::mt19937_64 g_rng(2024);

Tensor random_tensor(const Shape& shape, bool rg = true, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = u(g_rng);
    return Tensor::from_data(shape, std::move(v), rg);
}

// Central-difference check of d loss / d leaf for every element of every leaf.
// builder must rebuild the graph from the leaves' current values.
void check_gradients(const std::function<Tensor()>& builder, std::vector<Tensor> leaves,
                     double tol = 1e-4) {
    for (Tensor& leaf : leaves) leaf.zero_grad();
    Tensor loss = builder();
    loss.backward();
    for (Tensor& leaf : leaves) {
        std::vector<double> analytic = leaf.grad();
        for (size_t i = 0; i < leaf.numel(); ++i) {
            const double h = 1e-4;
            const double orig = leaf.data()[i];
            leaf.data()[i] = orig + h;
            const double up = builder().data()[0];
            leaf.data()[i] = orig - h;
            const double dn = builder().data()[0];
            leaf.data()[i] = orig;
            const double fd = (up - dn) / (2 * h);
            const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
            if (err > tol) {
                CAPTURE(i);
                CAPTURE(analytic[i]);
                CAPTURE(fd);
            }
            CHECK(err <= tol);
        }
    }
}

// random projection so every output element affects the scalar loss
Tensor project(const Tensor& out, const Tensor& weights) { return mean(mul(out, weights)); }

}  // namespace

TEST_CASE("identity-style forwards") {
    Tensor x = random_tensor({2, 3, 5, 5}, false);

    SUBCASE("1x1 conv with identity channel matrix") {
        std::vector<double> w(9, 0.0);
        for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
        Tensor weight = Tensor::from_data({3, 3, 1, 1}, w);
        Tensor bias = Tensor::zeros({3});
        Tensor y = conv2d(x, weight, bias, 1, 0, 1);
        CHECK(y.shape() == x.shape());
        for (size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
    }

    SUBCASE("scale by 1 and add 0") {
        Tensor y = add_scalar(scale(x, 1.0), 0.0);
        for (size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
    }
}

TEST_CASE("dilated 3x3 conv taps an impulse at offsets {-2,0,2}^2") {
    Tensor x = Tensor::zeros({1, 1, 7, 7});
    x.data()[3 * 7 + 3] = 1.0;  // center impulse
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(x, w, b, 1, 2, 2);
    REQUIRE(y.shape() == Shape{1, 1, 7, 7});
    for (int iy = 0; iy < 7; ++iy)
        for (int ix = 0; ix < 7; ++ix) {
            const bool tap = (std::abs(iy - 3) == 2 || iy == 3) && (std::abs(ix - 3) == 2 || ix == 3);
            CHECK(y.data()[iy * 7 + ix] == (tap ? 1.0 : 0.0));
        }
}

TEST_CASE("hand-computed gradients") {
    SUBCASE("f = mean(x^2) has grad 2x/N") {
        Tensor x = random_tensor({4, 5});
        Tensor loss = mean(square(x));
        loss.backward();
        for (size_t i = 0; i < x.numel(); ++i)
            CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i] / 20.0));
    }

    SUBCASE("fully connected with sum loss gives outer-product pattern") {
        Tensor x = random_tensor({1, 3}, false);
        Tensor w = Tensor::zeros({2, 3}, true);
        Tensor b = Tensor::zeros({2}, true);
        Tensor y = fully_connected(x, w, b);
        Tensor loss = scale(mean(y), 2.0);  // == sum(y) for 2 outputs... keep exact: mean*numel
        loss = scale(mean(y), static_cast<double>(y.numel()));
        loss.backward();
        for (int k = 0; k < 2; ++k)
            for (int j = 0; j < 3; ++j)
                CHECK(w.grad()[k * 3 + j] == doctest::Approx(x.data()[j]));
        CHECK(b.grad()[0] == doctest::Approx(1.0));
    }

    SUBCASE("gradient accumulates when a tensor is used twice") {
        Tensor x = random_tensor({3});
        Tensor loss = mean(add(x, x));
        loss.backward();
        for (size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 / 3.0));
    }
}

TEST_CASE("finite-difference checks for every registered op") {
    constexpr int kInstances = 20;
    for (int inst = 0; inst < kInstances; ++inst) {
        SUBCASE(("instance " + std::to_string(inst)).c_str()) {
            {
                // add / sub / mul / scale / add_scalar chain
                Tensor a = random_tensor({2, 7});
                Tensor b = random_tensor({2, 7});
                Tensor p = random_tensor({2, 7}, false);
                check_gradients(
                    [&] {
                        return project(add_scalar(scale(add(mul(a, b), sub(a, b)), 0.7), 0.3), p);
                    },
                    {a, b});
            }
            {
                // relu / leaky_relu / abs / square (inputs nudged off the kinks)
                Tensor a = random_tensor({3, 6});
                for (double& v : a.data())
                    if (std::abs(v) < 5e-3) v += 0.01;
                Tensor p = random_tensor({3, 6}, false);
                check_gradients([&] { return project(relu(a), p); }, {a});
                check_gradients([&] { return project(leaky_relu(a, 0.2), p); }, {a});
                check_gradients([&] { return project(abs(a), p); }, {a});
                check_gradients([&] { return project(square(a), p); }, {a});
            }
            {
                // conv2d stride 1 with padding and dilation
                Tensor x = random_tensor({2, 3, 6, 6});
                Tensor w = random_tensor({2, 3, 3, 3});
                Tensor b = random_tensor({2});
                Tensor p = random_tensor({2, 2, 6, 6}, false);
                check_gradients([&] { return project(conv2d(x, w, b, 1, 2, 2), p); }, {x, w, b});
            }
            {
                // strided 4x4 conv (discriminator shape)
                Tensor x = random_tensor({1, 2, 8, 8});
                Tensor w = random_tensor({2, 2, 4, 4});
                Tensor b = random_tensor({2});
                Tensor p = random_tensor({1, 2, 4, 4}, false);
                check_gradients([&] { return project(conv2d(x, w, b, 2, 1, 1), p); }, {x, w, b});
            }
            {
                // 1x1 conv
                Tensor x = random_tensor({2, 4, 5, 5});
                Tensor w = random_tensor({3, 4, 1, 1});
                Tensor b = random_tensor({3});
                Tensor p = random_tensor({2, 3, 5, 5}, false);
                check_gradients([&] { return project(conv2d(x, w, b, 1, 0, 1), p); }, {x, w, b});
            }
            {
                // instance norm
                Tensor x = random_tensor({2, 3, 5, 5});
                Tensor g = random_tensor({3});
                Tensor b = random_tensor({3});
                Tensor p = random_tensor({2, 3, 5, 5}, false);
                check_gradients([&] { return project(instance_norm(x, g, b), p); }, {x, g, b},
                                2e-4);
            }
            {
                // global average pooling + fully connected
                Tensor x = random_tensor({2, 4, 5, 5});
                Tensor w = random_tensor({3, 4});
                Tensor b = random_tensor({3});
                Tensor p = random_tensor({2, 3}, false);
                check_gradients(
                    [&] { return project(fully_connected(global_avg_pool(x), w, b), p); },
                    {x, w, b});
            }
            {
                // concat along channels
                Tensor a = random_tensor({2, 2, 4, 4});
                Tensor b = random_tensor({2, 3, 4, 4});
                Tensor p = random_tensor({2, 5, 4, 4}, false);
                check_gradients([&] { return project(concat_channels(a, b), p); }, {a, b});
            }
            {
                // mean
                Tensor a = random_tensor({4, 4});
                check_gradients([&] { return mean(a); }, {a});
            }
        }
    }
}

TEST_CASE("instance norm output is standardized before the affine terms") {
    Tensor x = random_tensor({3, 4, 8, 8}, false, 5.0);
    Tensor gamma = Tensor::full({4}, 1.0);
    Tensor beta = Tensor::zeros({4});
    Tensor y = instance_norm(x, gamma, beta);
    for (int b = 0; b < 3; ++b)
        for (int c = 0; c < 4; ++c) {
            double m = 0, v = 0;
            const size_t base = (static_cast<size_t>(b) * 4 + c) * 64;
            for (int i = 0; i < 64; ++i) m += y.data()[base + i];
            m /= 64;
            for (int i = 0; i < 64; ++i) {
                const double d = y.data()[base + i] - m;
                v += d * d;
            }
            v /= 64;
            CHECK(std::abs(m) <= 1e-6);
            CHECK(std::abs(v - 1.0) <= 1e-4);
        }
}

TEST_CASE("error paths") {
    Tensor x = random_tensor({2, 3});
    Tensor y = random_tensor({3, 2});
    CHECK_THROWS_WITH_AS(add(x, y), doctest::Contains("add"), ShapeMismatch);

    Tensor v = random_tensor({4});
    CHECK_THROWS_AS(v.backward(), NonScalarOutput);

    Tensor loss = mean(square(x));
    loss.backward();
    CHECK_THROWS_AS(loss.backward(), TapeMissing);  // tape consumed

    Tensor no_tape = random_tensor({2, 2}, false);
    CHECK_THROWS_AS(mean(no_tape).backward(), TapeMissing);
}

TEST_CASE("forward is deterministic for fixed inputs") {
    Tensor x = random_tensor({2, 3, 9, 9}, false);
    Tensor w = random_tensor({4, 3, 3, 3}, false);
    Tensor b = random_tensor({4}, false);
    Tensor y1 = conv2d(x, w, b, 1, 1, 1);
    Tensor y2 = conv2d(x, w, b, 1, 1, 1);
    CHECK(y1.data() == y2.data());
}

TEST_CASE("adam: first step is -lr*sign(g) up to epsilon effects") {
    Tensor p = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    AdamConfig cfg;
    cfg.lr = 1e-2;
    Adam opt({p}, cfg);
    Tensor target = Tensor::from_data({3}, {0.0, 4.0, 3.0}, false);
    Tensor loss = mean(square(sub(p, target)));
    loss.backward();
    opt.step();
    // bias correction makes mhat = g, vhat = g^2 at step 1
    CHECK(p.data()[0] == doctest::Approx(1.0 - 1e-2).epsilon(1e-4));
    CHECK(p.data()[1] == doctest::Approx(2.0 + 1e-2).epsilon(1e-4));
    CHECK(p.data()[2] == doctest::Approx(3.0).epsilon(1e-12));  // zero gradient
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam: two steps with constant gradient match the hand recurrence") {
    const double lr = 1e-5, b1 = 0.5, b2 = 0.999, eps = 1e-8, g = 0.3;
    double m = 0, v = 0, x = 1.0;
    for (int t = 1; t <= 2; ++t) {
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    }

    Tensor p = Tensor::from_data({1}, {1.0}, true);
    AdamConfig cfg;
    cfg.lr = lr;
    Adam opt({p}, cfg);
    for (int t = 0; t < 2; ++t) {
        opt.zero_grad();
        Tensor loss = scale(mean(p), g);  // d loss / d p = g
        loss.backward();
        opt.step();
    }
    CHECK(p.data()[0] == doctest::Approx(x).epsilon(1e-14));
}

TEST_CASE("lr schedule endpoints and midpoint") {
    CHECK(lr_linear_decay(1e-5, 0, 200, 100) == 1e-5);
    CHECK(lr_linear_decay(1e-5, 99, 200, 100) == 1e-5);
    CHECK(lr_linear_decay(1e-5, 200, 200, 100) == 0.0);
    CHECK(lr_linear_decay(1e-5, 150, 200, 100) == doctest::Approx(0.5e-5));
}
