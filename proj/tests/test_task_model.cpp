#include <doctest.h>

#include <cmath>

#include "metabal/rng.hpp"
#include "metabal/task_model.hpp"

using namespace metabal;
using namespace metabal::ad;
using namespace metabal::model;

namespace {

Tensor random_matrix(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (auto& x : v) x = scale * (2.0 * rng.uniform() - 1.0);
    return make_tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("init_params is deterministic, zero-bias, alpha 0.01") {
    Rng a(42), b(42);
    ModelParams p1 = init_params({2, 8, 5}, a);
    ModelParams p2 = init_params({2, 8, 5}, b);
    auto t1 = param_tensors(p1);
    auto t2 = param_tensors(p2);
    REQUIRE(t1.size() == t2.size());
    for (size_t i = 0; i < t1.size(); ++i) {
        CHECK(t1[i]->data() == t2[i]->data());
    }
    for (const DenseLayer& l : p1.layers) {
        for (double x : l.b.data()) CHECK(x == 0.0);
    }
    for (const Tensor& al : p1.alpha) {
        for (double x : al.data()) CHECK(x == 0.01);
    }
    CHECK_THROWS_AS(init_params({}, a), std::invalid_argument);
    CHECK_THROWS_AS(init_params({3}, a), std::invalid_argument);
}

TEST_CASE("forward: zero parameters give uniform softmax") {
    Graph g;
    std::vector<DenseLayer> layers{
        {g.constant_filled({2, 4}, 0.0), g.constant_filled({4}, 0.0)},
        {g.constant_filled({4, 5}, 0.0), g.constant_filled({5}, 0.0)},
    };
    Tensor logits = forward(g, layers, g.constant({3, 2}, {1, 2, 3, 4, 5, 6}));
    CHECK(logits.shape == Shape{3, 5});
    for (int64_t i = 0; i < logits.numel(); ++i) CHECK(logits.at(i) == 0.0);
    Tensor probs = g.softmax(logits, 1);
    for (int64_t i = 0; i < probs.numel(); ++i) CHECK(probs.at(i) == doctest::Approx(0.2));
}

TEST_CASE("forward: one-hot input picks a weight column") {
    Graph g;
    std::vector<DenseLayer> layers{
        {g.constant({3, 2}, {1, 2, 3, 4, 5, 6}), g.constant_filled({2}, 0.0)},
    };
    Tensor logits = forward(g, layers, g.constant({1, 3}, {0, 1, 0}));
    CHECK(logits.at(0) == 3.0);
    CHECK(logits.at(1) == 4.0);

    CHECK_THROWS_AS(forward(g, layers, g.constant({1, 2}, {1, 0})), ShapeError);
}

TEST_CASE("forward is permutation-equivariant over the batch") {
    Rng rng(9);
    Graph g;
    ModelParams p = bind_params(g, init_params({3, 6, 4}, rng));
    Tensor x = g.leaf(random_matrix({5, 3}, rng));
    Tensor out = forward(g, p.layers, x);
    Tensor xp = g.gather_rows(x, {4, 2, 0, 1, 3});
    Tensor outp = forward(g, p.layers, xp);
    std::vector<int64_t> perm{4, 2, 0, 1, 3};
    for (int64_t r = 0; r < 5; ++r) {
        for (int64_t j = 0; j < 4; ++j) {
            CHECK(outp.at(r * 4 + j) == out.at(perm[static_cast<size_t>(r)] * 4 + j));
        }
    }
}

TEST_CASE("class_loss examples") {
    Rng rng(1);
    SUBCASE("confident correct logits drive the loss to zero") {
        Graph g;
        std::vector<DenseLayer> layers{
            {g.constant_filled({2, 3}, 0.0), g.constant({3}, {40.0, 0.0, 0.0})},
        };
        Tensor loss = class_loss(g, layers, g.constant({2, 2}, {0.1, 0.2, -0.3, 0.4}), 0, 3);
        CHECK(loss.scalar() == doctest::Approx(0.0).epsilon(1e-6));
    }
    SUBCASE("uniform logits cost ln C") {
        Graph g;
        std::vector<DenseLayer> layers{
            {g.constant_filled({2, 5}, 0.0), g.constant_filled({5}, 0.0)},
        };
        Tensor loss = class_loss(g, layers, g.constant({3, 2}, {1, 2, 3, 4, 5, 6}), 2, 5);
        CHECK(loss.scalar() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
    SUBCASE("two instances average their losses") {
        Graph g;
        ModelParams p = bind_params(g, init_params({2, 4, 3}, rng));
        Tensor x1 = g.constant({1, 2}, {0.4, -0.9});
        Tensor x2 = g.constant({1, 2}, {-1.2, 0.3});
        double a = class_loss(g, p.layers, x1, 1, 3).scalar();
        double b = class_loss(g, p.layers, x2, 1, 3).scalar();
        Tensor both = class_loss(g, p.layers, g.concat({x1, x2}, 0), 1, 3);
        CHECK(both.scalar() == doctest::Approx(0.5 * (a + b)).epsilon(1e-12));
    }
    SUBCASE("empty class raises") {
        Graph g;
        std::vector<DenseLayer> layers{
            {g.constant_filled({2, 3}, 0.0), g.constant_filled({3}, 0.0)},
        };
        CHECK_THROWS_AS(class_loss(g, layers, g.constant({0, 2}, {}), 0, 3),
                        std::invalid_argument);
    }
}

TEST_CASE("class_loss is invariant to instance order") {
    Rng rng(15);
    Graph g;
    ModelParams p = bind_params(g, init_params({2, 6, 4}, rng));
    Tensor x = g.leaf(random_matrix({6, 2}, rng));
    double base = class_loss(g, p.layers, x, 2, 4).scalar();
    double perm = class_loss(g, p.layers, g.gather_rows(x, {5, 0, 3, 1, 4, 2}), 2, 4).scalar();
    CHECK(perm == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("balanced per-class mean equals pooled mean NLL") {
    Rng rng(21);
    Graph g;
    const int C = 4, n = 3;
    ModelParams p = bind_params(g, init_params({2, 8, C}, rng));
    std::vector<Tensor> classes;
    for (int c = 0; c < C; ++c) classes.push_back(g.leaf(random_matrix({n, 2}, rng)));

    double mean_of_means = 0.0;
    for (int c = 0; c < C; ++c) {
        mean_of_means += class_loss(g, p.layers, classes[static_cast<size_t>(c)], c, C).scalar();
    }
    mean_of_means /= C;

    Tensor pooled = g.concat(classes, 0);
    std::vector<int> labels;
    for (int c = 0; c < C; ++c) labels.insert(labels.end(), n, c);
    double pooled_nll = nll_loss(g, forward(g, p.layers, pooled), labels).scalar();
    CHECK(std::abs(mean_of_means - pooled_nll) < 1e-12);
}

TEST_CASE("modulate: identity, doubling, zeroing") {
    Rng rng(33);
    Graph g;
    ModelParams p = bind_params(g, init_params({2, 3, 2}, rng));
    int64_t zn = p.total_modulated();
    REQUIRE(zn == 5);

    auto layers0 = modulate(g, p, g.constant_filled({zn}, 0.0));
    for (size_t l = 0; l < layers0.size(); ++l) {
        CHECK(layers0[l].w.data() == p.layers[l].w.data());
        CHECK(layers0[l].b.data() == p.layers[l].b.data());
    }

    std::vector<double> shift(static_cast<size_t>(zn), 0.0);
    shift[0] = 1.0;  // first unit of first layer
    auto layers2 = modulate(g, p, g.constant({zn}, shift));
    for (int64_t i = 0; i < 2; ++i) {
        CHECK(layers2[0].w.at(i * 3 + 0) == doctest::Approx(2.0 * p.layers[0].w.at(i * 3 + 0)));
        CHECK(layers2[0].w.at(i * 3 + 1) == p.layers[0].w.at(i * 3 + 1));
    }
    CHECK(layers2[0].b.at(0) == doctest::Approx(p.layers[0].b.at(0) + 1.0));

    shift[0] = -1.0;
    auto layersz = modulate(g, p, g.constant({zn}, shift));
    for (int64_t i = 0; i < 2; ++i) CHECK(layersz[0].w.at(i * 3 + 0) == 0.0);

    CHECK_THROWS_AS(modulate(g, p, g.constant_filled({zn + 1}, 0.0)), ShapeError);
}

TEST_CASE("modulate is linear in the shift for fixed parameters") {
    Rng rng(44);
    Graph g;
    ModelParams p = bind_params(g, init_params({3, 4, 2}, rng));
    int64_t zn = p.total_modulated();
    Tensor s1 = g.leaf(random_matrix({zn}, rng, 0.5));
    Tensor s2 = g.leaf(random_matrix({zn}, rng, 0.5));
    auto a = modulate(g, p, s1);
    auto b = modulate(g, p, s2);
    auto ab = modulate(g, p, g.add(s1, s2));
    // Superposition relative to the unmodulated parameters.
    for (size_t l = 0; l < a.size(); ++l) {
        for (int64_t i = 0; i < a[l].w.numel(); ++i) {
            double lhs = ab[l].w.at(i) - p.layers[l].w.at(i);
            double rhs = (a[l].w.at(i) - p.layers[l].w.at(i)) +
                         (b[l].w.at(i) - p.layers[l].w.at(i));
            CHECK(std::abs(lhs - rhs) < 1e-10);
        }
        for (int64_t i = 0; i < a[l].b.numel(); ++i) {
            double lhs = ab[l].b.at(i) - p.layers[l].b.at(i);
            double rhs = (a[l].b.at(i) - p.layers[l].b.at(i)) +
                         (b[l].b.at(i) - p.layers[l].b.at(i));
            CHECK(std::abs(lhs - rhs) < 1e-10);
        }
    }
}
