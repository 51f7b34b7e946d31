#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "levelblend/optim.hpp"
#include "levelblend/tensor.hpp"
#include "helpers.hpp"

using namespace lvb;
using namespace lvb::num;
using testutil::random_tensor;
using testutil::random_tensor_away_from_zero;

TEST_CASE("elementwise op values") {
    Tensor x = Tensor::leaf({3}, {-1.0f, 0.0f, 2.0f});
    CHECK(relu(x).data() == std::vector<float>{0.0f, 0.0f, 2.0f});
    Tensor a = Tensor::leaf({2}, {1.0f, 2.0f});
    Tensor b = Tensor::leaf({2}, {3.0f, 5.0f});
    CHECK(add(a, b).data() == std::vector<float>{4.0f, 7.0f});
    CHECK(sub(a, b).data() == std::vector<float>{-2.0f, -3.0f});
    CHECK(mul(a, b).data() == std::vector<float>{3.0f, 10.0f});
    CHECK(scale(a, 2.0f).data() == std::vector<float>{2.0f, 4.0f});
    CHECK(exp(Tensor::scalar(0.0f)).item() == 1.0f);
    CHECK(log(Tensor::scalar(1.0f)).item() == 0.0f);
}

TEST_CASE("conv2d with a 1x1 identity kernel reproduces the input") {
    Rng rng(1);
    const int C = 3;
    Tensor x = random_tensor({2, C, 5, 5}, rng, false);
    std::vector<float> wdata(static_cast<std::size_t>(C) * C, 0.0f);
    for (int c = 0; c < C; ++c) wdata[static_cast<std::size_t>(c) * C + c] = 1.0f;
    Tensor w = Tensor::leaf({C, C, 1, 1}, wdata);
    Tensor y = conv2d(x, w, Tensor(), 1, 0);
    CHECK(y.data() == x.data());
}

TEST_CASE("bce with logit zero and target one-half is ln 2") {
    Tensor logits = Tensor::scalar(0.0f);
    double v = bce_with_logits_mean(logits, {0.5f}).item();
    CHECK(v == Catch::Approx(std::log(2.0)).margin(1e-6));
}

TEST_CASE("softmax rows sum to one and l2 rows have unit norm") {
    Rng rng(2);
    Tensor x = random_tensor({5, 7}, rng, false, -4.0f, 4.0f);
    Tensor s = softmax_rows(x);
    for (int i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 7; ++j) sum += s.data()[static_cast<std::size_t>(i) * 7 + j];
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
    Tensor n = l2_normalize_rows(x);
    for (int i = 0; i < 5; ++i) {
        double norm = 0.0;
        for (int j = 0; j < 7; ++j) {
            float v = n.data()[static_cast<std::size_t>(i) * 7 + j];
            norm += static_cast<double>(v) * v;
        }
        CHECK(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("backward basics") {
    SECTION("grad of x^2 at 3 is 6") {
        Tensor x = Tensor::leaf({1}, {3.0f}, true);
        backward(mul(x, x));
        CHECK(x.grad()[0] == Catch::Approx(6.0));
    }
    SECTION("grad of sum(A*B) wrt A is ones times B^T") {
        Tensor a = Tensor::leaf({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}, true);
        Tensor b = Tensor::leaf({2, 2}, {5.0f, 6.0f, 7.0f, 8.0f});
        backward(sum_all(matmul(a, b)));
        // dA[i][k] = sum_j B[k][j]
        CHECK(a.grad() == std::vector<float>{11.0f, 15.0f, 11.0f, 15.0f});
    }
    SECTION("fan-out accumulates: y = x + x") {
        Tensor x = Tensor::leaf({1}, {1.5f}, true);
        backward(add(x, x));
        CHECK(x.grad()[0] == Catch::Approx(2.0));
    }
    SECTION("non-scalar loss is rejected") {
        Tensor x = Tensor::leaf({2}, {1.0f, 2.0f}, true);
        CHECK_THROWS_AS(backward(relu(x)), Error);
    }
    SECTION("unreachable parameters keep an empty (zero) grad") {
        Tensor x = Tensor::leaf({1}, {1.0f}, true);
        Tensor y = Tensor::leaf({1}, {1.0f}, true);
        backward(mul(x, x));
        CHECK(y.grad().empty());
    }
}

TEST_CASE("quadratic form gradient is near-exact") {
    Rng rng(3);
    auto f = [](const std::vector<Tensor>& leaves) { return sum_all(mul(leaves[0], leaves[0])); };
    // central differences are exact for quadratics; a power-of-two step keeps
    // the perturbed float32 inputs exact too
    double err = grad_check(f, {random_tensor({4, 3}, rng)}, 0.25);
    CHECK(err < 1e-6);
}

TEST_CASE("finite-difference checks for every op") {
    Rng rng(42);
    auto check = [&](const char* name, const std::function<Tensor(const std::vector<Tensor>&)>& f,
                     std::vector<Tensor> leaves, double tol = 1e-3) {
        INFO(name);
        CHECK(grad_check(f, std::move(leaves)) < tol);
    };

    check("add", [](const auto& l) { return sum_all(mul(add(l[0], l[1]), l[2])); },
          {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3, 4}, rng, false)});
    check("sub", [](const auto& l) { return sum_all(mul(sub(l[0], l[1]), l[1])); },
          {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)});
    check("mul+scale+add_scalar",
          [](const auto& l) { return mean_all(add_scalar(scale(mul(l[0], l[1]), 1.7f), 0.3f)); },
          {random_tensor({6}, rng), random_tensor({6}, rng)});
    check("div_by_scalar", [](const auto& l) { return mean_all(mul(div_by_scalar(l[0], l[1]), l[0])); },
          {random_tensor({4, 4}, rng), Tensor::leaf({1}, {0.7f}, true)});
    check("relu", [](const auto& l) { return sum_all(mul(relu(l[0]), l[1])); },
          {random_tensor_away_from_zero({5, 5}, rng), random_tensor({5, 5}, rng, false)});
    check("exp", [](const auto& l) { return mean_all(num::exp(l[0])); }, {random_tensor({7}, rng)});
    check("log", [](const auto& l) { return mean_all(num::log(l[0])); },
          {random_tensor({7}, rng, true, 0.2f, 2.0f)});
    check("matmul", [](const auto& l) { return mean_all(mul(matmul(l[0], l[1]), l[2])); },
          {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng), random_tensor({3, 5}, rng, false)});
    check("matmul_nt", [](const auto& l) { return mean_all(mul(matmul_nt(l[0], l[1]), l[2])); },
          {random_tensor({3, 4}, rng), random_tensor({6, 4}, rng), random_tensor({3, 6}, rng, false)});
    check("transpose2d", [](const auto& l) { return mean_all(mul(transpose2d(l[0]), l[1])); },
          {random_tensor({3, 5}, rng), random_tensor({5, 3}, rng, false)});
    check("linear", [](const auto& l) { return mean_all(mul(linear(l[0], l[1], l[2]), l[3])); },
          {random_tensor({4, 6}, rng), random_tensor({3, 6}, rng), random_tensor({3}, rng),
           random_tensor({4, 3}, rng, false)});
    check("conv2d s1",
          [](const auto& l) { return mean_all(mul(conv2d(l[0], l[1], l[2], 1, 1), l[3])); },
          {random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng),
           random_tensor({2, 4, 6, 6}, rng, false)});
    check("conv2d s2",
          [](const auto& l) { return mean_all(mul(conv2d(l[0], l[1], l[2], 2, 1), l[3])); },
          {random_tensor({2, 3, 8, 8}, rng), random_tensor({4, 3, 4, 4}, rng), random_tensor({4}, rng),
           random_tensor({2, 4, 4, 4}, rng, false)});
    check("transposed_conv2d s2",
          [](const auto& l) { return mean_all(mul(transposed_conv2d(l[0], l[1], l[2], 2, 1), l[3])); },
          {random_tensor({2, 3, 4, 4}, rng), random_tensor({3, 4, 4, 4}, rng), random_tensor({4}, rng),
           random_tensor({2, 4, 8, 8}, rng, false)});
    check("concat_channels",
          [](const auto& l) { return mean_all(mul(concat_channels(l[0], l[1]), l[2])); },
          {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 2, 4, 4}, rng),
           random_tensor({2, 5, 4, 4}, rng, false)});
    check("global_avg_pool",
          [](const auto& l) { return mean_all(mul(global_avg_pool(l[0]), l[1])); },
          {random_tensor({3, 4, 5, 5}, rng), random_tensor({3, 4}, rng, false)});
    check("softmax_rows", [](const auto& l) { return mean_all(mul(softmax_rows(l[0]), l[1])); },
          {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng, false)});
    check("l2_normalize_rows",
          [](const auto& l) { return mean_all(mul(l2_normalize_rows(l[0]), l[1])); },
          {random_tensor_away_from_zero({4, 6}, rng), random_tensor({4, 6}, rng, false)});
    check("row_logsumexp", [](const auto& l) { return mean_all(row_logsumexp(l[0])); },
          {random_tensor({5, 7}, rng)});
    {
        Rng mask_rng(7);
        std::vector<std::uint8_t> mask(5 * 7, 0);
        for (int i = 0; i < 5; ++i) {
            mask[static_cast<std::size_t>(i) * 7 + i] = 1; // keep rows non-empty
            for (int j = 0; j < 7; ++j)
                if (mask_rng.index(2)) mask[static_cast<std::size_t>(i) * 7 + j] = 1;
        }
        check("row_logsumexp_masked",
              [mask](const auto& l) { return mean_all(row_logsumexp_masked(l[0], mask)); },
              {random_tensor({5, 7}, rng)});
    }
    check("take_diag", [](const auto& l) { return mean_all(mul(take_diag(l[0]), l[1])); },
          {random_tensor({5, 5}, rng), random_tensor({5}, rng, false)});
    {
        Rng t_rng(9);
        std::vector<float> targets(12);
        for (auto& t : targets) t = static_cast<float>(t_rng.next_double());
        check("bce_with_logits_mean",
              [targets](const auto& l) { return bce_with_logits_mean(l[0], targets); },
              {random_tensor({3, 4}, rng, true, -2.0f, 2.0f)});
        check("mse_against_const",
              [targets](const auto& l) { return mse_against_const(l[0], targets); },
              {random_tensor({3, 4}, rng)});
    }
    check("sum_all", [](const auto& l) { return sum_all(l[0]); }, {random_tensor({9}, rng)});
    check("mean_all", [](const auto& l) { return mean_all(l[0]); }, {random_tensor({9}, rng)});
}

TEST_CASE("masked logsumexp rejects an empty row") {
    Tensor x = Tensor::leaf({2, 2}, {0.1f, 0.2f, 0.3f, 0.4f});
    std::vector<std::uint8_t> mask = {1, 0, 0, 0};
    CHECK_THROWS_AS(row_logsumexp_masked(x, mask), Error);
}

TEST_CASE("non-finite forward values trip the finiteness guard") {
    Tensor x = Tensor::leaf({1}, {200.0f});
    CHECK_THROWS_AS(num::exp(mul(x, x)), Error);
}

TEST_CASE("adam") {
    SECTION("zero gradient leaves parameters unchanged") {
        Tensor p = Tensor::leaf({3}, {1.0f, -2.0f, 0.5f}, true);
        Adam opt(0.1);
        opt.add_param(p);
        opt.step(); // no backward ran; grads are empty
        CHECK(p.data() == std::vector<float>{1.0f, -2.0f, 0.5f});
    }
    SECTION("one step on f(x)=x moves by about -lr") {
        // independent evaluation of the bias-corrected update with g = 1
        const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double m = (1.0 - b1) * 1.0, v = (1.0 - b2) * 1.0;
        double expected = 0.0 - lr * (m / (1.0 - b1)) / (std::sqrt(v / (1.0 - b2)) + eps);

        Tensor x = Tensor::leaf({1}, {0.0f}, true);
        Adam opt(lr);
        opt.add_param(x);
        backward(sum_all(x));
        opt.step();
        CHECK(x.data()[0] == Catch::Approx(expected).margin(1e-6));
        CHECK(x.data()[0] == Catch::Approx(-0.1).margin(1e-6));
    }
    SECTION("identical runs produce bitwise-identical parameters") {
        auto run = [] {
            Rng rng(11);
            Tensor w = testutil::random_tensor({4, 4}, rng);
            Adam opt(1e-2);
            opt.add_param(w);
            for (int i = 0; i < 20; ++i) {
                Tensor x = testutil::random_tensor({4, 4}, rng, false);
                backward(mean_all(mul(sub(matmul(w, x), x), sub(matmul(w, x), x))));
                opt.step();
            }
            return w.data();
        };
        CHECK(run() == run());
    }
    SECTION("non-finite gradients are rejected") {
        Tensor p = Tensor::leaf({1}, {1.0f}, true);
        Adam opt(0.1);
        opt.add_param(p);
        p.node()->grad = {std::numeric_limits<float>::quiet_NaN()};
        CHECK_THROWS_AS(opt.step(), Error);
    }
}

TEST_CASE("global average pool distributes gradient uniformly") {
    Tensor x = Tensor::leaf({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}, true);
    backward(sum_all(global_avg_pool(x)));
    for (float g : x.grad()) CHECK(g == Catch::Approx(0.25));
}

TEST_CASE("identical graphs give identical values") {
    auto build = [] {
        Rng rng(5);
        Tensor x = testutil::random_tensor({2, 3, 8, 8}, rng, false);
        Tensor w = testutil::random_tensor({4, 3, 3, 3}, rng, false);
        return conv2d(x, w, Tensor(), 2, 1).data();
    };
    CHECK(build() == build());
}
