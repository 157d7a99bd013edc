#include "circuitlab/numcore/gradcheck.hpp"
#include "circuitlab/numcore/tape.hpp"
#include "fixtures/primitives.hpp"

#include <doctest.h>

#include <random>

using namespace clab;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> d(0.0, scale);
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
    return m;
}

// Contract a tensor with fixed random weights so every output coordinate
// contributes to the checked scalar.
Tensor weighted_sum(const Tensor& y, const Matrix& w) { return sum_all(multiply(y, y.tape()->constant(w))); }

}  // namespace

TEST_CASE("trivial primitive identities")
{
    Tape t;
    std::mt19937_64 rng(1);
    const Matrix a = random_matrix(3, 3, rng);
    const Tensor out = matmul(t.constant(Matrix::Identity(3, 3)), t.constant(a));
    CHECK(out.value() == a);

    const Tensor sm = softmax_rows(t.constant(Matrix::Zero(1, 2)));
    CHECK(sm.value()(0, 0) == 0.5);
    CHECK(sm.value()(0, 1) == 0.5);

    const Tensor z = t.constant(random_matrix(4, 6, rng));
    const Tensor kl = kl_divergence_from_logits(z, z, std::vector<Index>{0, 1, 2, 3});
    CHECK(std::abs(kl.value()(0, 0)) <= 1e-15);

    const Tensor rows = softmax_rows(t.constant(random_matrix(5, 7, rng, 3.0)));
    for (Index r = 0; r < 5; ++r) CHECK(std::abs(rows.value().row(r).sum() - 1.0) <= 1e-12);
}

TEST_CASE("backward on small analytic functions")
{
    {
        Tape t;
        const Tensor x = t.variable(Matrix::Constant(1, 1, 3.0));
        const Tensor y = multiply(x, x);
        CHECK(backward(t, y).grad(x)(0, 0) == 6.0);
    }
    {
        Tape t;
        const Tensor x = t.variable(Matrix::Constant(1, 1, 3.0));
        const Tensor c = t.scalar(2.0);
        const Tensor y = add(c, scale(c, 4.0));
        const Gradients g = backward(t, y);
        CHECK(g.grad(x)(0, 0) == 0.0);
    }
    {
        // Fan-out accumulates.
        Tape t;
        const Tensor x = t.variable(Matrix::Constant(1, 1, 2.0));
        const Tensor y = add(multiply(x, x), scale(x, 5.0));
        CHECK(backward(t, y).grad(x)(0, 0) == 9.0);
    }
}

TEST_CASE("backward errors")
{
    Tape t;
    const Tensor x = t.variable(Matrix::Ones(2, 2));
    CHECK_THROWS_AS(backward(t, x), ShapeError);
    const Tensor y = sum_all(x);
    (void)backward(t, y);
    CHECK_THROWS(backward(t, y));

    Tape other;
    const Tensor z = other.variable(Matrix::Ones(1, 1));
    Tape t2;
    CHECK_THROWS(backward(t2, z));
}

TEST_CASE("shape and numeric errors")
{
    Tape t;
    CHECK_THROWS_AS(matmul(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(2, 3))), ShapeError);
    CHECK_THROWS_AS(add(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(3, 2))), ShapeError);
    CHECK_THROWS_AS(scale(t.constant(Matrix::Constant(1, 1, 1e300)), 1e300), NumericError);
    CHECK_THROWS_AS(forward_primitive("conv2d", std::vector<Tensor>{t.scalar(1.0)}), std::invalid_argument);
    const std::vector<Tensor> ops{t.constant(Matrix::Identity(2, 2)), t.constant(Matrix::Ones(2, 2))};
    CHECK(forward_primitive("matmul", ops).value() == Matrix::Ones(2, 2));
}

TEST_CASE("linearity of backward")
{
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix x0 = random_matrix(3, 4, rng);
        const Matrix w1 = random_matrix(3, 4, rng);
        const Matrix w2 = random_matrix(4, 2, rng);
        const auto f = [&](const Tensor& x) { return weighted_sum(gelu(x), w1); };
        const auto g = [&](const Tensor& x) { return sum_all(matmul(softmax_rows(x), x.tape()->constant(w2))); };
        Matrix gf, gg, gsum;
        {
            Tape t;
            const Tensor x = t.variable(x0);
            gf = backward(t, f(x)).grad(x);
        }
        {
            Tape t;
            const Tensor x = t.variable(x0);
            gg = backward(t, g(x)).grad(x);
        }
        {
            Tape t;
            const Tensor x = t.variable(x0);
            gsum = backward(t, add(f(x), g(x))).grad(x);
        }
        CHECK((gsum - (gf + gg)).cwiseAbs().maxCoeff() <= 1e-15);
    }
}

TEST_CASE("grad_check on quadratic form, gelu grid and layer_norm")
{
    std::mt19937_64 rng(3);
    const Matrix a = random_matrix(4, 4, rng);
    const auto quad = [&](const Tensor& x) {
        return matmul(matmul(transpose(x), x.tape()->constant(a)), x);
    };
    CHECK(grad_check(quad, random_matrix(4, 1, rng)).max_relative_error <= 1e-6);

    Matrix grid(1, 21);
    for (int i = 0; i < 21; ++i) grid(0, i) = -3.0 + 0.3 * i;
    CHECK(grid(0, 10) == doctest::Approx(0.0));
    grid(0, 10) = 0.0;
    const auto g = [](const Tensor& x) { return sum_all(gelu(x)); };
    CHECK(grad_check(g, grid).max_relative_error <= 1e-6);

    const Matrix w = random_matrix(1, 8, rng);
    const auto ln = [&](const Tensor& x) { return weighted_sum(layer_norm(x), w); };
    CHECK(grad_check(ln, random_matrix(1, 8, rng)).max_relative_error <= 1e-5);
}

TEST_CASE("grad_check rejects bad steps and non-finite values")
{
    const auto f = [](const Tensor& x) { return sum_all(x); };
    CHECK_THROWS(grad_check(f, Matrix::Ones(1, 1), 0.0));
}

TEST_CASE("every primitive passes grad_check over 100 seeds")
{
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
        for (const auto& [name, err] : fixtures::primitive_grad_errors(seed)) {
            worst = std::max(worst, err);
            if (err > 1e-4) FAIL_CHECK(name << " seed " << seed << " error " << err);
        }
    MESSAGE("worst relative error " << worst);
}
