#pragma once

// Plain Eigen kernels shared by the taped primitives and by code that only
// needs values (patching sweeps, evaluation). Templated on the scalar so the
// same routines serve double-precision training and any test instantiation.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>

namespace clab {

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixR<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr double kMaskedScore = -1e30;

template <typename Derived>
MatrixR<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x)
{
    using Scalar = typename Derived::Scalar;
    MatrixR<Scalar> y = x;
    for (Index r = 0; r < y.rows(); ++r) {
        const Scalar top = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - top).exp();
        y.row(r) /= y.row(r).sum();
    }
    return y;
}

template <typename Derived>
MatrixR<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& x)
{
    using Scalar = typename Derived::Scalar;
    MatrixR<Scalar> y = x;
    for (Index r = 0; r < y.rows(); ++r) {
        const Scalar top = y.row(r).maxCoeff();
        const Scalar lse = top + std::log((y.row(r).array() - top).exp().sum());
        y.row(r).array() -= lse;
    }
    return y;
}

/// Row-wise normalization without affine parameters. Writes 1/sigma per row
/// into `inv_std` when provided.
template <typename Derived>
MatrixR<typename Derived::Scalar> layer_norm_rows(const Eigen::MatrixBase<Derived>& x,
                                                  VectorX<typename Derived::Scalar>* inv_std = nullptr)
{
    using Scalar = typename Derived::Scalar;
    MatrixR<Scalar> y(x.rows(), x.cols());
    if (inv_std != nullptr) inv_std->resize(x.rows());
    const Scalar n = static_cast<Scalar>(x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar mean = x.row(r).sum() / n;
        const auto centered = (x.row(r).array() - mean).eval();
        const Scalar var = centered.square().sum() / n;
        const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEpsilon));
        y.row(r) = centered * inv;
        if (inv_std != nullptr) (*inv_std)(r) = inv;
    }
    return y;
}

namespace detail {
inline constexpr double kGeluCubic = 0.044715;
inline const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);
}  // namespace detail

template <typename Scalar>
Scalar gelu(Scalar x)
{
    const Scalar inner = Scalar(detail::kGeluScale) * (x + Scalar(detail::kGeluCubic) * x * x * x);
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(inner));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x)
{
    const Scalar k = Scalar(detail::kGeluScale);
    const Scalar c = Scalar(detail::kGeluCubic);
    const Scalar t = std::tanh(k * (x + c * x * x * x));
    return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * k * (Scalar(1) + Scalar(3) * c * x * x);
}

/// Block-causal visibility: rows/cols are grouped into consecutive segments and
/// position i may attend to j only inside its own segment with j <= i.
template <typename Derived>
MatrixR<typename Derived::Scalar> apply_causal_mask(const Eigen::MatrixBase<Derived>& scores,
                                                    std::span<const Index> segments)
{
    using Scalar = typename Derived::Scalar;
    MatrixR<Scalar> out = MatrixR<Scalar>::Constant(scores.rows(), scores.cols(), Scalar(kMaskedScore));
    Index start = 0;
    for (const Index len : segments) {
        for (Index i = 0; i < len; ++i) {
            out.block(start + i, start, 1, i + 1) = scores.block(start + i, start, 1, i + 1);
        }
        start += len;
    }
    return out;
}

/// KL(softmax(ref) || softmax(cand)) for one pair of logit rows.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar kl_row(const Eigen::MatrixBase<DerivedA>& ref, const Eigen::MatrixBase<DerivedB>& cand)
{
    using Scalar = typename DerivedA::Scalar;
    const MatrixR<Scalar> lp = log_softmax_rows(ref);
    const MatrixR<Scalar> lq = log_softmax_rows(cand);
    return (lp.array().exp() * (lp.array() - lq.array())).sum();
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& x)
{
    return x.allFinite();
}

}  // namespace clab
