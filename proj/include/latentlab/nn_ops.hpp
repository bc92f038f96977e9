#pragma once

// Row-wise primitives shared by the forward and backward passes: layer norm
// with cached statistics and the GPT-2 tanh-approximation GELU.

#include <Eigen/Dense>

#include <cmath>

#include "latentlab/model.hpp"

namespace latentlab {

inline constexpr double kLnEps = 1e-5;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// y = g .* (x - mu) * rstd + b, per row; mean/rstd written for backward.
// g and b are (d x 1) parameter views.
template <class T, class XD, class GD, class BD, class YD>
void layernorm_rows(const Eigen::MatrixBase<XD>& x, const Eigen::MatrixBase<GD>& g,
                    const Eigen::MatrixBase<BD>& b, Eigen::MatrixBase<YD>& y, Vec<T>& mean, Vec<T>& rstd) {
    const auto n = x.rows();
    const auto d = x.cols();
    for (Eigen::Index r = 0; r < n; ++r) {
        const T mu = x.row(r).mean();
        const T var = (x.row(r).array() - mu).square().sum() / static_cast<T>(d);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        mean(r) = mu;
        rstd(r) = rs;
        y.row(r) =
            (((x.row(r).array() - mu) * rs) * g.col(0).transpose().array() + b.col(0).transpose().array())
                .matrix();
    }
}

// Backward through layer norm over packed rows. Accumulates into dg/db,
// overwrites dx. x is the forward input; stats come from the forward pass.
template <class T, class XD, class GD, class DYD, class DGD, class DBD, class DXD>
void layernorm_backward_rows(const Eigen::MatrixBase<XD>& x, const Vec<T>& mean, const Vec<T>& rstd,
                             const Eigen::MatrixBase<GD>& g, const Eigen::MatrixBase<DYD>& dy,
                             Eigen::MatrixBase<DGD>& dg, Eigen::MatrixBase<DBD>& db,
                             Eigen::MatrixBase<DXD>& dx) {
    const auto n = x.rows();
    const auto d = x.cols();
    for (Eigen::Index r = 0; r < n; ++r) {
        const T rs = rstd(r);
        const auto xhat = ((x.row(r).array() - mean(r)) * rs).eval();
        const auto dyr = dy.row(r).array();
        dg.col(0).transpose().array() += dyr * xhat;
        db.col(0).transpose().array() += dyr;
        const auto dxhat = (dyr * g.col(0).transpose().array()).eval();
        const T m1 = dxhat.sum() / static_cast<T>(d);
        const T m2 = (dxhat * xhat).sum() / static_cast<T>(d);
        dx.row(r) = ((dxhat - m1 - xhat * m2) * rs).matrix();
    }
}

// GPT-2 GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class T>
T gelu(T x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    const double xd = static_cast<double>(x);
    return static_cast<T>(0.5 * xd * (1.0 + std::tanh(c * (xd + 0.044715 * xd * xd * xd))));
}

template <class T>
T gelu_grad(T x) {
    constexpr double c = 0.7978845608028654;
    const double xd = static_cast<double>(x);
    const double u = c * (xd + 0.044715 * xd * xd * xd);
    const double th = std::tanh(u);
    const double sech2 = 1.0 - th * th;
    return static_cast<T>(0.5 * (1.0 + th) + 0.5 * xd * sech2 * c * (1.0 + 3.0 * 0.044715 * xd * xd));
}

// Numerically safe softmax over a vector expression; in place.
template <class Derived>
void softmax_inplace(Eigen::MatrixBase<Derived>& row) {
    using T = typename Derived::Scalar;
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    const T s = row.sum();
    row /= s;
}

}  // namespace latentlab
