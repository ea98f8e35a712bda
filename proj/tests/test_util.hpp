#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mimdet/random.hpp"
#include "mimdet/tensor.hpp"

namespace testutil {

using mimdet::Rng;
using mimdet::Shape;
using mimdet::Tape;
using mimdet::Tensor;
using mimdet::Value;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (long i = 0; i < t.numel(); ++i) t[i] = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Direct quadruple-sum cross-correlation, the conv2d oracle.
inline Tensor conv2d_naive(const Tensor& x, const Tensor& w, const Tensor* bias,
                           long stride, long pad) {
  const long N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long Cout = w.dim(0), k = w.dim(2);
  const long Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor out({N, Cout, Ho, Wo});
  for (long n = 0; n < N; ++n)
    for (long co = 0; co < Cout; ++co)
      for (long oh = 0; oh < Ho; ++oh)
        for (long ow = 0; ow < Wo; ++ow) {
          double acc = bias ? (*bias)[co] : 0.0;
          for (long ci = 0; ci < Cin; ++ci)
            for (long kh = 0; kh < k; ++kh)
              for (long kw = 0; kw < k; ++kw) {
                const long ih = oh * stride - pad + kh, iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((n * Cin + ci) * H + ih) * W + iw] * w[((co * Cin + ci) * k + kh) * k + kw];
              }
          out[((n * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }
  return out;
}

// Window-mean pooling oracle.
inline Tensor avg_pool_naive(const Tensor& x, long k) {
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({N, C, H / k, W / k});
  for (long nc = 0; nc < N * C; ++nc)
    for (long oh = 0; oh < H / k; ++oh)
      for (long ow = 0; ow < W / k; ++ow) {
        double acc = 0;
        for (long kh = 0; kh < k; ++kh)
          for (long kw = 0; kw < k; ++kw) acc += x[(nc * H + oh * k + kh) * W + ow * k + kw];
        out[(nc * (H / k) + oh) * (W / k) + ow] = acc / static_cast<double>(k * k);
      }
  return out;
}

// Standard normal CDF by composite Simpson quadrature of the density; the
// reference for the exact GELU, independent of erf.
inline double normal_cdf_quadrature(double x) {
  const double lo = -12.0;
  const long n = 20000;  // even
  const double h = (x - lo) / static_cast<double>(n);
  auto pdf = [](double u) { return std::exp(-0.5 * u * u) * 0.39894228040143267794; };
  double s = pdf(lo) + pdf(x);
  for (long i = 1; i < n; ++i) s += pdf(lo + h * static_cast<double>(i)) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

/// Max relative error between tape gradients and central differences for a
/// scalar-valued function of several tensors. Gradients below 1e-6 on both
/// sides are compared absolutely at 1e-10.
inline double fd_max_rel_err(
    const std::function<Value(Tape*, const std::vector<Value>&)>& f,
    std::vector<Tensor> inputs, double step = 1e-5) {
  Tape tape;
  std::vector<Value> leaves;
  for (Tensor& t : inputs) leaves.push_back(mimdet::make_leaf(&tape, t));
  Value loss = f(&tape, leaves);
  mimdet::backward(tape, loss);

  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& grad = tape.grad(leaves[i].id);
    for (long j = 0; j < inputs[i].numel(); ++j) {
      const double saved = inputs[i][j];
      auto eval = [&](double v) {
        inputs[i][j] = v;
        std::vector<Value> consts;
        for (const Tensor& t : inputs) consts.push_back(mimdet::constant(t));
        return f(nullptr, consts).v[0];
      };
      const double fd = (eval(saved + step) - eval(saved - step)) / (2.0 * step);
      inputs[i][j] = saved;
      const double an = grad[j];
      const double denom = std::max(std::abs(fd), std::abs(an));
      if (denom < 1e-6) {
        if (std::abs(fd - an) > 1e-10) worst = std::max(worst, 1.0);
      } else {
        worst = std::max(worst, std::abs(fd - an) / denom);
      }
    }
  }
  return worst;
}

}  // namespace testutil
