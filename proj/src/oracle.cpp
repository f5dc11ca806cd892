#include "cqsa/oracle.hpp"

#include <cmath>
#include <vector>

#include "cqsa/errors.hpp"

namespace cqsa::oracle {
namespace {

void check_shapes(const Shape4& a, const Shape4& b) {
  if (!(a == b)) throw PreconditionError("oracle inputs must share one shape");
}

// Softmax weights of one plane, row-major N x N.
template <typename T>
std::vector<T> softmax_weights(std::span<const T> q, std::span<const T> k, std::int64_t n,
                               std::int64_t dim, T scale) {
  std::vector<T> w(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i) {
    T row_max = -INFINITY;
    for (std::int64_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::int64_t d = 0; d < dim; ++d) s += q[i * dim + d] * k[j * dim + d];
      w[i * n + j] = scale * s;
      row_max = std::max(row_max, w[i * n + j]);
    }
    T total = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      w[i * n + j] = std::exp(w[i * n + j] - row_max);
      total += w[i * n + j];
    }
    for (std::int64_t j = 0; j < n; ++j) w[i * n + j] /= total;
  }
  return w;
}

template <typename T>
void plane_attention(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                     std::span<T> out, std::int64_t n, std::int64_t dim, T scale) {
  const auto w = softmax_weights(q, k, n, dim, scale);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t d = 0; d < dim; ++d) {
      T s = 0;
      for (std::int64_t j = 0; j < n; ++j) s += w[i * n + j] * v[j * dim + d];
      out[i * dim + d] = s;
    }
  }
}

template <typename T>
T plane_loss(std::span<const T> q, std::span<const T> k, std::span<const T> v,
             std::span<const T> d_out, std::int64_t n, std::int64_t dim, T scale) {
  std::vector<T> o(static_cast<std::size_t>(n * dim));
  plane_attention<T>(q, k, v, o, n, dim, scale);
  T loss = 0;
  for (std::size_t i = 0; i < o.size(); ++i) loss += d_out[i] * o[i];
  return loss;
}

}  // namespace

template <typename T>
Tensor4<T> dense_attention(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v, T scale) {
  check_shapes(q.shape(), k.shape());
  check_shapes(q.shape(), v.shape());
  const auto& s = q.shape();
  Tensor4<T> out(s);
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    plane_attention<T>(q.plane(p), k.plane(p), v.plane(p), out.plane(p), s.tokens, s.dim, scale);
  }
  return out;
}

template <typename T>
DenseGradients<T> dense_attention_grads(const Tensor4<T>& q, const Tensor4<T>& k,
                                        const Tensor4<T>& v, const Tensor4<T>& d_out, T scale) {
  check_shapes(q.shape(), k.shape());
  check_shapes(q.shape(), v.shape());
  check_shapes(q.shape(), d_out.shape());
  const auto& s = q.shape();
  const std::int64_t n = s.tokens;
  const std::int64_t dim = s.dim;
  DenseGradients<T> g{Tensor4<T>(s), Tensor4<T>(s), Tensor4<T>(s)};
  std::vector<T> dw(static_cast<std::size_t>(n * n));
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto qp = q.plane(p);
    const auto kp = k.plane(p);
    const auto vp = v.plane(p);
    const auto dop = d_out.plane(p);
    auto dqp = g.dq.plane(p);
    auto dkp = g.dk.plane(p);
    auto dvp = g.dv.plane(p);
    const auto w = softmax_weights<T>(qp, kp, n, dim, scale);
    // dV = W^T dO, dW = dO V^T
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        T s_dw = 0;
        for (std::int64_t d = 0; d < dim; ++d) {
          dvp[j * dim + d] += w[i * n + j] * dop[i * dim + d];
          s_dw += dop[i * dim + d] * vp[j * dim + d];
        }
        dw[i * n + j] = s_dw;
      }
    }
    // Softmax Jacobian: dS_ij = W_ij (dW_ij - sum_k W_ik dW_ik)
    for (std::int64_t i = 0; i < n; ++i) {
      T row = 0;
      for (std::int64_t j = 0; j < n; ++j) row += w[i * n + j] * dw[i * n + j];
      for (std::int64_t j = 0; j < n; ++j) {
        const T ds = w[i * n + j] * (dw[i * n + j] - row);
        for (std::int64_t d = 0; d < dim; ++d) {
          dqp[i * dim + d] += scale * ds * kp[j * dim + d];
          dkp[j * dim + d] += scale * ds * qp[i * dim + d];
        }
      }
    }
  }
  return g;
}

template <typename T>
DenseGradients<T> finite_diff_grads(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                                    const Tensor4<T>& d_out, T scale, T h) {
  if (!(h > T(0))) throw PreconditionError("finite-difference step must be positive");
  check_shapes(q.shape(), k.shape());
  check_shapes(q.shape(), v.shape());
  check_shapes(q.shape(), d_out.shape());
  const auto& s = q.shape();
  DenseGradients<T> g{Tensor4<T>(s), Tensor4<T>(s), Tensor4<T>(s)};
  // The loss separates over planes, so each perturbation only re-evaluates its own plane.
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    std::vector<T> qp(q.plane(p).begin(), q.plane(p).end());
    std::vector<T> kp(k.plane(p).begin(), k.plane(p).end());
    std::vector<T> vp(v.plane(p).begin(), v.plane(p).end());
    const auto dop = d_out.plane(p);
    auto loss = [&] { return plane_loss<T>(qp, kp, vp, dop, s.tokens, s.dim, scale); };
    const std::pair<std::vector<T>*, Tensor4<T>*> targets[] = {
        {&qp, &g.dq}, {&kp, &g.dk}, {&vp, &g.dv}};
    for (auto [input, grad] : targets) {
      auto gp = grad->plane(p);
      for (std::size_t i = 0; i < input->size(); ++i) {
        const T saved = (*input)[i];
        (*input)[i] = saved + h;
        const T up = loss();
        (*input)[i] = saved - h;
        const T down = loss();
        (*input)[i] = saved;
        gp[i] = (up - down) / (T(2) * h);
      }
    }
  }
  return g;
}

template Tensor4<float> dense_attention<float>(const Tensor4<float>&, const Tensor4<float>&,
                                               const Tensor4<float>&, float);
template Tensor4<double> dense_attention<double>(const Tensor4<double>&, const Tensor4<double>&,
                                                 const Tensor4<double>&, double);
template DenseGradients<float> dense_attention_grads<float>(const Tensor4<float>&,
                                                            const Tensor4<float>&,
                                                            const Tensor4<float>&,
                                                            const Tensor4<float>&, float);
template DenseGradients<double> dense_attention_grads<double>(const Tensor4<double>&,
                                                             const Tensor4<double>&,
                                                             const Tensor4<double>&,
                                                             const Tensor4<double>&, double);
template DenseGradients<float> finite_diff_grads<float>(const Tensor4<float>&,
                                                        const Tensor4<float>&,
                                                        const Tensor4<float>&,
                                                        const Tensor4<float>&, float, float);
template DenseGradients<double> finite_diff_grads<double>(const Tensor4<double>&,
                                                          const Tensor4<double>&,
                                                          const Tensor4<double>&,
                                                          const Tensor4<double>&, double, double);

}  // namespace cqsa::oracle
