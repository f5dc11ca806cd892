#pragma once

#include "cqsa/tensor.hpp"

// Ground-truth dense attention. Shares nothing with the kernel beyond
// Tensor4, and is O(N^2) per plane: meant for N up to a few hundred.
namespace cqsa::oracle {

/// softmax(scale * Q K^T) V per (batch, head), max-shifted softmax.
template <typename T>
Tensor4<T> dense_attention(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v, T scale);

template <typename T>
struct DenseGradients {
  Tensor4<T> dq;
  Tensor4<T> dk;
  Tensor4<T> dv;
};

/// Analytic gradients of sum(dO * O) with respect to Q, K and V.
template <typename T>
DenseGradients<T> dense_attention_grads(const Tensor4<T>& q, const Tensor4<T>& k,
                                        const Tensor4<T>& v, const Tensor4<T>& d_out, T scale);

/// Central differences (f(x+h) - f(x-h)) / 2h of sum(dO * dense_attention)
/// for every input entry. Throws PreconditionError if h <= 0.
template <typename T>
DenseGradients<T> finite_diff_grads(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                                    const Tensor4<T>& d_out, T scale, T h);

}  // namespace cqsa::oracle
