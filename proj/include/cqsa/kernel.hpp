#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <span>
#include <vector>

#include "cqsa/divide.hpp"
#include "cqsa/quorum.hpp"
#include "cqsa/tensor.hpp"

namespace cqsa {

/// raw: P = exp(R) * M exactly as written, failing if a logit would overflow.
/// stabilized: every row is shifted by its running max and partial sums are
/// rescaled on merge. Both produce the same O and gradients in real
/// arithmetic.
enum class ExpMode { raw, stabilized };

/// Keep every P_i from forward for backward, or rebuild it from Q, K.
enum class ProbRetention { retain, recompute };

struct KernelOptions {
  ExpMode mode = ExpMode::raw;
  ProbRetention retention = ProbRetention::retain;
  int workers = 1;
};

/// Largest logit accepted in raw mode before exp() would overflow.
template <typename T>
constexpr T raw_logit_limit();
template <>
constexpr double raw_logit_limit<double>() { return 700.0; }
template <>
constexpr float raw_logit_limit<float>() { return 88.0f; }

/// 1 / sqrt(head dim).
template <typename T>
T default_scale(std::int64_t dim);

/// Rows of `src` at `token_ids`, for every (batch, head) plane.
template <typename T>
Tensor4<T> gather_tokens(const Tensor4<T>& src, std::span<const std::int64_t> token_ids);

/// dst[:, :, token_ids[l], :] += src[:, :, l, :]
template <typename T>
void scatter_add_tokens(Tensor4<T>& dst, const Tensor4<T>& src,
                        std::span<const std::int64_t> token_ids);

/// Numerator/denominator of one subsequence in local token order.
template <typename T>
struct SubseqPartial {
  Tensor4<T> num;          // (B, H, L, D)
  std::vector<T> den;      // (B, H, L)
  std::vector<T> row_max;  // (B, H, L) shift per row; empty in raw mode
  std::vector<T> probs;    // (B, H, L, L) masked P_i; may be empty
};

/// Per-subsequence computation. Implementations must honour the CQS mask and
/// return the softmax numerator and denominator; `probs` is optional and
/// only needed to skip recomputation in backward.
template <typename T>
class SubseqKernel {
 public:
  virtual ~SubseqKernel() = default;
  virtual SubseqPartial<T> forward(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                                   const BinaryMask& mask, T scale, ExpMode mode) const = 0;
};

/// R = scale * Q K^T, P = exp(R) * M, Num = P V, Den = rowsum(P), per plane.
/// Throws NumericRangeError in raw mode when an unmasked logit exceeds
/// raw_logit_limit<T>().
template <typename T>
SubseqPartial<T> forward_subseq(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                                const BinaryMask& mask, T scale, ExpMode mode = ExpMode::raw);

template <typename T>
class ReferenceSubseqKernel final : public SubseqKernel<T> {
 public:
  SubseqPartial<T> forward(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                           const BinaryMask& mask, T scale, ExpMode mode) const override {
    return forward_subseq(q, k, v, mask, scale, mode);
  }
};

/// Global Num (B,H,N,D) and Den (B,H,N) in full-token coordinates. In
/// stabilized mode both are stored relative to `row_max`.
template <typename T>
struct Accumulators {
  Tensor4<T> num;
  std::vector<T> den;
  std::vector<T> row_max;
  T scale = T(1);
  ExpMode mode = ExpMode::raw;

  static Accumulators zeros(Shape4 shape, T scale, ExpMode mode);
};

/// Scatter-adds one partial into the accumulators at entry.token_ids.
template <typename T>
void merge_accumulate(Accumulators<T>& acc, const SubseqEntry& entry,
                      const SubseqPartial<T>& partial);

/// O = Num / Den, broadcast over the head dimension.
template <typename T>
Tensor4<T> normalize(const Accumulators<T>& acc);

struct EntryStats {
  std::vector<std::int64_t> quorum;
  std::int64_t length = 0;
  double seconds = 0.0;
  std::int64_t resident_elements = 0;
};

/// Everything backward needs from a forward call.
template <typename T>
struct SavedContext {
  Tensor4<T> q;
  Tensor4<T> k;
  Tensor4<T> v;
  std::vector<SubseqEntry> entries;
  std::vector<SubseqPartial<T>> retained;  // probs and row_max only; empty when recomputing
  Accumulators<T> acc;
  KernelOptions options;
};

template <typename T>
struct ForwardResult {
  Tensor4<T> out;
  SavedContext<T> ctx;
  std::vector<EntryStats> stats;
};

/// Full forward over a prebuilt plan. Entries run in parallel batches of
/// `options.workers`; partials are always merged in entry order, so the
/// result is bit-identical for any worker count.
template <typename T>
ForwardResult<T> forward(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                         std::vector<SubseqEntry> entries, T scale,
                         const KernelOptions& options = {},
                         const SubseqKernel<T>* kernel = nullptr);

/// Builds the plan with build_subseq(N, itr, set) and runs it. `scale`
/// defaults to 1/sqrt(D).
template <typename T>
ForwardResult<T> forward(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                         std::int64_t itr, const InterestSet& set,
                         const KernelOptions& options = {}, std::optional<std::type_identity_t<T>> scale = std::nullopt);

template <typename T>
struct SeedGradients {
  Tensor4<T> d_num;     // dO / Den
  std::vector<T> d_den;  // -<dO, Num>_D / Den^2
};

template <typename T>
SeedGradients<T> seed_gradients(const Tensor4<T>& d_out, const Accumulators<T>& acc);

template <typename T>
struct Gradients {
  Tensor4<T> dq;
  Tensor4<T> dk;
  Tensor4<T> dv;
};

/// dV = P^T dNum; dP = dNum V^T + dDen 1^T; dR = dP * P; dQ = a dR K;
/// dK = a dR^T Q. `probs` is (B, H, L, L), the others (B, H, L, D) except
/// d_den which is (B, H, L).
template <typename T>
Gradients<T> backward_subseq(std::span<const T> probs, const Tensor4<T>& v, const Tensor4<T>& q,
                             const Tensor4<T>& k, const Tensor4<T>& d_num,
                             std::span<const T> d_den, T scale);

template <typename T>
struct BackwardResult {
  Gradients<T> grads;
  std::vector<EntryStats> stats;
};

template <typename T>
BackwardResult<T> backward(const SavedContext<T>& ctx, const Tensor4<T>& d_out);

}  // namespace cqsa
