#include "cqsa/kernel.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "cqsa/errors.hpp"

namespace cqsa {
namespace {

template <typename T>
constexpr T kNegInf = -std::numeric_limits<T>::infinity();

// Runs fn(0..count-1), up to `workers` at a time. Rethrows the first failure.
template <typename Fn>
void run_parallel(std::size_t count, int workers, Fn&& fn) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t j = 0; j < count; ++j) fn(j);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  {
    std::vector<std::jthread> threads;
    threads.reserve(count);
    for (std::size_t j = 0; j < count; ++j) {
      threads.emplace_back([&, j] {
        try {
          fn(j);
        } catch (...) {
          errors[j] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_same_shape(const Shape4& a, const Shape4& b, const char* what) {
  if (!(a == b)) {
    throw PreconditionError(fmt::format("{}: shape ({},{},{},{}) vs ({},{},{},{})", what, a.batch,
                                        a.heads, a.tokens, a.dim, b.batch, b.heads, b.tokens, b.dim));
  }
}

void check_token_ids(std::span<const std::int64_t> ids, std::int64_t n) {
  for (std::int64_t id : ids) {
    if (id < 0 || id >= n) throw PreconditionError(fmt::format("token id {} outside [0, {})", id, n));
  }
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = T(0);
  for (std::size_t d = 0; d < a.size(); ++d) s += a[d] * b[d];
  return s;
}

// Masked exp(scale * q k^T - shift[l]) for one subsequence, (B, H, L, L).
// `shifts` is indexed (plane, local row); empty means no shift.
template <typename T>
std::vector<T> masked_probs(const Tensor4<T>& q, const Tensor4<T>& k, const BinaryMask& mask,
                            T scale, std::span<const T> shifts) {
  const auto& s = q.shape();
  const std::int64_t len = s.tokens;
  const std::int64_t dim = s.dim;
  std::vector<T> probs(static_cast<std::size_t>(s.planes() * len * len), T(0));
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto qp = q.plane(p);
    const auto kp = k.plane(p);
    for (std::int64_t l = 0; l < len; ++l) {
      const T shift = shifts.empty() ? T(0) : shifts[p * len + l];
      if (shift == kNegInf<T>) continue;
      const auto qrow = qp.subspan(l * dim, dim);
      for (std::int64_t m = 0; m < len; ++m) {
        if (!mask(l, m)) continue;
        const T r = scale * dot<T>(qrow, kp.subspan(m * dim, dim));
        probs[(p * len + l) * len + m] = std::exp(r - shift);
      }
    }
  }
  return probs;
}

}  // namespace

template <typename T>
T default_scale(std::int64_t dim) {
  if (dim < 1) throw PreconditionError("head dimension must be >= 1");
  return T(1) / std::sqrt(static_cast<T>(dim));
}

template <typename T>
Tensor4<T> gather_tokens(const Tensor4<T>& src, std::span<const std::int64_t> token_ids) {
  const auto& s = src.shape();
  check_token_ids(token_ids, s.tokens);
  Tensor4<T> out({s.batch, s.heads, static_cast<std::int64_t>(token_ids.size()), s.dim});
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto from = src.plane(p);
    auto to = out.plane(p);
    for (std::size_t l = 0; l < token_ids.size(); ++l) {
      std::copy_n(from.begin() + token_ids[l] * s.dim, s.dim, to.begin() + l * s.dim);
    }
  }
  return out;
}

template <typename T>
void scatter_add_tokens(Tensor4<T>& dst, const Tensor4<T>& src,
                        std::span<const std::int64_t> token_ids) {
  const auto& d = dst.shape();
  const auto& s = src.shape();
  if (s.batch != d.batch || s.heads != d.heads || s.dim != d.dim ||
      s.tokens != static_cast<std::int64_t>(token_ids.size())) {
    throw PreconditionError("scatter_add_tokens: incompatible shapes");
  }
  check_token_ids(token_ids, d.tokens);
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto from = src.plane(p);
    auto to = dst.plane(p);
    for (std::size_t l = 0; l < token_ids.size(); ++l) {
      for (std::int64_t x = 0; x < s.dim; ++x) to[token_ids[l] * s.dim + x] += from[l * s.dim + x];
    }
  }
}

template <typename T>
SubseqPartial<T> forward_subseq(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                                const BinaryMask& mask, T scale, ExpMode mode) {
  check_same_shape(q.shape(), k.shape(), "forward_subseq K");
  check_same_shape(q.shape(), v.shape(), "forward_subseq V");
  const auto& s = q.shape();
  const std::int64_t len = s.tokens;
  const std::int64_t dim = s.dim;
  if (mask.size() != len) {
    throw PreconditionError(fmt::format("mask side {} != subsequence length {}", mask.size(), len));
  }
  if (!(scale > T(0))) throw PreconditionError("scale must be positive");

  SubseqPartial<T> out;
  out.num = Tensor4<T>(s);
  out.den.assign(static_cast<std::size_t>(s.planes() * len), T(0));
  out.probs.assign(static_cast<std::size_t>(s.planes() * len * len), T(0));
  if (mode == ExpMode::stabilized) out.row_max.assign(out.den.size(), kNegInf<T>);

  std::vector<T> logits(static_cast<std::size_t>(len));
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto qp = q.plane(p);
    const auto kp = k.plane(p);
    const auto vp = v.plane(p);
    auto np = out.num.plane(p);
    for (std::int64_t l = 0; l < len; ++l) {
      const auto qrow = qp.subspan(l * dim, dim);
      T row_max = kNegInf<T>;
      for (std::int64_t m = 0; m < len; ++m) {
        if (!mask(l, m)) continue;
        logits[m] = scale * dot<T>(qrow, kp.subspan(m * dim, dim));
        row_max = std::max(row_max, logits[m]);
      }
      if (row_max == kNegInf<T>) continue;  // fully masked row contributes nothing
      T shift = T(0);
      if (mode == ExpMode::stabilized) {
        shift = row_max;
        out.row_max[p * len + l] = row_max;
      } else if (row_max > raw_logit_limit<T>()) {
        throw NumericRangeError(
            fmt::format("logit {} exceeds the raw-mode limit {}; use stabilized mode",
                        static_cast<double>(row_max), static_cast<double>(raw_logit_limit<T>())),
            static_cast<double>(row_max));
      }
      T* prow = out.probs.data() + (p * len + l) * len;
      T den = T(0);
      auto nrow = np.subspan(l * dim, dim);
      for (std::int64_t m = 0; m < len; ++m) {
        if (!mask(l, m)) continue;
        const T e = std::exp(logits[m] - shift);
        prow[m] = e;
        den += e;
        const auto vrow = vp.subspan(m * dim, dim);
        for (std::int64_t x = 0; x < dim; ++x) nrow[x] += e * vrow[x];
      }
      out.den[p * len + l] = den;
    }
  }
  return out;
}

template <typename T>
Accumulators<T> Accumulators<T>::zeros(Shape4 shape, T scale, ExpMode mode) {
  Accumulators acc;
  acc.num = Tensor4<T>(shape);
  acc.den.assign(static_cast<std::size_t>(shape.planes() * shape.tokens), T(0));
  if (mode == ExpMode::stabilized) acc.row_max.assign(acc.den.size(), kNegInf<T>);
  acc.scale = scale;
  acc.mode = mode;
  return acc;
}

template <typename T>
void merge_accumulate(Accumulators<T>& acc, const SubseqEntry& entry,
                      const SubseqPartial<T>& partial) {
  const auto& g = acc.num.shape();
  const auto& s = partial.num.shape();
  if (s.batch != g.batch || s.heads != g.heads || s.dim != g.dim || s.tokens != entry.length()) {
    throw PreconditionError("merge_accumulate: partial does not match accumulators/entry");
  }
  check_token_ids(entry.token_ids, g.tokens);
  const std::int64_t len = s.tokens;
  const std::int64_t dim = s.dim;
  if (acc.mode == ExpMode::raw) {
    scatter_add_tokens(acc.num, partial.num, entry.token_ids);
    for (std::int64_t p = 0; p < s.planes(); ++p) {
      for (std::int64_t l = 0; l < len; ++l) {
        acc.den[p * g.tokens + entry.token_ids[l]] += partial.den[p * len + l];
      }
    }
    return;
  }
  if (partial.row_max.size() != partial.den.size()) {
    throw PreconditionError("stabilized merge needs per-row shifts");
  }
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto from = partial.num.plane(p);
    auto to = acc.num.plane(p);
    for (std::int64_t l = 0; l < len; ++l) {
      const T local = partial.row_max[p * len + l];
      if (local == kNegInf<T>) continue;
      const std::int64_t t = entry.token_ids[l];
      T& global = acc.row_max[p * g.tokens + t];
      const T next = std::max(global, local);
      const T keep = global == kNegInf<T> ? T(0) : std::exp(global - next);
      const T add = std::exp(local - next);
      T& den = acc.den[p * g.tokens + t];
      den = den * keep + partial.den[p * len + l] * add;
      for (std::int64_t x = 0; x < dim; ++x) {
        to[t * dim + x] = to[t * dim + x] * keep + from[l * dim + x] * add;
      }
      global = next;
    }
  }
}

template <typename T>
Tensor4<T> normalize(const Accumulators<T>& acc) {
  const auto& s = acc.num.shape();
  Tensor4<T> out(s);
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto from = acc.num.plane(p);
    auto to = out.plane(p);
    for (std::int64_t n = 0; n < s.tokens; ++n) {
      const T den = acc.den[p * s.tokens + n];
      if (!(den > T(0))) {
        throw PreconditionError(fmt::format(
            "denominator {} at plane {} token {} is not positive; the plan leaves the token uncovered", static_cast<double>(den), p, n));
      }
      for (std::int64_t x = 0; x < s.dim; ++x) to[n * s.dim + x] = from[n * s.dim + x] / den;
    }
  }
  return out;
}

template <typename T>
ForwardResult<T> forward(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                         std::vector<SubseqEntry> entries, T scale, const KernelOptions& options,
                         const SubseqKernel<T>* kernel) {
  check_same_shape(q.shape(), k.shape(), "forward K");
  check_same_shape(q.shape(), v.shape(), "forward V");
  if (!(scale > T(0))) throw PreconditionError("scale must be positive");
  const ReferenceSubseqKernel<T> reference;
  if (kernel == nullptr) kernel = &reference;
  const auto& shape = q.shape();
  for (const auto& e : entries) check_token_ids(e.token_ids, shape.tokens);

  ForwardResult<T> result;
  result.ctx.acc = Accumulators<T>::zeros(shape, scale, options.mode);
  result.stats.resize(entries.size());
  if (options.retention == ProbRetention::retain) result.ctx.retained.resize(entries.size());

  const std::size_t workers = static_cast<std::size_t>(std::max(1, options.workers));
  for (std::size_t start = 0; start < entries.size(); start += workers) {
    const std::size_t count = std::min(workers, entries.size() - start);
    std::vector<SubseqPartial<T>> partials(count);
    run_parallel(count, options.workers, [&](std::size_t j) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto& entry = entries[start + j];
      const auto qi = gather_tokens(q, entry.token_ids);
      const auto ki = gather_tokens(k, entry.token_ids);
      const auto vi = gather_tokens(v, entry.token_ids);
      const auto mask = mask_from_runs(entry.length(), entry.mask_groups);
      partials[j] = kernel->forward(qi, ki, vi, mask, scale, options.mode);
      auto& st = result.stats[start + j];
      st.seconds = seconds_since(t0);
      st.quorum = entry.quorum;
      st.length = entry.length();
      const std::int64_t bh = shape.planes();
      st.resident_elements = 4 * bh * st.length * shape.dim + bh * st.length +
                             bh * st.length * st.length;
    });
    // Fixed-order reduction.
    for (std::size_t j = 0; j < count; ++j) {
      merge_accumulate(result.ctx.acc, entries[start + j], partials[j]);
      if (options.retention == ProbRetention::retain) {
        auto& keep = result.ctx.retained[start + j];
        keep.probs = std::move(partials[j].probs);
        keep.row_max = std::move(partials[j].row_max);
      }
    }
  }
  result.out = normalize(result.ctx.acc);
  result.ctx.q = q;
  result.ctx.k = k;
  result.ctx.v = v;
  result.ctx.entries = std::move(entries);
  result.ctx.options = options;
  return result;
}

template <typename T>
ForwardResult<T> forward(const Tensor4<T>& q, const Tensor4<T>& k, const Tensor4<T>& v,
                         std::int64_t itr, const InterestSet& set, const KernelOptions& options,
                         std::optional<std::type_identity_t<T>> scale) {
  auto entries = build_subseq(q.shape().tokens, itr, set);
  return forward(q, k, v, std::move(entries), scale.value_or(default_scale<T>(q.shape().dim)),
                 options);
}

template <typename T>
SeedGradients<T> seed_gradients(const Tensor4<T>& d_out, const Accumulators<T>& acc) {
  check_same_shape(d_out.shape(), acc.num.shape(), "seed_gradients dO");
  const auto& s = d_out.shape();
  SeedGradients<T> seeds{Tensor4<T>(s), std::vector<T>(acc.den.size(), T(0))};
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto dop = d_out.plane(p);
    const auto nump = acc.num.plane(p);
    auto dnp = seeds.d_num.plane(p);
    for (std::int64_t n = 0; n < s.tokens; ++n) {
      const T den = acc.den[p * s.tokens + n];
      T inner = T(0);
      for (std::int64_t x = 0; x < s.dim; ++x) {
        dnp[n * s.dim + x] = dop[n * s.dim + x] / den;
        inner += dop[n * s.dim + x] * nump[n * s.dim + x];
      }
      seeds.d_den[p * s.tokens + n] = -inner / (den * den);
    }
  }
  return seeds;
}

template <typename T>
Gradients<T> backward_subseq(std::span<const T> probs, const Tensor4<T>& v, const Tensor4<T>& q,
                             const Tensor4<T>& k, const Tensor4<T>& d_num,
                             std::span<const T> d_den, T scale) {
  check_same_shape(q.shape(), k.shape(), "backward_subseq K");
  check_same_shape(q.shape(), v.shape(), "backward_subseq V");
  check_same_shape(q.shape(), d_num.shape(), "backward_subseq dNum");
  const auto& s = q.shape();
  const std::int64_t len = s.tokens;
  const std::int64_t dim = s.dim;
  if (probs.size() != static_cast<std::size_t>(s.planes() * len * len) ||
      d_den.size() != static_cast<std::size_t>(s.planes() * len)) {
    throw PreconditionError("backward_subseq: P or dDen has the wrong size");
  }
  Gradients<T> g{Tensor4<T>(s), Tensor4<T>(s), Tensor4<T>(s)};
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    const auto qp = q.plane(p);
    const auto kp = k.plane(p);
    const auto vp = v.plane(p);
    const auto dnp = d_num.plane(p);
    auto dqp = g.dq.plane(p);
    auto dkp = g.dk.plane(p);
    auto dvp = g.dv.plane(p);
    const T* pp = probs.data() + p * len * len;
    for (std::int64_t l = 0; l < len; ++l) {
      const auto dnum_row = dnp.subspan(l * dim, dim);
      const T dden = d_den[p * len + l];
      for (std::int64_t m = 0; m < len; ++m) {
        const T pr = pp[l * len + m];
        if (pr == T(0)) continue;  // masked (or underflowed) entries carry no gradient
        const T dp = dot<T>(dnum_row, vp.subspan(m * dim, dim)) + dden;
        const T dr = dp * pr;
        for (std::int64_t x = 0; x < dim; ++x) {
          dvp[m * dim + x] += pr * dnum_row[x];
          dqp[l * dim + x] += dr * kp[m * dim + x];
          dkp[m * dim + x] += dr * qp[l * dim + x];
        }
      }
    }
  }
  for (auto* t : {&g.dq, &g.dk}) {
    for (T& x : t->data()) x *= scale;
  }
  return g;
}

template <typename T>
BackwardResult<T> backward(const SavedContext<T>& ctx, const Tensor4<T>& d_out) {
  check_same_shape(d_out.shape(), ctx.q.shape(), "backward dO");
  const auto& shape = ctx.q.shape();
  const auto& acc = ctx.acc;
  const auto seeds = seed_gradients(d_out, acc);
  const bool stabilized = acc.mode == ExpMode::stabilized;

  BackwardResult<T> result;
  result.grads = {Tensor4<T>(shape), Tensor4<T>(shape), Tensor4<T>(shape)};
  result.stats.resize(ctx.entries.size());

  const std::size_t workers = static_cast<std::size_t>(std::max(1, ctx.options.workers));
  for (std::size_t start = 0; start < ctx.entries.size(); start += workers) {
    const std::size_t count = std::min(workers, ctx.entries.size() - start);
    std::vector<Gradients<T>> partials(count);
    run_parallel(count, ctx.options.workers, [&](std::size_t j) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t idx = start + j;
      const auto& entry = ctx.entries[idx];
      const std::int64_t len = entry.length();
      const auto qi = gather_tokens(ctx.q, entry.token_ids);
      const auto ki = gather_tokens(ctx.k, entry.token_ids);
      const auto vi = gather_tokens(ctx.v, entry.token_ids);
      const auto dnum_i = gather_tokens(seeds.d_num, entry.token_ids);
      std::vector<T> dden_i(static_cast<std::size_t>(shape.planes() * len));
      std::vector<T> global_shift;
      if (stabilized) global_shift.resize(dden_i.size());
      for (std::int64_t p = 0; p < shape.planes(); ++p) {
        for (std::int64_t l = 0; l < len; ++l) {
          const std::int64_t t = p * shape.tokens + entry.token_ids[l];
          dden_i[p * len + l] = seeds.d_den[t];
          if (stabilized) global_shift[p * len + l] = acc.row_max[t];
        }
      }

      std::vector<T> probs;
      const bool have_retained = idx < ctx.retained.size() && !ctx.retained[idx].probs.empty();
      if (have_retained) {
        probs = ctx.retained[idx].probs;
        if (stabilized) {
          // Re-express rows relative to the final global shift.
          const auto& local = ctx.retained[idx].row_max;
          for (std::size_t r = 0; r < global_shift.size(); ++r) {
            const T factor = local[r] == kNegInf<T> ? T(0) : std::exp(local[r] - global_shift[r]);
            for (std::int64_t m = 0; m < len; ++m) probs[r * len + m] *= factor;
          }
        }
      } else {
        const auto mask = mask_from_runs(len, entry.mask_groups);
        probs = masked_probs<T>(qi, ki, mask, acc.scale, global_shift);
      }
      partials[j] = backward_subseq<T>(probs, vi, qi, ki, dnum_i, dden_i, acc.scale);

      auto& st = result.stats[idx];
      st.seconds = seconds_since(t0);
      st.quorum = entry.quorum;
      st.length = len;
      const std::int64_t bh = shape.planes();
      st.resident_elements = 7 * bh * len * shape.dim + bh * len + bh * len * len;
    });
    for (std::size_t j = 0; j < count; ++j) {
      const auto& ids = ctx.entries[start + j].token_ids;
      scatter_add_tokens(result.grads.dq, partials[j].dq, ids);
      scatter_add_tokens(result.grads.dk, partials[j].dk, ids);
      scatter_add_tokens(result.grads.dv, partials[j].dv, ids);
    }
  }
  return result;
}

#define CQSA_INSTANTIATE_KERNEL(T)                                                              \
  template T default_scale<T>(std::int64_t);                                                    \
  template Tensor4<T> gather_tokens<T>(const Tensor4<T>&, std::span<const std::int64_t>);       \
  template void scatter_add_tokens<T>(Tensor4<T>&, const Tensor4<T>&,                           \
                                      std::span<const std::int64_t>);                           \
  template SubseqPartial<T> forward_subseq<T>(const Tensor4<T>&, const Tensor4<T>&,             \
                                              const Tensor4<T>&, const BinaryMask&, T, ExpMode); \
  template struct Accumulators<T>;                                                              \
  template void merge_accumulate<T>(Accumulators<T>&, const SubseqEntry&,                       \
                                    const SubseqPartial<T>&);                                   \
  template Tensor4<T> normalize<T>(const Accumulators<T>&);                                     \
  template ForwardResult<T> forward<T>(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&, \
                                       std::vector<SubseqEntry>, T, const KernelOptions&,       \
                                       const SubseqKernel<T>*);                                 \
  template ForwardResult<T> forward<T>(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&, \
                                       std::int64_t, const InterestSet&, const KernelOptions&,  \
                                       std::optional<T>);                                       \
  template SeedGradients<T> seed_gradients<T>(const Tensor4<T>&, const Accumulators<T>&);       \
  template Gradients<T> backward_subseq<T>(std::span<const T>, const Tensor4<T>&,               \
                                           const Tensor4<T>&, const Tensor4<T>&,                \
                                           const Tensor4<T>&, std::span<const T>, T);           \
  template BackwardResult<T> backward<T>(const SavedContext<T>&, const Tensor4<T>&);

CQSA_INSTANTIATE_KERNEL(float)
CQSA_INSTANTIATE_KERNEL(double)

#undef CQSA_INSTANTIATE_KERNEL

}  // namespace cqsa
