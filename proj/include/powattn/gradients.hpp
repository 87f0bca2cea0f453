#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "powattn/attention.hpp"
#include "powattn/chunked.hpp"

namespace powattn {

// Gradients of <upstream, Y> with respect to every forward input. dgates is
// present iff the batch carries gates and is taken w.r.t. the raw gate value.
template <typename T>
struct GradBundle {
  Tensor<T> dq;
  Tensor<T> dk;
  Tensor<T> dv;
  std::optional<Tensor<T>> dgates;
};

// Backward of the quadratic attention forms (all mechanisms, including the
// normalization quotient). The log-space option is ignored: the gradient is
// that of the direct score expression.
template <typename T>
GradBundle<T> vjp_power_attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg,
                                  const Tensor<T>& upstream);

// Backward through intra-chunk attention, update_state, discumsum and
// query_state.
template <typename T>
GradBundle<T> vjp_chunked(const SequenceBatch<T>& batch, const AttentionConfig& cfg,
                          const ChunkPlan& plan, const Tensor<T>& upstream);

template <typename T>
struct UpdateStateGrad {
  std::vector<T> dkeys;    // [c, d]
  std::vector<T> dvalues;  // [c, v]
  std::vector<T> dgates;   // [c], empty when the forward had no gates
};

// Backward of update_state given gradients of the contribution (S and gamma)
// and of the returned chunk decay.
template <typename T>
UpdateStateGrad<T> vjp_update_state(const ChunkState<T>& like, std::span<const T> keys,
                                    std::span<const T> values, std::span<const T> gates,
                                    const ChunkState<T>& d_contribution, T d_decay);

template <typename T>
struct DiscumsumGrad {
  std::vector<ChunkState<T>> dstates;
  std::vector<T> ddecays;
  std::optional<ChunkState<T>> dinitial;
};

template <typename T>
DiscumsumGrad<T> vjp_discumsum(const std::vector<ChunkState<T>>& states,
                               std::span<const T> decays, const ChunkState<T>* initial,
                               const std::vector<ChunkState<T>>& d_out);

template <typename T>
struct QueryStateGrad {
  ChunkState<T> dstate;
  std::vector<T> dqueries;  // w.r.t. the (already scaled) queries
  std::vector<T> dy_attn;
  std::vector<T> dzeta;
  std::vector<T> dprefix;   // empty when the forward had no prefix
};

template <typename T>
QueryStateGrad<T> vjp_query_state(const ChunkState<T>& state, std::span<const T> queries,
                                  std::span<const T> y_attn, std::span<const T> zeta,
                                  std::span<const T> gate_prefix, bool normalize,
                                  std::span<const T> d_out);

enum class FdScheme {
  Central,    // (f(x+h) - f(x-h)) / 2h
  Backward2,  // (3f(x) - 4f(x-h) + f(x-2h)) / 2h, for inputs pinned at an upper bound
};

using VectorFunction = std::function<std::vector<double>(std::span<const double>)>;

// Estimates d<upstream, f(x)>/dx one coordinate at a time (2 forward
// evaluations per input). Test tool; cost grows with the input count.
std::vector<double> finite_difference_oracle(const VectorFunction& f, std::span<const double> x,
                                             std::span<const double> upstream, double step,
                                             FdScheme scheme = FdScheme::Central);

double finite_difference_oracle(const std::function<double(double)>& f, double x,
                                double upstream, double step,
                                FdScheme scheme = FdScheme::Central);

// Per-coordinate scheme choice: Backward2 for coordinates flagged in
// `at_upper_bound`, Central elsewhere.
std::vector<double> finite_difference_oracle(const VectorFunction& f, std::span<const double> x,
                                             std::span<const double> upstream, double step,
                                             const std::vector<bool>& at_upper_bound);

}  // namespace powattn
