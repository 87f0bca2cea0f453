#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "powattn/attention.hpp"
#include "powattn/expansions.hpp"

namespace powattn {

// Recurrent state of one (batch, head) stream: S is D x v (row-major, one
// row per expanded coordinate) and gamma is the running sum of expanded
// keys used for normalization.
template <typename T>
struct ChunkState {
  ExpansionSpec spec;
  std::size_t value_dim = 0;
  std::vector<T> s;
  std::vector<T> gamma;

  static ChunkState zeros(const ExpansionSpec& spec, std::size_t value_dim);

  std::size_t dim() const noexcept { return gamma.size(); }
  std::span<T> row(std::size_t coord) { return {s.data() + coord * value_dim, value_dim}; }
  std::span<const T> row(std::size_t coord) const {
    return {s.data() + coord * value_dim, value_dim};
  }
};

struct ChunkPlan {
  std::size_t t = 0;
  std::size_t c = 1;

  // InvalidSpec when c == 0.
  static ChunkPlan make(std::size_t t, std::size_t c);

  std::size_t n_chunks() const noexcept { return t == 0 ? 0 : (t + c - 1) / c; }
  std::size_t last_chunk_len() const noexcept {
    return t == 0 ? 0 : t - (n_chunks() - 1) * c;
  }
  std::size_t begin(std::size_t chunk) const noexcept { return chunk * c; }
  std::size_t length(std::size_t chunk) const noexcept {
    return chunk + 1 == n_chunks() ? last_chunk_len() : c;
  }
};

// Per-stage tallies for the chunked pipeline. Used both for multiply-add
// counts and for wall time in nanoseconds.
struct StageCounts {
  std::uint64_t intra_attention = 0;
  std::uint64_t expansion = 0;
  std::uint64_t update_state = 0;
  std::uint64_t discumsum = 0;
  std::uint64_t query_state = 0;

  std::uint64_t total() const noexcept {
    return intra_attention + expansion + update_state + discumsum + query_state;
  }
  bool operator==(const StageCounts&) const = default;
};

struct PipelineProbe {
  StageCounts macs;
  StageCounts nanoseconds;
};

inline constexpr std::uint64_t kDefaultStateBudgetBytes = std::uint64_t{1} << 30;

struct EngineOptions {
  std::uint64_t state_budget_bytes = kDefaultStateBudgetBytes;
  PipelineProbe* probe = nullptr;
};

// Output of update_state: the chunk's own contribution (decayed to the chunk
// end) and the chunk's total decay.
template <typename T>
struct ChunkUpdate {
  ChunkState<T> contribution;
  T decay = T(1);
};

// Token-by-token recurrence S_i = g_i S_{i-1} + phi(k_i) v_i^T,
// gamma_i = g_i gamma_{i-1} + phi(k_i), y_i = phi(scale q_i)^T S_i.
template <typename T>
AttentionOutput<T> recurrent_power_attention(const SequenceBatch<T>& batch,
                                             const AttentionConfig& cfg,
                                             const EngineOptions& options = {});

// Within-chunk contribution of `keys` [c, d] and `values` [c, v] (row-major).
// `gates` is empty (all ones) or has c entries. `like` supplies spec and v;
// its contents are not read.
template <typename T>
ChunkUpdate<T> update_state(const ChunkState<T>& like, std::span<const T> keys,
                            std::span<const T> values, std::span<const T> gates = {});

// Discounted prefix sum: out_k = decays[k] * out_{k-1} + states[k] with
// out_{-1} = initial (zero when absent). decays[k] is chunk k's own decay.
template <typename T>
std::vector<ChunkState<T>> discumsum(const std::vector<ChunkState<T>>& states,
                                     std::span<const T> decays,
                                     const ChunkState<T>* initial = nullptr);

// Fused read of the accumulated state: for each query row m of `queries`
// (already scaled), (y_attn_m + pi_m phi(q_m)^T S) / (zeta_m + pi_m phi(q_m)^T gamma),
// where pi = gate_prefix. Without normalization the denominator is dropped.
template <typename T>
std::vector<T> query_state(const ChunkState<T>& state, std::span<const T> queries,
                           std::span<const T> y_attn, std::span<const T> zeta,
                           std::span<const T> gate_prefix, bool normalize);

// Chunked pipeline: intra-chunk attention, update_state, discumsum and
// query_state, starting from a zero state.
template <typename T>
AttentionOutput<T> chunked_power_attention(const SequenceBatch<T>& batch,
                                           const AttentionConfig& cfg, const ChunkPlan& plan,
                                           const EngineOptions& options = {});

// Constant-memory streaming: each call consumes the next block of tokens for
// every (batch, head) stream and advances the carried states.
template <typename T>
class ChunkedStream {
 public:
  ChunkedStream(const AttentionConfig& cfg, std::size_t batch, std::size_t heads,
                std::size_t value_dim);

  // `initial` holds batch * heads states, stream index b * heads + h.
  ChunkedStream(const AttentionConfig& cfg, std::size_t batch, std::size_t heads,
                std::size_t value_dim, std::vector<ChunkState<T>> initial);

  AttentionOutput<T> process(const SequenceBatch<T>& block);

  const std::vector<ChunkState<T>>& states() const noexcept { return states_; }
  std::size_t tokens_seen() const noexcept { return tokens_seen_; }

 private:
  AttentionConfig cfg_;
  std::size_t batch_;
  std::size_t heads_;
  std::size_t value_dim_;
  Expander<T> expander_;
  std::vector<ChunkState<T>> states_;
  std::size_t tokens_seen_ = 0;
};

}  // namespace powattn
