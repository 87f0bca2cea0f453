#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "powattn/expansions.hpp"
#include "powattn/tensor.hpp"

namespace powattn {

// Queries, keys and values laid out [batch, time, head, feature], plus
// optional per-timestep decay gates [batch, time, head]. Missing gates mean
// "all ones".
template <typename T>
struct SequenceBatch {
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> v;
  std::optional<Tensor<T>> gates;

  std::size_t batch() const { return q.dim(0); }
  std::size_t time() const { return q.dim(1); }
  std::size_t heads() const { return q.dim(2); }
  std::size_t key_dim() const { return q.dim(3); }
  std::size_t value_dim() const { return v.dim(3); }

  // ShapeMismatch on inconsistent shapes, NonFiniteInput on NaN/Inf,
  // InvalidGate for gates outside [0, 1].
  void validate() const;
};

template <typename T>
SequenceBatch<T> make_batch(std::size_t b, std::size_t t, std::size_t h, std::size_t d,
                            std::size_t v, bool gated);

enum class MechanismKind { Exp, Window, Linear, Power };

std::string_view to_string(MechanismKind kind) noexcept;

struct Mechanism {
  MechanismKind kind = MechanismKind::Power;
  int window = 0;               // Window only
  ExpansionSpec expansion{};    // Linear and Power

  static Mechanism exp() { return {MechanismKind::Exp, 0, {}}; }
  static Mechanism sliding_window(int w) { return {MechanismKind::Window, w, {}}; }
  static Mechanism linear(const ExpansionSpec& spec) { return {MechanismKind::Linear, 0, spec}; }
  static Mechanism power(const ExpansionSpec& spec) { return {MechanismKind::Power, 0, spec}; }

  bool has_expansion() const noexcept {
    return kind == MechanismKind::Linear || kind == MechanismKind::Power;
  }
  int degree() const noexcept { return has_expansion() ? expansion.p : 0; }
};

struct AttentionConfig {
  Mechanism mechanism;
  std::optional<double> scale;    // defaults to 1/sqrt(d)
  bool normalize = false;
  std::optional<double> epsilon;  // defaults to 1e-12 (f64) / 1e-7 (f32)
  bool use_log_space = false;
  int threads = 1;                // parallelism across (batch, head) streams

  double resolved_scale(std::size_t d) const;
  template <typename T>
  T resolved_epsilon() const;

  // InvalidSpec / OddPowerWithNormalize; `d` is the key dimension.
  void validate(std::size_t d) const;
};

template <typename T>
struct AttentionOutput {
  Tensor<T> y;       // [b, t, h, v]
  Tensor<T> rowsum;  // [b, t, h]: sum of (gated) scores per query
};

// Causal softmax-style attention sum_j G_ij exp(scale q_i.k_j) v_j with
// per-row max subtraction; G_ij is the product of gates in (j, i].
template <typename T>
AttentionOutput<T> exp_attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg);

// exp_attention restricted to the w most recent tokens j in [i - w + 1, i].
template <typename T>
AttentionOutput<T> window_attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg);

// sum_j G_ij (scale q_i.k_j)^p v_j. With use_log_space the scores are formed
// as exp(p log(|s| + eps) - rowmax).
template <typename T>
AttentionOutput<T> power_attention_form(const SequenceBatch<T>& batch,
                                        const AttentionConfig& cfg);

// sum_j G_ij phi(scale q_i).phi(k_j) v_j with phi materialized.
template <typename T>
AttentionOutput<T> linear_attention_form(const SequenceBatch<T>& batch,
                                         const AttentionConfig& cfg);

// Dispatches on cfg.mechanism.kind.
template <typename T>
AttentionOutput<T> attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg);

}  // namespace powattn
