#include "powattn/attention.hpp"

#include <cmath>

#include "attend_kernel.hpp"
#include "parallel.hpp"

namespace powattn {

std::string_view to_string(MechanismKind kind) noexcept {
  switch (kind) {
    case MechanismKind::Exp: return "exp";
    case MechanismKind::Window: return "window";
    case MechanismKind::Linear: return "linear";
    case MechanismKind::Power: return "power";
  }
  return "?";
}

namespace {

template <typename T>
void require_finite(const Tensor<T>& x, const char* name) {
  for (const T value : x.flat()) {
    if (!std::isfinite(value))
      fail(ErrorCode::NonFiniteInput, std::string(name) + " contains a non-finite value");
  }
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

}  // namespace

template <typename T>
void SequenceBatch<T>::validate() const {
  require(q.rank() == 4 && k.rank() == 4 && v.rank() == 4, ErrorCode::ShapeMismatch,
          "q, k, v must be rank-4 [batch, time, head, feature]");
  require(q.shape() == k.shape(), ErrorCode::ShapeMismatch,
          "q " + shape_string(q.shape()) + " and k " + shape_string(k.shape()) + " differ");
  require(v.dim(0) == q.dim(0) && v.dim(1) == q.dim(1) && v.dim(2) == q.dim(2),
          ErrorCode::ShapeMismatch,
          "v " + shape_string(v.shape()) + " does not match q " + shape_string(q.shape()));
  require(q.dim(3) >= 1 && v.dim(3) >= 1, ErrorCode::ShapeMismatch,
          "feature dimensions must be >= 1");
  require_finite(q, "q");
  require_finite(k, "k");
  require_finite(v, "v");
  if (gates) {
    require(gates->shape() == std::vector<std::size_t>{q.dim(0), q.dim(1), q.dim(2)},
            ErrorCode::ShapeMismatch, "gates must be [batch, time, head]");
    for (const T g : gates->flat()) {
      if (!std::isfinite(g)) fail(ErrorCode::NonFiniteInput, "gates contain a non-finite value");
      if (g < T(0) || g > T(1)) fail(ErrorCode::InvalidGate, "gate values must lie in [0, 1]");
    }
  }
}

template <typename T>
SequenceBatch<T> make_batch(std::size_t b, std::size_t t, std::size_t h, std::size_t d,
                            std::size_t v, bool gated) {
  SequenceBatch<T> batch{Tensor<T>({b, t, h, d}), Tensor<T>({b, t, h, d}),
                         Tensor<T>({b, t, h, v}), std::nullopt};
  if (gated) batch.gates = Tensor<T>({b, t, h}, T(1));
  return batch;
}

double AttentionConfig::resolved_scale(std::size_t d) const {
  return scale ? *scale : 1.0 / std::sqrt(static_cast<double>(d));
}

template <typename T>
T AttentionConfig::resolved_epsilon() const {
  if (epsilon) return static_cast<T>(*epsilon);
  return sizeof(T) >= sizeof(double) ? static_cast<T>(1e-12) : static_cast<T>(1e-7);
}

template float AttentionConfig::resolved_epsilon<float>() const;
template double AttentionConfig::resolved_epsilon<double>() const;

void AttentionConfig::validate(std::size_t d) const {
  require(threads >= 1, ErrorCode::InvalidSpec, "threads must be >= 1");
  if (epsilon) require(*epsilon > 0.0, ErrorCode::InvalidSpec, "epsilon must be positive");
  if (scale) require(std::isfinite(*scale), ErrorCode::InvalidSpec, "scale must be finite");
  switch (mechanism.kind) {
    case MechanismKind::Exp:
      break;
    case MechanismKind::Window:
      require(mechanism.window >= 1, ErrorCode::InvalidSpec, "window size must be >= 1");
      break;
    case MechanismKind::Linear:
    case MechanismKind::Power:
      mechanism.expansion.validate();
      require(static_cast<std::size_t>(mechanism.expansion.d) == d,
              ErrorCode::DimensionMismatch,
              "expansion d=" + std::to_string(mechanism.expansion.d) +
                  " differs from key dimension " + std::to_string(d));
      if (normalize && mechanism.expansion.p % 2 != 0)
        fail(ErrorCode::OddPowerWithNormalize,
             "normalization needs an even power, got p=" +
                 std::to_string(mechanism.expansion.p));
      break;
  }
}

namespace {

template <typename T>
AttentionOutput<T> run_quadratic(const SequenceBatch<T>& batch, const AttentionConfig& cfg,
                                 std::size_t window) {
  batch.validate();
  cfg.validate(batch.key_dim());

  std::optional<Expander<T>> expander;
  if (cfg.mechanism.kind == MechanismKind::Linear) expander.emplace(cfg.mechanism.expansion);
  const auto rule =
      detail::make_rule<T>(cfg, batch.key_dim(), expander ? &*expander : nullptr);

  const std::size_t b = batch.batch(), t = batch.time(), h = batch.heads();
  AttentionOutput<T> out{Tensor<T>({b, t, h, batch.value_dim()}), Tensor<T>({b, t, h})};
  detail::parallel_for(b * h, cfg.threads, [&](std::size_t s) {
    const std::size_t bi = s / h, hi = s % h;
    detail::GateView<T> gates;
    if (batch.gates) gates = stream(*batch.gates, bi, hi);
    detail::AttendScratch<T> scratch;
    detail::attend_stream(rule, stream(batch.q, bi, hi), stream(batch.k, bi, hi),
                          stream(batch.v, bi, hi), gates, window, cfg.normalize,
                          stream(out.y, bi, hi), stream(out.rowsum, bi, hi), scratch);
  });
  return out;
}

void expect_kind(const AttentionConfig& cfg, MechanismKind kind) {
  require(cfg.mechanism.kind == kind, ErrorCode::InvalidSpec,
          "expected mechanism '" + std::string(to_string(kind)) + "', got '" +
              std::string(to_string(cfg.mechanism.kind)) + "'");
}

}  // namespace

template <typename T>
AttentionOutput<T> exp_attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg) {
  expect_kind(cfg, MechanismKind::Exp);
  return run_quadratic(batch, cfg, 0);
}

template <typename T>
AttentionOutput<T> window_attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg) {
  expect_kind(cfg, MechanismKind::Window);
  return run_quadratic(batch, cfg, static_cast<std::size_t>(cfg.mechanism.window));
}

template <typename T>
AttentionOutput<T> power_attention_form(const SequenceBatch<T>& batch,
                                        const AttentionConfig& cfg) {
  expect_kind(cfg, MechanismKind::Power);
  return run_quadratic(batch, cfg, 0);
}

template <typename T>
AttentionOutput<T> linear_attention_form(const SequenceBatch<T>& batch,
                                         const AttentionConfig& cfg) {
  expect_kind(cfg, MechanismKind::Linear);
  return run_quadratic(batch, cfg, 0);
}

template <typename T>
AttentionOutput<T> attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg) {
  switch (cfg.mechanism.kind) {
    case MechanismKind::Exp: return exp_attention(batch, cfg);
    case MechanismKind::Window: return window_attention(batch, cfg);
    case MechanismKind::Linear: return linear_attention_form(batch, cfg);
    case MechanismKind::Power: return power_attention_form(batch, cfg);
  }
  fail(ErrorCode::InvalidSpec, "unknown mechanism");
}

#define POWATTN_INSTANTIATE(T)                                                              \
  template struct SequenceBatch<T>;                                                         \
  template SequenceBatch<T> make_batch<T>(std::size_t, std::size_t, std::size_t,            \
                                          std::size_t, std::size_t, bool);                  \
  template AttentionOutput<T> exp_attention(const SequenceBatch<T>&, const AttentionConfig&); \
  template AttentionOutput<T> window_attention(const SequenceBatch<T>&,                     \
                                               const AttentionConfig&);                     \
  template AttentionOutput<T> power_attention_form(const SequenceBatch<T>&,                 \
                                                   const AttentionConfig&);                 \
  template AttentionOutput<T> linear_attention_form(const SequenceBatch<T>&,                \
                                                    const AttentionConfig&);                \
  template AttentionOutput<T> attention(const SequenceBatch<T>&, const AttentionConfig&);

POWATTN_INSTANTIATE(float)
POWATTN_INSTANTIATE(double)

#undef POWATTN_INSTANTIATE

}  // namespace powattn
