#pragma once

// Row-by-row causal attention over one (batch, head) stream. Shared by the
// quadratic forms and by the intra-chunk step of the chunked engine.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "powattn/attention.hpp"
#include "powattn/expansions.hpp"
#include "powattn/tensor.hpp"

namespace powattn::detail {

template <typename T>
struct ScoreRule {
  MechanismKind kind = MechanismKind::Power;
  int p = 1;
  T scale = T(1);
  T epsilon = T(0);
  bool log_space = false;
  const Expander<T>* expander = nullptr;  // Linear only

  bool log_domain() const noexcept {
    return kind == MechanismKind::Exp || kind == MechanismKind::Window ||
           (kind == MechanismKind::Power && log_space);
  }
};

template <typename T>
ScoreRule<T> make_rule(const AttentionConfig& cfg, std::size_t d,
                       const Expander<T>* expander = nullptr) {
  ScoreRule<T> rule;
  rule.kind = cfg.mechanism.kind;
  rule.p = cfg.mechanism.degree();
  rule.scale = static_cast<T>(cfg.resolved_scale(d));
  rule.epsilon = cfg.resolved_epsilon<T>();
  rule.log_space = cfg.use_log_space;
  rule.expander = expander;
  return rule;
}

template <typename T>
struct AttendScratch {
  std::vector<T> qs;
  std::vector<T> weight;
  std::vector<T> sign;
  std::vector<T> phi_q;
  std::vector<T> phi_k;
  std::vector<T> acc;
};

template <typename T>
using GateView = std::optional<StreamView<const T>>;

template <typename T>
inline T dot(std::span<const T> a, std::span<const T> b) {
  T s = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Writes y_i and rowsum_i for every i of the stream. `window` = 0 means the
// whole causal prefix. Without normalization y holds the raw weighted sum.
template <typename T>
void attend_stream(const ScoreRule<T>& rule, StreamView<const T> q, StreamView<const T> k,
                   StreamView<const T> v, const GateView<T>& gates, std::size_t window,
                   bool normalize, StreamView<T> y, StreamView<T> rowsum,
                   AttendScratch<T>& s) {
  const std::size_t len = q.length();
  const std::size_t d = q.width();
  const std::size_t vd = v.width();
  const T neg_inf = -std::numeric_limits<T>::infinity();

  s.qs.resize(d);
  s.weight.resize(len);
  s.sign.resize(len);
  s.acc.resize(vd);

  std::size_t dim = 0;
  if (rule.kind == MechanismKind::Linear) {
    dim = rule.expander->dim();
    s.phi_q.resize(dim);
    s.phi_k.resize(len * dim);
    for (std::size_t j = 0; j < len; ++j)
      rule.expander->expand(k.row(j), std::span<T>(s.phi_k.data() + j * dim, dim));
  }

  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t lo = (window != 0 && i + 1 > window) ? i + 1 - window : 0;
    const auto qi = q.row(i);
    for (std::size_t f = 0; f < d; ++f) s.qs[f] = rule.scale * qi[f];
    const std::span<const T> qs(s.qs);
    if (rule.kind == MechanismKind::Linear) rule.expander->expand(qs, s.phi_q);

    T* w = s.weight.data();
    std::fill(s.acc.begin(), s.acc.end(), T(0));
    T z = T(0);
    T carry = T(1);

    if (rule.log_domain()) {
      T log_gate = T(0);
      for (std::size_t j = i + 1; j-- > lo;) {
        w[j - lo] = log_gate;
        if (gates && j > lo) log_gate += std::log((*gates)(j, 0));
      }
      T row_max = neg_inf;
      for (std::size_t j = lo; j <= i; ++j) {
        const T a = dot(qs, k.row(j));
        T& lw = w[j - lo];
        s.sign[j - lo] = T(1);
        if (rule.kind == MechanismKind::Power) {
          lw += static_cast<T>(rule.p) * std::log(std::abs(a) + rule.epsilon);
          if ((rule.p & 1) && a < T(0)) s.sign[j - lo] = T(-1);
        } else {
          lw += a;
        }
        if (lw > row_max) row_max = lw;
      }
      if (row_max != neg_inf) {
        for (std::size_t j = lo; j <= i; ++j) {
          const T pj = s.sign[j - lo] * std::exp(w[j - lo] - row_max);
          const auto vj = v.row(j);
          for (std::size_t f = 0; f < vd; ++f) s.acc[f] += pj * vj[f];
          z += pj;
        }
        carry = std::exp(row_max);
      }
    } else {
      T gate = T(1);
      for (std::size_t j = i + 1; j-- > lo;) {
        w[j - lo] = gate;
        if (gates && j > lo) gate *= (*gates)(j, 0);
      }
      for (std::size_t j = lo; j <= i; ++j) {
        T score;
        if (rule.kind == MechanismKind::Linear) {
          score = dot(std::span<const T>(s.phi_q),
                      std::span<const T>(s.phi_k.data() + j * dim, dim));
        } else {
          score = ipow(dot(qs, k.row(j)), rule.p);
        }
        const T wj = w[j - lo] * score;
        const auto vj = v.row(j);
        for (std::size_t f = 0; f < vd; ++f) s.acc[f] += wj * vj[f];
        z += wj;
      }
    }

    const auto yi = y.row(i);
    if (normalize) {
      if (!(z > T(0)))
        fail(ErrorCode::ZeroDenominator,
             "attention score sum is not positive at position " + std::to_string(i));
      for (std::size_t f = 0; f < vd; ++f) yi[f] = s.acc[f] / z;
    } else {
      for (std::size_t f = 0; f < vd; ++f) yi[f] = carry * s.acc[f];
    }
    rowsum(i, 0) = carry * z;
  }
}

}  // namespace powattn::detail
