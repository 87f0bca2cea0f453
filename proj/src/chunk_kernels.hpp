#pragma once

// Fused expand-MMA kernels for the chunked pipeline. Expanded keys/queries
// only ever exist one coordinate block at a time.

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "attend_kernel.hpp"
#include "powattn/expansions.hpp"
#include "powattn/tensor.hpp"

namespace powattn::detail {

inline constexpr std::size_t kExpandBlock = 64;

// w[j] = product of gates in (j, len) and returns the product of all len
// gates. Without gates everything is one.
template <typename T>
T chunk_decays(const GateView<T>& gates, std::size_t len, std::span<T> w) {
  if (!gates) {
    std::fill(w.begin(), w.begin() + len, T(1));
    return T(1);
  }
  T acc = T(1);
  for (std::size_t j = len; j-- > 0;) {
    w[j] = acc;
    acc *= (*gates)(j, 0);
  }
  return acc;
}

// prefix[m] = product of gates in [0, m].
template <typename T>
void gate_prefix(const GateView<T>& gates, std::size_t len, std::span<T> prefix) {
  T acc = T(1);
  for (std::size_t m = 0; m < len; ++m) {
    if (gates) acc *= (*gates)(m, 0);
    prefix[m] = acc;
  }
}

template <typename T>
struct ExpandScratch {
  std::vector<T> block;   // coordinates x rows, transposed
  std::vector<T> row;     // one expanded row block
  std::vector<T> num;     // rows x v
  std::vector<T> den;     // rows
};

// s (D x v) and gamma (D) receive sum_j w_j phi(k_j) v_j^T and
// sum_j w_j phi(k_j). Accumulation over j is ascending for every coordinate.
template <typename T>
void update_state_kernel(const Expander<T>& ex, StreamView<const T> k, StreamView<const T> v,
                         std::span<const T> w, T* s, T* gamma, ExpandScratch<T>& scratch) {
  const std::size_t len = k.length();
  const std::size_t dim = ex.dim();
  const std::size_t vd = v.width();
  std::fill(s, s + dim * vd, T(0));
  std::fill(gamma, gamma + dim, T(0));
  scratch.block.resize(kExpandBlock * len);
  scratch.row.resize(kExpandBlock);

  for (std::size_t e0 = 0; e0 < dim; e0 += kExpandBlock) {
    const std::size_t e1 = std::min(dim, e0 + kExpandBlock);
    const std::size_t width = e1 - e0;
    for (std::size_t j = 0; j < len; ++j) {
      ex.expand(k.row(j), scratch.row, e0, e1);
      const T wj = w.empty() ? T(1) : w[j];
      for (std::size_t e = 0; e < width; ++e) scratch.block[e * len + j] = wj * scratch.row[e];
    }
    for (std::size_t e = 0; e < width; ++e) {
      const T* phi = scratch.block.data() + e * len;
      T* srow = s + (e0 + e) * vd;
      T g = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T a = phi[j];
        g += a;
        const auto vj = v.row(j);
        for (std::size_t f = 0; f < vd; ++f) srow[f] += a * vj[f];
      }
      gamma[e0 + e] = g;
    }
  }
}

// Raw reads num_m = phi(q_m)^T S and den_m = phi(q_m)^T gamma for every row
// of the (already scaled) queries.
template <typename T>
void read_state_kernel(const Expander<T>& ex, StreamView<const T> qs, const T* s,
                       const T* gamma, std::size_t vd, ExpandScratch<T>& scratch) {
  const std::size_t len = qs.length();
  const std::size_t dim = ex.dim();
  scratch.block.resize(kExpandBlock * len);
  scratch.num.assign(len * vd, T(0));
  scratch.den.assign(len, T(0));

  for (std::size_t e0 = 0; e0 < dim; e0 += kExpandBlock) {
    const std::size_t e1 = std::min(dim, e0 + kExpandBlock);
    const std::size_t width = e1 - e0;
    for (std::size_t m = 0; m < len; ++m)
      ex.expand(qs.row(m), std::span<T>(scratch.block.data() + m * kExpandBlock, width), e0, e1);
    for (std::size_t m = 0; m < len; ++m) {
      const T* phi = scratch.block.data() + m * kExpandBlock;
      T* num = scratch.num.data() + m * vd;
      T den = scratch.den[m];
      for (std::size_t e = 0; e < width; ++e) {
        const T a = phi[e];
        den += a * gamma[e0 + e];
        const T* srow = s + (e0 + e) * vd;
        for (std::size_t f = 0; f < vd; ++f) num[f] += a * srow[f];
      }
      scratch.den[m] = den;
    }
  }
}

// Combines the state read with the intra-chunk result. `prefix` empty means
// all ones. Writes y and the combined denominators.
template <typename T>
void combine_query(std::size_t len, std::size_t vd, StreamView<const T> y_attn,
                   std::span<const T> zeta, std::span<const T> prefix, bool normalize,
                   const ExpandScratch<T>& scratch, StreamView<T> out, std::span<T> denom) {
  for (std::size_t m = 0; m < len; ++m) {
    const T pi = prefix.empty() ? T(1) : prefix[m];
    const T den = zeta[m] + pi * scratch.den[m];
    const T* num = scratch.num.data() + m * vd;
    const auto ya = y_attn.row(m);
    const auto ym = out.row(m);
    if (normalize) {
      if (!(den > T(0)))
        fail(ErrorCode::ZeroDenominator,
             "query_state denominator is not positive at chunk row " + std::to_string(m));
      for (std::size_t f = 0; f < vd; ++f) ym[f] = (ya[f] + pi * num[f]) / den;
    } else {
      for (std::size_t f = 0; f < vd; ++f) ym[f] = ya[f] + pi * num[f];
    }
    if (!denom.empty()) denom[m] = den;
  }
}

template <typename T>
void discount_accumulate(T decay, const T* prev, T* cur, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) cur[i] = decay * prev[i] + cur[i];
}

}  // namespace powattn::detail
