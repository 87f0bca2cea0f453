#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "powattn/error.hpp"

namespace powattn {

enum class ExpansionKind { Tpow, Spow, Tspow };

std::string_view to_string(ExpansionKind kind) noexcept;
ExpansionKind parse_expansion_kind(std::string_view name);

// Feature map phi applied to queries and keys. `d_tile` is only meaningful
// for Tspow; Tpow behaves as a single tile of edge d and Spow as tiles of
// edge 1, which is how the shared layout code treats them.
struct ExpansionSpec {
  ExpansionKind kind = ExpansionKind::Spow;
  int p = 2;
  int d = 1;
  int d_tile = 1;

  static ExpansionSpec tpow(int p, int d) { return {ExpansionKind::Tpow, p, d, d}; }
  static ExpansionSpec spow(int p, int d) { return {ExpansionKind::Spow, p, d, 1}; }
  static ExpansionSpec tspow(int p, int d, int d_tile) {
    return {ExpansionKind::Tspow, p, d, d_tile};
  }

  // Throws InvalidSpec unless p >= 1, d >= 1 and (Tspow) d_tile divides d.
  void validate() const;

  // Tile edge used by the layout: d for Tpow, 1 for Spow, d_tile for Tspow.
  int effective_tile() const noexcept;

  bool operator==(const ExpansionSpec&) const = default;
};

std::string describe(const ExpansionSpec& spec);

// Multi-indices are 0-based: entries lie in [0, d).
using MultiIndex = std::vector<int>;

// Above this size a state vector is never materialized.
inline constexpr std::uint64_t kMaxMaterializedDim = std::uint64_t{1} << 31;
// expansion_inner switches to the closed form (x.y)^p above this size.
inline constexpr std::uint64_t kInnerShortcutDim = 1'000'000;

// C(n, k) with overflow detection (throws Overflow).
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

// p! exactly for p <= 8, through lgamma beyond.
double factorial(int n);

std::uint64_t expansion_dim(const ExpansionSpec& spec);

// All non-decreasing multi-indices of length p over [0, d), in lexicographic
// order. This order is the canonical Spow/Tspow layout.
std::vector<MultiIndex> enumerate_ndmi(int d, int p,
                                       std::uint64_t max_count = kMaxMaterializedDim);

// Occurrence count of every value in [0, d) within `index`.
std::vector<int> histogram(const MultiIndex& index, int d);

// sqrt(p! / prod_k hist_k(index)!).
double multinomial_weight(const MultiIndex& index, int p);

// Visits every expanded coordinate in layout order with the p input
// positions whose product forms it and the coordinate's weight. Nothing is
// stored, so this works for any D that fits in 64 bits.
void for_each_coordinate(const ExpansionSpec& spec,
                         const std::function<void(std::span<const int>, double)>& visit);

template <typename T>
struct ExpandedVector {
  std::vector<T> values;
  ExpansionSpec spec;
};

// Precomputed coordinate table for one spec: for each expanded coordinate,
// the p factor positions and the weight. Every expansion in the attention
// engines goes through one of these.
template <typename T>
class Expander {
 public:
  explicit Expander(const ExpansionSpec& spec,
                    std::uint64_t max_dim = kMaxMaterializedDim);

  const ExpansionSpec& spec() const noexcept { return spec_; }
  std::size_t dim() const noexcept { return weights_.size(); }
  int input_dim() const noexcept { return spec_.d; }
  int degree() const noexcept { return spec_.p; }

  std::span<const std::uint32_t> factors(std::size_t coord) const {
    return {factors_.data() + coord * spec_.p, static_cast<std::size_t>(spec_.p)};
  }
  T weight(std::size_t coord) const { return weights_[coord]; }

  // out[e - begin] = phi(x)_e for e in [begin, end).
  void expand(std::span<const T> x, std::span<T> out, std::size_t begin,
              std::size_t end) const;
  void expand(std::span<const T> x, std::span<T> out) const {
    expand(x, out, 0, dim());
  }
  std::vector<T> expand(std::span<const T> x) const;

  // dx += J_phi(x)^T d_out.
  void expand_vjp(std::span<const T> x, std::span<const T> d_out,
                  std::span<T> dx) const;

 private:
  ExpansionSpec spec_;
  std::vector<std::uint32_t> factors_;
  std::vector<T> weights_;
};

template <typename T>
ExpandedVector<T> expand(std::span<const T> x, const ExpansionSpec& spec);

// <phi(x), phi(y)> accumulated coordinate by coordinate without storing
// either expansion; uses (x.y)^p once D exceeds `shortcut_dim`.
template <typename T>
T expansion_inner(std::span<const T> x, std::span<const T> y,
                  const ExpansionSpec& spec,
                  std::uint64_t shortcut_dim = kInnerShortcutDim);

// Integer power with a small-exponent fast path; used wherever (q.k)^p is
// formed directly.
template <typename T>
inline T ipow(T base, int p) {
  T r = T(1);
  while (p > 0) {
    if (p & 1) r *= base;
    base *= base;
    p >>= 1;
  }
  return r;
}

}  // namespace powattn
