#include "powattn/expansions.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace powattn {

std::string_view to_string(ExpansionKind kind) noexcept {
  switch (kind) {
    case ExpansionKind::Tpow: return "tpow";
    case ExpansionKind::Spow: return "spow";
    case ExpansionKind::Tspow: return "tspow";
  }
  return "?";
}

ExpansionKind parse_expansion_kind(std::string_view name) {
  if (name == "tpow") return ExpansionKind::Tpow;
  if (name == "spow") return ExpansionKind::Spow;
  if (name == "tspow") return ExpansionKind::Tspow;
  fail(ErrorCode::InvalidSpec, "unknown expansion kind '" + std::string(name) + "'");
}

void ExpansionSpec::validate() const {
  require(p >= 1, ErrorCode::InvalidSpec, "degree p must be >= 1");
  require(d >= 1, ErrorCode::InvalidSpec, "input dimension d must be >= 1");
  if (kind == ExpansionKind::Tspow) {
    require(d_tile >= 1 && d_tile <= d && d % d_tile == 0, ErrorCode::InvalidSpec,
            "d_tile=" + std::to_string(d_tile) + " must divide d=" + std::to_string(d));
  }
}

int ExpansionSpec::effective_tile() const noexcept {
  switch (kind) {
    case ExpansionKind::Tpow: return d;
    case ExpansionKind::Spow: return 1;
    case ExpansionKind::Tspow: return d_tile;
  }
  return 1;
}

std::string describe(const ExpansionSpec& spec) {
  std::string s = std::string(to_string(spec.kind)) + "(p=" + std::to_string(spec.p) +
                  ", d=" + std::to_string(spec.d);
  if (spec.kind == ExpansionKind::Tspow) s += ", d_tile=" + std::to_string(spec.d_tile);
  return s + ")";
}

namespace {

using u128 = unsigned __int128;
constexpr u128 kU64Max = std::numeric_limits<std::uint64_t>::max();

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  const u128 r = static_cast<u128>(a) * b;
  require(r <= kU64Max, ErrorCode::Overflow, "expanded dimension exceeds 64 bits");
  return static_cast<std::uint64_t>(r);
}

std::uint64_t checked_pow(std::uint64_t base, int exp) {
  std::uint64_t r = 1;
  for (int i = 0; i < exp; ++i) r = checked_mul(r, base);
  return r;
}

constexpr std::array<std::uint64_t, 9> kFactorials = {1, 1, 2, 6, 24, 120, 720, 5040, 40320};

}  // namespace

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  u128 r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    // r * (n - k + i) / i stays integral: it is C(n - k + i, i).
    r = r * (n - k + i) / i;
    require(r <= kU64Max, ErrorCode::Overflow, "binomial coefficient exceeds 64 bits");
  }
  return static_cast<std::uint64_t>(r);
}

double factorial(int n) {
  require(n >= 0, ErrorCode::InvalidSpec, "factorial of a negative number");
  if (n < static_cast<int>(kFactorials.size())) return static_cast<double>(kFactorials[n]);
  return std::exp(std::lgamma(static_cast<double>(n) + 1.0));
}

std::uint64_t expansion_dim(const ExpansionSpec& spec) {
  spec.validate();
  const auto p = static_cast<std::uint64_t>(spec.p);
  const auto d = static_cast<std::uint64_t>(spec.d);
  switch (spec.kind) {
    case ExpansionKind::Tpow:
      return checked_pow(d, spec.p);
    case ExpansionKind::Spow:
      return binomial(d + p - 1, p);
    case ExpansionKind::Tspow: {
      const auto tile = static_cast<std::uint64_t>(spec.d_tile);
      return checked_mul(binomial(d / tile + p - 1, p), checked_pow(tile, spec.p));
    }
  }
  return 0;
}

std::vector<MultiIndex> enumerate_ndmi(int d, int p, std::uint64_t max_count) {
  require(d >= 1 && p >= 1, ErrorCode::InvalidSpec, "enumerate_ndmi needs d, p >= 1");
  const std::uint64_t count = binomial(static_cast<std::uint64_t>(d) + p - 1, p);
  require(count <= max_count, ErrorCode::Overflow,
          "NDMI count " + std::to_string(count) + " exceeds cap " + std::to_string(max_count));

  std::vector<MultiIndex> out;
  out.reserve(count);
  MultiIndex idx(p, 0);
  while (true) {
    out.push_back(idx);
    int z = p - 1;
    while (z >= 0 && idx[z] == d - 1) --z;
    if (z < 0) break;
    ++idx[z];
    std::fill(idx.begin() + z + 1, idx.end(), idx[z]);
  }
  return out;
}

std::vector<int> histogram(const MultiIndex& index, int d) {
  std::vector<int> hist(d, 0);
  for (int i : index) {
    require(i >= 0 && i < d, ErrorCode::DimensionMismatch, "multi-index entry out of range");
    ++hist[i];
  }
  return hist;
}

double multinomial_weight(const MultiIndex& index, int p) {
  require(static_cast<int>(index.size()) == p, ErrorCode::DimensionMismatch,
          "multi-index length differs from p");
  MultiIndex sorted = index;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> runs;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    runs.push_back(static_cast<int>(j - i));
    i = j;
  }
  if (p < static_cast<int>(kFactorials.size())) {
    std::uint64_t denom = 1;
    for (int r : runs) denom *= kFactorials[r];
    return std::sqrt(static_cast<double>(kFactorials[p] / denom));
  }
  double log_ratio = std::lgamma(p + 1.0);
  for (int r : runs) log_ratio -= std::lgamma(r + 1.0);
  return std::sqrt(std::exp(log_ratio));
}

void for_each_coordinate(const ExpansionSpec& spec,
                         const std::function<void(std::span<const int>, double)>& visit) {
  spec.validate();
  const int p = spec.p;
  const int tile = spec.effective_tile();
  const int n_tiles = spec.d / tile;

  MultiIndex tiles(p, 0);
  std::vector<int> offset(p, 0);
  std::vector<int> position(p, 0);
  while (true) {
    const double w = multinomial_weight(tiles, p);
    std::fill(offset.begin(), offset.end(), 0);
    while (true) {
      for (int z = 0; z < p; ++z) position[z] = tiles[z] * tile + offset[z];
      visit(position, w);
      int z = p - 1;
      while (z >= 0 && offset[z] == tile - 1) offset[z--] = 0;
      if (z < 0) break;
      ++offset[z];
    }
    int z = p - 1;
    while (z >= 0 && tiles[z] == n_tiles - 1) --z;
    if (z < 0) break;
    ++tiles[z];
    std::fill(tiles.begin() + z + 1, tiles.end(), tiles[z]);
  }
}

template <typename T>
Expander<T>::Expander(const ExpansionSpec& spec, std::uint64_t max_dim) : spec_(spec) {
  const std::uint64_t dim = expansion_dim(spec);
  require(dim <= max_dim, ErrorCode::Overflow,
          describe(spec) + " has D=" + std::to_string(dim) +
              ", above the materialization cap " + std::to_string(max_dim));
  factors_.reserve(dim * spec.p);
  weights_.reserve(dim);
  for_each_coordinate(spec, [&](std::span<const int> pos, double w) {
    for (int i : pos) factors_.push_back(static_cast<std::uint32_t>(i));
    weights_.push_back(static_cast<T>(w));
  });
}

template <typename T>
void Expander<T>::expand(std::span<const T> x, std::span<T> out, std::size_t begin,
                         std::size_t end) const {
  if (x.size() != static_cast<std::size_t>(spec_.d))
    fail(ErrorCode::DimensionMismatch, "expand: input length " + std::to_string(x.size()) +
                                           " != d=" + std::to_string(spec_.d));
  if (end > dim() || begin > end || out.size() < end - begin)
    fail(ErrorCode::DimensionMismatch, "expand: output range out of bounds");
  const std::size_t p = spec_.p;
  const std::uint32_t* f = factors_.data() + begin * p;
  for (std::size_t e = begin; e < end; ++e, f += p) {
    T prod = weights_[e];
    for (std::size_t z = 0; z < p; ++z) prod *= x[f[z]];
    out[e - begin] = prod;
  }
}

template <typename T>
std::vector<T> Expander<T>::expand(std::span<const T> x) const {
  std::vector<T> out(dim());
  expand(x, out);
  return out;
}

template <typename T>
void Expander<T>::expand_vjp(std::span<const T> x, std::span<const T> d_out,
                             std::span<T> dx) const {
  require(x.size() == static_cast<std::size_t>(spec_.d) && dx.size() == x.size() &&
              d_out.size() == dim(),
          ErrorCode::DimensionMismatch, "expand_vjp: inconsistent sizes");
  const std::size_t p = spec_.p;
  for (std::size_t e = 0; e < dim(); ++e) {
    const T g = d_out[e] * weights_[e];
    if (g == T(0)) continue;
    const std::uint32_t* f = factors_.data() + e * p;
    for (std::size_t z = 0; z < p; ++z) {
      T partial = g;
      for (std::size_t y = 0; y < p; ++y)
        if (y != z) partial *= x[f[y]];
      dx[f[z]] += partial;
    }
  }
}

template <typename T>
ExpandedVector<T> expand(std::span<const T> x, const ExpansionSpec& spec) {
  Expander<T> expander(spec);
  return {expander.expand(x), spec};
}

template <typename T>
T expansion_inner(std::span<const T> x, std::span<const T> y, const ExpansionSpec& spec,
                  std::uint64_t shortcut_dim) {
  spec.validate();
  require(x.size() == static_cast<std::size_t>(spec.d) && y.size() == x.size(),
          ErrorCode::DimensionMismatch, "expansion_inner: inputs must have length d");
  if (expansion_dim(spec) > shortcut_dim) {
    T dot = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
    return ipow(dot, spec.p);
  }
  T acc = T(0);
  for_each_coordinate(spec, [&](std::span<const int> pos, double w) {
    T px = static_cast<T>(w), py = static_cast<T>(w);
    for (int i : pos) {
      px *= x[i];
      py *= y[i];
    }
    acc += px * py;
  });
  return acc;
}

template class Expander<float>;
template class Expander<double>;
template ExpandedVector<float> expand(std::span<const float>, const ExpansionSpec&);
template ExpandedVector<double> expand(std::span<const double>, const ExpansionSpec&);
template float expansion_inner(std::span<const float>, std::span<const float>,
                               const ExpansionSpec&, std::uint64_t);
template double expansion_inner(std::span<const double>, std::span<const double>,
                                const ExpansionSpec&, std::uint64_t);

}  // namespace powattn
