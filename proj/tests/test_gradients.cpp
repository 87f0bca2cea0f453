#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "powattn/gradients.hpp"
#include "test_support.hpp"

using namespace powattn;
using powattn::testing::random_batch;

namespace {

// Inputs packed as q | k | v | gates so that the oracle sees one vector.
std::vector<double> pack(const SequenceBatch<double>& b) {
  std::vector<double> x;
  for (const auto* t : {&b.q, &b.k, &b.v}) x.insert(x.end(), t->flat().begin(), t->flat().end());
  if (b.gates) x.insert(x.end(), b.gates->flat().begin(), b.gates->flat().end());
  return x;
}

SequenceBatch<double> unpack(const SequenceBatch<double>& like, std::span<const double> x) {
  SequenceBatch<double> b = like;
  std::size_t o = 0;
  for (auto* t : {&b.q, &b.k, &b.v})
    for (double& e : t->flat()) e = x[o++];
  if (b.gates)
    for (double& e : b.gates->flat()) e = x[o++];
  return b;
}

std::vector<double> pack(const GradBundle<double>& g) {
  std::vector<double> x;
  for (const auto* t : {&g.dq, &g.dk, &g.dv}) x.insert(x.end(), t->flat().begin(), t->flat().end());
  if (g.dgates) x.insert(x.end(), g.dgates->flat().begin(), g.dgates->flat().end());
  return x;
}

Tensor<double> random_upstream(const SequenceBatch<double>& b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> up(b.v.shape());
  for (double& e : up.flat()) e = u(rng);
  return up;
}

template <typename Forward>
std::vector<double> fd_gradient(const SequenceBatch<double>& batch, const Tensor<double>& up,
                                Forward&& forward, double step = 1e-4) {
  const VectorFunction f = [&](std::span<const double> x) {
    auto out = forward(unpack(batch, x));
    return std::vector<double>(out.flat().begin(), out.flat().end());
  };
  auto x = pack(batch);
  std::vector<bool> upper(x.size(), false);
  if (batch.gates) {
    const std::size_t g0 = x.size() - batch.gates->size();
    for (std::size_t i = g0; i < x.size(); ++i) upper[i] = x[i] + step > 1.0;
  }
  return finite_difference_oracle(f, x, up.flat(), step, upper);
}

AttentionConfig config_for(int variant, std::size_t d) {
  AttentionConfig cfg;
  switch (variant % 7) {
    case 0: cfg.mechanism = Mechanism::exp(); break;
    case 1: cfg.mechanism = Mechanism::exp(); cfg.normalize = true; break;
    case 2: cfg.mechanism = Mechanism::sliding_window(3); cfg.normalize = true; break;
    case 3: cfg.mechanism = Mechanism::power(ExpansionSpec::spow(2, d)); break;
    case 4: cfg.mechanism = Mechanism::power(ExpansionSpec::spow(4, d)); cfg.normalize = true; break;
    case 5: cfg.mechanism = Mechanism::power(ExpansionSpec::spow(3, d)); break;
    default: cfg.mechanism = Mechanism::linear(ExpansionSpec::tspow(2, d, 1)); break;
  }
  return cfg;
}

}  // namespace

TEST_CASE("finite difference oracle examples") {
  CHECK(std::abs(finite_difference_oracle([](double x) { return x * x; }, 3.0, 1.0, 1e-5) - 6.0) <
        1e-8);
  CHECK(std::abs(finite_difference_oracle([](double x) { return x * x; }, 1.0, 2.0, 1e-4,
                                          FdScheme::Backward2) -
                 4.0) < 1e-7);

  const std::vector<double> k{0.3, -1.2, 0.8};
  const VectorFunction inner = [&](std::span<const double> x) {
    return std::vector<double>{expansion_inner(x, std::span<const double>(k), ExpansionSpec::spow(2, 3))};
  };
  const std::vector<double> x{0.5, 0.25, -0.75}, up{1.0};
  auto g = finite_difference_oracle(inner, x, up, 1e-5);
  double xk = 0.0;
  for (int i = 0; i < 3; ++i) xk += x[i] * k[i];
  for (int i = 0; i < 3; ++i) CHECK(std::abs(g[i] - 2.0 * xk * k[i]) < 1e-6);

  const VectorFunction linear = [](std::span<const double> x) {
    return std::vector<double>{2.0 * x[0] - 0.5 * x[1], x[1]};
  };
  const std::vector<double> p{1.0, 2.0}, u2{1.0, 3.0};
  for (double step : {1e-3, 0.5, 4.0}) {
    auto gl = finite_difference_oracle(linear, p, u2, step);
    CHECK(gl[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(gl[1] == doctest::Approx(2.5).epsilon(1e-12));
  }
  CHECK_THROWS_AS(finite_difference_oracle(linear, p, u2, 0.0), Error);
}

TEST_CASE("zero upstream gives zero gradients") {
  auto batch = random_batch<double>(1, 6, 2, 3, 2, true, 1);
  AttentionConfig cfg = config_for(4, 3);
  Tensor<double> up(batch.v.shape());
  auto g = vjp_power_attention(batch, cfg, up);
  for (double x : pack(g)) CHECK(x == 0.0);
  auto gc = vjp_chunked(batch, cfg, ChunkPlan::make(6, 4), up);
  for (double x : pack(gc)) CHECK(x == 0.0);
}

TEST_CASE("single-token softmax has no score gradient") {
  auto batch = random_batch<double>(1, 1, 1, 3, 2, false, 2);
  auto up = random_upstream(batch, 3);
  for (int variant : {1, 4}) {
    auto g = vjp_power_attention(batch, config_for(variant, 3), up);
    for (double x : g.dq.flat()) CHECK(std::abs(x) < 1e-14);
    for (double x : g.dk.flat()) CHECK(std::abs(x) < 1e-14);
    CHECK(max_rel_error(g.dv, up) < 1e-14);
  }
}

TEST_CASE("attention-form gradients match finite differences") {
  for (int seed = 0; seed < 28; ++seed) {
    const std::size_t t = 2 + seed % 9, d = 2 + seed % 3, vd = 1 + seed % 4;
    auto batch = random_batch<double>(1, t, 1 + seed % 2, d, vd, seed % 3 != 0, 50 + seed, 0.4);
    auto cfg = config_for(seed, d);
    auto up = random_upstream(batch, 70 + seed);
    auto analytic = pack(vjp_power_attention(batch, cfg, up));
    auto numeric = fd_gradient(batch, up, [&](const SequenceBatch<double>& b) {
      return attention(b, cfg).y;
    });
    INFO("seed " << seed << " mechanism " << to_string(cfg.mechanism.kind));
    CHECK(max_rel_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("chunked gradients agree with attention-form gradients") {
  int seed = 0;
  for (int p : {2, 4}) {
    for (bool normalize : {false, true}) {
      for (bool gated : {false, true}) {
        const std::size_t t = 13;
        auto batch = random_batch<double>(2, t, 2, 3, 2, gated, 200 + seed, 0.3);
        AttentionConfig cfg;
        cfg.mechanism = Mechanism::power(ExpansionSpec::spow(p, 3));
        cfg.normalize = normalize;
        auto up = random_upstream(batch, 300 + seed++);
        auto reference = pack(vjp_power_attention(batch, cfg, up));
        for (std::size_t c : {1, 3, 5, 13, 20}) {
          auto chunked = pack(vjp_chunked(batch, cfg, ChunkPlan::make(t, c), up));
          CHECK(max_rel_error(chunked, reference) < 1e-7);
        }
      }
    }
  }
}

TEST_CASE("chunked gradients match finite differences") {
  for (int seed = 0; seed < 20; ++seed) {
    const std::size_t t = 8, d = 2 + seed % 3;
    const int p = seed % 2 ? 4 : 2;
    auto batch = random_batch<double>(1, t, 1, d, 2, true, 400 + seed, 0.5);
    AttentionConfig cfg;
    cfg.mechanism = Mechanism::power(ExpansionSpec::spow(p, d));
    cfg.normalize = seed % 4 < 2;
    const auto plan = ChunkPlan::make(t, 3);
    auto up = random_upstream(batch, 500 + seed);
    auto analytic = pack(vjp_chunked(batch, cfg, plan, up));
    auto numeric = fd_gradient(batch, up, [&](const SequenceBatch<double>& b) {
      return chunked_power_attention(b, cfg, plan).y;
    });
    CHECK(max_rel_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("gate gradients at g = 1 use a one-sided oracle") {
  auto batch = random_batch<double>(1, 7, 1, 2, 2, true, 9);
  batch.gates->fill(1.0);
  AttentionConfig cfg;
  cfg.mechanism = Mechanism::power(ExpansionSpec::spow(2, 2));
  const auto plan = ChunkPlan::make(7, 3);
  auto up = random_upstream(batch, 10);
  auto analytic = vjp_chunked(batch, cfg, plan, up);
  auto numeric = fd_gradient(batch, up, [&](const SequenceBatch<double>& b) {
    return chunked_power_attention(b, cfg, plan).y;
  });
  const std::size_t g0 = numeric.size() - 7;
  std::vector<double> fd_gates(numeric.begin() + g0, numeric.end());
  CHECK(max_rel_error(analytic.dgates->flat(), fd_gates) < 1e-5);
}

TEST_CASE("update_state gradients match finite differences") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1.0, 1.0), g(0.3, 1.0);
  for (int seed = 0; seed < 20; ++seed) {
    const std::size_t c = 1 + seed % 6, d = 2 + seed % 3, vd = 1 + seed % 3;
    const auto spec = seed % 2 ? ExpansionSpec::spow(2, d) : ExpansionSpec::tpow(2, d);
    const auto like = ChunkState<double>::zeros(spec, vd);
    std::vector<double> keys(c * d), values(c * vd), gates(c);
    for (double& x : keys) x = u(rng);
    for (double& x : values) x = u(rng);
    for (double& x : gates) x = g(rng);
    auto up = ChunkState<double>::zeros(spec, vd);
    for (double& x : up.s) x = u(rng);
    for (double& x : up.gamma) x = u(rng);
    const double d_decay = u(rng);

    auto grad = vjp_update_state<double>(like, keys, values, gates, up, d_decay);
    std::vector<double> x = keys;
    x.insert(x.end(), values.begin(), values.end());
    x.insert(x.end(), gates.begin(), gates.end());
    std::vector<double> upstream = up.s;
    upstream.insert(upstream.end(), up.gamma.begin(), up.gamma.end());
    upstream.push_back(d_decay);
    const VectorFunction f = [&](std::span<const double> p) {
      auto r = update_state<double>(like, p.subspan(0, c * d), p.subspan(c * d, c * vd),
                                    p.subspan(c * d + c * vd, c));
      std::vector<double> out = r.contribution.s;
      out.insert(out.end(), r.contribution.gamma.begin(), r.contribution.gamma.end());
      out.push_back(r.decay);
      return out;
    };
    auto numeric = finite_difference_oracle(f, x, upstream, 1e-4);
    std::vector<double> analytic = grad.dkeys;
    analytic.insert(analytic.end(), grad.dvalues.begin(), grad.dvalues.end());
    analytic.insert(analytic.end(), grad.dgates.begin(), grad.dgates.end());
    CHECK(max_rel_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("discumsum gradients match finite differences") {
  std::mt19937_64 rng(88);
  std::uniform_real_distribution<double> u(-1.0, 1.0), g(0.0, 1.0);
  const auto spec = ExpansionSpec::spow(2, 2);
  for (int seed = 0; seed < 20; ++seed) {
    const std::size_t n = 1 + seed % 5, vd = 2;
    const bool with_initial = seed % 2 == 0;
    std::vector<ChunkState<double>> states, d_out;
    std::vector<double> decays(n);
    for (std::size_t k = 0; k < n; ++k) {
      auto s = ChunkState<double>::zeros(spec, vd), ds = s;
      for (double& x : s.s) x = u(rng);
      for (double& x : s.gamma) x = u(rng);
      for (double& x : ds.s) x = u(rng);
      for (double& x : ds.gamma) x = u(rng);
      states.push_back(s);
      d_out.push_back(ds);
      decays[k] = g(rng);
    }
    auto init = ChunkState<double>::zeros(spec, vd);
    for (double& x : init.s) x = u(rng);
    for (double& x : init.gamma) x = u(rng);
    const ChunkState<double>* init_ptr = with_initial ? &init : nullptr;
    auto grad = vjp_discumsum<double>(states, decays, init_ptr, d_out);

    const std::size_t per = states[0].s.size() + states[0].gamma.size();
    auto flatten = [](const std::vector<ChunkState<double>>& xs) {
      std::vector<double> out;
      for (const auto& s : xs) {
        out.insert(out.end(), s.s.begin(), s.s.end());
        out.insert(out.end(), s.gamma.begin(), s.gamma.end());
      }
      return out;
    };
    std::vector<double> x = flatten(states);
    x.insert(x.end(), decays.begin(), decays.end());
    if (with_initial) {
      auto fi = flatten({init});
      x.insert(x.end(), fi.begin(), fi.end());
    }
    const VectorFunction f = [&](std::span<const double> p) {
      auto st = states;
      std::size_t o = 0;
      for (auto& s : st) {
        for (double& e : s.s) e = p[o++];
        for (double& e : s.gamma) e = p[o++];
      }
      std::vector<double> lam(p.begin() + o, p.begin() + o + n);
      o += n;
      auto in = init;
      if (with_initial) {
        for (double& e : in.s) e = p[o++];
        for (double& e : in.gamma) e = p[o++];
      }
      return flatten(discumsum<double>(st, lam, with_initial ? &in : nullptr));
    };
    auto numeric = finite_difference_oracle(f, x, flatten(d_out), 1e-4);
    std::vector<double> analytic = flatten(grad.dstates);
    analytic.insert(analytic.end(), grad.ddecays.begin(), grad.ddecays.end());
    if (with_initial) {
      REQUIRE(grad.dinitial);
      auto fi = flatten({*grad.dinitial});
      analytic.insert(analytic.end(), fi.begin(), fi.end());
    } else {
      CHECK(!grad.dinitial);
    }
    CHECK(analytic.size() == n * per + n + (with_initial ? per : 0));
    CHECK(max_rel_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("query_state gradients match finite differences") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.5, 1.5), g(0.2, 1.0);
  for (int seed = 0; seed < 20; ++seed) {
    const std::size_t c = 1 + seed % 5, d = 2 + seed % 2, vd = 1 + seed % 3;
    const bool normalize = seed % 2 == 0;
    const auto spec = ExpansionSpec::spow(2, d);
    auto state = ChunkState<double>::zeros(spec, vd);
    for (double& x : state.s) x = u(rng);
    // Positive gamma keeps the normalized denominator away from zero.
    for (double& x : state.gamma) x = pos(rng);
    std::vector<double> q(c * d), ya(c * vd), zeta(c), prefix(c), up(c * vd);
    for (double& x : q) x = u(rng);
    for (double& x : ya) x = u(rng);
    for (double& x : zeta) x = pos(rng);
    for (double& x : prefix) x = g(rng);
    for (double& x : up) x = u(rng);

    auto grad = vjp_query_state<double>(state, q, ya, zeta, prefix, normalize, up);
    std::vector<double> x = state.s;
    for (const auto* part : {&state.gamma, &q, &ya, &zeta, &prefix})
      x.insert(x.end(), part->begin(), part->end());
    const VectorFunction f = [&](std::span<const double> p) {
      auto st = state;
      std::size_t o = 0;
      for (double& e : st.s) e = p[o++];
      for (double& e : st.gamma) e = p[o++];
      auto take = [&](std::size_t k) {
        auto s = p.subspan(o, k);
        o += k;
        return s;
      };
      auto qq = take(c * d), yy = take(c * vd), zz = take(c), pp = take(c);
      return query_state<double>(st, qq, yy, zz, pp, normalize);
    };
    auto numeric = finite_difference_oracle(f, x, up, 1e-4);
    std::vector<double> analytic = grad.dstate.s;
    for (const auto* part : {&grad.dstate.gamma, &grad.dqueries, &grad.dy_attn, &grad.dzeta,
                             &grad.dprefix})
      analytic.insert(analytic.end(), part->begin(), part->end());
    CHECK(max_rel_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("gradients are linear in the upstream") {
  auto batch = random_batch<double>(1, 9, 2, 3, 2, true, 31);
  AttentionConfig cfg = config_for(4, 3);
  auto u1 = random_upstream(batch, 1), u2 = random_upstream(batch, 2);
  const double a = -1.75;
  Tensor<double> mix(u1.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * u1[i] + u2[i];
  for (int form = 0; form < 2; ++form) {
    auto vjp = [&](const Tensor<double>& u) {
      return pack(form == 0 ? vjp_power_attention(batch, cfg, u)
                            : vjp_chunked(batch, cfg, ChunkPlan::make(9, 4), u));
    };
    auto g1 = vjp(u1), g2 = vjp(u2), gm = vjp(mix);
    for (std::size_t i = 0; i < g1.size(); ++i) g1[i] = a * g1[i] + g2[i];
    CHECK(max_rel_error(gm, g1) < 1e-12);
  }
}

TEST_CASE("gradient causality") {
  const std::size_t t = 10, cut = 5;
  auto batch = random_batch<double>(1, t, 1, 3, 2, true, 12);
  AttentionConfig cfg = config_for(3, 3);
  auto up = random_upstream(batch, 13);
  for (std::size_t i = cut; i < t; ++i)
    for (std::size_t f = 0; f < 2; ++f) up.at(0, i, 0, f) = 0.0;
  for (int form = 0; form < 2; ++form) {
    auto g = form == 0 ? vjp_power_attention(batch, cfg, up)
                       : vjp_chunked(batch, cfg, ChunkPlan::make(t, 3), up);
    for (std::size_t j = cut; j < t; ++j) {
      for (std::size_t f = 0; f < 2; ++f) CHECK(g.dv.at(0, j, 0, f) == 0.0);
      for (std::size_t f = 0; f < 3; ++f) CHECK(g.dk.at(0, j, 0, f) == 0.0);
    }
  }
}

TEST_CASE("gradient shapes and errors") {
  auto batch = random_batch<double>(2, 4, 3, 2, 5, false, 4);
  AttentionConfig cfg = config_for(3, 2);
  auto g = vjp_power_attention(batch, cfg, random_upstream(batch, 5));
  CHECK(g.dq.shape() == batch.q.shape());
  CHECK(g.dv.shape() == batch.v.shape());
  CHECK(!g.dgates);
  Tensor<double> wrong({2, 4, 3, 4});
  CHECK_THROWS_AS(vjp_power_attention(batch, cfg, wrong), Error);
  CHECK_THROWS_AS(vjp_chunked(batch, cfg, ChunkPlan::make(4, 2), wrong), Error);
}

TEST_CASE("single precision gradients track double precision") {
  auto bd = random_batch<double>(1, 12, 1, 3, 2, true, 6);
  auto bf = random_batch<float>(1, 12, 1, 3, 2, true, 6);
  AttentionConfig cfg = config_for(4, 3);
  auto ud = random_upstream(bd, 7);
  Tensor<float> uf(ud.shape());
  for (std::size_t i = 0; i < ud.size(); ++i) uf[i] = static_cast<float>(ud[i]);
  auto gd = vjp_chunked(bd, cfg, ChunkPlan::make(12, 5), ud);
  auto gf = vjp_chunked(bf, cfg, ChunkPlan::make(12, 5), uf);
  CHECK(max_rel_error(gf.dq, gd.dq) < 1e-3);
  CHECK(max_rel_error(gf.dv, gd.dv) < 1e-3);
}
