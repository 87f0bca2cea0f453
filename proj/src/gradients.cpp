#include "powattn/gradients.hpp"

#include <cmath>

#include "attend_kernel.hpp"
#include "chunk_kernels.hpp"
#include "parallel.hpp"

namespace powattn {

namespace {

using detail::GateView;

template <typename T>
StreamView<const T> rows_of(std::span<const T> data, std::size_t width) {
  return {data.data(), data.size() / width, width, width};
}

template <typename T>
StreamView<T> rows_of(std::span<T> data, std::size_t width) {
  return {data.data(), data.size() / width, width, width};
}

template <typename T>
using OptView = std::optional<StreamView<T>>;

// Adds the gradients of sum_i <dn_i, N_i> + dzeta_i zeta_i to dq, dk, dv and
// dg, where N_i = sum_j G_ij score_ij v_j and zeta_i = sum_j G_ij score_ij.
// Scores are evaluated directly (no log-space or max shift).
template <typename T>
void attention_backward(const detail::ScoreRule<T>& rule, StreamView<const T> q,
                        StreamView<const T> k, StreamView<const T> v, const GateView<T>& gates,
                        std::size_t window, StreamView<const T> dn, std::span<const T> dzeta,
                        StreamView<T> dq, StreamView<T> dk, StreamView<T> dv, OptView<T> dg) {
  const std::size_t len = q.length(), d = q.width(), vd = v.width();
  const bool linear = rule.kind == MechanismKind::Linear;
  const std::size_t dim = linear ? rule.expander->dim() : 0;

  std::vector<T> qs(d), dqs(d), gate(len), sigma(len), dgate(len);
  std::vector<T> phi_q(dim), dphi_q(dim), phi_k(len * dim), dphi_k(len * dim, T(0));
  if (linear)
    for (std::size_t j = 0; j < len; ++j)
      rule.expander->expand(k.row(j), std::span<T>(phi_k.data() + j * dim, dim));

  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t lo = (window != 0 && i + 1 > window) ? i + 1 - window : 0;
    const auto qi = q.row(i);
    for (std::size_t f = 0; f < d; ++f) qs[f] = rule.scale * qi[f];
    std::fill(dqs.begin(), dqs.end(), T(0));
    if (linear) {
      rule.expander->expand(std::span<const T>(qs), phi_q);
      std::fill(dphi_q.begin(), dphi_q.end(), T(0));
    }

    T g = T(1);
    for (std::size_t j = i + 1; j-- > lo;) {
      gate[j] = g;
      if (gates && j > lo) g *= (*gates)(j, 0);
    }

    const auto dni = dn.row(i);
    const T dzi = dzeta.empty() ? T(0) : dzeta[i];
    for (std::size_t j = lo; j <= i; ++j) {
      const auto kj = k.row(j);
      const auto vj = v.row(j);
      T a = T(0), s;
      if (linear) {
        s = detail::dot(std::span<const T>(phi_q), std::span<const T>(phi_k.data() + j * dim, dim));
      } else {
        a = detail::dot(std::span<const T>(qs), kj);
        s = rule.kind == MechanismKind::Power ? ipow(a, rule.p) : std::exp(a);
      }
      const T w = gate[j] * s;
      T dw = dzi;
      const auto dvj = dv.row(j);
      for (std::size_t f = 0; f < vd; ++f) {
        dw += dni[f] * vj[f];
        dvj[f] += w * dni[f];
      }
      const T ds = dw * gate[j];
      dgate[j] = dw * s;

      if (linear) {
        const T* pk = phi_k.data() + j * dim;
        T* dpk = dphi_k.data() + j * dim;
        for (std::size_t e = 0; e < dim; ++e) {
          dphi_q[e] += ds * pk[e];
          dpk[e] += ds * phi_q[e];
        }
      } else {
        const T da = rule.kind == MechanismKind::Power
                         ? ds * static_cast<T>(rule.p) * ipow(a, rule.p - 1)
                         : ds * s;
        const auto dkj = dk.row(j);
        for (std::size_t f = 0; f < d; ++f) {
          dqs[f] += da * kj[f];
          dkj[f] += da * qs[f];
        }
      }
    }

    if (linear) rule.expander->expand_vjp(std::span<const T>(qs), dphi_q, dqs);
    const auto dqi = dq.row(i);
    for (std::size_t f = 0; f < d; ++f) dqi[f] += rule.scale * dqs[f];

    // acc = sum_{j<m} dG_ij prod_{(j,m)} g, so that dg_m = acc * G_im.
    if (gates && dg) {
      T acc = T(0);
      for (std::size_t j = lo; j <= i; ++j) {
        if (j > lo) (*dg)(j, 0) += acc * gate[j];
        acc = (*gates)(j, 0) * acc + dgate[j];
      }
    }
  }

  if (linear)
    for (std::size_t j = 0; j < len; ++j)
      rule.expander->expand_vjp(k.row(j), std::span<const T>(dphi_k.data() + j * dim, dim),
                                dk.row(j));
}

// Backward of the chunk contribution sum_j W_j phi(k_j) [v_j^T, 1] and of the
// chunk decay, W_j being the product of gates after j within the chunk.
template <typename T>
void update_state_backward(const Expander<T>& ex, StreamView<const T> k, StreamView<const T> v,
                           const GateView<T>& gates, const T* ds, const T* dgamma, T ddecay,
                           StreamView<T> dk, StreamView<T> dv, OptView<T> dg) {
  const std::size_t len = k.length(), dim = ex.dim(), vd = v.width();
  std::vector<T> w(len), dw(len), phi(dim), dphi(dim);
  detail::chunk_decays(gates, len, std::span<T>(w));

  for (std::size_t j = 0; j < len; ++j) {
    ex.expand(k.row(j), phi);
    const auto vj = v.row(j);
    const auto dvj = dv.row(j);
    T acc = T(0);
    for (std::size_t e = 0; e < dim; ++e) {
      const T* srow = ds + e * vd;
      T u = dgamma[e];
      for (std::size_t f = 0; f < vd; ++f) {
        u += srow[f] * vj[f];
        dvj[f] += w[j] * phi[e] * srow[f];
      }
      acc += phi[e] * u;
      dphi[e] = w[j] * u;
    }
    ex.expand_vjp(k.row(j), dphi, dk.row(j));
    dw[j] = acc;
  }

  // The decay is the product over the whole chunk, i.e. a weight for a
  // virtual key before position 0.
  if (gates && dg) {
    T acc = ddecay;
    for (std::size_t l = 0; l < len; ++l) {
      (*dg)(l, 0) += acc * w[l];
      acc = (*gates)(l, 0) * acc + dw[l];
    }
  }
}

// Backward of (ya + pi phi(qs)^T S) / (zeta + pi phi(qs)^T gamma) for one
// chunk. ds/dgamma/dqs/dya/dzeta accumulate; dprefix is overwritten.
template <typename T>
void query_state_backward(const Expander<T>& ex, StreamView<const T> qs, const T* s,
                          const T* gamma, std::size_t vd, StreamView<const T> ya,
                          std::span<const T> zeta, std::span<const T> prefix, bool normalize,
                          StreamView<const T> up, T* ds, T* dgamma, StreamView<T> dqs,
                          StreamView<T> dya, std::span<T> dzeta, std::span<T> dprefix) {
  const std::size_t len = qs.length(), dim = ex.dim();
  std::vector<T> phi(dim), dphi(dim), num(vd), dnum(vd);

  for (std::size_t m = 0; m < len; ++m) {
    ex.expand(qs.row(m), phi);
    std::fill(num.begin(), num.end(), T(0));
    T den = T(0);
    for (std::size_t e = 0; e < dim; ++e) {
      den += phi[e] * gamma[e];
      const T* srow = s + e * vd;
      for (std::size_t f = 0; f < vd; ++f) num[f] += phi[e] * srow[f];
    }
    const T pi = prefix.empty() ? T(1) : prefix[m];
    const auto u = up.row(m);
    const auto ya_m = ya.row(m);
    const auto dya_m = dya.row(m);
    T dden = T(0), dpi = T(0);
    if (normalize) {
      const T total = zeta[m] + pi * den;
      if (!(total > T(0)))
        fail(ErrorCode::ZeroDenominator,
             "query_state denominator is not positive at chunk row " + std::to_string(m));
      T dtotal = T(0);
      for (std::size_t f = 0; f < vd; ++f) {
        const T y = (ya_m[f] + pi * num[f]) / total;
        const T dnf = u[f] / total;
        dtotal -= dnf * y;
        dya_m[f] += dnf;
        dnum[f] = pi * dnf;
        dpi += dnf * num[f];
      }
      dzeta[m] += dtotal;
      dden = pi * dtotal;
      dpi += dtotal * den;
    } else {
      for (std::size_t f = 0; f < vd; ++f) {
        dya_m[f] += u[f];
        dnum[f] = pi * u[f];
        dpi += u[f] * num[f];
      }
    }
    for (std::size_t e = 0; e < dim; ++e) {
      T* dsrow = ds + e * vd;
      const T* srow = s + e * vd;
      T acc = gamma[e] * dden;
      for (std::size_t f = 0; f < vd; ++f) {
        dsrow[f] += phi[e] * dnum[f];
        acc += srow[f] * dnum[f];
      }
      dgamma[e] += phi[e] * dden;
      dphi[e] = acc;
    }
    ex.expand_vjp(qs.row(m), dphi, dqs.row(m));
    if (!dprefix.empty()) dprefix[m] = dpi;
  }
}

// prefix[m] = prod_{l<=m} g_l; adds d<dprefix, prefix>/dg to dg.
template <typename T>
void prefix_backward(const GateView<T>& gates, std::span<const T> dprefix, OptView<T> dg) {
  if (!gates || !dg) return;
  const std::size_t len = dprefix.size();
  std::vector<T> before(len);
  T acc = T(1);
  for (std::size_t l = 0; l < len; ++l) {
    before[l] = acc;
    acc *= (*gates)(l, 0);
  }
  T tail = T(0);
  for (std::size_t l = len; l-- > 0;) {
    tail = dprefix[l] + (l + 1 < len ? (*gates)(l + 1, 0) * tail : T(0));
    (*dg)(l, 0) += before[l] * tail;
  }
}

template <typename T>
GradBundle<T> zero_bundle(const SequenceBatch<T>& batch) {
  GradBundle<T> g{Tensor<T>(batch.q.shape()), Tensor<T>(batch.k.shape()),
                  Tensor<T>(batch.v.shape()), std::nullopt};
  if (batch.gates) g.dgates = Tensor<T>(batch.gates->shape());
  return g;
}

template <typename T>
void check_upstream(const SequenceBatch<T>& batch, const Tensor<T>& upstream) {
  require(upstream.shape() == batch.v.shape(), ErrorCode::ShapeMismatch,
          "upstream gradient must match the output shape [b, t, h, v]");
}

}  // namespace

template <typename T>
GradBundle<T> vjp_power_attention(const SequenceBatch<T>& batch, const AttentionConfig& cfg,
                                  const Tensor<T>& upstream) {
  const AttentionOutput<T> fwd = attention(batch, cfg);
  check_upstream(batch, upstream);
  const std::size_t b = batch.batch(), t = batch.time(), h = batch.heads();
  const std::size_t d = batch.key_dim(), vd = batch.value_dim();

  std::optional<Expander<T>> ex;
  if (cfg.mechanism.kind == MechanismKind::Linear) ex.emplace(cfg.mechanism.expansion);
  const auto rule = detail::make_rule<T>(cfg, d, ex ? &*ex : nullptr);
  const std::size_t window =
      cfg.mechanism.kind == MechanismKind::Window ? static_cast<std::size_t>(cfg.mechanism.window)
                                                  : 0;
  GradBundle<T> grad = zero_bundle(batch);

  detail::parallel_for(b * h, cfg.threads, [&](std::size_t si) {
    const std::size_t bi = si / h, hi = si % h;
    const auto u = stream(upstream, bi, hi);
    const auto y = stream(fwd.y, bi, hi);
    const auto z = stream(fwd.rowsum, bi, hi);
    std::vector<T> dn(t * vd), dz(t, T(0));
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t f = 0; f < vd; ++f) {
        if (cfg.normalize) {
          dn[i * vd + f] = u(i, f) / z(i, 0);
          dz[i] -= dn[i * vd + f] * y(i, f);
        } else {
          dn[i * vd + f] = u(i, f);
        }
      }
    }
    GateView<T> gates;
    OptView<T> dg;
    if (batch.gates) {
      gates = stream(*batch.gates, bi, hi);
      dg = stream(*grad.dgates, bi, hi);
    }
    attention_backward(rule, stream(batch.q, bi, hi), stream(batch.k, bi, hi),
                       stream(batch.v, bi, hi), gates, window,
                       StreamView<const T>(dn.data(), t, vd, vd), std::span<const T>(dz),
                       stream(grad.dq, bi, hi), stream(grad.dk, bi, hi), stream(grad.dv, bi, hi),
                       dg);
  });
  return grad;
}

template <typename T>
GradBundle<T> vjp_chunked(const SequenceBatch<T>& batch, const AttentionConfig& cfg,
                          const ChunkPlan& plan, const Tensor<T>& upstream) {
  require(cfg.mechanism.has_expansion(), ErrorCode::InvalidSpec,
          "chunked gradients need a power or linear mechanism");
  batch.validate();
  cfg.validate(batch.key_dim());
  check_upstream(batch, upstream);
  require(plan.c >= 1 && plan.t == batch.time(), ErrorCode::ShapeMismatch,
          "chunk plan does not cover the batch");

  const std::size_t b = batch.batch(), t = batch.time(), h = batch.heads();
  const std::size_t d = batch.key_dim(), vd = batch.value_dim();
  const std::size_t n = plan.n_chunks();
  const Expander<T> ex(cfg.mechanism.expansion);
  const std::size_t dim = ex.dim(), sz = dim * vd;

  AttentionConfig intra_cfg = cfg;
  intra_cfg.mechanism.kind = MechanismKind::Power;
  auto rule = detail::make_rule<T>(intra_cfg, d);
  rule.log_space = false;
  const T scale = rule.scale;

  GradBundle<T> grad = zero_bundle(batch);

  detail::parallel_for(b * h, cfg.threads, [&](std::size_t si) {
    const std::size_t bi = si / h, hi = si % h;
    const auto q = stream(batch.q, bi, hi);
    const auto k = stream(batch.k, bi, hi);
    const auto v = stream(batch.v, bi, hi);
    const auto u = stream(upstream, bi, hi);
    const auto dq = stream(grad.dq, bi, hi);
    const auto dk = stream(grad.dk, bi, hi);
    const auto dv = stream(grad.dv, bi, hi);
    auto gates_of = [&](std::size_t begin, std::size_t len) -> GateView<T> {
      if (!batch.gates) return std::nullopt;
      return stream(*batch.gates, bi, hi).slice(begin, len);
    };
    auto dg_of = [&](std::size_t begin, std::size_t len) -> OptView<T> {
      if (!grad.dgates) return std::nullopt;
      return stream(*grad.dgates, bi, hi).slice(begin, len);
    };

    // Forward recompute.
    std::vector<T> ya(t * vd), zeta(t), acc_s(n * sz), acc_g(n * dim), decay(n), w(plan.c);
    detail::AttendScratch<T> attend_scratch;
    detail::ExpandScratch<T> expand_scratch;
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t begin = plan.begin(c), len = plan.length(c);
      const auto gates = gates_of(begin, len);
      detail::attend_stream(rule, q.slice(begin, len), k.slice(begin, len), v.slice(begin, len),
                            gates, 0, false, StreamView<T>(ya.data() + begin * vd, len, vd, vd),
                            StreamView<T>(zeta.data() + begin, len, 1, 1), attend_scratch);
      decay[c] = detail::chunk_decays(gates, len, std::span<T>(w));
      detail::update_state_kernel(ex, k.slice(begin, len), v.slice(begin, len),
                                  std::span<const T>(w.data(), len), acc_s.data() + c * sz,
                                  acc_g.data() + c * dim, expand_scratch);
      if (c > 0) {
        detail::discount_accumulate(decay[c], acc_s.data() + (c - 1) * sz, acc_s.data() + c * sz,
                                    sz);
        detail::discount_accumulate(decay[c], acc_g.data() + (c - 1) * dim,
                                    acc_g.data() + c * dim, dim);
      }
    }

    // Query reads: chunk c reads the accumulated state of chunk c - 1.
    std::vector<T> d_s(n * sz, T(0)), d_g(n * dim, T(0));
    std::vector<T> sink_s(sz), sink_g(dim);
    const std::vector<T> zero_s(sz, T(0)), zero_g(dim, T(0));
    std::vector<T> dya(t * vd, T(0)), dzeta(t, T(0)), qs, dqs, prefix(plan.c), dprefix(plan.c);
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t begin = plan.begin(c), len = plan.length(c);
      const auto gates = gates_of(begin, len);
      qs.resize(len * d);
      dqs.assign(len * d, T(0));
      for (std::size_t m = 0; m < len; ++m)
        for (std::size_t f = 0; f < d; ++f) qs[m * d + f] = scale * q(begin + m, f);
      detail::gate_prefix(gates, len, std::span<T>(prefix));
      const bool first = c == 0;
      query_state_backward(
          ex, StreamView<const T>(qs.data(), len, d, d),
          first ? zero_s.data() : acc_s.data() + (c - 1) * sz,
          first ? zero_g.data() : acc_g.data() + (c - 1) * dim, vd,
          StreamView<const T>(ya.data() + begin * vd, len, vd, vd),
          std::span<const T>(zeta.data() + begin, len), std::span<const T>(prefix.data(), len),
          cfg.normalize, u.slice(begin, len), first ? sink_s.data() : d_s.data() + (c - 1) * sz,
          first ? sink_g.data() : d_g.data() + (c - 1) * dim,
          StreamView<T>(dqs.data(), len, d, d),
          StreamView<T>(dya.data() + begin * vd, len, vd, vd),
          std::span<T>(dzeta.data() + begin, len), std::span<T>(dprefix.data(), len));
      for (std::size_t m = 0; m < len; ++m)
        for (std::size_t f = 0; f < d; ++f) dq(begin + m, f) += scale * dqs[m * d + f];
      prefix_backward(gates, std::span<const T>(dprefix.data(), len), dg_of(begin, len));
    }

    // Discounted sum, reversed: total_k = d_k + decay_{k+1} total_{k+1}.
    std::vector<T> ddecay(n, T(0));
    for (std::size_t c = n; c-- > 0;) {
      T* ts = d_s.data() + c * sz;
      T* tg = d_g.data() + c * dim;
      if (c + 1 < n) {
        detail::discount_accumulate(decay[c + 1], d_s.data() + (c + 1) * sz, ts, sz);
        detail::discount_accumulate(decay[c + 1], d_g.data() + (c + 1) * dim, tg, dim);
      }
      if (c > 0) {
        T acc = T(0);
        for (std::size_t i = 0; i < sz; ++i) acc += ts[i] * acc_s[(c - 1) * sz + i];
        for (std::size_t i = 0; i < dim; ++i) acc += tg[i] * acc_g[(c - 1) * dim + i];
        ddecay[c] = acc;
      }
    }

    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t begin = plan.begin(c), len = plan.length(c);
      const auto gates = gates_of(begin, len);
      update_state_backward(ex, k.slice(begin, len), v.slice(begin, len), gates,
                            d_s.data() + c * sz, d_g.data() + c * dim, ddecay[c],
                            dk.slice(begin, len), dv.slice(begin, len), dg_of(begin, len));
      attention_backward(rule, q.slice(begin, len), k.slice(begin, len), v.slice(begin, len),
                         gates, 0, StreamView<const T>(dya.data() + begin * vd, len, vd, vd),
                         std::span<const T>(dzeta.data() + begin, len), dq.slice(begin, len),
                         dk.slice(begin, len), dv.slice(begin, len), dg_of(begin, len));
    }
  });
  return grad;
}

template <typename T>
UpdateStateGrad<T> vjp_update_state(const ChunkState<T>& like, std::span<const T> keys,
                                    std::span<const T> values, std::span<const T> gates,
                                    const ChunkState<T>& d_contribution, T d_decay) {
  // The forward validates every shape.
  (void)update_state(like, keys, values, gates);
  const Expander<T> ex(like.spec);
  require(d_contribution.s.size() == ex.dim() * like.value_dim &&
              d_contribution.gamma.size() == ex.dim(),
          ErrorCode::ShapeMismatch, "vjp_update_state: gradient state has the wrong shape");
  const std::size_t d = static_cast<std::size_t>(like.spec.d), vd = like.value_dim;
  UpdateStateGrad<T> grad{std::vector<T>(keys.size(), T(0)),
                          std::vector<T>(values.size(), T(0)),
                          std::vector<T>(gates.size(), T(0))};
  GateView<T> gate_view;
  OptView<T> dg;
  if (!gates.empty()) {
    gate_view = rows_of(gates, 1);
    dg = rows_of(std::span<T>(grad.dgates), 1);
  }
  update_state_backward(ex, rows_of(keys, d), rows_of(values, vd), gate_view,
                        d_contribution.s.data(), d_contribution.gamma.data(), d_decay,
                        rows_of(std::span<T>(grad.dkeys), d),
                        rows_of(std::span<T>(grad.dvalues), vd), dg);
  return grad;
}

template <typename T>
DiscumsumGrad<T> vjp_discumsum(const std::vector<ChunkState<T>>& states,
                               std::span<const T> decays, const ChunkState<T>* initial,
                               const std::vector<ChunkState<T>>& d_out) {
  const auto out = discumsum(states, decays, initial);
  require(d_out.size() == out.size(), ErrorCode::ShapeMismatch,
          "vjp_discumsum: need one gradient per output state");
  const std::size_t n = states.size();
  DiscumsumGrad<T> grad{d_out, std::vector<T>(n, T(0)), std::nullopt};
  for (std::size_t c = 0; c < n; ++c)
    require(d_out[c].s.size() == out[c].s.size() && d_out[c].gamma.size() == out[c].gamma.size(),
            ErrorCode::ShapeMismatch, "vjp_discumsum: gradient state has the wrong shape");

  for (std::size_t c = n; c-- > 0;) {
    ChunkState<T>& total = grad.dstates[c];
    if (c + 1 < n) {
      const ChunkState<T>& next = grad.dstates[c + 1];
      detail::discount_accumulate(decays[c + 1], next.s.data(), total.s.data(), total.s.size());
      detail::discount_accumulate(decays[c + 1], next.gamma.data(), total.gamma.data(),
                                  total.gamma.size());
    }
    const ChunkState<T>* prev = c > 0 ? &out[c - 1] : initial;
    if (prev) {
      T acc = T(0);
      for (std::size_t i = 0; i < total.s.size(); ++i) acc += total.s[i] * prev->s[i];
      for (std::size_t i = 0; i < total.gamma.size(); ++i) acc += total.gamma[i] * prev->gamma[i];
      grad.ddecays[c] = acc;
    }
  }
  if (initial && n > 0) {
    ChunkState<T> d_init = ChunkState<T>::zeros(initial->spec, initial->value_dim);
    for (std::size_t i = 0; i < d_init.s.size(); ++i) d_init.s[i] = decays[0] * grad.dstates[0].s[i];
    for (std::size_t i = 0; i < d_init.gamma.size(); ++i)
      d_init.gamma[i] = decays[0] * grad.dstates[0].gamma[i];
    grad.dinitial = std::move(d_init);
  }
  return grad;
}

template <typename T>
QueryStateGrad<T> vjp_query_state(const ChunkState<T>& state, std::span<const T> queries,
                                  std::span<const T> y_attn, std::span<const T> zeta,
                                  std::span<const T> gate_prefix, bool normalize,
                                  std::span<const T> d_out) {
  const auto out = query_state(state, queries, y_attn, zeta, gate_prefix, normalize);
  require(d_out.size() == out.size(), ErrorCode::ShapeMismatch,
          "vjp_query_state: upstream must match the output [c, v]");
  const Expander<T> ex(state.spec);
  const std::size_t d = static_cast<std::size_t>(state.spec.d), vd = state.value_dim;
  const std::size_t len = queries.size() / d;
  QueryStateGrad<T> grad{ChunkState<T>::zeros(state.spec, vd),
                         std::vector<T>(queries.size(), T(0)),
                         std::vector<T>(y_attn.size(), T(0)), std::vector<T>(len, T(0)),
                         std::vector<T>(gate_prefix.size(), T(0))};
  query_state_backward(ex, rows_of(queries, d), state.s.data(), state.gamma.data(), vd,
                       rows_of(y_attn, vd), zeta, gate_prefix, normalize, rows_of(d_out, vd),
                       grad.dstate.s.data(), grad.dstate.gamma.data(),
                       rows_of(std::span<T>(grad.dqueries), d),
                       rows_of(std::span<T>(grad.dy_attn), vd), std::span<T>(grad.dzeta),
                       std::span<T>(grad.dprefix));
  return grad;
}

namespace {

double contract(const std::vector<double>& y, std::span<const double> upstream) {
  require(y.size() == upstream.size(), ErrorCode::ShapeMismatch,
          "finite_difference_oracle: upstream does not match f(x)");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += upstream[i] * y[i];
  return s;
}

double fd_coordinate(const VectorFunction& f, std::vector<double>& x, std::size_t i,
                     std::span<const double> upstream, double step, FdScheme scheme) {
  const double x0 = x[i];
  auto at = [&](double offset) {
    x[i] = x0 + offset;
    return contract(f(x), upstream);
  };
  double g;
  if (scheme == FdScheme::Central) {
    g = (at(step) - at(-step)) / (2.0 * step);
  } else {
    g = (3.0 * at(0.0) - 4.0 * at(-step) + at(-2.0 * step)) / (2.0 * step);
  }
  x[i] = x0;
  return g;
}

}  // namespace

std::vector<double> finite_difference_oracle(const VectorFunction& f, std::span<const double> x,
                                             std::span<const double> upstream, double step,
                                             FdScheme scheme) {
  return finite_difference_oracle(f, x, upstream, step,
                                  std::vector<bool>(x.size(), scheme == FdScheme::Backward2));
}

std::vector<double> finite_difference_oracle(const VectorFunction& f, std::span<const double> x,
                                             std::span<const double> upstream, double step,
                                             const std::vector<bool>& at_upper_bound) {
  require(step > 0.0, ErrorCode::InvalidSpec, "finite difference step must be positive");
  require(at_upper_bound.size() == x.size(), ErrorCode::ShapeMismatch,
          "finite_difference_oracle: one scheme flag per input");
  std::vector<double> point(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    grad[i] = fd_coordinate(f, point, i, upstream, step,
                            at_upper_bound[i] ? FdScheme::Backward2 : FdScheme::Central);
  return grad;
}

double finite_difference_oracle(const std::function<double(double)>& f, double x,
                                double upstream, double step, FdScheme scheme) {
  const VectorFunction wrapped = [&](std::span<const double> p) {
    return std::vector<double>{f(p[0])};
  };
  const double xs[1] = {x};
  const double us[1] = {upstream};
  return finite_difference_oracle(wrapped, xs, us, step, scheme)[0];
}

#define POWATTN_INSTANTIATE(T)                                                                  \
  template GradBundle<T> vjp_power_attention(const SequenceBatch<T>&, const AttentionConfig&,  \
                                             const Tensor<T>&);                                 \
  template GradBundle<T> vjp_chunked(const SequenceBatch<T>&, const AttentionConfig&,          \
                                     const ChunkPlan&, const Tensor<T>&);                       \
  template UpdateStateGrad<T> vjp_update_state(const ChunkState<T>&, std::span<const T>,       \
                                               std::span<const T>, std::span<const T>,          \
                                               const ChunkState<T>&, T);                        \
  template DiscumsumGrad<T> vjp_discumsum(const std::vector<ChunkState<T>>&,                   \
                                          std::span<const T>, const ChunkState<T>*,             \
                                          const std::vector<ChunkState<T>>&);                   \
  template QueryStateGrad<T> vjp_query_state(const ChunkState<T>&, std::span<const T>,         \
                                             std::span<const T>, std::span<const T>,            \
                                             std::span<const T>, bool, std::span<const T>);

POWATTN_INSTANTIATE(float)
POWATTN_INSTANTIATE(double)

#undef POWATTN_INSTANTIATE

}  // namespace powattn
