#include "powattn/chunked.hpp"

#include <chrono>

#include "attend_kernel.hpp"
#include "chunk_kernels.hpp"
#include "parallel.hpp"

namespace powattn {

template <typename T>
ChunkState<T> ChunkState<T>::zeros(const ExpansionSpec& spec, std::size_t value_dim) {
  const std::uint64_t dim = expansion_dim(spec);
  require(dim <= kMaxMaterializedDim, ErrorCode::Overflow,
          describe(spec) + " cannot be materialized");
  ChunkState state;
  state.spec = spec;
  state.value_dim = value_dim;
  state.s.assign(dim * value_dim, T(0));
  state.gamma.assign(dim, T(0));
  return state;
}

ChunkPlan ChunkPlan::make(std::size_t t, std::size_t c) {
  require(c >= 1, ErrorCode::InvalidSpec, "chunk size must be >= 1");
  return ChunkPlan{t, c};
}

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t elapsed_ns(Clock::time_point start) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count());
}

template <typename T>
void check_budget(const ExpansionSpec& spec, std::size_t value_dim, std::uint64_t states,
                  std::uint64_t budget) {
  const long double bytes = static_cast<long double>(expansion_dim(spec)) *
                            static_cast<long double>(value_dim + 1) *
                            static_cast<long double>(states) * sizeof(T);
  if (bytes > static_cast<long double>(budget))
    fail(ErrorCode::StateTooLarge,
         describe(spec) + " with v=" + std::to_string(value_dim) + " needs " +
             std::to_string(static_cast<double>(bytes)) + " bytes of state, budget is " +
             std::to_string(budget));
}

void check_degree_mechanism(const AttentionConfig& cfg) {
  require(cfg.mechanism.has_expansion(), ErrorCode::InvalidSpec,
          "recurrent and chunked forms need a power or linear mechanism with an expansion");
}

template <typename T>
void scale_rows(StreamView<const T> src, T scale, std::vector<T>& dst) {
  const std::size_t len = src.length(), d = src.width();
  dst.resize(len * d);
  for (std::size_t i = 0; i < len; ++i) {
    const auto row = src.row(i);
    for (std::size_t f = 0; f < d; ++f) dst[i * d + f] = scale * row[f];
  }
}

template <typename T>
StreamView<const T> contiguous(const std::vector<T>& data, std::size_t rows, std::size_t width) {
  return {data.data(), rows, width, width};
}

template <typename T>
StreamView<const T> contiguous(std::span<const T> data, std::size_t width) {
  return {data.data(), width == 0 ? 0 : data.size() / width, width, width};
}

const ExpansionSpec& validated_expansion(const AttentionConfig& cfg) {
  check_degree_mechanism(cfg);
  cfg.validate(static_cast<std::size_t>(cfg.mechanism.expansion.d));
  return cfg.mechanism.expansion;
}

// Intra-chunk attention always forms (scale q.k)^p directly or in log space;
// phi only enters through the state kernels.
AttentionConfig intra_chunk_config(const AttentionConfig& cfg) {
  AttentionConfig intra = cfg;
  intra.mechanism.kind = MechanismKind::Power;
  intra.normalize = false;
  return intra;
}

}  // namespace

template <typename T>
AttentionOutput<T> recurrent_power_attention(const SequenceBatch<T>& batch,
                                             const AttentionConfig& cfg,
                                             const EngineOptions& options) {
  check_degree_mechanism(cfg);
  batch.validate();
  cfg.validate(batch.key_dim());
  const ExpansionSpec& spec = cfg.mechanism.expansion;
  const std::size_t b = batch.batch(), t = batch.time(), h = batch.heads();
  const std::size_t vd = batch.value_dim();
  check_budget<T>(spec, vd, 1, options.state_budget_bytes);

  const Expander<T> ex(spec);
  const std::size_t dim = ex.dim();
  const T scale = static_cast<T>(cfg.resolved_scale(batch.key_dim()));
  AttentionOutput<T> out{Tensor<T>({b, t, h, vd}), Tensor<T>({b, t, h})};

  detail::parallel_for(b * h, cfg.threads, [&](std::size_t stream_index) {
    const std::size_t bi = stream_index / h, hi = stream_index % h;
    const auto q = stream(batch.q, bi, hi);
    const auto k = stream(batch.k, bi, hi);
    const auto v = stream(batch.v, bi, hi);
    const auto y = stream(out.y, bi, hi);
    const auto rowsum = stream(out.rowsum, bi, hi);
    std::vector<T> s(dim * vd, T(0)), gamma(dim, T(0)), phi(dim), qs(batch.key_dim());
    std::vector<T> num(vd);

    for (std::size_t i = 0; i < t; ++i) {
      const T g = batch.gates ? (*batch.gates).at(bi, i, hi) : T(1);
      const auto qi = q.row(i), ki = k.row(i), vi = v.row(i);
      for (std::size_t f = 0; f < qs.size(); ++f) qs[f] = scale * qi[f];

      // Read the state before token i and add the own-token term in closed
      // form: phi(q).phi(k) cancels badly when (q.k)^p is tiny.
      ex.expand(qs, phi);
      std::fill(num.begin(), num.end(), T(0));
      T den = T(0);
      for (std::size_t e = 0; e < dim; ++e) {
        const T a = phi[e];
        den += a * gamma[e];
        const T* srow = s.data() + e * vd;
        for (std::size_t f = 0; f < vd; ++f) num[f] += a * srow[f];
      }
      T qk = T(0);
      for (std::size_t f = 0; f < qs.size(); ++f) qk += qs[f] * ki[f];
      const T own = ipow(qk, spec.p);
      den = g * den + own;
      for (std::size_t f = 0; f < vd; ++f) num[f] = g * num[f] + own * vi[f];

      ex.expand(ki, phi);
      for (std::size_t e = 0; e < dim; ++e) {
        T* srow = s.data() + e * vd;
        for (std::size_t f = 0; f < vd; ++f) srow[f] = g * srow[f] + phi[e] * vi[f];
        gamma[e] = g * gamma[e] + phi[e];
      }

      const auto yi = y.row(i);
      if (cfg.normalize) {
        if (!(den > T(0)))
          fail(ErrorCode::ZeroDenominator,
               "recurrent denominator is not positive at position " + std::to_string(i));
        for (std::size_t f = 0; f < vd; ++f) yi[f] = num[f] / den;
      } else {
        for (std::size_t f = 0; f < vd; ++f) yi[f] = num[f];
      }
      rowsum(i, 0) = den;
    }
  });
  return out;
}

template <typename T>
ChunkUpdate<T> update_state(const ChunkState<T>& like, std::span<const T> keys,
                            std::span<const T> values, std::span<const T> gates) {
  const ExpansionSpec& spec = like.spec;
  spec.validate();
  const std::size_t d = static_cast<std::size_t>(spec.d);
  const std::size_t vd = like.value_dim;
  require(vd >= 1 && keys.size() % d == 0 && !keys.empty(), ErrorCode::DimensionMismatch,
          "update_state: keys must be a non-empty [c, d] block");
  const std::size_t len = keys.size() / d;
  require(values.size() == len * vd, ErrorCode::DimensionMismatch,
          "update_state: values must be [c, v]");
  require(gates.empty() || gates.size() == len, ErrorCode::DimensionMismatch,
          "update_state: gates must have one entry per key");

  const Expander<T> ex(spec);
  ChunkUpdate<T> result{ChunkState<T>::zeros(spec, vd), T(1)};
  detail::GateView<T> gate_view;
  if (!gates.empty()) gate_view = contiguous(gates, 1);
  std::vector<T> w(len);
  result.decay = detail::chunk_decays(gate_view, len, std::span<T>(w));
  detail::ExpandScratch<T> scratch;
  detail::update_state_kernel(ex, contiguous(keys, d), contiguous(values, vd),
                              std::span<const T>(w), result.contribution.s.data(),
                              result.contribution.gamma.data(), scratch);
  return result;
}

template <typename T>
std::vector<ChunkState<T>> discumsum(const std::vector<ChunkState<T>>& states,
                                     std::span<const T> decays, const ChunkState<T>* initial) {
  require(decays.size() == states.size(), ErrorCode::ShapeMismatch,
          "discumsum: need one decay per chunk state");
  std::vector<ChunkState<T>> out = states;
  const ChunkState<T>* prev = initial;
  for (std::size_t k = 0; k < out.size(); ++k) {
    ChunkState<T>& cur = out[k];
    const ChunkState<T>& ref = prev ? *prev : states.front();
    require(cur.spec == ref.spec && cur.value_dim == ref.value_dim &&
                cur.s.size() == ref.s.size() && cur.gamma.size() == ref.gamma.size(),
            ErrorCode::ShapeMismatch, "discumsum: states differ in shape");
    if (prev) {
      detail::discount_accumulate(decays[k], prev->s.data(), cur.s.data(), cur.s.size());
      detail::discount_accumulate(decays[k], prev->gamma.data(), cur.gamma.data(),
                                  cur.gamma.size());
    }
    prev = &cur;
  }
  return out;
}

template <typename T>
std::vector<T> query_state(const ChunkState<T>& state, std::span<const T> queries,
                           std::span<const T> y_attn, std::span<const T> zeta,
                           std::span<const T> gate_prefix, bool normalize) {
  const ExpansionSpec& spec = state.spec;
  spec.validate();
  const std::size_t d = static_cast<std::size_t>(spec.d);
  const std::size_t vd = state.value_dim;
  require(!queries.empty() && queries.size() % d == 0, ErrorCode::DimensionMismatch,
          "query_state: queries must be a non-empty [c, d] block");
  const std::size_t len = queries.size() / d;
  require(y_attn.size() == len * vd && zeta.size() == len, ErrorCode::DimensionMismatch,
          "query_state: y_attn must be [c, v] and zeta [c]");
  require(gate_prefix.empty() || gate_prefix.size() == len, ErrorCode::DimensionMismatch,
          "query_state: gate_prefix must have one entry per query");
  if (normalize && spec.p % 2 != 0)
    fail(ErrorCode::OddPowerWithNormalize, "normalization needs an even power");

  const Expander<T> ex(spec);
  require(state.s.size() == ex.dim() * vd && state.gamma.size() == ex.dim(),
          ErrorCode::DimensionMismatch, "query_state: state does not match its spec");
  detail::ExpandScratch<T> scratch;
  detail::read_state_kernel(ex, contiguous(queries, d), state.s.data(), state.gamma.data(), vd,
                            scratch);
  std::vector<T> out(len * vd);
  detail::combine_query(len, vd, contiguous(y_attn, vd), zeta, gate_prefix, normalize, scratch,
                        StreamView<T>(out.data(), len, vd, vd), std::span<T>());
  return out;
}

template <typename T>
AttentionOutput<T> chunked_power_attention(const SequenceBatch<T>& batch,
                                           const AttentionConfig& cfg, const ChunkPlan& plan,
                                           const EngineOptions& options) {
  check_degree_mechanism(cfg);
  batch.validate();
  cfg.validate(batch.key_dim());
  require(plan.c >= 1, ErrorCode::InvalidSpec, "chunk size must be >= 1");
  require(plan.t == batch.time(), ErrorCode::ShapeMismatch,
          "chunk plan covers t=" + std::to_string(plan.t) + " but the batch has t=" +
              std::to_string(batch.time()));

  const ExpansionSpec& spec = cfg.mechanism.expansion;
  const std::size_t b = batch.batch(), t = batch.time(), h = batch.heads();
  const std::size_t d = batch.key_dim(), vd = batch.value_dim();
  const std::size_t streams = b * h;
  const std::size_t n = plan.n_chunks();
  check_budget<T>(spec, vd, static_cast<std::uint64_t>(streams) * n, options.state_budget_bytes);

  const Expander<T> ex(spec);
  const std::size_t dim = ex.dim();
  const AttentionConfig intra_cfg = intra_chunk_config(cfg);
  const auto rule = detail::make_rule<T>(intra_cfg, d);
  const T scale = rule.scale;

  AttentionOutput<T> out{Tensor<T>({b, t, h, vd}), Tensor<T>({b, t, h})};

  struct StreamWork {
    std::vector<T> y_attn;  // t x v
    std::vector<T> zeta;    // t
    std::vector<T> s;       // n x D x v
    std::vector<T> gamma;   // n x D
    std::vector<T> decay;   // n
  };
  std::vector<StreamWork> work(streams);
  for (auto& w : work) {
    w.y_attn.assign(t * vd, T(0));
    w.zeta.assign(t, T(0));
    w.s.assign(n * dim * vd, T(0));
    w.gamma.assign(n * dim, T(0));
    w.decay.assign(n, T(1));
  }

  auto gates_of = [&](std::size_t bi, std::size_t hi, std::size_t begin,
                      std::size_t len) -> detail::GateView<T> {
    if (!batch.gates) return std::nullopt;
    return stream(*batch.gates, bi, hi).slice(begin, len);
  };

  // Stage 1: causal attention inside each chunk, unnormalized.
  auto start = Clock::now();
  detail::parallel_for(streams, cfg.threads, [&](std::size_t si) {
    const std::size_t bi = si / h, hi = si % h;
    detail::AttendScratch<T> scratch;
    StreamWork& w = work[si];
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t begin = plan.begin(c), len = plan.length(c);
      detail::attend_stream(rule, stream(batch.q, bi, hi).slice(begin, len),
                            stream(batch.k, bi, hi).slice(begin, len),
                            stream(batch.v, bi, hi).slice(begin, len),
                            gates_of(bi, hi, begin, len), 0, false,
                            StreamView<T>(w.y_attn.data() + begin * vd, len, vd, vd),
                            StreamView<T>(w.zeta.data() + begin, len, 1, 1), scratch);
    }
  });
  if (options.probe) options.probe->nanoseconds.intra_attention += elapsed_ns(start);

  // Stage 2: per-chunk state contributions and chunk decays.
  start = Clock::now();
  detail::parallel_for(streams, cfg.threads, [&](std::size_t si) {
    const std::size_t bi = si / h, hi = si % h;
    detail::ExpandScratch<T> scratch;
    std::vector<T> wts(plan.c);
    StreamWork& w = work[si];
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t begin = plan.begin(c), len = plan.length(c);
      const auto gates = gates_of(bi, hi, begin, len);
      w.decay[c] = detail::chunk_decays(gates, len, std::span<T>(wts));
      detail::update_state_kernel(ex, stream(batch.k, bi, hi).slice(begin, len),
                                  stream(batch.v, bi, hi).slice(begin, len),
                                  std::span<const T>(wts.data(), len),
                                  w.s.data() + c * dim * vd, w.gamma.data() + c * dim, scratch);
    }
  });
  if (options.probe) options.probe->nanoseconds.update_state += elapsed_ns(start);

  // Stage 3: discounted accumulation across chunks from the zero state.
  start = Clock::now();
  detail::parallel_for(streams, cfg.threads, [&](std::size_t si) {
    StreamWork& w = work[si];
    const std::vector<T> zero_s(dim * vd, T(0)), zero_gamma(dim, T(0));
    for (std::size_t c = 0; c < n; ++c) {
      const T* prev_s = c == 0 ? zero_s.data() : w.s.data() + (c - 1) * dim * vd;
      const T* prev_g = c == 0 ? zero_gamma.data() : w.gamma.data() + (c - 1) * dim;
      detail::discount_accumulate(w.decay[c], prev_s, w.s.data() + c * dim * vd, dim * vd);
      detail::discount_accumulate(w.decay[c], prev_g, w.gamma.data() + c * dim, dim);
    }
  });
  if (options.probe) options.probe->nanoseconds.discumsum += elapsed_ns(start);

  // Stage 4: read the state entering each chunk and combine with stage 1.
  start = Clock::now();
  detail::parallel_for(streams, cfg.threads, [&](std::size_t si) {
    const std::size_t bi = si / h, hi = si % h;
    detail::ExpandScratch<T> scratch;
    std::vector<T> qs, prefix(plan.c);
    const std::vector<T> zero_s(dim * vd, T(0)), zero_gamma(dim, T(0));
    StreamWork& w = work[si];
    const auto y = stream(out.y, bi, hi);
    const auto rowsum = stream(out.rowsum, bi, hi);
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t begin = plan.begin(c), len = plan.length(c);
      const T* s = c == 0 ? zero_s.data() : w.s.data() + (c - 1) * dim * vd;
      const T* gamma = c == 0 ? zero_gamma.data() : w.gamma.data() + (c - 1) * dim;
      scale_rows(stream(batch.q, bi, hi).slice(begin, len), scale, qs);
      detail::gate_prefix(gates_of(bi, hi, begin, len), len, std::span<T>(prefix));
      detail::read_state_kernel(ex, contiguous(qs, len, d), s, gamma, vd, scratch);
      std::vector<T> denom(len);
      detail::combine_query(len, vd,
                            StreamView<const T>(w.y_attn.data() + begin * vd, len, vd, vd),
                            std::span<const T>(w.zeta.data() + begin, len),
                            std::span<const T>(prefix.data(), len), cfg.normalize, scratch,
                            y.slice(begin, len), std::span<T>(denom));
      for (std::size_t m = 0; m < len; ++m) rowsum(begin + m, 0) = denom[m];
    }
  });
  if (options.probe) options.probe->nanoseconds.query_state += elapsed_ns(start);

  if (options.probe) {
    StageCounts& macs = options.probe->macs;
    const auto p = static_cast<std::uint64_t>(spec.p);
    const auto D = static_cast<std::uint64_t>(dim);
    for (std::size_t si = 0; si < streams; ++si) {
      for (std::size_t c = 0; c < n; ++c) {
        const auto len = static_cast<std::uint64_t>(plan.length(c));
        macs.intra_attention += len * (len + 1) / 2 * (d + vd);
        macs.expansion += 2 * len * D * p;
        macs.update_state += len * D * (vd + 1);
        macs.discumsum += D * (vd + 1);
        macs.query_state += len * D * (vd + 1);
      }
    }
  }
  return out;
}

template <typename T>
ChunkedStream<T>::ChunkedStream(const AttentionConfig& cfg, std::size_t batch,
                                std::size_t heads, std::size_t value_dim)
    : ChunkedStream(cfg, batch, heads, value_dim, {}) {}

template <typename T>
ChunkedStream<T>::ChunkedStream(const AttentionConfig& cfg, std::size_t batch,
                                std::size_t heads, std::size_t value_dim,
                                std::vector<ChunkState<T>> initial)
    : cfg_(cfg),
      batch_(batch),
      heads_(heads),
      value_dim_(value_dim),
      expander_(validated_expansion(cfg)),
      states_(std::move(initial)) {
  if (states_.empty()) {
    states_.reserve(batch * heads);
    for (std::size_t i = 0; i < batch * heads; ++i)
      states_.push_back(ChunkState<T>::zeros(cfg.mechanism.expansion, value_dim));
  }
  require(states_.size() == batch * heads, ErrorCode::ShapeMismatch,
          "ChunkedStream: need one initial state per (batch, head)");
  for (const auto& s : states_) {
    require(s.spec == cfg.mechanism.expansion && s.value_dim == value_dim &&
                s.gamma.size() == expander_.dim() && s.s.size() == expander_.dim() * value_dim,
            ErrorCode::ShapeMismatch, "ChunkedStream: initial state does not match config");
  }
}

template <typename T>
AttentionOutput<T> ChunkedStream<T>::process(const SequenceBatch<T>& block) {
  block.validate();
  require(block.batch() == batch_ && block.heads() == heads_ && block.value_dim() == value_dim_,
          ErrorCode::ShapeMismatch, "ChunkedStream: block shape differs from the stream");
  cfg_.validate(block.key_dim());
  const std::size_t len = block.time(), d = block.key_dim(), vd = value_dim_;
  const auto rule = detail::make_rule<T>(intra_chunk_config(cfg_), d);
  const std::size_t dim = expander_.dim();
  AttentionOutput<T> out{Tensor<T>({batch_, len, heads_, vd}), Tensor<T>({batch_, len, heads_})};
  if (len == 0) return out;

  detail::parallel_for(batch_ * heads_, cfg_.threads, [&](std::size_t si) {
    const std::size_t bi = si / heads_, hi = si % heads_;
    ChunkState<T>& state = states_[si];
    detail::GateView<T> gates;
    if (block.gates) gates = stream(*block.gates, bi, hi);

    std::vector<T> y_attn(len * vd), zeta(len);
    detail::AttendScratch<T> attend_scratch;
    detail::attend_stream(rule, stream(block.q, bi, hi), stream(block.k, bi, hi),
                          stream(block.v, bi, hi), gates, 0, false,
                          StreamView<T>(y_attn.data(), len, vd, vd),
                          StreamView<T>(zeta.data(), len, 1, 1), attend_scratch);

    std::vector<T> qs, prefix(len), denom(len);
    scale_rows(stream(block.q, bi, hi), rule.scale, qs);
    detail::gate_prefix(gates, len, std::span<T>(prefix));
    detail::ExpandScratch<T> scratch;
    detail::read_state_kernel(expander_, contiguous(qs, len, d), state.s.data(),
                              state.gamma.data(), vd, scratch);
    detail::combine_query(len, vd, contiguous(y_attn, len, vd), std::span<const T>(zeta),
                          std::span<const T>(prefix), cfg_.normalize, scratch,
                          stream(out.y, bi, hi), std::span<T>(denom));
    const auto rowsum = stream(out.rowsum, bi, hi);
    for (std::size_t m = 0; m < len; ++m) rowsum(m, 0) = denom[m];

    std::vector<T> w(len), contribution(dim * vd), gamma(dim);
    const T decay = detail::chunk_decays(gates, len, std::span<T>(w));
    detail::update_state_kernel(expander_, stream(block.k, bi, hi), stream(block.v, bi, hi),
                                std::span<const T>(w), contribution.data(), gamma.data(),
                                scratch);
    detail::discount_accumulate(decay, state.s.data(), contribution.data(), contribution.size());
    detail::discount_accumulate(decay, state.gamma.data(), gamma.data(), gamma.size());
    state.s = std::move(contribution);
    state.gamma = std::move(gamma);
  });
  tokens_seen_ += len;
  return out;
}

#define POWATTN_INSTANTIATE(T)                                                                \
  template struct ChunkState<T>;                                                              \
  template class ChunkedStream<T>;                                                            \
  template AttentionOutput<T> recurrent_power_attention(const SequenceBatch<T>&,              \
                                                        const AttentionConfig&,               \
                                                        const EngineOptions&);                \
  template ChunkUpdate<T> update_state(const ChunkState<T>&, std::span<const T>,              \
                                       std::span<const T>, std::span<const T>);               \
  template std::vector<ChunkState<T>> discumsum(const std::vector<ChunkState<T>>&,            \
                                                std::span<const T>, const ChunkState<T>*);    \
  template std::vector<T> query_state(const ChunkState<T>&, std::span<const T>,               \
                                      std::span<const T>, std::span<const T>,                 \
                                      std::span<const T>, bool);                              \
  template AttentionOutput<T> chunked_power_attention(const SequenceBatch<T>&,                \
                                                      const AttentionConfig&, const ChunkPlan&, \
                                                      const EngineOptions&);

POWATTN_INSTANTIATE(float)
POWATTN_INSTANTIATE(double)

#undef POWATTN_INSTANTIATE

}  // namespace powattn
