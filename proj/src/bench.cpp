#include "powattn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "powattn/gradients.hpp"

namespace powattn {

std::string_view to_string(Dtype dtype) noexcept { return dtype == Dtype::F32 ? "f32" : "f64"; }

std::string_view to_string(Form form) noexcept {
  switch (form) {
    case Form::Attention: return "attention";
    case Form::Recurrent: return "recurrent";
    case Form::Chunked: return "chunked";
  }
  return "?";
}

Dtype parse_dtype(std::string_view name) {
  if (name == "f32" || name == "float32") return Dtype::F32;
  if (name == "f64" || name == "float64") return Dtype::F64;
  fail(ErrorCode::InvalidSpec, "unknown dtype '" + std::string(name) + "' (f32, f64)");
}

Form parse_form(std::string_view name) {
  if (name == "attention") return Form::Attention;
  if (name == "recurrent") return Form::Recurrent;
  if (name == "chunked") return Form::Chunked;
  fail(ErrorCode::InvalidSpec,
       "unknown form '" + std::string(name) + "' (attention, recurrent, chunked)");
}

MechanismKind parse_mechanism(std::string_view name) {
  if (name == "exp" || name == "softmax") return MechanismKind::Exp;
  if (name == "window") return MechanismKind::Window;
  if (name == "linear") return MechanismKind::Linear;
  if (name == "power") return MechanismKind::Power;
  fail(ErrorCode::InvalidSpec,
       "unknown mechanism '" + std::string(name) + "' (exp, window, linear, power)");
}

namespace {

int default_tile(std::size_t d) {
  for (int tile = 8; tile > 1; --tile)
    if (d % static_cast<std::size_t>(tile) == 0) return tile;
  return 1;
}

ExpansionSpec make_spec(ExpansionKind kind, int p, std::size_t d, int d_tile) {
  const int di = static_cast<int>(d);
  switch (kind) {
    case ExpansionKind::Tpow: return ExpansionSpec::tpow(p, di);
    case ExpansionKind::Spow: return ExpansionSpec::spow(p, di);
    case ExpansionKind::Tspow: return ExpansionSpec::tspow(p, di, d_tile ? d_tile : default_tile(d));
  }
  return ExpansionSpec::spow(p, di);
}

}  // namespace

ExpansionSpec BenchConfig::expansion() const { return make_spec(kind, p, d, d_tile); }

AttentionConfig BenchConfig::attention_config() const {
  AttentionConfig cfg;
  switch (mechanism) {
    case MechanismKind::Exp: cfg.mechanism = Mechanism::exp(); break;
    case MechanismKind::Window: cfg.mechanism = Mechanism::sliding_window(window); break;
    case MechanismKind::Linear: cfg.mechanism = Mechanism::linear(expansion()); break;
    case MechanismKind::Power: cfg.mechanism = Mechanism::power(expansion()); break;
  }
  cfg.scale = scale;
  cfg.normalize = normalize;
  cfg.threads = threads;
  return cfg;
}

void BenchConfig::validate() const {
  require(b >= 1 && t >= 1 && h >= 1 && d >= 1 && v >= 1 && c >= 1, ErrorCode::InvalidSpec,
          "b, t, h, d, v and chunk must all be >= 1");
  require(repeats >= 1, ErrorCode::InvalidSpec, "repeats must be >= 1");
  require(warmup >= 0, ErrorCode::InvalidSpec, "warmup must be >= 0");
  require(threads >= 1, ErrorCode::InvalidSpec, "threads must be >= 1");
  const AttentionConfig cfg = attention_config();
  if (form != Form::Attention)
    require(cfg.mechanism.has_expansion(), ErrorCode::InvalidSpec,
            std::string(to_string(form)) + " form needs the power or linear mechanism");
  cfg.validate(d);
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double uniform_at(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) noexcept {
  const std::uint64_t bits = splitmix64(splitmix64(seed ^ (tag << 56)) + index);
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

template <typename T>
SequenceBatch<T> generate_inputs(const BenchConfig& cfg) {
  auto batch = make_batch<T>(cfg.b, cfg.t, cfg.h, cfg.d, cfg.v, cfg.gating);
  std::uint64_t tag = 1;
  for (auto* x : {&batch.q, &batch.k, &batch.v}) {
    auto flat = x->flat();
    for (std::size_t i = 0; i < flat.size(); ++i)
      flat[i] = static_cast<T>(2.0 * uniform_at(cfg.seed, tag, i) - 1.0);
    ++tag;
  }
  if (batch.gates) {
    auto flat = batch.gates->flat();
    for (std::size_t i = 0; i < flat.size(); ++i)
      flat[i] = static_cast<T>(0.9 + 0.1 * uniform_at(cfg.seed, 4, i));
  }
  return batch;
}

FlopReport bench_flops(const BenchConfig& cfg) {
  ArchSpec arch;
  arch.n_layers = 1;
  arch.n_heads = static_cast<int>(cfg.h);
  arch.head_dim = static_cast<int>(cfg.d);
  arch.value_dim = static_cast<int>(cfg.v);
  arch.model_width = arch.n_heads * arch.head_dim;
  arch.n_params = approx_non_embedding_params(1, arch.model_width);
  arch.mechanism = cfg.attention_config().mechanism;
  arch.context = cfg.t;
  if (cfg.form == Form::Chunked) arch.chunk = cfg.c;
  return wsfr(arch);
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename T>
BenchResult run_bench_typed(const BenchConfig& cfg) {
  const auto batch = generate_inputs<T>(cfg);
  const AttentionConfig acfg = cfg.attention_config();
  const ChunkPlan plan = ChunkPlan::make(cfg.t, cfg.c);

  auto once = [&](PipelineProbe* probe) {
    EngineOptions options;
    options.state_budget_bytes = cfg.state_budget_bytes;
    options.probe = probe;
    switch (cfg.form) {
      case Form::Attention: return attention(batch, acfg);
      case Form::Recurrent: return recurrent_power_attention(batch, acfg, options);
      case Form::Chunked: break;
    }
    return chunked_power_attention(batch, acfg, plan, options);
  };

  for (int i = 0; i < cfg.warmup; ++i) once(nullptr);

  BenchResult result;
  result.config = cfg;
  std::vector<std::uint64_t> walls;
  AttentionOutput<T> out;
  for (int r = 0; r < cfg.repeats; ++r) {
    PipelineProbe probe;
    const auto start = Clock::now();
    out = once(&probe);
    const auto wall = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count());
    walls.push_back(wall);
    result.wall_ns_total += wall;
    if (cfg.form == Form::Chunked) {
      const StageCounts& ns = probe.nanoseconds;
      result.per_op_ns["intra_attention"] += ns.intra_attention;
      result.per_op_ns["update_state"] += ns.update_state + ns.expansion;
      result.per_op_ns["discumsum"] += ns.discumsum;
      result.per_op_ns["query_state"] += ns.query_state;
    } else {
      result.per_op_ns[std::string(to_string(cfg.form))] += wall;
    }
  }
  std::sort(walls.begin(), walls.end());
  const std::size_t mid = walls.size() / 2;
  result.wall_ns_median = walls.size() % 2 ? walls[mid] : (walls[mid - 1] + walls[mid]) / 2;
  const double seconds = std::max<double>(static_cast<double>(result.wall_ns_median), 1.0) * 1e-9;
  result.tokens_per_sec = static_cast<double>(cfg.b * cfg.t) / seconds;
  for (const T y : out.y.flat()) result.checksum += static_cast<double>(y);
  result.flops = bench_flops(cfg);
  return result;
}

template <typename T>
EquivReport run_equiv_typed(const BenchConfig& cfg) {
  const auto batch = generate_inputs<T>(cfg);
  const AttentionConfig acfg = cfg.attention_config();
  EngineOptions options;
  options.state_budget_bytes = cfg.state_budget_bytes;
  const auto reference = attention(batch, acfg);
  const auto recurrent = recurrent_power_attention(batch, acfg, options);
  const auto chunked =
      chunked_power_attention(batch, acfg, ChunkPlan::make(cfg.t, cfg.c), options);
  return {max_abs_error(recurrent.y.flat(), reference.y.flat()),
          max_rel_error(recurrent.y, reference.y),
          max_abs_error(chunked.y.flat(), reference.y.flat()),
          max_rel_error(chunked.y, reference.y)};
}

}  // namespace

BenchResult run_bench(const BenchConfig& cfg) {
  cfg.validate();
  return cfg.dtype == Dtype::F32 ? run_bench_typed<float>(cfg) : run_bench_typed<double>(cfg);
}

EquivReport run_equiv(const BenchConfig& cfg) {
  BenchConfig c = cfg;
  c.form = Form::Chunked;
  c.validate();
  return cfg.dtype == Dtype::F32 ? run_equiv_typed<float>(c) : run_equiv_typed<double>(c);
}

bool is_unimodal(const std::vector<double>& values, double tolerance) {
  if (values.size() < 3) return true;
  const auto low = std::min_element(values.begin(), values.end()) - values.begin();
  for (std::ptrdiff_t i = 0; i < low; ++i)
    if (values[i + 1] > values[i] * (1.0 + tolerance)) return false;
  for (std::size_t i = static_cast<std::size_t>(low); i + 1 < values.size(); ++i)
    if (values[i + 1] < values[i] * (1.0 - tolerance)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Check suites

namespace {

std::vector<double> pack_inputs(const SequenceBatch<double>& b) {
  std::vector<double> x;
  for (const auto* t : {&b.q, &b.k, &b.v}) x.insert(x.end(), t->flat().begin(), t->flat().end());
  if (b.gates) x.insert(x.end(), b.gates->flat().begin(), b.gates->flat().end());
  return x;
}

SequenceBatch<double> unpack_inputs(const SequenceBatch<double>& like, std::span<const double> x) {
  SequenceBatch<double> b = like;
  std::size_t o = 0;
  for (auto* t : {&b.q, &b.k, &b.v})
    for (double& e : t->flat()) e = x[o++];
  if (b.gates)
    for (double& e : b.gates->flat()) e = x[o++];
  return b;
}

std::vector<double> pack_grads(const GradBundle<double>& g) {
  std::vector<double> x;
  for (const auto* t : {&g.dq, &g.dk, &g.dv}) x.insert(x.end(), t->flat().begin(), t->flat().end());
  if (g.dgates) x.insert(x.end(), g.dgates->flat().begin(), g.dgates->flat().end());
  return x;
}

template <typename Forward>
double gradient_error(const SequenceBatch<double>& batch, const Tensor<double>& upstream,
                      const GradBundle<double>& analytic, Forward&& forward) {
  constexpr double step = 1e-4;
  const VectorFunction f = [&](std::span<const double> x) {
    const auto y = forward(unpack_inputs(batch, x));
    return std::vector<double>(y.flat().begin(), y.flat().end());
  };
  const auto x = pack_inputs(batch);
  std::vector<bool> upper(x.size(), false);
  if (batch.gates)
    for (std::size_t i = x.size() - batch.gates->size(); i < x.size(); ++i)
      upper[i] = x[i] + step > 1.0;
  const auto numeric = finite_difference_oracle(f, x, upstream.flat(), step, upper);
  return max_rel_error(pack_grads(analytic), numeric);
}

bool scores_bounded_away(const SequenceBatch<double>& batch, double scale, double floor) {
  for (std::size_t bi = 0; bi < batch.batch(); ++bi)
    for (std::size_t hi = 0; hi < batch.heads(); ++hi)
      for (std::size_t i = 0; i < batch.time(); ++i)
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t f = 0; f < batch.key_dim(); ++f)
            s += batch.q.at(bi, i, hi, f) * batch.k.at(bi, j, hi, f);
          if (std::abs(scale * s) < floor) return false;
        }
  return true;
}

}  // namespace

std::vector<CheckRecord> run_checks(const CheckOptions& o,
                                    const std::function<void(const CheckRecord&)>& sink) {
  require(o.t >= 1 && o.d >= 1 && o.v >= 1 && o.c >= 1 && o.h >= 1, ErrorCode::InvalidSpec,
          "t, d, v, chunk and heads must all be >= 1");
  require(o.instances >= 1, ErrorCode::InvalidSpec, "instances must be >= 1");
  BenchConfig base;
  base.mechanism = MechanismKind::Power;
  base.kind = o.kind;
  base.p = o.p;
  base.d_tile = o.d_tile;
  base.b = 1;
  base.t = o.t;
  base.h = o.h;
  base.d = o.d;
  base.v = o.v;
  base.c = o.c;
  base.normalize = o.normalize;
  base.gating = o.gating;
  base.scale = o.scale;
  base.validate();
  const ExpansionSpec spec = base.expansion();
  const AttentionConfig cfg = base.attention_config();
  const ChunkPlan plan = ChunkPlan::make(o.t, o.c);

  std::vector<CheckRecord> records;
  auto emit = [&](std::string suite, std::uint64_t seed, double error, double tol, bool passed) {
    records.push_back({std::move(suite), seed, error, tol, passed});
    if (sink) sink(records.back());
  };

  for (int instance = 0; instance < o.instances; ++instance) {
    const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(instance);
    BenchConfig bc = base;
    bc.seed = seed;

    {
      std::vector<double> x(o.d), y(o.d);
      for (std::size_t f = 0; f < o.d; ++f) {
        x[f] = 2.0 * uniform_at(seed, 5, f) - 1.0;
        y[f] = 2.0 * uniform_at(seed, 6, f) - 1.0;
      }
      double xy = 0.0;
      for (std::size_t f = 0; f < o.d; ++f) xy += x[f] * y[f];
      const double closed = std::pow(xy, o.p);
      const double inner =
          expansion_inner(std::span<const double>(x), std::span<const double>(y), spec);
      const double err = std::abs(inner - closed) / std::max(1.0, std::abs(closed));
      emit("inner_product", seed, err, 1e-9, err <= 1e-9);
    }

    const auto batch = generate_inputs<double>(bc);
    {
      const auto reference = attention(batch, cfg);
      const double err =
          std::max(max_rel_error(recurrent_power_attention(batch, cfg).y, reference.y),
                   max_rel_error(chunked_power_attention(batch, cfg, plan).y, reference.y));
      emit("three_form", seed, err, 1e-8, err <= 1e-8);
    }

    {
      const std::size_t n = plan.n_chunks();
      std::vector<ChunkState<double>> states;
      std::vector<double> decays(n);
      std::uint64_t idx = 0;
      for (std::size_t k = 0; k < n; ++k) {
        auto s = ChunkState<double>::zeros(spec, o.v);
        for (double& e : s.s) e = 2.0 * uniform_at(seed, 7, idx++) - 1.0;
        for (double& e : s.gamma) e = 2.0 * uniform_at(seed, 7, idx++) - 1.0;
        decays[k] = uniform_at(seed, 8, k);
        states.push_back(std::move(s));
      }
      const auto out = discumsum<double>(states, decays);
      std::vector<double> acc(states[0].s.size(), 0.0), acc_g(states[0].gamma.size(), 0.0);
      double err = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < acc.size(); ++i) {
          acc[i] = decays[k] * acc[i] + states[k].s[i];
          if (out[k].s[i] != acc[i]) err = std::max(err, std::abs(out[k].s[i] - acc[i]) + 1e-300);
        }
        for (std::size_t i = 0; i < acc_g.size(); ++i) {
          acc_g[i] = decays[k] * acc_g[i] + states[k].gamma[i];
          if (out[k].gamma[i] != acc_g[i])
            err = std::max(err, std::abs(out[k].gamma[i] - acc_g[i]) + 1e-300);
        }
      }
      emit("discumsum_exact", seed, err, 0.0, err == 0.0);
    }

    if (o.p % 2 == 0) {
      // Resample until every causal score clears the agreement floor.
      BenchConfig lc = bc;
      auto lb = batch;
      const double scale = cfg.resolved_scale(o.d);
      for (std::uint64_t attempt = 1; attempt < 64 && !scores_bounded_away(lb, scale, 1e-3);
           ++attempt) {
        lc.seed = seed + (attempt << 32);
        lb = generate_inputs<double>(lc);
      }
      AttentionConfig logged = cfg;
      logged.use_log_space = true;
      const double err =
          max_rel_error(power_attention_form(lb, logged).y, power_attention_form(lb, cfg).y);
      emit("log_space", lc.seed, err, 1e-6, err <= 1e-6);
    }

    {
      Tensor<double> up(batch.v.shape());
      for (std::size_t i = 0; i < up.size(); ++i) up[i] = 2.0 * uniform_at(seed, 9, i) - 1.0;
      const double ea = gradient_error(batch, up, vjp_power_attention(batch, cfg, up),
                                       [&](const SequenceBatch<double>& b) {
                                         return power_attention_form(b, cfg).y;
                                       });
      emit("grad_attention", seed, ea, 1e-5, ea <= 1e-5);
      const double ec = gradient_error(batch, up, vjp_chunked(batch, cfg, plan, up),
                                       [&](const SequenceBatch<double>& b) {
                                         return chunked_power_attention(b, cfg, plan).y;
                                       });
      emit("grad_chunked", seed, ec, 1e-5, ec <= 1e-5);
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Dimension table

DimRow dim_row(int d, int p, std::optional<int> d_tile) {
  DimRow row;
  row.d = d;
  row.p = p;
  row.tpow = expansion_dim(ExpansionSpec::tpow(p, d));
  row.spow = expansion_dim(ExpansionSpec::spow(p, d));
  if (d_tile) {
    row.d_tile = d_tile;
    row.tspow = expansion_dim(ExpansionSpec::tspow(p, d, *d_tile));
  }
  row.savings_pct =
      100.0 * (1.0 - static_cast<double>(row.spow) / static_cast<double>(row.tpow));
  row.expansion_factor = static_cast<double>(row.spow) / d;
  return row;
}

std::string format_savings(double pct) {
  char buf[32];
  if (pct >= 99.5) {
    std::snprintf(buf, sizeof buf, "%.1f%%", std::floor(pct * 10.0 + 1e-9) / 10.0);
  } else {
    std::snprintf(buf, sizeof buf, "%d%%", static_cast<int>(std::floor(pct + 1e-9)));
  }
  return buf;
}

namespace {

std::uint64_t parse_size(std::string_view token) {
  const std::string s(token);
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(s, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidSpec, "not a number: '" + s + "'");
  }
  if (used != s.size() || !(value >= 0.0) || value > 1e18 || value != std::floor(value))
    fail(ErrorCode::InvalidSpec, "expected a non-negative integer, got '" + s + "'");
  return static_cast<std::uint64_t>(value);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<std::uint64_t> parse_size_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  while (true) {
    const auto comma = text.find(',');
    const std::string_view item = trim(text.substr(0, comma));
    require(!item.empty(), ErrorCode::InvalidSpec, "empty entry in size list");
    const auto dots = item.find("..");
    if (dots == std::string_view::npos) {
      out.push_back(parse_size(item));
    } else {
      const std::uint64_t lo = parse_size(trim(item.substr(0, dots)));
      const std::uint64_t hi = parse_size(trim(item.substr(dots + 2)));
      require(lo <= hi && hi - lo < 100000, ErrorCode::InvalidSpec,
              "range '" + std::string(item) + "' is empty or too long");
      for (std::uint64_t x = lo; x <= hi; ++x) out.push_back(x);
    }
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::ordered_json to_json(const BenchConfig& c) {
  nlohmann::ordered_json j;
  j["mechanism"] = to_string(c.mechanism);
  j["kind"] = to_string(c.kind);
  j["p"] = c.p;
  j["d_tile"] = c.kind == ExpansionKind::Tspow ? c.expansion().d_tile : c.expansion().effective_tile();
  j["window"] = c.window;
  j["b"] = c.b;
  j["t"] = c.t;
  j["h"] = c.h;
  j["d"] = c.d;
  j["v"] = c.v;
  j["c"] = c.c;
  j["dtype"] = to_string(c.dtype);
  j["seed"] = c.seed;
  j["repeats"] = c.repeats;
  j["warmup"] = c.warmup;
  j["form"] = to_string(c.form);
  j["normalize"] = c.normalize;
  j["gating"] = c.gating;
  j["scale"] = c.scale ? nlohmann::ordered_json(*c.scale) : nlohmann::ordered_json(nullptr);
  j["threads"] = c.threads;
  return j;
}

nlohmann::ordered_json to_json(const FlopReport& r) {
  nlohmann::ordered_json j;
  j["weight_flops_per_token"] = r.weight_flops_per_token;
  j["state_flops_per_token"] = r.state_flops_per_token;
  j["wsfr"] = {r.wsfr.weight, r.wsfr.state};
  j["wsfr_label"] = r.wsfr.label();
  nlohmann::ordered_json breakdown = nlohmann::ordered_json::object();
  for (const auto& [name, value] : r.breakdown) breakdown[name] = value;
  j["breakdown"] = breakdown;
  return j;
}

nlohmann::ordered_json to_json(const BenchResult& r) {
  nlohmann::ordered_json j;
  j["config"] = to_json(r.config);
  j["tokens_per_sec"] = r.tokens_per_sec;
  j["wall_ns_total"] = r.wall_ns_total;
  j["wall_ns_median"] = r.wall_ns_median;
  nlohmann::ordered_json ops = nlohmann::ordered_json::object();
  for (const auto& [name, value] : r.per_op_ns) ops[name] = value;
  j["per_op_ns"] = ops;
  j["flops"] = to_json(r.flops);
  j["checksum"] = r.checksum;
  return j;
}

nlohmann::ordered_json to_json(const CheckRecord& r) {
  return {{"suite", r.suite},
          {"seed", r.seed},
          {"error", r.error},
          {"tolerance", r.tolerance},
          {"passed", r.passed}};
}

nlohmann::ordered_json to_json(const DimRow& r) {
  nlohmann::ordered_json j;
  j["d"] = r.d;
  j["p"] = r.p;
  j["tpow"] = r.tpow;
  j["spow"] = r.spow;
  if (r.tspow) {
    j["d_tile"] = *r.d_tile;
    j["tspow"] = *r.tspow;
  }
  j["savings_pct"] = r.savings_pct;
  j["savings"] = format_savings(r.savings_pct);
  j["expansion_factor"] = r.expansion_factor;
  return j;
}

nlohmann::ordered_json to_json(const EquivReport& r) {
  return {{"recurrent_max_abs", r.recurrent_max_abs},
          {"recurrent_max_rel", r.recurrent_max_rel},
          {"chunked_max_abs", r.chunked_max_abs},
          {"chunked_max_rel", r.chunked_max_rel}};
}

template SequenceBatch<float> generate_inputs<float>(const BenchConfig&);
template SequenceBatch<double> generate_inputs<double>(const BenchConfig&);

}  // namespace powattn
