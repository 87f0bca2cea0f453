#include "powattn/flops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace powattn {

void ArchSpec::validate() const {
  require(n_layers > 0 && n_heads > 0 && head_dim > 0 && value_dim > 0 && model_width > 0,
          ErrorCode::InvalidSpec, "architecture sizes must be positive");
  require(model_width == n_heads * head_dim, ErrorCode::InvalidSpec,
          "model_width must equal n_heads * head_dim");
  require(context >= 1, ErrorCode::InvalidSpec, "context must be >= 1");
  if (chunk) require(*chunk >= 1, ErrorCode::InvalidSpec, "chunk size must be >= 1");
  if (mechanism.kind == MechanismKind::Window)
    require(mechanism.window >= 1, ErrorCode::InvalidSpec, "window must be >= 1");
  if (mechanism.has_expansion()) {
    mechanism.expansion.validate();
    require(mechanism.expansion.d == head_dim, ErrorCode::DimensionMismatch,
            "expansion input dimension must equal head_dim");
  }
}

ArchSpec ArchSpec::gpt2_small(const Mechanism& mechanism, std::uint64_t context) {
  ArchSpec arch;
  arch.n_params = gpt2_non_embedding_params(12, 768);
  arch.mechanism = mechanism;
  arch.context = context;
  return arch;
}

std::string WsfrRatio::label() const {
  const double x = weight_heavy() ? weight / state : state / weight;
  const std::string n = std::to_string(static_cast<long long>(std::llround(x)));
  return weight_heavy() ? n + ":1" : "1:" + n;
}

double weight_flops(const ArchSpec& arch) { return 2.0 * static_cast<double>(arch.n_params); }

double average_attended_length(const ArchSpec& arch) {
  std::uint64_t t = arch.context;
  if (arch.mechanism.kind == MechanismKind::Window)
    t = std::min<std::uint64_t>(t, static_cast<std::uint64_t>(arch.mechanism.window));
  return (static_cast<double>(t) + 1.0) / 2.0;
}

std::map<std::string, double> state_breakdown(const ArchSpec& arch) {
  arch.validate();
  const double lh = 2.0 * arch.n_layers * arch.n_heads;
  const double d = arch.head_dim, v = arch.value_dim;
  std::map<std::string, double> out;
  switch (arch.mechanism.kind) {
    case MechanismKind::Exp:
    case MechanismKind::Window: {
      const double len = average_attended_length(arch);
      out["attention_scores"] = lh * d * len;
      out["attention_values"] = lh * v * len;
      break;
    }
    case MechanismKind::Linear:
    case MechanismKind::Power: {
      const double D = static_cast<double>(expansion_dim(arch.mechanism.expansion));
      out["update_state"] = lh * D * v;
      out["query_state"] = lh * D * v;
      if (arch.chunk) out["intra_attention"] = lh * (d + v) * static_cast<double>(*arch.chunk);
      break;
    }
  }
  return out;
}

double state_flops(const ArchSpec& arch) {
  double total = 0.0;
  for (const auto& [name, value] : state_breakdown(arch)) total += value;
  return total;
}

FlopReport wsfr(const ArchSpec& arch) {
  FlopReport r;
  r.breakdown = state_breakdown(arch);
  r.weight_flops_per_token = weight_flops(arch);
  for (const auto& [name, value] : r.breakdown) r.state_flops_per_token += value;
  r.breakdown["weights"] = r.weight_flops_per_token;
  const double w = r.weight_flops_per_token, s = r.state_flops_per_token;
  if (w >= s) {
    r.wsfr = {s > 0.0 ? w / s : std::numeric_limits<double>::infinity(), 1.0};
  } else {
    r.wsfr = {1.0, w > 0.0 ? s / w : std::numeric_limits<double>::infinity()};
  }
  return r;
}

std::uint64_t gpt2_non_embedding_params(int layers, int width) {
  const auto w = static_cast<std::uint64_t>(width);
  return static_cast<std::uint64_t>(layers) * (12 * w * w + 13 * w) + 2 * w;
}

std::uint64_t approx_non_embedding_params(int layers, int width) {
  const auto w = static_cast<std::uint64_t>(width);
  return 12 * static_cast<std::uint64_t>(layers) * w * w;
}

StageCounts count_flops_chunked(const ChunkPlan& plan, const ExpansionSpec& spec,
                                const ChunkDims& dims) {
  require(plan.c >= 1, ErrorCode::InvalidSpec, "chunk size must be >= 1");
  const std::uint64_t D = expansion_dim(spec);
  const auto p = static_cast<std::uint64_t>(spec.p);
  const std::uint64_t d = dims.d, v = dims.v, streams = dims.streams, t = plan.t;
  const std::uint64_t n = plan.n_chunks(), c = plan.c, last = plan.last_chunk_len();

  StageCounts macs;
  if (n == 0) return macs;
  const std::uint64_t tri = (n - 1) * (c * (c + 1) / 2) + last * (last + 1) / 2;
  macs.intra_attention = streams * tri * (d + v);
  macs.expansion = streams * 2 * t * D * p;
  macs.update_state = streams * t * D * (v + 1);
  macs.discumsum = streams * n * D * (v + 1);
  macs.query_state = streams * t * D * (v + 1);
  return macs;
}

std::map<std::string, double> stage_flops(const StageCounts& macs) {
  return {{"intra_attention", 2.0 * static_cast<double>(macs.intra_attention)},
          {"expansion", 2.0 * static_cast<double>(macs.expansion)},
          {"update_state", 2.0 * static_cast<double>(macs.update_state)},
          {"discumsum", 2.0 * static_cast<double>(macs.discumsum)},
          {"query_state", 2.0 * static_cast<double>(macs.query_state)}};
}

std::size_t optimal_chunk(std::size_t t, const ExpansionSpec& spec, const ChunkDims& dims) {
  require(t >= 1, ErrorCode::InvalidSpec, "sequence length must be >= 1");
  std::size_t best = 1;
  std::uint64_t best_total = count_flops_chunked(ChunkPlan::make(t, 1), spec, dims).total();
  for (std::size_t c = 2; c <= t; ++c) {
    const std::uint64_t total = count_flops_chunked(ChunkPlan::make(t, c), spec, dims).total();
    if (total < best_total) {
      best = c;
      best_total = total;
    }
  }
  return best;
}

}  // namespace powattn
