#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "powattn/attention.hpp"
#include "powattn/chunked.hpp"

namespace powattn {

// Model geometry for FLOP accounting. Convention: one multiply-add is two
// FLOPs, forward pass only, per generated token.
struct ArchSpec {
  std::uint64_t n_params = 0;  // non-embedding
  int n_layers = 12;
  int n_heads = 12;
  int head_dim = 64;
  int value_dim = 64;
  int model_width = 768;
  Mechanism mechanism = Mechanism::exp();
  std::uint64_t context = 1024;
  std::optional<std::uint64_t> chunk;  // adds the intra-chunk term for linear/power

  // InvalidSpec unless every size is positive and width = heads * head_dim.
  void validate() const;

  // 12 layers, width 768, 12 heads of 64, with exact non-embedding params.
  static ArchSpec gpt2_small(const Mechanism& mechanism, std::uint64_t context);
};

// Normalized so that the smaller side is 1.
struct WsfrRatio {
  double weight = 1.0;
  double state = 1.0;

  bool weight_heavy() const noexcept { return weight >= state; }
  // "x:1" or "1:x" with x rounded to the nearest integer.
  std::string label() const;
};

struct FlopReport {
  double weight_flops_per_token = 0.0;
  double state_flops_per_token = 0.0;
  WsfrRatio wsfr;
  std::map<std::string, double> breakdown;
};

// 2 * n_params.
double weight_flops(const ArchSpec& arch);

// Per-token state FLOPs; see state_breakdown for the terms.
double state_flops(const ArchSpec& arch);

// Named terms of state_flops: exp/window give "attention_scores" and
// "attention_values" over the average attended length; linear/power give
// "update_state", "query_state" and optionally "intra_attention".
std::map<std::string, double> state_breakdown(const ArchSpec& arch);

FlopReport wsfr(const ArchSpec& arch);

// Average attended length for causal attention over `context` tokens,
// (t + 1) / 2; a window w treats the context as its last min(t, w) tokens.
double average_attended_length(const ArchSpec& arch);

// Exact GPT-2 non-embedding parameters: per layer 12 w^2 + 13 w (attention
// and MLP weights, biases, two layer norms), plus the final layer norm.
std::uint64_t gpt2_non_embedding_params(int layers, int width);

// The usual 12 * layers * width^2 approximation.
std::uint64_t approx_non_embedding_params(int layers, int width);

struct ChunkDims {
  std::size_t d = 1;
  std::size_t v = 1;
  std::size_t streams = 1;  // batch * heads
};

// Exact multiply-add counts of chunked_power_attention per stage: these are
// the values a PipelineProbe records.
StageCounts count_flops_chunked(const ChunkPlan& plan, const ExpansionSpec& spec,
                                const ChunkDims& dims);

// FLOPs (2 per multiply-add) keyed by stage name.
std::map<std::string, double> stage_flops(const StageCounts& macs);

// Chunk size in [1, t] minimizing the total count, smallest on ties.
std::size_t optimal_chunk(std::size_t t, const ExpansionSpec& spec, const ChunkDims& dims);

}  // namespace powattn
