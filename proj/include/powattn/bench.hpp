#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "powattn/attention.hpp"
#include "powattn/chunked.hpp"
#include "powattn/flops.hpp"

namespace powattn {

enum class Dtype { F32, F64 };
enum class Form { Attention, Recurrent, Chunked };

std::string_view to_string(Dtype dtype) noexcept;
std::string_view to_string(Form form) noexcept;
Dtype parse_dtype(std::string_view name);
Form parse_form(std::string_view name);
MechanismKind parse_mechanism(std::string_view name);

struct BenchConfig {
  MechanismKind mechanism = MechanismKind::Power;
  ExpansionKind kind = ExpansionKind::Spow;
  int p = 2;
  int d_tile = 0;  // Tspow only; 0 picks the largest divisor of d that is <= 8
  int window = 0;  // Window only
  std::size_t b = 1;
  std::size_t t = 256;
  std::size_t h = 1;
  std::size_t d = 16;
  std::size_t v = 16;
  std::size_t c = 64;
  Dtype dtype = Dtype::F64;
  std::uint64_t seed = 0;
  int repeats = 3;
  int warmup = 1;
  Form form = Form::Chunked;
  bool normalize = false;
  bool gating = false;
  std::optional<double> scale;
  int threads = 1;
  std::uint64_t state_budget_bytes = kDefaultStateBudgetBytes;

  ExpansionSpec expansion() const;
  AttentionConfig attention_config() const;
  // InvalidSpec / OddPowerWithNormalize on inconsistent settings.
  void validate() const;
};

struct BenchResult {
  BenchConfig config;
  double tokens_per_sec = 0.0;
  std::uint64_t wall_ns_total = 0;   // sum over timed repeats
  std::uint64_t wall_ns_median = 0;
  std::map<std::string, std::uint64_t> per_op_ns;  // summed over timed repeats
  FlopReport flops;
  double checksum = 0.0;
};

// Counter-based input stream: element `index` of tensor `tag` is
// splitmix64(splitmix64(seed ^ (tag << 56)) + index), mapped to [0, 1) via
// its top 53 bits. Tags: 1 = q, 2 = k, 3 = v, 4 = gates.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
double uniform_at(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) noexcept;

// q, k, v uniform in [-1, 1]; gates (when cfg.gating) uniform in [0.9, 1].
template <typename T>
SequenceBatch<T> generate_inputs(const BenchConfig& cfg);

// Runs cfg.warmup untimed and cfg.repeats timed evaluations of cfg.form.
// tokens_per_sec is b * t over the median wall time.
BenchResult run_bench(const BenchConfig& cfg);

// FLOP report for one layer of width h * d with 12 (h d)^2 weights.
FlopReport bench_flops(const BenchConfig& cfg);

// True if the sequence falls then rises, ignoring steps against the trend
// that are smaller than `tolerance` (relative).
bool is_unimodal(const std::vector<double>& values, double tolerance);

struct EquivReport {
  double recurrent_max_abs = 0.0;
  double recurrent_max_rel = 0.0;
  double chunked_max_abs = 0.0;
  double chunked_max_rel = 0.0;
};

// Attention form as reference, recurrent and chunked against it.
EquivReport run_equiv(const BenchConfig& cfg);

struct CheckOptions {
  int p = 2;
  ExpansionKind kind = ExpansionKind::Spow;
  int d_tile = 0;
  std::size_t d = 4;
  std::size_t v = 4;
  std::size_t t = 16;
  std::size_t c = 5;
  std::size_t h = 2;
  bool normalize = false;
  bool gating = true;
  std::optional<double> scale;
  std::uint64_t seed = 0;
  int instances = 20;
};

struct CheckRecord {
  std::string suite;
  std::uint64_t seed = 0;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Equivalence, exactness and gradient suites at the configured sizes. Every
// record is passed to `sink` as soon as it is available.
std::vector<CheckRecord> run_checks(const CheckOptions& options,
                                    const std::function<void(const CheckRecord&)>& sink = {});

struct DimRow {
  int d = 0;
  int p = 0;
  std::uint64_t tpow = 0;
  std::uint64_t spow = 0;
  std::optional<int> d_tile;
  std::optional<std::uint64_t> tspow;
  double savings_pct = 0.0;  // 100 (1 - spow / tpow)
  double expansion_factor = 0.0;  // spow / d
};

DimRow dim_row(int d, int p, std::optional<int> d_tile = std::nullopt);

// Whole percent, truncated; one truncated decimal at or above 99.5.
std::string format_savings(double pct);

// "1024", "1e6", "2..6" and comma-separated mixtures of these.
std::vector<std::uint64_t> parse_size_list(std::string_view text);

nlohmann::ordered_json to_json(const BenchConfig& cfg);
nlohmann::ordered_json to_json(const FlopReport& report);
nlohmann::ordered_json to_json(const BenchResult& result);
nlohmann::ordered_json to_json(const CheckRecord& record);
nlohmann::ordered_json to_json(const DimRow& row);
nlohmann::ordered_json to_json(const EquivReport& report);

}  // namespace powattn
