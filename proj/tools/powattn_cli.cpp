#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "powattn/bench.hpp"

using namespace powattn;
using Json = nlohmann::ordered_json;

namespace {

constexpr int kExitPass = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitResource = 3;

enum class Format { Table, Json, Csv };

void flatten(const Json& j, const std::string& prefix, std::vector<std::pair<std::string, Json>>& out) {
  if (j.is_object()) {
    for (const auto& [key, value] : j.items())
      flatten(value, prefix.empty() ? key : prefix + "." + key, out);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], prefix + "." + std::to_string(i), out);
  } else {
    out.emplace_back(prefix, j);
  }
}

std::string cell(const Json& j, bool compact) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_null()) return "";
  if (compact && j.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", j.get<double>());
    return buf;
  }
  return j.dump();
}

// Writes records as JSON lines, CSV (flattened keys, first record fixes the
// header) or an aligned table over a chosen set of columns.
class Emitter {
 public:
  struct Column {
    std::string header;
    std::string pointer;
  };

  Emitter(Format format, std::ostream& out, std::vector<Column> columns)
      : format_(format), out_(out), columns_(std::move(columns)) {}

  void emit(const Json& record) {
    switch (format_) {
      case Format::Json:
        out_ << record.dump() << '\n';
        break;
      case Format::Csv: {
        std::vector<std::pair<std::string, Json>> flat;
        flatten(record, "", flat);
        if (first_) {
          for (std::size_t i = 0; i < flat.size(); ++i) out_ << (i ? "," : "") << flat[i].first;
          out_ << '\n';
        }
        for (std::size_t i = 0; i < flat.size(); ++i)
          out_ << (i ? "," : "") << cell(flat[i].second, false);
        out_ << '\n';
        break;
      }
      case Format::Table: {
        if (first_) {
          for (const auto& c : columns_) out_ << pad(c.header, width(c));
          out_ << '\n';
        }
        for (const auto& c : columns_) {
          const Json::json_pointer ptr(c.pointer);
          out_ << pad(record.contains(ptr) ? cell(record.at(ptr), true) : "-", width(c));
        }
        out_ << '\n';
        break;
      }
    }
    first_ = false;
    out_.flush();
  }

 private:
  static std::size_t width(const Column& c) { return std::max<std::size_t>(c.header.size(), 13) + 2; }
  static std::string pad(const std::string& s, std::size_t w) {
    return s.size() >= w ? s + " " : std::string(w - s.size(), ' ') + s;
  }

  Format format_;
  std::ostream& out_;
  std::vector<Column> columns_;
  bool first_ = true;
};

struct Output {
  std::string format = "table";
  std::string path;
  std::unique_ptr<std::ofstream> file;

  void add(CLI::App* app, const std::string& default_format) {
    format = default_format;
    app->add_option("--format", format, "Output format")
        ->check(CLI::IsMember({"table", "json", "csv"}))
        ->capture_default_str();
    app->add_option("--out", path, "Write results to this file instead of stdout");
  }

  Emitter open(std::vector<Emitter::Column> columns) {
    std::ostream* os = &std::cout;
    if (!path.empty()) {
      file = std::make_unique<std::ofstream>(path);
      if (!*file) fail(ErrorCode::InvalidSpec, "cannot open output file '" + path + "'");
      os = file.get();
    }
    const Format f = format == "json" ? Format::Json : format == "csv" ? Format::Csv : Format::Table;
    return Emitter(f, *os, std::move(columns));
  }
};

std::size_t single_size(const std::string& text, const char* flag) {
  const auto values = parse_size_list(text);
  require(values.size() == 1, ErrorCode::InvalidSpec, std::string(flag) + " takes a single value here");
  return static_cast<std::size_t>(values.front());
}

int as_int(std::uint64_t x, const char* flag) {
  require(x <= 1'000'000, ErrorCode::InvalidSpec, std::string(flag) + " is out of range");
  return static_cast<int>(x);
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    out.push_back(text.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// Flags shared by the commands that build a BenchConfig.
struct ModelFlags {
  std::string mechanism = "power";
  std::string kind = "spow";
  std::string p = "2";
  int dtile = 0;
  int window = 0;
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t d = 16;
  std::size_t v = 16;
  std::string dtype = "f64";
  std::uint64_t seed = 0;
  bool normalize = false;
  bool gating = false;
  std::optional<double> scale;
  int threads = 1;
  std::uint64_t state_budget = kDefaultStateBudgetBytes;

  void add(CLI::App* app) {
    app->add_option("--mechanism", mechanism, "exp, window, linear or power")->capture_default_str();
    app->add_option("--kind", kind, "Expansion: tpow, spow or tspow")->capture_default_str();
    app->add_option("--p", p, "Power")->capture_default_str();
    app->add_option("--dtile", dtile, "Tile size for tspow (0 picks one)")->capture_default_str();
    app->add_option("--w", window, "Window length for the window mechanism");
    app->add_option("--batch", batch, "Batch size")->capture_default_str();
    app->add_option("--heads", heads, "Number of heads")->capture_default_str();
    app->add_option("--d", d, "Head (key) dimension")->capture_default_str();
    app->add_option("--v", v, "Value dimension")->capture_default_str();
    app->add_option("--dtype", dtype, "f32 or f64")->capture_default_str();
    app->add_option("--seed", seed, "Input generator seed")->capture_default_str();
    app->add_flag("--normalize", normalize, "Normalize outputs by the score sum");
    app->add_flag("--gating,!--no-gating", gating, "Use per-step gates");
    app->add_option("--scale", scale, "Query scale (default 1/sqrt(d))");
    app->add_option("--threads", threads, "Worker threads")->capture_default_str();
    app->add_option("--state-budget", state_budget, "Largest state allowed, in bytes")
        ->capture_default_str();
  }

  BenchConfig config() const {
    BenchConfig c;
    c.mechanism = parse_mechanism(mechanism);
    c.kind = parse_expansion_kind(kind);
    c.p = as_int(single_size(p, "--p"), "--p");
    c.d_tile = dtile;
    c.window = window;
    c.b = batch;
    c.h = heads;
    c.d = d;
    c.v = v;
    c.dtype = parse_dtype(dtype);
    c.seed = seed;
    c.normalize = normalize;
    c.gating = gating;
    c.scale = scale;
    c.threads = threads;
    c.state_budget_bytes = state_budget;
    return c;
  }
};

// ---------------------------------------------------------------------------

struct DimCommand {
  std::string d = "64";
  std::string p = "2..6";
  std::optional<int> dtile;
  Output output;
  CLI::App* cmd = nullptr;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("dim", "State dimension of each expansion");
    cmd->add_option("--d", d, "Input dimensions (list)")->capture_default_str();
    cmd->add_option("--p", p, "Powers (list or range)")->capture_default_str();
    cmd->add_option("--dtile", dtile, "Also report tspow with this tile size");
    output.add(cmd, "table");
  }

  int run() {
    std::vector<Emitter::Column> columns = {
        {"d", "/d"}, {"p", "/p"}, {"tpow", "/tpow"}, {"spow", "/spow"}};
    if (dtile) columns.insert(columns.end(), {{"d_tile", "/d_tile"}, {"tspow", "/tspow"}});
    columns.insert(columns.end(), {{"savings", "/savings"}, {"spow/d", "/expansion_factor"}});
    auto emitter = output.open(columns);
    const auto ds = parse_size_list(d);
    const auto ps = parse_size_list(p);
    for (const auto dv : ds)
      for (const auto pv : ps) emitter.emit(to_json(dim_row(as_int(dv, "--d"), as_int(pv, "--p"), dtile)));
    return kExitPass;
  }
};

int run_check(const ModelFlags& m, const std::string& t, const std::string& chunk, int instances,
              Output& output) {
  CheckOptions o;
  o.p = as_int(single_size(m.p, "--p"), "--p");
  o.kind = parse_expansion_kind(m.kind);
  o.d_tile = m.dtile;
  o.d = m.d;
  o.v = m.v;
  o.t = single_size(t, "--t");
  o.c = single_size(chunk, "--chunk");
  o.h = m.heads;
  o.normalize = m.normalize;
  o.gating = m.gating;
  o.scale = m.scale;
  o.seed = m.seed;
  o.instances = instances;
  auto emitter = output.open({{"suite", "/suite"}, {"seed", "/seed"}, {"error", "/error"},
                              {"tolerance", "/tolerance"}, {"passed", "/passed"}});
  int failures = 0;
  run_checks(o, [&](const CheckRecord& r) {
    emitter.emit(to_json(r));
    if (!r.passed) {
      ++failures;
      std::cerr << "FAIL " << r.suite << " seed=" << r.seed << " error=" << r.error
                << " tolerance=" << r.tolerance << '\n';
    }
  });
  return failures ? kExitCheckFailed : kExitPass;
}

int run_bench_cmd(const ModelFlags& m, const std::string& t, const std::string& chunk,
                  const std::string& forms, int repeats, int warmup, Output& output) {
  BenchConfig base = m.config();
  base.repeats = repeats;
  base.warmup = warmup;
  const auto ts = parse_size_list(t);
  const auto cs = parse_size_list(chunk);
  std::vector<Form> form_list;
  for (const auto& f : split(forms)) form_list.push_back(parse_form(f));
  auto emitter = output.open({{"form", "/config/form"},
                              {"t", "/config/t"},
                              {"c", "/config/c"},
                              {"tokens/s", "/tokens_per_sec"},
                              {"median_ns", "/wall_ns_median"},
                              {"intra", "/per_op_ns/intra_attention"},
                              {"update", "/per_op_ns/update_state"},
                              {"discumsum", "/per_op_ns/discumsum"},
                              {"query", "/per_op_ns/query_state"},
                              {"checksum", "/checksum"}});
  for (const auto tv : ts) {
    for (const Form form : form_list) {
      // Only the chunked form depends on the chunk size.
      const std::size_t n_c = form == Form::Chunked ? cs.size() : 1;
      for (std::size_t ci = 0; ci < n_c; ++ci) {
        BenchConfig cfg = base;
        cfg.t = static_cast<std::size_t>(tv);
        cfg.c = static_cast<std::size_t>(cs[ci]);
        cfg.form = form;
        emitter.emit(to_json(run_bench(cfg)));
      }
    }
  }
  return kExitPass;
}

int run_equiv_cmd(const ModelFlags& m, const std::string& t, const std::string& chunk,
                  Output& output) {
  BenchConfig cfg = m.config();
  cfg.t = single_size(t, "--t");
  cfg.c = single_size(chunk, "--chunk");
  const EquivReport report = run_equiv(cfg);
  Json record;
  record["config"] = to_json(cfg);
  const Json fields = to_json(report);
  for (const auto& [key, value] : fields.items()) record[key] = value;
  auto emitter = output.open({{"t", "/config/t"},
                              {"c", "/config/c"},
                              {"recurrent_abs", "/recurrent_max_abs"},
                              {"recurrent_rel", "/recurrent_max_rel"},
                              {"chunked_abs", "/chunked_max_abs"},
                              {"chunked_rel", "/chunked_max_rel"}});
  emitter.emit(record);
  return kExitPass;
}

struct FlopsFlags {
  std::string mechanisms = "exp,window,linear,power";
  std::string t = "1024,8192,65536,1e6";
  std::string kind = "spow";
  int p = 2;
  int window = 8192;
  int layers = 12;
  int heads = 12;
  int d = 64;
  int v = 64;
  std::uint64_t params = 0;
  std::optional<std::uint64_t> chunk;
};

int run_flops(const FlopsFlags& f, Output& output) {
  const auto ts = parse_size_list(f.t);
  auto emitter = output.open({{"mechanism", "/mechanism"},
                              {"t", "/context"},
                              {"weight_flops", "/weight_flops_per_token"},
                              {"state_flops", "/state_flops_per_token"},
                              {"wsfr", "/wsfr_label"}});
  for (const auto& name : split(f.mechanisms)) {
    const MechanismKind kind = parse_mechanism(name);
    Mechanism mech;
    std::string label(to_string(kind));
    switch (kind) {
      case MechanismKind::Exp: mech = Mechanism::exp(); break;
      case MechanismKind::Window:
        mech = Mechanism::sliding_window(f.window);
        label += "-" + std::to_string(f.window);
        break;
      case MechanismKind::Linear: mech = Mechanism::linear(ExpansionSpec::tpow(1, f.d)); break;
      case MechanismKind::Power: {
        BenchConfig c;
        c.kind = parse_expansion_kind(f.kind);
        c.p = f.p;
        c.d = static_cast<std::size_t>(std::max(f.d, 1));
        mech = Mechanism::power(c.expansion());
        label += "-p" + std::to_string(f.p) + "-" + f.kind;
        break;
      }
    }
    for (const auto tv : ts) {
      ArchSpec arch;
      arch.n_layers = f.layers;
      arch.n_heads = f.heads;
      arch.head_dim = f.d;
      arch.value_dim = f.v;
      arch.model_width = f.heads * f.d;
      arch.n_params = f.params ? f.params : gpt2_non_embedding_params(f.layers, arch.model_width);
      arch.mechanism = mech;
      arch.context = tv;
      arch.chunk = f.chunk;
      Json record;
      record["mechanism"] = label;
      record["context"] = tv;
      record["n_params"] = arch.n_params;
      const Json report = to_json(wsfr(arch));
      for (const auto& [key, value] : report.items()) record[key] = value;
      emitter.emit(record);
    }
  }
  return kExitPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Power attention reference: dimension tables, checks, FLOP accounting and benchmarks"};
  app.require_subcommand(1);

  DimCommand dim;
  dim.add(app);

  ModelFlags check_model;
  check_model.d = 4;
  check_model.v = 4;
  check_model.heads = 2;
  check_model.gating = true;
  std::string check_t = "16", check_c = "5";
  int instances = 20;
  Output check_out;
  auto* check = app.add_subcommand("check", "Equivalence, exactness and gradient suites");
  check_model.add(check);
  check->add_option("--t", check_t, "Sequence length")->capture_default_str();
  check->add_option("--chunk", check_c, "Chunk size")->capture_default_str();
  check->add_option("--instances", instances, "Seeded instances per suite")->capture_default_str();
  check_out.add(check, "json");

  ModelFlags bench_model;
  std::string bench_t = "256", bench_c = "64", forms = "chunked";
  int repeats = 3, warmup = 1;
  Output bench_out;
  auto* bench = app.add_subcommand("bench", "Throughput sweep over t and chunk size");
  bench_model.add(bench);
  bench->add_option("--t", bench_t, "Sequence lengths (list)")->capture_default_str();
  bench->add_option("--chunk", bench_c, "Chunk sizes (list)")->capture_default_str();
  bench->add_option("--form", forms, "attention, recurrent, chunked (list)")->capture_default_str();
  bench->add_option("--repeats", repeats, "Timed repeats")->capture_default_str();
  bench->add_option("--warmup", warmup, "Untimed warmup runs")->capture_default_str();
  bench_out.add(bench, "json");

  FlopsFlags flops_flags;
  Output flops_out;
  auto* flops = app.add_subcommand("flops", "Weight and state FLOPs per token");
  flops->add_option("--mechanism", flops_flags.mechanisms, "Mechanisms (list)")->capture_default_str();
  flops->add_option("--t", flops_flags.t, "Context lengths (list)")->capture_default_str();
  flops->add_option("--kind", flops_flags.kind, "Expansion for power")->capture_default_str();
  flops->add_option("--p", flops_flags.p, "Power")->capture_default_str();
  flops->add_option("--w", flops_flags.window, "Window length")->capture_default_str();
  flops->add_option("--layers", flops_flags.layers, "Layers")->capture_default_str();
  flops->add_option("--heads", flops_flags.heads, "Heads")->capture_default_str();
  flops->add_option("--d", flops_flags.d, "Head dimension")->capture_default_str();
  flops->add_option("--v", flops_flags.v, "Value dimension")->capture_default_str();
  flops->add_option("--params", flops_flags.params, "Non-embedding parameters (0: GPT-2 count)")
      ->capture_default_str();
  flops->add_option("--chunk", flops_flags.chunk, "Include the intra-chunk term for this chunk size");
  flops_out.add(flops, "table");

  ModelFlags equiv_model;
  equiv_model.d = 8;
  equiv_model.v = 8;
  equiv_model.gating = true;
  std::string equiv_t = "64", equiv_c = "16";
  Output equiv_out;
  auto* equiv = app.add_subcommand("equiv", "Compare recurrent and chunked forms against attention");
  equiv_model.add(equiv);
  equiv->add_option("--t", equiv_t, "Sequence length")->capture_default_str();
  equiv->add_option("--chunk", equiv_c, "Chunk size")->capture_default_str();
  equiv_out.add(equiv, "table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitPass : kExitUsage;
  }

  try {
    if (*dim.cmd) return dim.run();
    if (*check) return run_check(check_model, check_t, check_c, instances, check_out);
    if (*bench) return run_bench_cmd(bench_model, bench_t, bench_c, forms, repeats, warmup, bench_out);
    if (*flops) return run_flops(flops_flags, flops_out);
    if (*equiv) return run_equiv_cmd(equiv_model, equiv_t, equiv_c, equiv_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::StateTooLarge ? kExitResource : kExitUsage;
  }
  return kExitUsage;
}
