#include "cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcmoe/analytics.hpp"
#include "pcmoe/config_json.hpp"
#include "pcmoe/errors.hpp"
#include "pcmoe/selftest.hpp"
#include "pcmoe/tensor.hpp"
#include "pcmoe/trainer.hpp"

namespace pcmoe::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::string num(double v, int digits = 6) {
  if (std::isnan(v)) return "n/a";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string percent(std::int64_t value, std::int64_t base) {
  const double p = base > 0 ? 100.0 * static_cast<double>(value - base) / static_cast<double>(base) : 0.0;
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%+.3f%%", p);
  return buf;
}

std::vector<std::string> split_slots(const std::string& s) {
  std::vector<std::string> out;
  if (s == "none" || s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw ConfigError("empty slot name in --slots");
    out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ojson nullable(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

// Flags shared by train and params. Bound to a config after parsing so
// string-valued choices go through the library parsers.
struct ModelFlags {
  std::string gate = "2conv";
  std::string loss = "entropy";
  std::string kernel = "3x3";
  std::string slots = "dec2";
  std::vector<CLI::Option*> options;

  void add(CLI::App& app, TrainConfig& c) {
    MoEConfig& m = c.model.moe;
    options = {
        app.add_option("--experts", m.n_experts, "routed experts N")->check(CLI::PositiveNumber),
        app.add_option("--topk", m.top_k, "experts per patch k")->check(CLI::PositiveNumber),
        app.add_option("--grid", m.grid, "patch grid g (g x g patches)")->check(CLI::PositiveNumber),
        app.add_option("--gate", gate, "gating network")->check(CLI::IsMember({"conv", "2conv", "3conv"})),
        app.add_option("--loss", loss, "balancing loss")
            ->check(CLI::IsMember({"none", "importance", "switch", "entropy"})),
        app.add_option("--lambda", m.loss_weight, "balancing loss weight")->check(CLI::NonNegativeNumber),
        app.add_option("--shared", m.n_shared, "shared experts")->check(CLI::NonNegativeNumber),
        app.add_option("--expert-kernel", kernel, "expert kernel")->check(CLI::IsMember({"1x1", "3x3"})),
        app.add_option("--gate-hidden", m.gate_hidden_channels, "hidden channels of multi-layer gates")
            ->check(CLI::PositiveNumber),
        app.add_option("--slots", slots, "comma-separated MoE slots, or none"),
        app.add_option("--classes", c.model.num_classes, "segmentation classes")->check(CLI::Range(2, 255)),
    };
    for (auto* o : options) o->capture_default_str();
  }

  void apply(TrainConfig& c) const {
    c.model.moe.gate = parse_gate_kind(gate);
    c.model.moe.balancing = parse_balancing_loss(loss);
    c.model.moe.expert_kernel = parse_expert_kernel(kernel);
    c.model.moe_slots = split_slots(slots);
  }
};

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  TrainConfig config;
  ModelFlags model;
  std::vector<CLI::Option*> run_options;
  std::string manifest;
  std::string out;
};

void add_train(CLI::App& app, TrainArgs& a) {
  TrainConfig& c = a.config;
  a.model.add(app, c);
  a.run_options = {
      app.add_option("--epochs", c.epochs)->check(CLI::NonNegativeNumber),
      app.add_option("--seed", c.seed, "model and shuffle seed"),
      app.add_option("--batch-size", c.batch_size)->check(CLI::PositiveNumber),
      app.add_option("--lr", c.lr)->check(CLI::PositiveNumber),
      app.add_option("--momentum", c.momentum),
      app.add_option("--n-train", c.n_train)->check(CLI::NonNegativeNumber),
      app.add_option("--n-val", c.n_val)->check(CLI::PositiveNumber),
      app.add_option("--image-size", c.image_size),
      app.add_option("--data-seed", c.data_seed, "synthetic split seed"),
      app.add_option("--trace-every", c.trace_every, "record training routing every n steps (0 = off)")
          ->check(CLI::NonNegativeNumber),
      app.add_option("--gate-bias", c.gate_bias, "added to expert 0's gate logit bias at init"),
  };
  for (auto* o : a.run_options) o->capture_default_str();
  app.add_option("--manifest", a.manifest, "re-run the config recorded in a manifest.json")
      ->check(CLI::ExistingFile);
  app.add_option("--out", a.out, "output directory")->required();
}

TrainConfig resolve_train_config(TrainArgs& a) {
  if (a.manifest.empty()) {
    a.model.apply(a.config);
    return a.config;
  }
  std::vector<CLI::Option*> all = a.model.options;
  all.insert(all.end(), a.run_options.begin(), a.run_options.end());
  for (auto* o : all) {
    if (o->count() > 0) throw ConfigError("--manifest cannot be combined with " + o->get_name());
  }
  ojson m;
  try {
    m = ojson::parse(read_text(a.manifest));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  if (!m.contains("config")) throw ConfigError("manifest has no config");
  return parse_train_config(m["config"].dump());
}

int cmd_train(TrainArgs& a, std::ostream& out) {
  const TrainConfig config = resolve_train_config(a);
  config.validate();
  const fs::path dir = a.out;
  fs::create_directories(dir);

  const Dataset data = make_dataset(config);
  TrainResult result = train(config, data);
  EvalResult ev = evaluate(result.model, data.val, config.batch_size, result.steps);

  ojson artifacts;
  artifacts["checkpoint"] = "checkpoint.bin";
  artifacts["history"] = "history.csv";
  save_model(dir / "checkpoint.bin", result.model, config);
  write_history_csv(dir / "history.csv", result.history);
  ojson traces = ojson::array();
  for (const auto& t : ev.traces) {
    const std::string name = "trace_" + t.slot + ".jsonl";
    write_trace(dir / name, t.records);
    traces.push_back(name);
  }
  artifacts["traces"] = traces;
  ojson train_traces = ojson::array();
  if (config.trace_every > 0) {
    for (const auto& t : result.train_traces) {
      const std::string name = "train_trace_" + t.slot + ".jsonl";
      write_trace(dir / name, t.records);
      train_traces.push_back(name);
    }
  }
  artifacts["train_traces"] = train_traces;

  double nre_v = std::nan("");
  double tec_v = std::nan("");
  if (!ev.routing.empty()) {
    const auto counts = as_doubles(ev.routing.front().expert_counts());
    if (counts.size() >= 2) nre_v = nre(counts);
    tec_v = tec(counts);
  }

  ojson manifest;
  manifest["tool"] = "pcmoe";
  manifest["version"] = kToolVersion;
  manifest["command"] = "train";
  manifest["seed"] = config.seed;
  manifest["config"] = ojson::parse(dump_train_config(config));
  manifest["artifacts"] = artifacts;
  ojson results;
  results["steps"] = result.steps;
  results["val_miou"] = ev.miou;
  results["nre"] = nullable(nre_v);
  results["tec"] = nullable(tec_v);
  results["parameter_checksum"] = parameter_checksum(result.model);
  manifest["results"] = results;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  out << "val_miou " << num(ev.miou) << "\n";
  out << "nre " << num(nre_v) << "\n";
  out << "tec " << num(tec_v) << "\n";
  return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string out;
  std::string data;
  int batch_size = 8;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (!fs::is_regular_file(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint);
  LoadedModel loaded = load_model(a.checkpoint);
  std::vector<SceneSample> samples;
  if (a.data.empty()) {
    samples = make_dataset(loaded.config).val;
  } else {
    samples = import_dataset(a.data);
  }
  const fs::path dir = a.out;
  fs::create_directories(dir);
  EvalResult ev = evaluate(loaded.model, samples, a.batch_size);
  out << "miou " << num(ev.miou) << "\n";
  out << "samples " << samples.size() << "\n";
  if (ev.traces.empty()) out << "routing none (model has no MoE slots)\n";
  for (std::size_t i = 0; i < ev.traces.size(); ++i) {
    const auto& t = ev.traces[i];
    write_trace(dir / ("trace_" + t.slot + ".jsonl"), t.records);
    export_analysis(dir / ("analysis_" + t.slot), ev.routing[i]);
    const auto counts = as_doubles(ev.routing[i].expert_counts());
    out << "slot " << t.slot << " decisions " << ev.routing[i].n_decisions() << " nre "
        << (counts.size() >= 2 ? num(nre(counts)) : "n/a") << " tec " << num(tec(counts)) << "\n";
  }
  return kOk;
}

// ---- analyze ----------------------------------------------------------------

struct AnalyzeArgs {
  std::string trace;
  int classes = 4;
  std::string out;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const auto records = read_trace(a.trace);
  if (records.empty()) throw DataError("trace has no routing decisions: " + a.trace);
  const RoutingTrace trace = build_trace(records, a.classes);
  export_analysis(a.out, trace);
  const auto counts = as_doubles(trace.expert_counts());
  out << "decisions " << trace.n_decisions() << "\n";
  out << "nre " << (counts.size() >= 2 ? num(nre(counts)) : "n/a") << "\n";
  out << "tec " << num(tec(counts)) << "\n";
  return kOk;
}

// ---- params -----------------------------------------------------------------

struct ParamsArgs {
  TrainConfig config;
  ModelFlags model;
};

int cmd_params(ParamsArgs& a, std::ostream& out) {
  a.model.apply(a.config);
  TrainConfig& c = a.config;
  c.model.moe.validate();
  const int S = c.image_size;
  const ModelCost cost = model_cost(c.model, S, S);
  SegModelConfig base = c.model;
  base.moe.n_experts = 1;
  base.moe.top_k = 1;
  base.moe.n_shared = 0;
  const ModelCost ref = model_cost(base, S, S);
  out << "slots " << join(c.model.moe_slots) << "\n";
  out << "params_total " << cost.params_total << " " << percent(cost.params_total, ref.params_total) << "\n";
  out << "params_active " << cost.params_active << " " << percent(cost.params_active, ref.params_active)
      << "\n";
  out << "flops_total " << cost.flops_total << " " << percent(cost.flops_total, ref.flops_total) << "\n";
  out << "flops_active " << cost.flops_active << " " << percent(cost.flops_active, ref.flops_active) << "\n";
  out << "baseline_params " << ref.params_total << "\n";
  out << "baseline_flops " << ref.flops_total << "\n";
  return kOk;
}

// ---- selftest ---------------------------------------------------------------

struct SelftestArgs {
  std::string fault;
  std::uint64_t seed = 1;
};

int cmd_selftest(const SelftestArgs& a, std::ostream& out) {
  SelftestOptions options;
  options.seed = a.seed;
  testing::set_conv_backward_fault(a.fault == "conv-backward");
  std::vector<CheckResult> results;
  try {
    results = run_selftest(options);
  } catch (...) {
    testing::set_conv_backward_fault(false);
    throw;
  }
  testing::set_conv_backward_fault(false);
  std::vector<std::string> failed;
  char buf[32];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%.2fs", r.seconds);
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << buf << ") " << r.detail << "\n";
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) {
    out << "selftest: all " << results.size() << " checks passed\n";
    return kOk;
  }
  out << "selftest: " << failed.size() << " failed: " << join(failed) << "\n";
  return kSelftestFailed;
}

// ---- export-data ------------------------------------------------------------

struct ExportArgs {
  std::string out;
  std::string split = "val";
  int count = 64;
  std::uint64_t data_seed = 0;
  int image_size = 64;
  int classes = 4;
};

int cmd_export(const ExportArgs& a, std::ostream& out) {
  TrainConfig c;
  c.data_seed = a.data_seed;
  c.image_size = a.image_size;
  c.model.num_classes = a.classes;
  c.n_train = a.split == "train" ? a.count : 0;
  c.n_val = a.split == "val" ? a.count : 0;
  const Dataset d = make_dataset(c);
  const auto& samples = a.split == "train" ? d.train : d.val;
  export_dataset(a.out, samples);
  out << "wrote " << samples.size() << " samples to " << (fs::path(a.out) / "manifest.txt").string() << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"PatchConvMoE: patch-routed sparse mixture-of-experts convolutions", "pcmoe"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train TinySeg on the synthetic split");
  add_train(*train_cmd, train_args);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint and export its routing");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
  eval_cmd->add_option("--out", eval_args.out)->required();
  eval_cmd->add_option("--data", eval_args.data, "manifest.txt written by export-data (default: the "
                                                 "checkpoint's validation split)");
  eval_cmd->add_option("--batch-size", eval_args.batch_size)->check(CLI::PositiveNumber);

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "routing statistics of a trace file");
  analyze_cmd->add_option("--trace", analyze_args.trace)->required()->check(CLI::ExistingFile);
  analyze_cmd->add_option("--classes", analyze_args.classes)->required()->check(CLI::Range(1, 255));
  analyze_cmd->add_option("--out", analyze_args.out)->required();

  ParamsArgs params_args;
  auto* params_cmd = app.add_subcommand("params", "parameter and FLOP accounting");
  params_args.model.add(*params_cmd, params_args.config);
  params_cmd->add_option("--image-size", params_args.config.image_size)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  SelftestArgs selftest_args;
  auto* selftest_cmd = app.add_subcommand("selftest", "gradient, oracle and anchor checks");
  selftest_cmd->add_option("--seed", selftest_args.seed)->capture_default_str();
  selftest_cmd->add_option("--inject-fault", selftest_args.fault, "corrupt a kernel to test the checks")
      ->check(CLI::IsMember({"conv-backward"}));

  ExportArgs export_args;
  auto* export_cmd = app.add_subcommand("export-data", "write a synthetic split as PPM/PGM files");
  export_cmd->add_option("--out", export_args.out)->required();
  export_cmd->add_option("--split", export_args.split)->check(CLI::IsMember({"train", "val"}))->capture_default_str();
  export_cmd->add_option("--count", export_args.count)->check(CLI::PositiveNumber)->capture_default_str();
  export_cmd->add_option("--data-seed", export_args.data_seed)->capture_default_str();
  export_cmd->add_option("--image-size", export_args.image_size)->check(CLI::PositiveNumber)->capture_default_str();
  export_cmd->add_option("--classes", export_args.classes)->check(CLI::Range(2, 255))->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, out);
    if (*eval_cmd) return cmd_eval(eval_args, out);
    if (*analyze_cmd) return cmd_analyze(analyze_args, out);
    if (*params_cmd) return cmd_params(params_args, out);
    if (*selftest_cmd) return cmd_selftest(selftest_args, out);
    if (*export_cmd) return cmd_export(export_args, out);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kSelftestFailed;
  }
  return kUsage;
}

}  // namespace pcmoe::cli
