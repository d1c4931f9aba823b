// SPDX-License-Identifier: Apache-2.0

// convfuse command-line front end.
//
//   convfuse_cli gen         --out DIR
//   convfuse_cli train       --out DIR
//   convfuse_cli eval        --checkpoint FILE [--report FILE]
//   convfuse_cli ablate      --out DIR
//   convfuse_cli export-maps --checkpoint FILE --out DIR
//   convfuse_cli selftest    [--stride N]
//
// Every subcommand accepts --config FILE (key = value lines) followed by any
// number of --<key> <value> overrides.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "convfuse/checkpoint.hpp"
#include "convfuse/config.hpp"
#include "convfuse/error.hpp"
#include "convfuse/harness.hpp"
#include "convfuse/selftest.hpp"

namespace fs = std::filesystem;
using namespace convfuse;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;  // unparsed --key value pairs
};

RunConfig apply_overrides(RunConfig cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + arg + "'");
    arg.erase(0, 2);
    std::string value;
    if (const auto eq = arg.find('='); eq != std::string::npos) {
      value = arg.substr(eq + 1);
      arg.erase(eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + arg);
      value = extras[++i];
    }
    set_config_value(cfg, arg, value);
  }
  return cfg;
}

RunConfig resolve(const Common& c, RunConfig base = {}) {
  if (!c.config_file.empty()) base = load_config_file(c.config_file, std::move(base));
  RunConfig cfg = apply_overrides(std::move(base), c.overrides);
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
}

std::string trace_csv(const std::vector<StepRecord>& trace) {
  std::string out = "step,total,seg,cls\n";
  char buf[128];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.step, r.total, r.seg, r.cls);
    out += buf;
  }
  return out;
}

int cmd_gen(const Common& c, const std::string& out) {
  const RunConfig cfg = resolve(c);
  const Corpus corpus = load_corpus(cfg);
  export_dataset(out, "train", corpus.train);
  export_dataset(out, "test", corpus.test);
  std::cout << "wrote " << corpus.train.size() << " train and " << corpus.test.size() << " test images to " << out << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& out, bool quiet) {
  const RunConfig cfg = resolve(c);
  fs::create_directories(out);
  const Corpus corpus = load_corpus(cfg);
  const std::size_t every = std::max<std::size_t>(1, cfg.optim.steps / 10);
  TrainResult result = [&] {
    try {
      return train(cfg, corpus.train, [&](const StepRecord& r) {
        if (!quiet && (r.step % every == 0 || r.step + 1 == cfg.optim.steps))
          std::fprintf(stderr, "step %5zu  total %.5f  seg %.5f  cls %.5f\n", r.step, r.total, r.seg, r.cls);
      });
    } catch (const TrainingError& e) {
      if (!e.snapshot().empty()) {
        write_text(fs::path(out) / "diverged.ckpt", e.snapshot());
        std::fprintf(stderr, "parameter snapshot written to %s\n", (fs::path(out) / "diverged.ckpt").c_str());
      }
      throw;
    }
  }();
  save_checkpoint(fs::path(out) / "model.ckpt", make_checkpoint(result.model, cfg, cfg.optim.steps));
  write_text(fs::path(out) / "trace.csv", trace_csv(result.trace));
  const std::string report = format_report(evaluate(result.model, corpus.test, cfg));
  write_text(fs::path(out) / "report.txt", report);
  std::cout << report;
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& report_path) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const GroupedModel model = restore_model(ckpt);
  const RunConfig cfg = resolve(c, checkpoint_config(ckpt));
  const Corpus corpus = load_corpus(cfg);
  // The model always follows the checkpoint; overrides only steer the data.
  RunConfig echo = cfg;
  echo.model = model.config();
  const std::string report = format_report(evaluate(model, corpus.test, echo));
  if (!report_path.empty()) write_text(report_path, report);
  std::cout << report;
  return 0;
}

int cmd_export(const Common& c, const std::string& checkpoint, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const GroupedModel model = restore_model(ckpt);
  const RunConfig cfg = resolve(c, checkpoint_config(ckpt));
  const Corpus corpus = load_corpus(cfg);
  const auto preds = predict(model, corpus.test, cfg.eval_batch);
  export_maps(out, preds);
  std::cout << "wrote " << preds.size() << " maps and scores.txt to " << out << "\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::string& out, bool quiet) {
  const RunConfig cfg = resolve(c);
  const auto start = std::chrono::steady_clock::now();
  const AblationTable table = ablate(cfg, [&](const AblationVariant& v, std::size_t seed, const MetricRow& m) {
    if (quiet) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "[%7.1fs] seed %zu %-11s pixel_auroc %.4f image_auroc %.4f\n", secs, seed, v.name.c_str(),
                 m.pixel_auroc, m.image_auroc);
  });
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "ablation.csv", ablation_csv(table));
    write_text(fs::path(out) / "ablation_seeds.csv", ablation_seed_csv(table));
    write_text(fs::path(out) / "census.csv", ablation_census_csv(table));
  }
  std::cout << ablation_csv(table) << "\n" << ablation_census_csv(table);
  return 0;
}

int cmd_selftest(std::size_t stride) {
  SelfTestOptions opt;
  opt.gradcheck_stride = stride;
  bool ok = true;
  for (const auto& r : run_selftest(opt)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

std::string key_help() {
  std::string out = "Configuration keys (config file or --key value):\n";
  for (const auto& k : config_keys()) out += "  " + k.name + std::string(22 - std::min<std::size_t>(21, k.name.size()), ' ') + k.help + "\n";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grouped vision/text anomaly segmentation with convolutional low-rank adapters"};
  app.require_subcommand(1);
  app.footer(key_help());

  Common common;
  std::string out, checkpoint, report;
  std::size_t stride = 1;
  bool quiet = false;

  auto with_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_file, "key = value configuration file")->check(CLI::ExistingFile);
    sub->allow_extras();
    return sub;
  };

  auto* gen = with_common(app.add_subcommand("gen", "write a synthetic dataset directory"));
  gen->add_option("--out", out, "dataset root")->required();
  auto* tr = with_common(app.add_subcommand("train", "train and write checkpoint, trace and report"));
  tr->add_option("--out", out, "output directory")->required();
  tr->add_flag("--quiet", quiet, "no per-step progress");
  auto* ev = with_common(app.add_subcommand("eval", "evaluate a checkpoint on the test split"));
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--report", report, "also write the report here");
  auto* ab = with_common(app.add_subcommand("ablate", "four-row component ablation"));
  ab->add_option("--out", out, "directory for the csv tables");
  ab->add_flag("--quiet", quiet, "no per-run progress");
  auto* ex = with_common(app.add_subcommand("export-maps", "write per-image anomaly maps and scores"));
  ex->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", out, "output directory")->required();
  auto* st = app.add_subcommand("selftest", "gradient check and reference comparisons");
  st->add_option("--stride", stride, "check every N-th trainable scalar")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (auto* sub = app.get_subcommands().front(); sub != st) common.overrides = sub->remaining();
    if (*gen) return cmd_gen(common, out);
    if (*tr) return cmd_train(common, out, quiet);
    if (*ev) return cmd_eval(common, checkpoint, report);
    if (*ab) return cmd_ablate(common, out, quiet);
    if (*ex) return cmd_export(common, checkpoint, out);
    if (*st) return cmd_selftest(stride);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
