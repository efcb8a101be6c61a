#pragma once

// The `cfsl` command line. Kept in a header so tests can drive it in-process
// with their own streams.

#include <cstdio>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cfsl/cli/ablation.hpp"
#include "cfsl/cli/report.hpp"
#include "cfsl/train/loops.hpp"
#include "cfsl/verify/gradcheck_suite.hpp"
#include "cfsl/verify/oracle_compare.hpp"

namespace cfsl::cli {

namespace fs = std::filesystem;

inline constexpr int kExitFailure = 1;  // a verification ran and did not pass
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// One JSON object on one line.
inline void emit_error(std::ostream& err, const std::string& kind, int code, const std::string& message,
                       const std::string& reason = "") {
  nlohmann::ordered_json j{{"error", kind}, {"exit_code", code}};
  if (!reason.empty()) j["reason"] = reason;
  j["message"] = message;
  err << j.dump() << std::endl;
}

struct StageArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
  bool resume = false;
  bool quiet = false;
};

namespace detail {

inline void add_stage_options(CLI::App* sub, StageArgs& a, bool resumable) {
  sub->add_option("--config", a.config, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", a.overrides, "override one key, e.g. --set meta.beta=0.1 (repeatable)");
  sub->add_option("--out", a.out, "output directory")->capture_default_str();
  sub->add_option("--seed", a.seed, "master seed, overrides the config");
  if (resumable) sub->add_flag("--resume", a.resume, "continue from the newest epoch checkpoint under --out");
  sub->add_flag("-q,--quiet", a.quiet, "no per-epoch progress");
}

// Config for `stage`, with data manifests written by `cfsl synth` into the
// same output directory picked up when no manifest is configured.
inline train::RunConfig stage_config(const StageArgs& a, const std::string& stage, std::ostream& out) {
  auto cfg = train::load_config(a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config), a.overrides);
  cfg.stage = stage;
  if (a.seed) cfg.seed = *a.seed;
  const fs::path data = fs::path(a.out) / "data";
  if (cfg.data.train_manifest.empty() && fs::exists(data / "train.manifest")) {
    cfg.data.train_manifest = (data / "train.manifest").string();
    if (!a.quiet) out << "using " << cfg.data.train_manifest << '\n';
  }
  if (cfg.data.test_manifest.empty() && fs::exists(data / "test.manifest")) {
    cfg.data.test_manifest = (data / "test.manifest").string();
    if (!a.quiet) out << "using " << cfg.data.test_manifest << '\n';
  }
  cfg.validate();
  return cfg;
}

// Prints one line per finished epoch: mean of each epoch's total loss.
class EpochPrinter {
 public:
  EpochPrinter(std::ostream& os, std::size_t epochs) : os_(os), epochs_(epochs) {}

  void operator()(const train::MetricsRecord& r) {
    if (count_ && r.epoch != epoch_) flush();
    epoch_ = r.epoch;
    stage_ = r.stage;
    lr_ = r.lr;
    step_ = r.step;
    total_ += r.losses.count("total") ? r.losses.at("total") : 0.0;
    ++count_;
  }

  void flush() {
    if (!count_) return;
    os_ << stage_ << " epoch " << epoch_ + 1 << "/" << epochs_ << " step " << step_ + 1 << " lr " << lr_
        << " mean total " << total_ / static_cast<double>(count_) << std::endl;
    total_ = 0.0;
    count_ = 0;
  }

 private:
  std::ostream& os_;
  std::size_t epochs_;
  std::size_t epoch_ = 0, step_ = 0, count_ = 0;
  std::string stage_;
  double lr_ = 0.0, total_ = 0.0;
};

inline int run_train_stage(const StageArgs& a, const std::string& stage, std::ostream& out) {
  const auto cfg = stage_config(a, stage, out);
  EpochPrinter printer(out, stage == "pretrain" ? cfg.pretrain.epochs : cfg.meta.epochs);
  train::LoopOptions opts{a.resume, {}};
  if (!a.quiet) opts.on_record = [&](const train::MetricsRecord& r) { printer(r); };
  const auto res = stage == "pretrain" ? train::pretrain_loop(cfg, a.out, opts) : train::metatrain_loop(cfg, a.out, opts);
  printer.flush();
  out << stage << ": " << res.records << " records, checkpoint " << res.checkpoint.string() << ", metrics "
      << res.metrics.string() << '\n';
  return 0;
}

inline int run_metatest(const StageArgs& a, std::ostream& out) {
  const auto cfg = stage_config(a, "metatest", out);
  const auto r = train::metatest_loop(cfg, a.out);
  out << "metatest: " << cfg.test.episode.ways << "-way " << cfg.test.episode.shots << "-shot, " << r.report.episodes
      << " episodes, accuracy " << std::fixed << std::setprecision(2) << 100.0 * r.report.mean << "% +/- "
      << 100.0 * r.report.ci95 << "%" << std::defaultfloat << std::setprecision(6) << '\n'
      << "report " << (r.stage.dir / "report.json").string() << '\n';
  return 0;
}

inline int run_synth(const StageArgs& a, std::ostream& out) {
  auto cfg = train::load_config(a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config), a.overrides);
  if (a.seed) cfg.data.synth.seed = *a.seed;
  cfg.data.train_manifest.clear();
  cfg.data.test_manifest.clear();
  const auto splits = train::load_splits(cfg);
  const fs::path dir = fs::path(a.out) / "data";
  data::save_split(splits.train, dir / "train.manifest");
  data::save_split(splits.test, dir / "test.manifest");
  for (const auto* s : {&splits.train, &splits.test}) {
    out << s->role << ": " << s->num_classes() << " classes, " << s->size() << " images, " << s->height << "x"
        << s->width << " -> " << (dir / (s->role + ".manifest")).string() << '\n';
  }
  return 0;
}

inline int run_gradcheck(std::uint64_t seed, std::ostream& out) {
  const auto rows = verify::gradient_suite(seed);
  bool ok = true;
  out << std::left << std::setw(18) << "loss" << std::right << std::setw(9) << "checked" << std::setw(16)
      << "max_rel_error" << "  status\n";
  for (const auto& r : rows) {
    ok = ok && r.passed();
    out << std::left << std::setw(18) << r.name << std::right << std::setw(9) << r.result.checked << std::setw(16)
        << std::scientific << std::setprecision(3) << r.result.max_rel_error << std::defaultfloat << "  "
        << (r.passed() ? "ok" : "FAIL") << '\n';
  }
  out << (ok ? "all gradients within " : "gradient check failed, tolerance ") << verify::kGradTolerance << '\n';
  return ok ? 0 : kExitFailure;
}

inline int print_oracle_rows(const std::vector<verify::OracleRow>& rows, std::ostream& out) {
  bool ok = !rows.empty();
  out << std::left << std::setw(18) << "loss" << std::right << std::setw(10) << "instances" << std::setw(16)
      << "max_abs_delta" << "  status\n";
  for (const auto& r : rows) {
    ok = ok && r.passed();
    out << std::left << std::setw(18) << r.loss << std::right << std::setw(10) << r.instances << std::setw(16)
        << std::scientific << std::setprecision(3) << r.max_abs_delta << std::defaultfloat << "  "
        << (r.passed() ? "ok" : "FAIL") << '\n';
  }
  return ok ? 0 : kExitFailure;
}

inline int run_ablate(const StageArgs& a, const std::string& grid, std::ostream& out) {
  auto overrides = a.overrides;
  if (a.seed) overrides.push_back("seed=" + std::to_string(*a.seed));
  const auto config = a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config);
  run_ablation(grid, config, overrides, fs::path(a.out) / "ablation", [&](const AblationResult& r) {
    out << std::left << std::setw(36) << r.row.name << std::right;
    for (const auto& [k, v] : r.breakdown) {
      if (k.rfind("w_", 0) != 0) out << ' ' << k << '=' << v;
    }
    out << '\n' << std::flush;
  });
  return 0;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive few-shot learning: pretraining, meta-training, evaluation and verification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cfsl 1.0");

  StageArgs synth_args, pre_args, meta_args, test_args;
  auto* synth = app.add_subcommand("synth", "write synthetic train/test splits to <out>/data");
  detail::add_stage_options(synth, synth_args, false);
  auto* pretrain = app.add_subcommand("pretrain", "pretraining stage");
  detail::add_stage_options(pretrain, pre_args, true);
  auto* metatrain = app.add_subcommand("metatrain", "episodic meta-training from a pretrained checkpoint");
  detail::add_stage_options(metatrain, meta_args, true);
  auto* metatest = app.add_subcommand("metatest", "accuracy and 95% CI over sampled test episodes");
  detail::add_stage_options(metatest, test_args, false);

  std::uint64_t grad_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every loss and op");
  gradcheck->add_option("--seed", grad_seed, "instance seed")->capture_default_str();

  std::string oracle_dir;
  bool generate = false;
  std::size_t per_loss = 5, random_count = 0;
  std::uint64_t oracle_seed = 0;
  auto* oracle = app.add_subcommand("oracle", "compare library losses with the literal-summation oracle");
  oracle->add_option("dir", oracle_dir, "fixture directory");
  oracle->add_flag("--generate", generate, "write a fresh fixture set into dir");
  oracle->add_option("--count", per_loss, "fixtures per loss with --generate")->capture_default_str();
  oracle->add_option("--random", random_count, "compare N random instances per loss instead of fixtures");
  oracle->add_option("--seed", oracle_seed, "instance seed")->capture_default_str();

  std::string metrics_path, csv_path;
  auto* report_cmd = app.add_subcommand("report", "CSV of loss curves and accuracy plus a text summary");
  report_cmd->add_option("metrics", metrics_path, "metrics.jsonl")->required();
  report_cmd->add_option("--csv", csv_path, "CSV output (default: next to the metrics file)");

  StageArgs ablate_args;
  std::string grid;
  auto* ablate = app.add_subcommand("ablate", "pretraining ablation sweep, one run per grid row");
  detail::add_stage_options(ablate, ablate_args, false);
  ablate->add_option("--grid", grid, "pretrain (8 rows) or local (4 rows)")
      ->required()
      ->check(CLI::IsMember({"pretrain", "local"}));

  bool list_keys = false;
  auto* keys = app.add_subcommand("config", "print every config key with its default");
  keys->add_flag("--keys", list_keys, "annotated listing (default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    emit_error(err, "usage", kExitConfig, e.what());
    return kExitConfig;
  }

  try {
    if (*synth) return detail::run_synth(synth_args, out);
    if (*pretrain) return detail::run_train_stage(pre_args, "pretrain", out);
    if (*metatrain) return detail::run_train_stage(meta_args, "metatrain", out);
    if (*metatest) return detail::run_metatest(test_args, out);
    if (*ablate) return detail::run_ablate(ablate_args, grid, out);
    if (*gradcheck) return detail::run_gradcheck(grad_seed, out);
    if (*oracle) {
      if (random_count > 0) return detail::print_oracle_rows(verify::random_oracle_sweep(oracle_seed, random_count), out);
      if (oracle_dir.empty()) throw ConfigError("oracle needs a fixture directory or --random N");
      if (generate) {
        verify::generate_fixtures(oracle_dir, oracle_seed, per_loss);
        out << "wrote " << per_loss * verify::oracle_losses().size() << " fixtures to " << oracle_dir << '\n';
      }
      return detail::print_oracle_rows(verify::oracle_compare(oracle_dir), out);
    }
    if (*report_cmd) {
      fs::path csv = csv_path.empty() ? fs::path(metrics_path).replace_extension(".csv") : fs::path(csv_path);
      report(metrics_path, csv, out, err);
      return 0;
    }
    if (*keys) {
      out << train::describe_keys();
      return 0;
    }
  } catch (const ConfigError& e) {
    emit_error(err, "config", kExitConfig, e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    emit_error(err, "data", kExitData, e.what(), kind_name(e.kind()));
    return kExitData;
  } catch (const NumericError& e) {
    emit_error(err, "numeric", kExitNumeric, e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    emit_error(err, "internal", kExitFailure, e.what());
    return kExitFailure;
  }
  return 0;
}

}  // namespace cfsl::cli
