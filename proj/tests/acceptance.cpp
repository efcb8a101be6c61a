// Acceptance checks, one [PASS]/[FAIL] line each. `--only` and `--skip` take
// comma-separated check names; the end-to-end smoke run is registered with
// ctest on its own because it trains for several minutes.

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "cfsl/cli/ablation.hpp"
#include "cfsl/train/loops.hpp"
#include "cfsl/verify/gradcheck_suite.hpp"
#include "cfsl/verify/oracle_compare.hpp"

namespace fs = std::filesystem;
using namespace cfsl;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// ---- oracle / gradients ------------------------------------------------------

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  auto rows = verify::random_oracle_sweep(20240601, 100);
  for (const auto& r : verify::oracle_compare(fs::path(CFSL_FIXTURE_DIR) / "oracle")) rows.push_back(r);
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  double worst = 0.0;
  std::string failed;
  for (const auto& r : rows) {
    worst = std::max(worst, r.max_abs_delta);
    if (!r.passed()) {
      ok = false;
      failed += " " + r.loss;
    }
  }
  return {ok, "100 random instances per loss + shipped fixtures, max |delta| " + fmt(worst) + ", " + fmt(secs) + " s" +
                  (failed.empty() ? "" : ", failing:" + failed)};
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = verify::gradient_suite(7);
  const double secs = seconds_since(t0);
  bool ok = secs < 300.0;
  double worst = 0.0;
  std::size_t min_checked = SIZE_MAX;
  std::string failed;
  for (const auto& r : rows) {
    worst = std::max(worst, r.result.max_rel_error);
    min_checked = std::min(min_checked, r.result.checked);
    if (!r.passed()) {
      ok = false;
      failed += " " + r.name;
    }
  }
  return {ok, std::to_string(rows.size()) + " losses/ops, >= " + std::to_string(min_checked) +
                  " entries each, max rel error " + fmt(worst) + ", " + fmt(secs) + " s" +
                  (failed.empty() ? "" : ", failing:" + failed)};
}

// ---- closed forms ------------------------------------------------------------

Outcome closed_forms() {
  NoGradGuard no_grad;
  Rng rng(3);
  std::vector<std::string> bad;

  losses::AugmentedBatch two{verify::random_tensor({2, 5}, rng, false), {},
                             losses::AugmentedBatch::split_halves_pairing(1), {0, 0}};
  const double l2 = losses::global_ss_loss(two, 0.1).item();
  if (l2 != 0.0) bad.push_back("global_ss(2N=2)=" + fmt(l2, 17));

  const Tensor row = verify::random_tensor({1, 5}, rng, false);
  losses::AugmentedBatch four{concat({row, row, row, row}, 0), {}, losses::AugmentedBatch::split_halves_pairing(2),
                              {0, 1, 0, 1}};
  const double l4 = losses::global_ss_loss(four, 0.1).item();
  if (std::abs(l4 - 4.0 * std::log(3.0)) >= 1e-9) bad.push_back("equal similarities " + fmt(l4, 17));

  meta::ViewedEpisode ve;
  ve.ways = 1;
  ve.support_labels = {0};
  ve.query_labels = {0};
  const Tensor z = verify::random_tensor({1, 4}, rng, false), h = verify::random_tensor({1, 3}, rng, false);
  for (auto& v : ve.views) v = {h, z, h, z};
  const double ld = meta::distance_scaled_loss(ve, 0.1).item();
  if (std::abs(ld - 2.0 * std::log(5.0)) >= 1e-9) bad.push_back("distance_scaled degenerate " + fmt(ld, 17));

  const Tensor protos({4, 2}, {1, 0, 0, 1, -1, 0, 0, -1});
  const Tensor probs = meta::classify_query(Tensor({1, 2}, {0, 0}), protos);
  for (double p : probs.data()) {
    if (std::abs(p - 0.25) >= 1e-12) bad.push_back("equidistant p=" + fmt(p, 17));
  }
  std::string detail = "2N=2 -> " + fmt(l2 + 0.0) + ", 2N=4 equal -> " + fmt(l4, 12) + " (4 ln 3), degenerate -> " +
                       fmt(ld, 12) + " (2 ln 5), equidistant -> 1/4";
  for (const auto& b : bad) detail += "; " + b;
  return {bad.empty(), detail};
}

// ---- invariances ---------------------------------------------------------------

losses::AugmentedBatch reorder(const losses::AugmentedBatch& b, const std::vector<std::size_t>& order) {
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) inverse[order[k]] = k;
  losses::AugmentedBatch out{index_select(b.z, 0, order), index_select(b.maps, 0, order), {}, {}};
  for (std::size_t k = 0; k < order.size(); ++k) {
    out.pair.push_back(inverse[b.pair[order[k]]]);
    out.labels.push_back(b.labels[order[k]]);
  }
  return out;
}

std::vector<double> pretrain_values(const verify::PretrainInstance& p, const losses::AugmentedBatch& b,
                                    const Tensor& logits) {
  return {losses::global_ss_loss(b, 0.1).item(), losses::map_map_loss(b, p.spatial, 0.1).item(),
          losses::vec_map_loss(b, p.vecmap, p.proj, 0.1).item(), losses::global_sup_loss(b, 0.1).item(),
          losses::pretrain_total(b, logits, p.heads(), {}).total.item()};
}

meta::ViewedEpisode rotate(const meta::ViewedEpisode& ve, const Tensor& q) {
  auto out = ve;
  for (auto& v : out.views) {
    v.support_z = matmul(v.support_z, q);
    v.query_z = matmul(v.query_z, q);
  }
  return out;
}

Outcome invariance() {
  NoGradGuard no_grad;
  Rng rng(11);
  double worst = 0.0;
  auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  bool argmax_ok = true;
  double worst_shift = 0.0;

  for (int trial = 0; trial < 20; ++trial) {
    auto p = verify::random_pretrain_instance(rng, 2 + trial % 3, 3, 5, 2);
    std::vector<std::size_t> order(p.batch.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    // batch permutation, all pretraining terms
    auto base = pretrain_values(p, p.batch, p.logits);
    auto moved = pretrain_values(p, reorder(p.batch, order), index_select(p.logits, 0, order));
    for (std::size_t i = 0; i < base.size(); ++i) track(base[i], moved[i]);

    // orthogonal transform of the projected vectors: global ss and global sup
    auto rotated = p.batch;
    rotated.z = matmul(p.batch.z, verify::random_orthogonal(5, rng));
    track(losses::global_ss_loss(p.batch, 0.1).item(), losses::global_ss_loss(rotated, 0.1).item());
    track(losses::global_sup_loss(p.batch, 0.1).item(), losses::global_sup_loss(rotated, 0.1).item());

    auto e = verify::random_episode_instance(rng, 2 + trial % 2, 1 + trial % 2, 2, 4, 6);
    const auto& ve = e.episode;
    // distance-scaled loss under a rotation of every z
    track(meta::distance_scaled_loss(ve, 0.1).item(),
          meta::distance_scaled_loss(rotate(ve, verify::random_orthogonal(6, rng)), 0.1).item());
    // cross-view loss under a swap of the two views
    auto swapped = ve;
    std::swap(swapped.views[0], swapped.views[1]);
    track(meta::cross_view_loss(ve, e.attn, {}).total.item(), meta::cross_view_loss(swapped, e.attn, {}).total.item());

    // classification under a constant shift of every distance
    const auto& h = ve.views[0].query_h;
    Tensor aligned = meta::align(meta::prototypes(ve.views[0].support_h, ve.support_labels, ve.ways), e.attn);
    Tensor logits = meta::neg_distances(h, aligned);
    const double c = normal(rng, 0.0, 10.0);
    Tensor p0 = softmax(logits, 1), p1 = softmax(add_scalar(logits, c), 1);
    for (std::size_t i = 0; i < p0.numel(); ++i) {
      worst_shift = std::max(worst_shift, std::abs(p0.data()[i] - p1.data()[i]));
    }
    const std::size_t m = aligned.shape()[0];
    for (std::size_t i = 0; i < h.shape()[0]; ++i) {
      auto row0 = p0.data().subspan(i * m, m);
      auto row1 = logits.data().subspan(i * m, m);
      const auto a0 = std::max_element(row0.begin(), row0.end()) - row0.begin();
      std::vector<double> shifted(row1.begin(), row1.end());
      for (auto& v : shifted) v += c;
      const auto a1 = std::max_element(shifted.begin(), shifted.end()) - shifted.begin();
      argmax_ok = argmax_ok && a0 == a1;
    }
  }
  const bool ok = worst < 1e-9 && worst_shift < 1e-12 && argmax_ok;
  return {ok, "20 trials: permutation/rotation/view-swap max |delta| " + fmt(worst) + ", softmax shift " +
                  fmt(worst_shift) + ", argmax " + (argmax_ok ? "unchanged" : "CHANGED")};
}

// ---- hyperparameters -----------------------------------------------------------

std::map<std::string, std::string> parse_serialized(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

Outcome hyperparameter_fidelity() {
  const std::map<std::string, double> common{
      {"pretrain.tau1", 0.1},   {"pretrain.tau2", 0.1},         {"pretrain.tau3", 0.1},   {"pretrain.tau4", 0.1},
      {"meta.tau5", 0.1},       {"pretrain.alpha1", 1.0},       {"pretrain.alpha2", 1.0}, {"pretrain.alpha3", 1.0},
      {"pretrain.momentum", 0.9}, {"pretrain.weight_decay", 5e-4}, {"meta.momentum", 0.9}, {"meta.weight_decay", 5e-4},
      {"pretrain.lr", 0.1},     {"meta.gamma", 0.5}};
  std::vector<std::string> bad;
  auto check = [&](const std::string& label, const std::vector<std::string>& overrides,
                   std::map<std::string, double> expected) {
    expected.insert(common.begin(), common.end());
    const auto kv = parse_serialized(train::serialize(train::load_config(std::nullopt, overrides)));
    for (const auto& [k, v] : expected) {
      auto it = kv.find(k);
      if (it == kv.end() || std::stod(it->second) != v) {
        bad.push_back(label + " " + k + "=" + (it == kv.end() ? "missing" : it->second));
      }
    }
  };
  check("1-shot", {}, {{"meta.beta", 0.01}, {"meta.step_size", 40}, {"meta.shots", 1}});
  check("5-shot", {"meta.shots=5"}, {{"meta.beta", 0.1}, {"meta.step_size", 50}, {"meta.shots", 5}});
  std::string detail = "tau1..5=0.1, alpha1..3=1, beta 0.01/0.1, momentum 0.9, wd 5e-4, lr 0.1, StepLR (40|50, 0.5)";
  for (const auto& b : bad) detail += "; " + b;
  return {bad.empty(), detail};
}

// ---- training runs -------------------------------------------------------------

std::vector<std::string> small_run() {
  return {"synth.classes=6",      "synth.test_classes=5",   "synth.per_class=16",
          "pretrain.epochs=2",    "pretrain.batch_size=8",  "pretrain.steps_per_epoch=2",
          "pretrain.warmup_epochs=1", "meta.epochs=2",      "meta.episodes_per_epoch=2",
          "meta.queries=3",       "test.episodes=50",       "test.queries=5"};
}

Outcome end_to_end_smoke(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = work / "smoke";
  fs::remove_all(dir);
  // Published pipeline on the default synthetic set; 25 episodes per meta epoch
  // keeps the run inside the time budget on a single core.
  auto cfg = train::load_config(std::nullopt, {"meta.episodes_per_epoch=25", "test.episodes=600"});
  const auto& s = cfg.data.synth;
  if (s.n_classes != 8 || s.per_class != 60 || s.image_size != 32 || s.difficulty != 0.2 ||
      cfg.pretrain.epochs != 30 || cfg.meta.epochs != 20 || cfg.test.episode.ways != 5 || cfg.test.episode.shots != 1) {
    return {false, "default config no longer matches the smoke setting"};
  }
  cfg.stage = "pretrain";
  train::pretrain_loop(cfg, dir);
  const double t_pre = seconds_since(t0);
  cfg.stage = "metatrain";
  train::metatrain_loop(cfg, dir);
  const double t_meta = seconds_since(t0) - t_pre;
  cfg.stage = "metatest";
  const auto r = train::metatest_loop(cfg, dir).report;
  const double secs = seconds_since(t0);
  const bool finite = std::isfinite(r.mean) && std::isfinite(r.ci95);
  const bool ok = finite && r.episodes == 600 && r.mean >= 0.9 && secs < 900.0;
  return {ok, "accuracy " + fmt(100.0 * r.mean, 4) + "% +/- " + fmt(100.0 * r.ci95, 3) + "% over " +
                  std::to_string(r.episodes) + " episodes (floor 90%), " + fmt(secs, 4) + " s (pretrain " +
                  fmt(t_pre, 4) + ", metatrain " + fmt(t_meta, 4) + "; budget 900)"};
}

Outcome ablation_structure(const fs::path& work) {
  std::string detail;
  bool ok = true;
  for (const std::string grid : {"pretrain", "local"}) {
    const auto results = cli::run_ablation(grid, std::nullopt, small_run(), work / "ablation");
    const std::size_t expected = grid == "pretrain" ? 8 : 4;
    std::size_t distinct_pairs = 0, pairs = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      for (std::size_t j = i + 1; j < results.size(); ++j) {
        if (results[i].row.overrides == results[j].row.overrides) continue;
        ++pairs;
        std::set<std::string> ki, kj;
        for (const auto& [k, v] : results[i].breakdown) ki.insert(k);
        for (const auto& [k, v] : results[j].breakdown) kj.insert(k);
        distinct_pairs += ki != kj && results[i].breakdown != results[j].breakdown;
      }
    }
    const bool grid_ok = results.size() == expected && distinct_pairs == pairs &&
                         std::all_of(results.begin(), results.end(), [](const auto& r) { return !r.breakdown.empty(); });
    ok = ok && grid_ok;
    detail += (detail.empty() ? "" : "; ") + grid + " grid " + std::to_string(results.size()) + "/" +
              std::to_string(expected) + " rows, " + std::to_string(distinct_pairs) + "/" + std::to_string(pairs) +
              " row pairs with distinct breakdowns";
  }
  return {ok, detail};
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  return fa && fb && std::equal(std::istreambuf_iterator<char>(fa), {}, std::istreambuf_iterator<char>(fb), {});
}

double stream_delta(const fs::path& a, const fs::path& b, bool& same_shape) {
  const auto ra = train::read_metrics(a), rb = train::read_metrics(b);
  same_shape = ra.size() == rb.size() && !ra.empty();
  double worst = 0.0;
  for (std::size_t i = 0; same_shape && i < ra.size(); ++i) {
    for (const auto& [k, v] : ra[i].items()) {
      if (k == "wall_ms") continue;
      if (k == "losses") {
        same_shape = same_shape && v.size() == rb[i][k].size();
        for (const auto& [t, x] : v.items()) {
          if (!rb[i][k].contains(t)) {
            same_shape = false;
            continue;
          }
          worst = std::max(worst, std::abs(x.get<double>() - rb[i][k][t].get<double>()));
        }
      } else if (v.is_number()) {
        worst = std::max(worst, std::abs(v.get<double>() - rb[i][k].get<double>()));
      } else {
        same_shape = same_shape && v == rb[i][k];
      }
    }
  }
  return worst;
}

Outcome determinism(const fs::path& work) {
  std::array<fs::path, 2> dirs{work / "det_a", work / "det_b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    auto cfg = train::load_config(std::nullopt, small_run());
    cfg.seed = 99;
    cfg.stage = "pretrain";
    train::pretrain_loop(cfg, d);
    cfg.stage = "metatrain";
    train::metatrain_loop(cfg, d);
    cfg.stage = "metatest";
    train::metatest_loop(cfg, d);
  }
  bool ok = true;
  double worst = 0.0;
  std::size_t checkpoints = 0;
  for (const std::string stage : {"pretrain", "metatrain", "metatest"}) {
    bool shape = false;
    worst = std::max(worst, stream_delta(dirs[0] / stage / "metrics.jsonl", dirs[1] / stage / "metrics.jsonl", shape));
    ok = ok && shape;
    for (const auto& entry : fs::directory_iterator(dirs[0] / stage)) {
      if (entry.path().extension() != ".ckpt") continue;
      ++checkpoints;
      ok = ok && same_bytes(entry.path(), dirs[1] / stage / entry.path().filename());
    }
  }
  ok = ok && worst < 1e-9 && checkpoints >= 6;
  return {ok, "pretrain/metatrain/metatest twice: metrics max |delta| " + fmt(worst) + ", " +
                  std::to_string(checkpoints) + " checkpoints " + (ok ? "bitwise equal" : "compared")};
}

Outcome desk_scale_scope() {
  // Nothing here targets the published table accuracies; the property checks
  // stand in for them. This line records that scope in the output.
  return {true, "table accuracies need ResNet-12 and full datasets; property checks substitute"};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"acceptance checks"};
  std::string only, skip, work = (fs::temp_directory_path() / "cfsl_acceptance").string();
  app.add_option("--only", only, "comma-separated checks to run");
  app.add_option("--skip", skip, "comma-separated checks to skip");
  app.add_option("--work", work, "scratch directory")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const fs::path wd(work);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"desk_scale_scope", desk_scale_scope},
      {"oracle_equivalence", oracle_equivalence},
      {"gradient_suite", gradient_suite},
      {"closed_forms", closed_forms},
      {"invariance", invariance},
      {"hyperparameter_fidelity", hyperparameter_fidelity},
      {"end_to_end_smoke", [&] { return end_to_end_smoke(wd); }},
      {"ablation_structure", [&] { return ablation_structure(wd); }},
      {"determinism", [&] { return determinism(wd); }},
  };
  const auto only_list = split_list(only), skip_list = split_list(skip);
  for (const auto& name : only_list) {
    if (std::none_of(checks.begin(), checks.end(), [&](const auto& c) { return c.first == name; })) {
      std::cerr << "unknown check '" << name << "'\n";
      return 2;
    }
  }
  int failures = 0;
  for (const auto& [name, fn] : checks) {
    if (!only_list.empty() && std::find(only_list.begin(), only_list.end(), name) == only_list.end()) continue;
    if (std::find(skip_list.begin(), skip_list.end(), name) != skip_list.end()) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
