#pragma once

// Library losses against the literal-summation oracle, on random instances or
// on shipped fixture files. Only data conversion is shared between the two
// paths; every loss value on the oracle side comes from literal_oracle.hpp.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsl/losses/pretrain.hpp"
#include "cfsl/meta/episodic.hpp"
#include "cfsl/model/checkpoint.hpp"
#include "cfsl/verify/bridge.hpp"
#include "cfsl/verify/instances.hpp"
#include "cfsl/verify/literal_oracle.hpp"

namespace cfsl::verify {

namespace fs = std::filesystem;

inline constexpr double kOracleTolerance = 1e-9;
inline constexpr double kOracleTau = 0.1;

enum class LossKind { kGlobalSs, kMapMap, kVecMap, kGlobalSup, kDistanceScaled, kCrossView };

inline const std::vector<LossKind>& oracle_losses() {
  static const std::vector<LossKind> all{LossKind::kGlobalSs,  LossKind::kMapMap,         LossKind::kVecMap,
                                         LossKind::kGlobalSup, LossKind::kDistanceScaled, LossKind::kCrossView};
  return all;
}

inline std::string loss_name(LossKind k) {
  switch (k) {
    case LossKind::kGlobalSs: return "global_ss";
    case LossKind::kMapMap: return "map_map";
    case LossKind::kVecMap: return "vec_map";
    case LossKind::kGlobalSup: return "global_sup";
    case LossKind::kDistanceScaled: return "distance_scaled";
    case LossKind::kCrossView: return "cross_view";
  }
  return "?";
}

inline LossKind loss_from_name(const std::string& name) {
  for (auto k : oracle_losses()) {
    if (loss_name(k) == name) return k;
  }
  throw DataError("unknown loss '" + name + "' in fixture", DataError::Kind::kFormat);
}

inline bool is_episodic(LossKind k) { return k == LossKind::kDistanceScaled || k == LossKind::kCrossView; }

inline double library_value(LossKind k, const PretrainInstance& p, double tau) {
  NoGradGuard no_grad;
  switch (k) {
    case LossKind::kGlobalSs: return losses::global_ss_loss(p.batch, tau).item();
    case LossKind::kMapMap: return losses::map_map_loss(p.batch, p.spatial, tau).item();
    case LossKind::kVecMap: return losses::vec_map_loss(p.batch, p.vecmap, p.proj, tau).item();
    case LossKind::kGlobalSup: return losses::global_sup_loss(p.batch, tau).item();
    default: throw InvariantError(loss_name(k) + " is an episodic loss");
  }
}

inline double oracle_value(LossKind k, const PretrainInstance& p, double tau) {
  const auto& b = p.batch;
  switch (k) {
    case LossKind::kGlobalSs: return oracle::global_ss(rows(b.z), b.pair, tau);
    case LossKind::kMapMap:
      return oracle::map_map_loss(map_positions(b.maps), b.pair, affine(p.spatial.fq), affine(p.spatial.fk),
                                  affine(p.spatial.fv), tau);
    case LossKind::kVecMap:
      return oracle::vec_map_loss(map_positions(b.maps), b.pair, affine(p.vecmap.fc), affine(p.proj.fc1),
                                  affine(p.proj.fc2), tau);
    case LossKind::kGlobalSup: return oracle::supcon(rows(b.z), b.labels, tau);
    default: throw InvariantError(loss_name(k) + " is an episodic loss");
  }
}

inline double library_value(LossKind k, const EpisodeInstance& e, double tau) {
  NoGradGuard no_grad;
  switch (k) {
    case LossKind::kDistanceScaled: return meta::distance_scaled_loss(e.episode, tau).item();
    case LossKind::kCrossView: return meta::cross_view_loss(e.episode, e.attn, meta::MetaLossConfig{}).total.item();
    default: throw InvariantError(loss_name(k) + " is not an episodic loss");
  }
}

inline double oracle_value(LossKind k, const EpisodeInstance& e, double tau) {
  const auto& ve = e.episode;
  switch (k) {
    case LossKind::kDistanceScaled:
      return oracle::distance_scaled({rows(ve.views[0].support_z), rows(ve.views[1].support_z),
                                      rows(ve.views[0].query_z), rows(ve.views[1].query_z), ve.support_labels,
                                      ve.query_labels, ve.ways},
                                     tau);
    case LossKind::kCrossView:
      return oracle::cross_view({rows(ve.views[0].support_h), rows(ve.views[1].support_h)},
                                {rows(ve.views[0].query_h), rows(ve.views[1].query_h)}, ve.support_labels,
                                ve.query_labels, ve.ways, attn_block(e.attn));
    default: throw InvariantError(loss_name(k) + " is not an episodic loss");
  }
}

struct OracleRow {
  std::string loss;
  std::size_t instances = 0;
  double max_abs_delta = 0.0;
  bool passed() const { return instances > 0 && max_abs_delta < kOracleTolerance; }
};

// `count` random instances per loss within the small-instance envelope.
inline std::vector<OracleRow> random_oracle_sweep(std::uint64_t seed, std::size_t count) {
  std::vector<OracleRow> rows_out;
  for (auto k : oracle_losses()) {
    OracleRow row{loss_name(k)};
    Rng rng(derive_seed({seed, static_cast<std::uint64_t>(k)}));
    for (std::size_t i = 0; i < count; ++i) {
      double delta;
      if (is_episodic(k)) {
        auto e = sampled_episode_instance(rng);
        delta = std::abs(library_value(k, e, kOracleTau) - oracle_value(k, e, kOracleTau));
      } else {
        auto p = sampled_pretrain_instance(rng);
        delta = std::abs(library_value(k, p, kOracleTau) - oracle_value(k, p, kOracleTau));
      }
      row.max_abs_delta = std::max(row.max_abs_delta, std::isnan(delta) ? INFINITY : delta);
      ++row.instances;
    }
    rows_out.push_back(row);
  }
  return rows_out;
}

// ---- fixtures ---------------------------------------------------------------
//
// A fixture directory holds manifest.json and one named-tensor archive per
// instance. The manifest records loss, file, τ and a FNV-1a checksum of the
// archive bytes.

namespace detail {

inline Tensor index_tensor(const std::vector<std::size_t>& v) {
  std::vector<double> d(v.begin(), v.end());
  return Tensor({v.size()}, std::move(d));
}

inline std::vector<std::size_t> indices(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double x : t.data()) out.push_back(static_cast<std::size_t>(x));
  return out;
}

inline const Tensor& need(const model::Checkpoint& ck, const std::string& name) {
  const auto* t = ck.find(name);
  if (!t) throw DataError("fixture lacks tensor '" + name + "'", DataError::Kind::kFormat);
  return t->tensor;
}

inline std::vector<model::NamedTensor> pretrain_archive(const PretrainInstance& p) {
  using model::TensorRole;
  std::vector<model::NamedTensor> out{{"z", p.batch.z, TensorRole::kBuffer},
                                      {"maps", p.batch.maps, TensorRole::kBuffer},
                                      {"pair", index_tensor(p.batch.pair), TensorRole::kBuffer},
                                      {"labels", index_tensor(p.batch.labels), TensorRole::kBuffer}};
  for (auto& t : p.head_tensors()) out.push_back(t);
  return out;
}

inline PretrainInstance pretrain_from_archive(const model::Checkpoint& ck) {
  const Tensor& maps = need(ck, "maps");
  const Tensor& z = need(ck, "z");
  if (maps.rank() != 4 || z.rank() != 2) throw DataError("fixture tensors have wrong rank", DataError::Kind::kFormat);
  const std::size_t c = maps.shape()[1], d = z.shape()[1];
  const std::size_t hidden = need(ck, "proj.fc1.weight").shape()[0];
  const std::size_t spatial = need(ck, "spatial.fq.weight").shape()[0];
  Rng rng(0);
  PretrainInstance p;
  p.spatial = model::SpatialHeads(c, spatial, rng);
  p.vecmap = model::VecMapHead(c, d, rng);
  p.proj = model::ProjectionHead(c, hidden, d, rng);
  model::restore(p.head_tensors(), ck);
  p.batch = {z, maps, indices(need(ck, "pair")), indices(need(ck, "labels"))};
  p.batch.validate();
  return p;
}

inline std::vector<model::NamedTensor> episode_archive(const EpisodeInstance& e) {
  using model::TensorRole;
  const auto& ve = e.episode;
  std::vector<model::NamedTensor> out{{"support_labels", index_tensor(ve.support_labels), TensorRole::kBuffer},
                                      {"query_labels", index_tensor(ve.query_labels), TensorRole::kBuffer},
                                      {"ways", Tensor::scalar(static_cast<double>(ve.ways)), TensorRole::kBuffer}};
  for (std::size_t r = 0; r < 2; ++r) {
    const std::string v = "view" + std::to_string(r) + ".";
    out.push_back({v + "support_h", ve.views[r].support_h, TensorRole::kBuffer});
    out.push_back({v + "support_z", ve.views[r].support_z, TensorRole::kBuffer});
    out.push_back({v + "query_h", ve.views[r].query_h, TensorRole::kBuffer});
    out.push_back({v + "query_z", ve.views[r].query_z, TensorRole::kBuffer});
  }
  for (auto& t : e.attn.named_tensors("attn")) out.push_back(t);
  return out;
}

inline EpisodeInstance episode_from_archive(const model::Checkpoint& ck) {
  EpisodeInstance e;
  auto& ve = e.episode;
  ve.support_labels = indices(need(ck, "support_labels"));
  ve.query_labels = indices(need(ck, "query_labels"));
  ve.ways = static_cast<std::size_t>(need(ck, "ways").item());
  for (std::size_t r = 0; r < 2; ++r) {
    const std::string v = "view" + std::to_string(r) + ".";
    ve.views[r] = {need(ck, v + "support_h"), need(ck, v + "support_z"), need(ck, v + "query_h"),
                   need(ck, v + "query_z")};
  }
  const std::size_t c = ve.views[0].support_h.shape()[1];
  Rng rng(0);
  e.attn = meta::AttnModule(c, rng);
  model::restore(e.attn.named_tensors("attn"), ck);
  ve.validate();
  return e;
}

inline std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline void generate_fixtures(const fs::path& dir, std::uint64_t seed, std::size_t per_loss) {
  fs::create_directories(dir);
  nlohmann::ordered_json manifest{{"format", "cfsl-oracle-fixtures"}, {"version", 1}, {"fixtures", nlohmann::ordered_json::array()}};
  for (auto k : oracle_losses()) {
    Rng rng(derive_seed({seed, static_cast<std::uint64_t>(k)}));
    for (std::size_t i = 0; i < per_loss; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%02zu.ckpt", loss_name(k).c_str(), i);
      const fs::path file = dir / name;
      if (is_episodic(k)) {
        model::save_checkpoint(file, detail::episode_archive(sampled_episode_instance(rng)), {"fixture"});
      } else {
        model::save_checkpoint(file, detail::pretrain_archive(sampled_pretrain_instance(rng)), {"fixture"});
      }
      fs::remove(model::checkpoint_manifest_path(file));  // the fixture manifest describes it instead
      manifest["fixtures"].push_back({{"loss", loss_name(k)},
                                      {"file", name},
                                      {"tau", kOracleTau},
                                      {"checksum", detail::hex(file_checksum(file.string()))}});
    }
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

// Evaluates every fixture listed in `dir`/manifest.json through both paths.
inline std::vector<OracleRow> oracle_compare(const fs::path& dir) {
  if (!fs::is_directory(dir) || fs::is_empty(dir)) {
    throw DataError("fixture directory " + dir.string() + " is empty or missing", DataError::Kind::kEmptySplit);
  }
  const fs::path mpath = dir / "manifest.json";
  std::ifstream ms(mpath);
  if (!ms) throw DataError("fixture directory has no manifest.json: " + dir.string(), DataError::Kind::kMissingFile);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed fixture manifest: " + std::string(e.what()), DataError::Kind::kFormat);
  }
  const auto fixtures = manifest.value("fixtures", nlohmann::json::array());
  if (fixtures.empty()) throw DataError("fixture manifest lists no fixtures", DataError::Kind::kEmptySplit);

  std::vector<OracleRow> out;
  for (auto k : oracle_losses()) out.push_back({loss_name(k)});
  for (const auto& f : fixtures) {
    const auto kind = loss_from_name(f.at("loss").get<std::string>());
    const fs::path file = dir / f.at("file").get<std::string>();
    const std::string expected = f.at("checksum").get<std::string>();
    const std::string actual = detail::hex(file_checksum(file.string()));
    if (actual != expected) {
      throw DataError("checksum mismatch for fixture " + file.string() + ": expected " + expected + ", got " + actual,
                      DataError::Kind::kChecksum);
    }
    const double tau = f.value("tau", kOracleTau);
    const auto ck = model::load_checkpoint(file);
    double delta;
    if (is_episodic(kind)) {
      auto e = detail::episode_from_archive(ck);
      delta = std::abs(library_value(kind, e, tau) - oracle_value(kind, e, tau));
    } else {
      auto p = detail::pretrain_from_archive(ck);
      delta = std::abs(library_value(kind, p, tau) - oracle_value(kind, p, tau));
    }
    auto& row = out[static_cast<std::size_t>(kind)];
    row.max_abs_delta = std::max(row.max_abs_delta, std::isnan(delta) ? INFINITY : delta);
    ++row.instances;
  }
  std::erase_if(out, [](const OracleRow& r) { return r.instances == 0; });
  return out;
}

}  // namespace cfsl::verify
