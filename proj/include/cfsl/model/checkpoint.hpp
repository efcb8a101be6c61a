#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsl/model/layers.hpp"
#include "cfsl/tensor/io.hpp"

namespace cfsl::model {

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::string stage;
  std::size_t epoch = 0;  // epochs completed
  std::size_t step = 0;   // optimizer steps completed
};

struct Checkpoint {
  CheckpointInfo info;
  std::vector<NamedTensor> tensors;  // in file order

  const NamedTensor* find(const std::string& name) const {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
    return it == tensors.end() ? nullptr : &*it;
  }
};

inline std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& archive) {
  auto p = archive;
  p += ".json";
  return p;
}

// Archive: magic, version, count, then per entry {u8 role, u32 name length,
// name bytes, tensor record}. A JSON sidecar lists name, role and shape. No
// timestamps or host data, so equal state gives byte-identical files.
inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                            const CheckpointInfo& info) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    cfsl::detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    cfsl::detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      cfsl::detail::write_le<std::uint8_t>(os, t.role == TensorRole::kParameter ? 0 : 1);
      cfsl::detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
      os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      write_tensor(os, t.tensor);
    }
    if (!os) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);

  nlohmann::ordered_json manifest{{"format", "cfsl-checkpoint"},
                                  {"version", kCheckpointVersion},
                                  {"stage", info.stage},
                                  {"epoch", info.epoch},
                                  {"step", info.step},
                                  {"tensors", nlohmann::ordered_json::array()}};
  for (const auto& t : tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"role", role_name(t.role)}, {"shape", t.tensor.shape()}});
  }
  std::ofstream ms(checkpoint_manifest_path(path));
  ms << manifest.dump(2) << '\n';
  if (!ms) throw DataError("failed writing checkpoint manifest for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing checkpoint: " + path.string(), DataError::Kind::kMissingFile);
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) {
    throw DataError("not a checkpoint archive: " + path.string(), DataError::Kind::kFormat);
  }
  if (cfsl::detail::read_le<std::uint32_t>(is) != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version in " + path.string(), DataError::Kind::kFormat);
  }
  Checkpoint ck;
  const auto count = cfsl::detail::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto role = cfsl::detail::read_le<std::uint8_t>(is);
    const auto len = cfsl::detail::read_le<std::uint32_t>(is);
    if (len > 4096) throw DataError("implausible tensor name length in " + path.string(), DataError::Kind::kFormat);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("checkpoint truncated: " + path.string(), DataError::Kind::kFormat);
    ck.tensors.push_back({name, read_tensor(is), role == 0 ? TensorRole::kParameter : TensorRole::kBuffer});
  }

  std::ifstream ms(checkpoint_manifest_path(path));
  if (ms) {
    try {
      auto m = nlohmann::json::parse(ms);
      ck.info = {m.value("stage", ""), m.value("epoch", std::size_t{0}), m.value("step", std::size_t{0})};
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed checkpoint manifest: " + std::string(e.what()), DataError::Kind::kFormat);
    }
  }
  return ck;
}

// Copies archived values into live tensors by name. Every target must be
// present with a matching shape; extra archive entries are ignored.
inline void restore(const std::vector<NamedTensor>& targets, const Checkpoint& ck) {
  for (const auto& t : targets) {
    const NamedTensor* src = ck.find(t.name);
    if (!src) throw DataError("checkpoint lacks tensor '" + t.name + "'", DataError::Kind::kFormat);
    if (src->tensor.shape() != t.tensor.shape()) {
      throw DataError("checkpoint tensor '" + t.name + "' has shape " + to_string(src->tensor.shape()) +
                          ", model expects " + to_string(t.tensor.shape()),
                      DataError::Kind::kFormat);
    }
    Tensor dst = t.tensor;
    auto out = dst.mutable_data();
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), out.begin());
  }
}

}  // namespace cfsl::model
