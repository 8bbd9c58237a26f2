#include "magnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace magnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need byte swaps");

namespace {

constexpr char kMagic[5] = {'T', 'M', 'G', 'N', '1'};

}  // namespace

void save_checkpoint(const GlobalModel& model, const std::string& cfg_hash,
                     const std::string& path) {
  nlohmann::json manifest;
  manifest["config_hash"] = cfg_hash;
  nlohmann::json params = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& e : model.entries) {
    params.push_back({{"name", e.name},
                      {"shape", e.shape},
                      {"dtype", "f64"},
                      {"offset", offset}});
    offset += e.values.size() * sizeof(double);
  }
  manifest["params"] = params;
  manifest["blob_bytes"] = offset;
  const std::string mstr = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  const uint64_t mlen = mstr.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& e : model.entries) {
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  if (!out) throw Error("short write while saving checkpoint '" + path + "'");
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error("checkpoint '" + path + "': corrupt magic");
  }
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (in.gcount() != sizeof(mlen)) throw Error("checkpoint '" + path + "': truncated header");
  if (mlen > (1ULL << 30)) throw Error("checkpoint '" + path + "': implausible manifest size");

  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (static_cast<uint64_t>(in.gcount()) != mlen) {
    throw Error("checkpoint '" + path + "': truncated manifest");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint '" + path + "': bad manifest: " + e.what());
  }

  CheckpointData data;
  data.config_hash = manifest.at("config_hash").get<std::string>();
  const uint64_t blob_bytes = manifest.at("blob_bytes").get<uint64_t>();
  std::string blob(blob_bytes, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
  if (static_cast<uint64_t>(in.gcount()) != blob_bytes) {
    throw Error("checkpoint '" + path + "': truncated blob (manifest promises " +
                std::to_string(blob_bytes) + " bytes)");
  }

  uint64_t expected_offset = 0;
  for (const auto& p : manifest.at("params")) {
    GlobalModel::Entry e;
    e.name = p.at("name").get<std::string>();
    e.shape = p.at("shape").get<Shape>();
    if (p.at("dtype").get<std::string>() != "f64") {
      throw Error("checkpoint '" + path + "': unsupported dtype for '" + e.name + "'");
    }
    const uint64_t offset = p.at("offset").get<uint64_t>();
    if (offset != expected_offset) {
      throw Error("checkpoint '" + path + "': overlapping or out-of-order offset for '" +
                  e.name + "'");
    }
    const uint64_t count = static_cast<uint64_t>(shape_numel(e.shape));
    const uint64_t bytes = count * sizeof(double);
    if (offset + bytes > blob_bytes) {
      throw Error("checkpoint '" + path + "': entry '" + e.name + "' exceeds the blob");
    }
    e.values.resize(count);
    std::memcpy(e.values.data(), blob.data() + offset, bytes);
    expected_offset = offset + bytes;
    data.model.entries.push_back(std::move(e));
  }
  if (expected_offset != blob_bytes) {
    throw Error("checkpoint '" + path + "': manifest/blob size mismatch");
  }
  return data;
}

std::pair<int, int> load_checkpoint_into(TimeMagnetModel& model, const std::string& path,
                                         const std::string& expected_hash,
                                         std::ostream* warnings) {
  CheckpointData data = read_checkpoint(path);
  if (data.config_hash != expected_hash && warnings) {
    (*warnings) << "[magnet] warning: checkpoint config hash " << data.config_hash
                << " differs from the current config " << expected_hash
                << "; loading by name/shape intersection\n";
  }

  ParamMap pm;
  model.collect(pm);
  int loaded = 0, skipped = 0;
  for (const auto& e : data.model.entries) {
    bool found = false;
    for (const auto& slot : pm.entries()) {
      if (slot.name == e.name && slot.tensor.values().size() == e.values.size()) {
        Tensor t = slot.tensor;
        t.values() = e.values;
        found = true;
        break;
      }
    }
    if (found) {
      ++loaded;
    } else {
      ++skipped;
      if (warnings) {
        (*warnings) << "[magnet] warning: checkpoint entry '" << e.name
                    << "' has no matching parameter; skipped\n";
      }
    }
  }
  if (data.config_hash == expected_hash && skipped > 0) {
    throw Error("checkpoint '" + path + "': " + std::to_string(skipped) +
                " entries did not match despite an identical config hash");
  }
  return {loaded, skipped};
}

}  // namespace magnet
