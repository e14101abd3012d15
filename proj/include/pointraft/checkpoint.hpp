#pragma once

// Versioned binary checkpoint: a JSON config block followed by named float32
// parameter arrays (little-endian, row-major). Layout:
//
//   bytes 0..3   magic "PRFT"
//   u32          format version (currently 1)
//   u64          config json byte count, then that many bytes of JSON
//   u32          array count
//   per array:   u16 name length, name bytes, u8 rank, i64 dims[rank],
//                f32 data[prod(dims)]
//
// The JSON block holds {"net": <network config>, "extra": <caller's object>}.
// Round-trips are bitwise lossless for float parameters.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointraft/common.hpp"
#include "pointraft/net.hpp"

namespace pointraft {

inline constexpr char kCheckpointMagic[4] = {'P', 'R', 'F', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetConfig config;
  ModelParams<float> params;
  nlohmann::json extra;
};

namespace detail {

template <class T>
void write_pod(std::FILE* f, const T& v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) throw DataError("checkpoint write failed");
}

template <class T>
T read_pod(std::FILE* f, const std::string& path) {
  T v;
  if (std::fread(&v, sizeof(T), 1, f) != 1)
    throw DataError("corrupt checkpoint (truncated): " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(ModelParams<float>& params, const NetConfig& config,
                            const std::string& path,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot write checkpoint: " + path);
  struct Closer {
    std::FILE* f;
    ~Closer() {
      if (f) std::fclose(f);
    }
  } closer{f};

  if (std::fwrite(kCheckpointMagic, 1, 4, f) != 4)
    throw DataError("checkpoint write failed");
  detail::write_pod(f, kCheckpointVersion);

  nlohmann::json j{{"net", config}, {"extra", extra}};
  const std::string cfg = j.dump();
  detail::write_pod(f, std::uint64_t(cfg.size()));
  if (!cfg.empty() && std::fwrite(cfg.data(), 1, cfg.size(), f) != cfg.size())
    throw DataError("checkpoint write failed");

  const auto arrays = param_arrays(params, /*with_buffers=*/true);
  detail::write_pod(f, std::uint32_t(arrays.size()));
  for (const auto& a : arrays) {
    detail::write_pod(f, std::uint16_t(a.name.size()));
    if (std::fwrite(a.name.data(), 1, a.name.size(), f) != a.name.size())
      throw DataError("checkpoint write failed");
    detail::write_pod(f, std::uint8_t(a.dims.size()));
    for (auto d : a.dims) detail::write_pod(f, std::int64_t(d));
    if (std::fwrite(a.data, sizeof(float), a.size(), f) != a.size())
      throw DataError("checkpoint write failed");
  }
  closer.f = nullptr;
  if (std::fclose(f) != 0) throw DataError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open checkpoint: " + path);
  struct Closer {
    std::FILE* f;
    ~Closer() { std::fclose(f); }
  } closer{f};

  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 ||
      std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("not a checkpoint file: " + path);
  const auto version = detail::read_pod<std::uint32_t>(f, path);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) +
                    ": " + path);

  const auto cfg_len = detail::read_pod<std::uint64_t>(f, path);
  if (cfg_len > (1u << 20)) throw DataError("corrupt checkpoint (config size): " + path);
  std::string cfg_text(cfg_len, '\0');
  if (cfg_len && std::fread(cfg_text.data(), 1, cfg_len, f) != cfg_len)
    throw DataError("corrupt checkpoint (truncated): " + path);

  Checkpoint ck;
  try {
    nlohmann::json j = nlohmann::json::parse(cfg_text);
    ck.config = j.at("net").get<NetConfig>();
    ck.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint (config): " + path + ": " + e.what());
  }
  ck.params = make_params<float>(ck.config);

  auto refs = param_arrays(ck.params, /*with_buffers=*/true);
  std::map<std::string, ArrayRef<float>*> by_name;
  for (auto& r : refs) by_name[r.name] = &r;

  const auto n_arrays = detail::read_pod<std::uint32_t>(f, path);
  if (n_arrays != refs.size())
    throw DataError("checkpoint array count mismatch (" + std::to_string(n_arrays) +
                    " stored, " + std::to_string(refs.size()) + " expected): " + path);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    const auto name_len = detail::read_pod<std::uint16_t>(f, path);
    std::string name(name_len, '\0');
    if (std::fread(name.data(), 1, name_len, f) != name_len)
      throw DataError("corrupt checkpoint (truncated): " + path);
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw DataError("unexpected array '" + name + "' in checkpoint: " + path);
    ArrayRef<float>* ref = it->second;
    const auto rank = detail::read_pod<std::uint8_t>(f, path);
    if (rank != ref->dims.size())
      throw DataError("shape mismatch for '" + name + "' in checkpoint: " + path);
    for (std::size_t d = 0; d < rank; ++d) {
      const auto dim = detail::read_pod<std::int64_t>(f, path);
      if (dim != ref->dims[d])
        throw DataError("shape mismatch for '" + name + "' in checkpoint: " + path);
    }
    if (std::fread(ref->data, sizeof(float), ref->size(), f) != ref->size())
      throw DataError("corrupt checkpoint (truncated): " + path);
    by_name.erase(it);
  }
  return ck;
}

}  // namespace pointraft
