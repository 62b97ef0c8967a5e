#include <cstring>
#include <fstream>
#include <stdexcept>

#include "resprobe/nn.hpp"
#include "resprobe/serialize.hpp"
#include "resprobe/share_unroll.hpp"

namespace resprobe::nn {

namespace {

constexpr char kMagic[8] = {'R', 'P', 'R', 'O', 'B', 'E', 'C', 'K'};
constexpr uint32_t kVersion = 1;

// The format is little-endian by definition; these helpers write the host
// representation, which matches on every platform this artifact targets.
template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, uint64_t seed, int epoch) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  put<uint32_t>(os, kVersion);
  put<uint64_t>(os, seed);
  put<int32_t>(os, epoch);

  nlohmann::json header;
  header["architecture"] = to_json(model.config);
  header["sharing"] = model.sharing ? to_json(*model.sharing) : nlohmann::json(nullptr);
  std::string hj = header.dump();
  put<uint32_t>(os, static_cast<uint32_t>(hj.size()));
  os.write(hj.data(), static_cast<std::streamsize>(hj.size()));

  auto refs = model.state_refs();
  put<uint32_t>(os, static_cast<uint32_t>(refs.size()));
  for (const auto& r : refs) {
    put<uint16_t>(os, static_cast<uint16_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<uint8_t>(os, static_cast<uint8_t>(r.shape.size()));
    for (int64_t d : r.shape) put<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(r.values->data()),
             static_cast<std::streamsize>(r.values->size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed while writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint32_t version = take<uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  ck.seed = take<uint64_t>(is);
  ck.epoch = take<int32_t>(is);

  uint32_t hj_len = take<uint32_t>(is);
  std::string hj(hj_len, '\0');
  is.read(hj.data(), hj_len);
  if (!is) throw std::runtime_error("checkpoint truncated in header");
  nlohmann::json header = nlohmann::json::parse(hj);
  ArchitectureConfig arch = architecture_from_json(header.at("architecture"));
  if (header.at("sharing").is_null()) {
    ck.model = build_model(arch, ck.seed);
  } else {
    ck.model = share::build_shared_model(arch, sharing_from_json(header.at("sharing")), ck.seed);
  }

  auto refs = ck.model.state_refs();
  uint32_t count = take<uint32_t>(is);
  if (count != refs.size())
    throw std::runtime_error("checkpoint has " + std::to_string(count) + " arrays, model expects " +
                             std::to_string(refs.size()));
  for (auto& r : refs) {
    uint16_t name_len = take<uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is || name != r.name)
      throw std::runtime_error("checkpoint array '" + name + "' does not match expected '" +
                               r.name + "'");
    uint8_t rank = take<uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = take<int64_t>(is);
    if (shape != r.shape)
      throw std::runtime_error("checkpoint array '" + name + "' has shape " + shape_str(shape) +
                               ", expected " + shape_str(r.shape));
    is.read(reinterpret_cast<char*>(r.values->data()),
            static_cast<std::streamsize>(r.values->size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint truncated in array '" + name + "'");
  }
  return ck;
}

}  // namespace resprobe::nn
