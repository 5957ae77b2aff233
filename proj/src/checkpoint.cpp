#include <bit>
#include <fstream>

#include "openvad/model.hpp"

namespace openvad {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

struct RawCheckpoint {
  Json header;
  std::uint64_t hash = 0;
  std::string payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 20 || std::string_view(buf.data(), 4) != "OVCK") {
    throw CorruptionError(path.string() + ": not a checkpoint");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (get_le(p + 4, 4) != kCheckpointVersion) throw CorruptionError(path.string() + ": unsupported version");
  RawCheckpoint raw;
  raw.hash = get_le(p + 8, 8);
  const std::size_t header_len = get_le(p + 16, 4);
  if (buf.size() < 20 + header_len) throw CorruptionError(path.string() + ": truncated header");
  try {
    raw.header = Json::parse(buf.substr(20, header_len));
  } catch (const Json::exception& e) {
    throw CorruptionError(path.string() + ": malformed header: " + e.what());
  }
  raw.payload = buf.substr(20 + header_len);
  return raw;
}

Mat read_tensor(const RawCheckpoint& raw, const Json& entry, const std::string& where) {
  const auto rows = entry.at("rows").get<Eigen::Index>();
  const auto cols = entry.at("cols").get<Eigen::Index>();
  const auto offset = entry.at("offset").get<std::size_t>();
  const std::size_t count = static_cast<std::size_t>(rows * cols);
  if ((offset + count) * 4 > raw.payload.size()) throw CorruptionError(where + ": payload too short");
  Mat m(rows, cols);
  const auto* q = reinterpret_cast<const unsigned char*>(raw.payload.data()) + offset * 4;
  for (std::size_t i = 0; i < count; ++i) {
    m.data()[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(q + 4 * i, 4)));
  }
  return m;
}

}  // namespace

std::uint64_t config_hash(const Config& cfg, int embed_dim) {
  const Json arch = {{"hidden_size", cfg.hidden_size},   {"encoder_layers", cfg.encoder_layers},
                     {"fusion_layers", cfg.fusion_layers}, {"conv_kernel", cfg.conv_kernel},
                     {"language_guided", cfg.language_guided}, {"embed_dim", embed_dim}};
  return fnv1a64(arch.dump());
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Json& extra,
                     const ParameterSet* extra_tensors, const std::string& extra_prefix) {
  Json params = Json::array();
  std::string payload;
  std::size_t offset = 0;
  auto append = [&](const std::string& name, const Mat& m) {
    params.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    for (Eigen::Index i = 0; i < m.size(); ++i) put_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
    offset += static_cast<std::size_t>(m.size());
  };
  const ParameterSet& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) append(ps.name(i), ps.value(i));
  if (extra_tensors) {
    for (std::size_t i = 0; i < extra_tensors->size(); ++i) append(extra_prefix + extra_tensors->name(i), extra_tensors->value(i));
  }
  const Json header = {{"config", model.config().to_json()},
                       {"embed_dim", model.embed_dim()},
                       {"params", params},
                       {"extra", extra}};
  const std::string header_text = header.dump();
  std::string buf("OVCK", 4);
  put_u32(buf, kCheckpointVersion);
  put_u64(buf, config_hash(model.config(), model.embed_dim()));
  put_u32(buf, static_cast<std::uint32_t>(header_text.size()));
  buf += header_text;
  buf += payload;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const Config* expected, int expected_embed_dim,
                           bool force) {
  const RawCheckpoint raw = read_raw(path);
  Config cfg;
  int embed_dim = 0;
  try {
    cfg = validate_config(Config::from_json(raw.header.at("config")));
    embed_dim = raw.header.at("embed_dim").get<int>();
  } catch (const Json::exception& e) {
    throw CorruptionError(path.string() + ": malformed header: " + e.what());
  }
  if (config_hash(cfg, embed_dim) != raw.hash) throw CorruptionError(path.string() + ": config hash does not match header");
  if (expected) {
    const int dim = expected_embed_dim >= 0 ? expected_embed_dim : embed_dim;
    if (config_hash(*expected, dim) != raw.hash && !force) {
      throw ValidationError(path.string() + ": checkpoint was trained with a different architecture configuration");
    }
  }
  Checkpoint ck;
  ck.hash = raw.hash;
  ck.model = Model::empty(cfg, embed_dim);
  if (raw.header.contains("extra")) ck.extra = raw.header.at("extra");
  std::size_t found = 0;
  for (const auto& entry : raw.header.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    if (!ck.model.params().contains(name)) continue;
    Mat m = read_tensor(raw, entry, path.string());
    Mat& dst = ck.model.params().at(name);
    if (dst.rows() != m.rows() || dst.cols() != m.cols()) throw CorruptionError(path.string() + ": shape mismatch for " + name);
    dst = std::move(m);
    ++found;
  }
  if (found != ck.model.params().size()) throw CorruptionError(path.string() + ": missing parameters");
  if (!ck.model.params().all_finite()) throw CorruptionError(path.string() + ": non-finite parameters");
  return ck;
}

ParameterSet load_checkpoint_tensors(const std::filesystem::path& path, const std::string& prefix) {
  const RawCheckpoint raw = read_raw(path);
  ParameterSet out;
  for (const auto& entry : raw.header.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    if (name.rfind(prefix, 0) != 0) continue;
    out.add(name.substr(prefix.size()), read_tensor(raw, entry, path.string()));
  }
  return out;
}

}  // namespace openvad
