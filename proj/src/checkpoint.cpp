#include "demist/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace demist {

namespace {

constexpr char kMagic[8] = {'D', 'M', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& os, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    os.put(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U get_le(std::istream& is) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int byte = is.get();
    if (byte == EOF) throw CheckpointError("checkpoint truncated");
    value |= static_cast<U>(static_cast<unsigned char>(byte)) << (8 * i);
  }
  return value;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& entry : entries) {
    if (shape_numel(entry.shape) != entry.values.size()) {
      throw CheckpointError("checkpoint entry '" + entry.name + "' has inconsistent shape");
    }
    manifest.push_back({{"name", entry.name},
                        {"shape", entry.shape},
                        {"offset", offset},
                        {"count", entry.values.size()}});
    offset += entry.values.size() * sizeof(float);
  }
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& entry : entries) {
    for (float v : entry.values) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw CheckpointError("failed writing checkpoint: " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file: " + path.string());
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto length = get_le<std::uint64_t>(is);
  std::string text(length, '\0');
  is.read(text.data(), static_cast<std::streamsize>(length));
  if (!is) throw CheckpointError("checkpoint manifest truncated");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const std::streampos payload = is.tellg();
  std::vector<CheckpointEntry> entries;
  for (const auto& item : manifest) {
    CheckpointEntry entry;
    entry.name = item.at("name").get<std::string>();
    entry.shape = item.at("shape").get<Shape>();
    entry.offset = item.at("offset").get<std::uint64_t>();
    const auto count = item.at("count").get<std::size_t>();
    if (shape_numel(entry.shape) != count) {
      throw CheckpointError("checkpoint entry '" + entry.name + "' count does not match shape");
    }
    is.seekg(payload + static_cast<std::streamoff>(entry.offset));
    entry.values.resize(count);
    for (auto& v : entry.values) v = std::bit_cast<float>(get_le<std::uint32_t>(is));
    entries.push_back(std::move(entry));
  }
  return entries;
}

template <typename T>
void save_params(const std::filesystem::path& path, const ParamList<T>& params) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(params.size());
  for (const auto& p : params) {
    CheckpointEntry entry;
    entry.name = p.name;
    entry.shape = p.value.shape();
    entry.values.assign(p.value.data().begin(), p.value.data().end());
    entries.push_back(std::move(entry));
  }
  write_checkpoint(path, entries);
}

template <typename T>
void load_params(const std::filesystem::path& path, ParamList<T>& params) {
  const auto entries = read_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;

  std::ostringstream diff;
  std::size_t problems = 0;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      diff << "  " << p.name << ": expected " << shape_str(p.value.shape()) << ", found <missing>\n";
      ++problems;
    } else if (it->second->shape != p.value.shape()) {
      diff << "  " << p.name << ": expected " << shape_str(p.value.shape()) << ", found "
           << shape_str(it->second->shape) << "\n";
      ++problems;
    }
  }
  for (const auto& e : entries) {
    const bool known = std::any_of(params.begin(), params.end(), [&](const auto& p) { return p.name == e.name; });
    if (!known) {
      diff << "  " << e.name << ": expected <absent>, found " << shape_str(e.shape) << "\n";
      ++problems;
    }
  }
  if (problems) {
    throw CheckpointError("checkpoint " + path.string() + " does not match the configured network (" +
                          std::to_string(problems) + " differences):\n" + diff.str());
  }
  for (auto& p : params) {
    const auto& values = by_name.at(p.name)->values;
    auto dst = p.value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(values[i]);
  }
}

template void save_params(const std::filesystem::path&, const ParamList<float>&);
template void save_params(const std::filesystem::path&, const ParamList<double>&);
template void load_params(const std::filesystem::path&, ParamList<float>&);
template void load_params(const std::filesystem::path&, ParamList<double>&);

}  // namespace demist
