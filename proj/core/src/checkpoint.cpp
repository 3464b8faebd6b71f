#include "apf/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "binary_io.hpp"

namespace apf {

namespace detail {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseError::Kind::kIo, "cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

namespace {
constexpr char kMagic[4] = {'A', 'P', 'F', '1'};
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& metadata) {
  nlohmann::json manifest;
  manifest["format"] = "APF1";
  manifest["version"] = 1;
  manifest["config"] = model.config();
  manifest["metadata"] = metadata;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const Parameter& p : model.params()) {
    entries.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += p.value.size() * 8;
  }
  manifest["parameters"] = std::move(entries);
  manifest["data_bytes"] = offset;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError(ParseError::Kind::kIo, "cannot write " + path.string());
  out.write(kMagic, 4);
  detail::write_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter& p : model.params()) detail::write_f64_le(out, p.value.data());
  if (!out) throw ParseError(ParseError::Kind::kIo, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path.string());
  detail::ByteReader reader(bytes, path.string());
  if (std::memcmp(reader.take(4, "magic"), kMagic, 4) != 0) {
    throw ParseError(ParseError::Kind::kBadMagic, path.string() + ": bad magic, expected APF1");
  }
  const std::uint32_t len = detail::decode_u32_le(reader.take(4, "manifest length"));
  const auto* text = reinterpret_cast<const char*>(reader.take(len, "manifest"));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text, text + len);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Kind::kBadHeader, path.string() + ": manifest is not valid JSON: " + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.config = manifest.at("config").get<ModelConfig>();
    ckpt.metadata = manifest.value("metadata", nlohmann::json::object());
    const std::size_t data_bytes = manifest.at("data_bytes").get<std::size_t>();
    if (reader.remaining() != data_bytes) {
      if (reader.remaining() < data_bytes) {
        throw ParseError(ParseError::Kind::kTruncated, path.string() + ": truncated payload");
      }
      throw ParseError(ParseError::Kind::kSizeMismatch, path.string() + ": size mismatch between manifest and payload");
    }
    const unsigned char* data = reader.take(data_bytes, "parameters");
    for (const auto& entry : manifest.at("parameters")) {
      Shape shape = entry.at("shape").get<Shape>();
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t count = shape_product(shape);
      if (offset + count * 8 > data_bytes) {
        throw ParseError(ParseError::Kind::kSizeMismatch, path.string() + ": parameter block out of range");
      }
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) values[i] = detail::decode_f64_le(data + offset + i * 8);
      ckpt.params.add(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Kind::kBadHeader, path.string() + ": malformed manifest: " + e.what());
  }
  return ckpt;
}

Model load_model(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  return Model(ckpt.config, std::move(ckpt.params));
}

std::string first_divergent_field(const nlohmann::json& a, const nlohmann::json& b, const std::string& prefix) {
  if (a.is_object() && b.is_object()) {
    for (const auto& [key, value] : a.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (!b.contains(key)) return path;
      std::string inner = first_divergent_field(value, b.at(key), path);
      if (!inner.empty()) return inner;
    }
    for (const auto& [key, value] : b.items()) {
      if (!a.contains(key)) return prefix.empty() ? key : prefix + "." + key;
    }
    return "";
  }
  if (a != b) return prefix.empty() ? "<root>" : prefix;
  return "";
}

}  // namespace apf
