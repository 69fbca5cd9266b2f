#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "linalg/matrix.hpp"
#include "vit/model.hpp"

namespace comcat::io {

using linalg::Matrix;
using nlohmann::json;

inline constexpr char kMagic[4] = {'C', 'M', 'C', 'T'};
inline constexpr std::uint16_t kFormatVersion = 1;

// On-disk layout:
//   "CMCT" | u16 version | u32 header length | JSON header | payload
// Integers are little-endian. The payload holds every tensor as row-major
// little-endian IEEE-754 doubles; the header's tensor table gives each one's
// shape and byte range within the payload.
struct Container {
  std::string kind;  // model | adapter | plan
  json config = json::object();
  std::map<std::string, Matrix> tensors;
  std::optional<std::string> base_checksum;
  json extra = json::object();  // kind-specific header fields
};

std::vector<std::uint8_t> encode(const Container& c);
Container decode(std::span<const std::uint8_t> bytes);

// Returns the SHA-256 of the written bytes.
std::string write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string file_sha256(const std::filesystem::path& path);

json config_to_json(const vit::ModelConfig& config);
vit::ModelConfig config_from_json(const json& j);

Container model_container(const vit::VitModel& model);
// Rebuilds the model, inferring each block's attention form and FFN
// factorization from the tensor names present.
vit::VitModel model_from_container(const Container& c);

std::string write_model(const std::filesystem::path& path, const vit::VitModel& model);
vit::VitModel read_model(const std::filesystem::path& path);

}  // namespace comcat::io
