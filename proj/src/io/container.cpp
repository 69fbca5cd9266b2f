#include "io/container.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "util/error.hpp"

namespace comcat::io {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr std::size_t kPreamble = 4 + 2 + 4;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t at) {
  T value;
  std::memcpy(&value, bytes.data() + at, sizeof(T));
  return value;
}

std::string hex(const unsigned char* p, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back(digits[p[i] >> 4]);
    s.push_back(digits[p[i] & 15]);
  }
  return s;
}

}  // namespace

std::vector<std::uint8_t> encode(const Container& c) {
  if (c.kind != "model" && c.kind != "adapter" && c.kind != "plan")
    throw ContractError("container kind must be model, adapter or plan, got '" + c.kind + "'");
  json header = c.extra;
  header["kind"] = c.kind;
  header["config"] = c.config;
  if (c.base_checksum) header["base_checksum"] = *c.base_checksum;
  json table = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : c.tensors) {
    const std::uint64_t length = m.size() * sizeof(double);
    table[name] = {{"shape", {m.rows(), m.cols()}}, {"offset", offset}, {"length", length}};
    offset += length;
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kPreamble + text.size() + offset);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put<std::uint16_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, m] : c.tensors)
    for (double v : m.data()) put<double>(out, v);
  return out;
}

Container decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw ParseError("bad magic: not a CMCT weight container");
  if (bytes.size() < kPreamble)
    throw ParseError("truncated preamble: file has " + std::to_string(bytes.size()) + " bytes");
  const auto version = get<std::uint16_t>(bytes, 4);
  if (version != kFormatVersion)
    throw ParseError("unsupported container version " + std::to_string(version));
  const auto header_len = get<std::uint32_t>(bytes, 6);
  if (bytes.size() < kPreamble + header_len)
    throw ParseError("truncated header: needs " + std::to_string(header_len) + " bytes at offset " +
                     std::to_string(kPreamble) + ", file has " + std::to_string(bytes.size()));
  json header;
  try {
    header = json::parse(bytes.begin() + kPreamble, bytes.begin() + kPreamble + header_len);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed header JSON: ") + e.what());
  }

  Container c;
  const std::size_t payload_at = kPreamble + header_len;
  const std::size_t payload_size = bytes.size() - payload_at;
  try {
    c.kind = header.at("kind").get<std::string>();
    if (c.kind != "model" && c.kind != "adapter" && c.kind != "plan")
      throw ParseError("unknown container kind '" + c.kind + "'");
    c.config = header.at("config");
    if (header.contains("base_checksum")) c.base_checksum = header["base_checksum"].get<std::string>();

    struct Range {
      std::uint64_t begin, end;
      std::string name;
    };
    std::vector<Range> ranges;
    for (const auto& [name, entry] : header.at("tensors").items()) {
      const auto shape = entry.at("shape").get<std::vector<std::uint64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto length = entry.at("length").get<std::uint64_t>();
      if (shape.size() != 2) throw ParseError("tensor '" + name + "' must have a 2-D shape");
      if (length != shape[0] * shape[1] * sizeof(double))
        throw ParseError("tensor '" + name + "' length " + std::to_string(length) +
                         " does not match its shape");
      if (offset > payload_size || length > payload_size - offset)
        throw ParseError("truncated payload: tensor '" + name + "' ends at payload offset " +
                         std::to_string(offset + length) + " but the payload has " +
                         std::to_string(payload_size) + " bytes (file offset " +
                         std::to_string(payload_at + payload_size) + ")");
      ranges.push_back({offset, offset + length, name});
      Matrix m(shape[0], shape[1]);
      std::memcpy(m.data().data(), bytes.data() + payload_at + offset, length);
      c.tensors.emplace(name, std::move(m));
    }
    std::sort(ranges.begin(), ranges.end(),
              [](const Range& a, const Range& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < ranges.size(); ++i)
      if (ranges[i].begin < ranges[i - 1].end)
        throw ParseError("overlapping tensors '" + ranges[i - 1].name + "' and '" + ranges[i].name +
                         "' at payload offset " + std::to_string(ranges[i].begin));
    for (const auto& [key, value] : header.items())
      if (key != "kind" && key != "config" && key != "base_checksum" && key != "tensors")
        c.extra[key] = value;
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid header field: ") + e.what());
  }
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  return hex(digest, len);
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode(c);
  write_file(path, bytes);
  return sha256_hex(bytes);
}

Container read_container(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

json config_to_json(const vit::ModelConfig& config) {
  return {{"d_model", config.d_model},       {"heads", config.heads},
          {"blocks", config.blocks},         {"ffn_dim", config.ffn_dim},
          {"classes", config.classes},       {"image_side", config.image_side},
          {"patch_side", config.patch_side}};
}

vit::ModelConfig config_from_json(const json& j) {
  vit::ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    c.image_side = j.at("image_side").get<std::size_t>();
    c.patch_side = j.at("patch_side").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid model config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ParseError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

Container model_container(const vit::VitModel& model) {
  Container c;
  c.kind = "model";
  c.config = config_to_json(model.config);
  json forms = json::array();
  for (const auto& blk : model.blocks) forms.push_back(vit::form_name(blk.form));
  c.extra["attention_forms"] = forms;
  vit::visit_tensors(model, [&](const std::string& name, const Matrix& m) { c.tensors.emplace(name, m); });
  return c;
}

vit::VitModel model_from_container(const Container& c) {
  if (c.kind != "model") throw ParseError("expected a model container, found kind '" + c.kind + "'");
  vit::VitModel m;
  m.config = config_from_json(c.config);
  const auto& cfg = m.config;
  auto take = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw ParseError("model container lacks tensor '" + name + "'");
    if ((rows && it->second.rows() != rows) || (cols && it->second.cols() != cols))
      throw ParseError("tensor '" + name + "' has shape " + it->second.shape_string());
    return it->second;
  };
  auto has = [&](const std::string& name) { return c.tensors.count(name) > 0; };
  const std::size_t dm = cfg.d_model, d = cfg.head_dim();

  std::vector<std::string> forms;
  if (c.extra.contains("attention_forms")) forms = c.extra["attention_forms"].get<std::vector<std::string>>();

  m.embed = take("embed", cfg.patch_features(), dm);
  m.pos = take("pos", cfg.seq_len(), dm);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    vit::Block blk;
    const std::string p = "blocks." + std::to_string(b) + ".";
    blk.ln1 = {take(p + "ln1.gain", 1, dm), take(p + "ln1.bias", 1, dm)};
    blk.ln2 = {take(p + "ln2.gain", 1, dm), take(p + "ln2.bias", 1, dm)};
    if (has(p + "attn.0.uq")) {
      blk.form = vit::MhaForm::kLowRank;
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string q = p + "attn." + std::to_string(h) + ".";
        vit::LowRankHead hw{take(q + "uq", dm, 0), take(q + "sk", dm, 0), take(q + "uv", dm, 0),
                            take(q + "so", 0, dm)};
        if (hw.sk.cols() != hw.uq.cols() || hw.so.rows() != hw.uv.cols())
          throw ParseError("low-rank factors of " + q + " disagree on rank");
        blk.low_rank.heads.push_back(std::move(hw));
      }
    } else {
      blk.form = b < forms.size() ? vit::parse_form(forms[b]) : vit::MhaForm::kStandard;
      if (blk.form == vit::MhaForm::kLowRank) throw ParseError("block marked low-rank lacks factors");
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string q = p + "attn." + std::to_string(h) + ".";
        blk.mha.heads.push_back(
            {take(q + "wq", dm, d), take(q + "wk", dm, d), take(q + "wv", dm, d), take(q + "wo", d, dm)});
      }
    }
    auto linear = [&](const std::string& name, std::size_t rows, std::size_t cols) -> vit::LinearWeight {
      if (!has(name + ".u")) return take(name, rows, cols);
      linalg::FactorPair f{take(name + ".u", rows, 0), take(name + ".s", 0, cols)};
      if (f.u.cols() != f.s.rows()) throw ParseError("factors of " + name + " disagree on rank");
      return f;
    };
    blk.ffn.w1 = linear(p + "ffn.w1", dm, cfg.ffn_dim);
    blk.ffn.b1 = take(p + "ffn.b1", 1, cfg.ffn_dim);
    blk.ffn.w2 = linear(p + "ffn.w2", cfg.ffn_dim, dm);
    blk.ffn.b2 = take(p + "ffn.b2", 1, dm);
    m.blocks.push_back(std::move(blk));
  }
  m.final_ln = {take("final_ln.gain", 1, dm), take("final_ln.bias", 1, dm)};
  m.head_w = take("head.w", dm, cfg.classes);
  m.head_b = take("head.b", 1, cfg.classes);
  std::size_t stored = 0;
  for (const auto& [name, t] : c.tensors) stored += t.size();
  if (vit::parameter_count(m) != stored)
    throw ParseError("model container holds tensors the model does not use");
  return m;
}

std::string write_model(const std::filesystem::path& path, const vit::VitModel& model) {
  return write_container(path, model_container(model));
}

vit::VitModel read_model(const std::filesystem::path& path) {
  try {
    return model_from_container(read_container(path));
  } catch (const ParseError& e) {
    const std::string what = e.what();
    if (what.rfind(path.string(), 0) == 0) throw;
    throw ParseError(path.string() + ": " + what);
  }
}

}  // namespace comcat::io
