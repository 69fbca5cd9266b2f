#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "doctest.h"

#include "factorize/compress.hpp"
#include "io/container.hpp"
#include "support.hpp"
#include "util/error.hpp"

using namespace comcat;
using namespace comcat::io;
using testing::TempDir;

namespace {

std::string parse_failure(std::span<const std::uint8_t> bytes) {
  try {
    decode(bytes);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

// Replaces the JSON header, keeping the payload.
std::vector<std::uint8_t> with_header(const std::vector<std::uint8_t>& bytes, const json& header) {
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 6, 4);
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 6);
  const auto n = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 10 + len, bytes.end());
  return out;
}

json header_of(const std::vector<std::uint8_t>& bytes) {
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 6, 4);
  return json::parse(bytes.begin() + 10, bytes.begin() + 10 + len);
}

Container small_container() {
  Container c;
  c.kind = "model";
  c.config = {{"z", 1}, {"a", 2}};
  c.tensors["beta"] = Matrix::from_rows({{1.5, -0.0}, {std::numeric_limits<double>::denorm_min(), 1e308}});
  c.tensors["alpha"] = Matrix::from_rows({{3.25}});
  return c;
}

bool models_identical(const vit::VitModel& a, const vit::VitModel& b) {
  std::vector<std::pair<std::string, Matrix>> ta, tb;
  vit::visit_tensors(a, [&](const std::string& n, const Matrix& m) { ta.emplace_back(n, m); });
  vit::visit_tensors(b, [&](const std::string& n, const Matrix& m) { tb.emplace_back(n, m); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].first != tb[i].first || !(ta[i].second.rows() == tb[i].second.rows()) ||
        ta[i].second.cols() != tb[i].second.cols())
      return false;
    if (std::memcmp(ta[i].second.data().data(), tb[i].second.data().data(), ta[i].second.size() * sizeof(double)))
      return false;
  }
  return a.config == b.config;
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("layout of an encoded container") {
  const auto bytes = encode(small_container());
  CHECK(std::memcmp(bytes.data(), "CMCT", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  const json h = header_of(bytes);
  CHECK(h["kind"] == "model");
  // Sorted keys: "alpha" occupies the first 8 payload bytes.
  CHECK(h["tensors"]["alpha"]["offset"] == 0);
  CHECK(h["tensors"]["beta"]["offset"] == 8);
  CHECK(h["tensors"]["beta"]["length"] == 32);
  const std::string text = h.dump();
  CHECK(text.find("\"config\"") < text.find("\"kind\""));
  CHECK(text.find("\"kind\"") < text.find("\"tensors\""));
  double first = 0.0;
  std::memcpy(&first, bytes.data() + bytes.size() - 40, 8);
  CHECK(first == 3.25);
}

TEST_CASE("round trip is bit exact") {
  const Container c = small_container();
  const Container back = decode(encode(c));
  CHECK(back.kind == "model");
  CHECK(back.config == c.config);
  REQUIRE(back.tensors.size() == 2);
  const Matrix& beta = back.tensors.at("beta");
  CHECK(std::signbit(beta(0, 1)));
  CHECK(beta(1, 0) == std::numeric_limits<double>::denorm_min());
  CHECK(beta == c.tensors.at("beta"));
  CHECK(encode(back) == encode(c));
}

TEST_CASE("models round trip through files with stable bytes") {
  TempDir dir("io");
  const vit::ModelConfig cfg = testing::tiny_config();
  const vit::VitModel dense = vit::init_model(cfg, 3);
  const std::string sha1 = write_model(dir / "a.cmct", dense);
  const std::string sha2 = write_model(dir / "b.cmct", dense);
  CHECK(sha1 == sha2);
  CHECK(sha1.size() == 64);
  CHECK(read_file(dir / "a.cmct") == read_file(dir / "b.cmct"));
  CHECK(file_sha256(dir / "a.cmct") == sha1);
  CHECK(models_identical(read_model(dir / "a.cmct"), dense));

  const vit::VitModel low =
      factorize::compress_model(dense, factorize::CompressionPlan::uniform(cfg, 3, 2, 5)).model;
  write_model(dir / "low.cmct", low);
  const vit::VitModel back = read_model(dir / "low.cmct");
  CHECK(models_identical(back, low));
  CHECK(back.blocks[0].form == vit::MhaForm::kLowRank);
  CHECK(factorize::model_plan(back) == factorize::model_plan(low));
}

TEST_CASE("sha256 of known input") {
  const std::string abc = "abc";
  const std::vector<std::uint8_t> bytes(abc.begin(), abc.end());
  CHECK(sha256_hex(bytes) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("corrupted containers are rejected with the violation named") {
  const auto good = encode(small_container());

  auto magic = good;
  magic[0] = 'X';
  CHECK(parse_failure(magic).find("bad magic") != std::string::npos);

  auto truncated = good;
  truncated.resize(truncated.size() - 5);
  const std::string t = parse_failure(truncated);
  CHECK(t.find("truncated payload") != std::string::npos);
  CHECK(t.find("offset") != std::string::npos);

  auto short_header = good;
  short_header.resize(20);
  CHECK(parse_failure(short_header).find("truncated header") != std::string::npos);

  auto version = good;
  version[4] = 2;
  CHECK(parse_failure(version).find("version 2") != std::string::npos);

  json h = header_of(good);
  h["tensors"]["beta"]["offset"] = 0;
  CHECK(parse_failure(with_header(good, h)).find("overlapping tensors") != std::string::npos);

  h = header_of(good);
  h["tensors"]["beta"]["length"] = 24;
  CHECK(parse_failure(with_header(good, h)).find("does not match its shape") != std::string::npos);

  h = header_of(good);
  h["kind"] = "weights";
  CHECK(parse_failure(with_header(good, h)).find("unknown container kind") != std::string::npos);

  h = header_of(good);
  h.erase("tensors");
  CHECK(parse_failure(with_header(good, h)).find("invalid header field") != std::string::npos);

  auto garbage = good;
  garbage[10] = '!';
  CHECK(parse_failure(garbage).find("malformed header JSON") != std::string::npos);
}

TEST_CASE("files that are not models") {
  TempDir dir("io-bad");
  Container c = small_container();
  write_container(dir / "c.cmct", c);
  CHECK_THROWS_AS(read_model(dir / "c.cmct"), ParseError);
  CHECK_THROWS_AS(read_model(dir / "missing.cmct"), IoError);
  c.kind = "weights";
  CHECK_THROWS_AS(encode(c), ContractError);

  const vit::VitModel m = vit::init_model(testing::tiny_config(), 1);
  Container mc = model_container(m);
  mc.tensors.erase(mc.tensors.begin());
  CHECK_THROWS_AS(model_from_container(mc), ParseError);
  Container extra = model_container(m);
  extra.tensors["stray"] = Matrix(1, 1);
  CHECK_THROWS_AS(model_from_container(extra), ParseError);
}

TEST_CASE("config json round trip") {
  const vit::ModelConfig c = testing::tiny_config();
  CHECK(config_from_json(config_to_json(c)) == c);
  json bad = config_to_json(c);
  bad["heads"] = 3;
  CHECK_THROWS_AS(config_from_json(bad), ParseError);
}

}  // TEST_SUITE
