#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "linalg/matrix.hpp"
#include "trainer/dataset.hpp"
#include "util/rng.hpp"
#include "vit/model.hpp"

namespace testing {

using comcat::Rng;
using comcat::linalg::Matrix;

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal(0.0, stddev);
  return m;
}

// Product of two Gaussian factors: rank min(rows, rank, cols) almost surely.
inline Matrix planted_rank(Rng& rng, std::size_t rows, std::size_t cols, std::size_t rank) {
  return comcat::linalg::matmul(random_matrix(rng, rows, rank), random_matrix(rng, rank, cols));
}

inline comcat::vit::ModelConfig tiny_config() {
  comcat::vit::ModelConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.blocks = 2;
  c.ffn_dim = 12;
  c.classes = 3;
  c.image_side = 8;
  c.patch_side = 4;
  return c;
}

inline comcat::vit::MhaWeights random_mha(Rng& rng, std::size_t d_model, std::size_t heads, double stddev = 0.5) {
  comcat::vit::MhaWeights w;
  const std::size_t d = d_model / heads;
  for (std::size_t i = 0; i < heads; ++i)
    w.heads.push_back({random_matrix(rng, d_model, d, stddev), random_matrix(rng, d_model, d, stddev),
                       random_matrix(rng, d_model, d, stddev), random_matrix(rng, d, d_model, stddev)});
  return w;
}

inline std::vector<comcat::trainer::Sample> random_samples(Rng& rng, const comcat::vit::ModelConfig& c,
                                                          std::size_t count) {
  std::vector<comcat::trainer::Sample> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back({random_matrix(rng, c.image_side, c.image_side),
                   static_cast<int>(i % c.classes)});
  return out;
}

// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("comcat-test-" + tag + "-" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace testing
