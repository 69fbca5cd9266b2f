#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "linalg/matrix.hpp"

namespace comcat::trainer {

using linalg::Matrix;

// Class-conditional oriented gratings. Each class owns a fixed wave vector
// drawn from the seed; every sample gets a random phase plus Gaussian pixel
// noise, so class means carry little signal and the classes are not linearly
// separable in pixel space.
struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t classes = 10;
  std::size_t samples_per_class = 200;
  std::size_t image_side = 16;
  double noise = 0.1;
  // Fraction of each class assigned to the training split.
  double train_fraction = 0.8;
};

struct Sample {
  Matrix image;
  int label = 0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Wave vector (cycles per image along x and y) of each class.
std::vector<std::pair<double, double>> class_wave_vectors(const DatasetSpec& spec);

Dataset gen_dataset(const DatasetSpec& spec);

// Keeps only samples whose label satisfies keep(label).
std::vector<Sample> filter_labels(const std::vector<Sample>& samples, int label, bool keep_equal);

}  // namespace comcat::trainer
