#include "trainer/dataset.hpp"

#include <cmath>
#include <numbers>

#include "util/error.hpp"
#include "util/rng.hpp"

namespace comcat::trainer {

std::vector<std::pair<double, double>> class_wave_vectors(const DatasetSpec& spec) {
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::pair<double, double>> waves;
  // Gratings with wave vectors k and -k are the same pattern under a phase
  // shift, so separation is measured modulo sign.
  auto distance = [](std::pair<double, double> a, std::pair<double, double> b) {
    const double d1 = std::hypot(a.first - b.first, a.second - b.second);
    const double d2 = std::hypot(a.first + b.first, a.second + b.second);
    return std::min(d1, d2);
  };
  double min_separation = 1.0;
  int attempts = 0;
  while (waves.size() < spec.classes) {
    const double freq = rng.uniform(1.0, 4.0);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const std::pair<double, double> k{freq * std::cos(angle), freq * std::sin(angle)};
    bool ok = true;
    for (const auto& w : waves) ok = ok && distance(w, k) >= min_separation;
    if (ok) {
      waves.push_back(k);
      attempts = 0;
    } else if (++attempts > 2000) {
      min_separation *= 0.9;
      attempts = 0;
    }
  }
  return waves;
}

Dataset gen_dataset(const DatasetSpec& spec) {
  if (spec.classes == 0 || spec.samples_per_class == 0 || spec.image_side == 0)
    throw ContractError("dataset spec: counts must be positive");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    throw ContractError("dataset spec: train fraction must lie in (0, 1)");
  const auto waves = class_wave_vectors(spec);
  const std::size_t n_train =
      static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(spec.samples_per_class)));
  const double side = static_cast<double>(spec.image_side);
  Dataset data;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    Rng rng(spec.seed * 1000003ULL + c + 1);
    const auto [kx, ky] = waves[c];
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      Matrix img(spec.image_side, spec.image_side);
      for (std::size_t r = 0; r < spec.image_side; ++r)
        for (std::size_t col = 0; col < spec.image_side; ++col) {
          const double arg = 2.0 * std::numbers::pi *
                                 (kx * static_cast<double>(col) + ky * static_cast<double>(r)) / side +
                             phase;
          img(r, col) = std::cos(arg) + rng.normal(0.0, spec.noise);
        }
      Sample sample{std::move(img), static_cast<int>(c)};
      (s < n_train ? data.train : data.test).push_back(std::move(sample));
    }
  }
  return data;
}

std::vector<Sample> filter_labels(const std::vector<Sample>& samples, int label, bool keep_equal) {
  std::vector<Sample> out;
  for (const auto& s : samples)
    if ((s.label == label) == keep_equal) out.push_back(s);
  return out;
}

}  // namespace comcat::trainer
