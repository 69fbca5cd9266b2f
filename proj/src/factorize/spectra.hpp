#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vit/model.hpp"

namespace comcat::factorize {

struct SiteSpectrum {
  std::size_t layer = 0;
  int head = -1;     // -1 for FFN matrices
  std::string site;  // Q, K, V, O, QK, VO, FFN1, FFN2
  std::vector<double> sigma;
  std::vector<double> cumulative;
  std::size_t rank_at_tau = 0;
  std::uint64_t params_at_tau = 0;  // rank_at_tau * (rows + cols)
};

// Storage needed to keep `tau` of the cumulative singular value mass of a
// head's QK (or VO) interaction: one combined matrix against its two factors.
struct HeadEfficiency {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::uint64_t qk_combined = 0;  // r_QK * 2 * d_model
  std::uint64_t qk_separate = 0;  // (r_Q + r_K) * (d_model + d)
  std::uint64_t vo_combined = 0;
  std::uint64_t vo_separate = 0;
};

struct SpectrumReport {
  double tau = 0.9;
  std::vector<SiteSpectrum> sites;
  std::vector<HeadEfficiency> heads;

  // Heads where the combined QK matrix needs strictly fewer parameters.
  std::size_t qk_combined_wins() const;
  std::size_t vo_combined_wins() const;
};

// Spectra of every projection, combined matrix and FFN matrix. Attention
// blocks must be dense.
SpectrumReport analyze_spectra(const vit::VitModel& model, double tau = 0.9);

}  // namespace comcat::factorize
