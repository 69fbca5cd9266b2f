#include "factorize/spectra.hpp"

#include "factorize/compress.hpp"
#include "linalg/svd.hpp"
#include "util/error.hpp"

namespace comcat::factorize {

std::size_t SpectrumReport::qk_combined_wins() const {
  std::size_t n = 0;
  for (const auto& h : heads) n += h.qk_combined < h.qk_separate;
  return n;
}

std::size_t SpectrumReport::vo_combined_wins() const {
  std::size_t n = 0;
  for (const auto& h : heads) n += h.vo_combined < h.vo_separate;
  return n;
}

namespace {

SiteSpectrum measure(const Matrix& m, std::size_t layer, int head, std::string site, double tau) {
  SiteSpectrum s;
  s.layer = layer;
  s.head = head;
  s.site = std::move(site);
  s.sigma = linalg::svd(m).sigma;
  s.cumulative = linalg::cumulative_spectrum(s.sigma);
  s.rank_at_tau = linalg::rank_at_threshold(s.sigma, tau);
  s.params_at_tau = s.rank_at_tau * (m.rows() + m.cols());
  return s;
}

}  // namespace

SpectrumReport analyze_spectra(const vit::VitModel& model, double tau) {
  SpectrumReport report;
  report.tau = tau;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& blk = model.blocks[b];
    if (blk.form == vit::MhaForm::kLowRank)
      throw ContractError("analyze_spectra needs dense attention; block " + std::to_string(b) +
                          " is low-rank");
    for (std::size_t i = 0; i < blk.mha.heads.size(); ++i) {
      const auto& hw = blk.mha.heads[i];
      const int h = static_cast<int>(i);
      const HeadProducts prod = combine_head(blk.mha, i);
      auto q = measure(hw.wq, b, h, "Q", tau);
      auto k = measure(hw.wk, b, h, "K", tau);
      auto v = measure(hw.wv, b, h, "V", tau);
      auto o = measure(hw.wo, b, h, "O", tau);
      auto qk = measure(prod.qk, b, h, "QK", tau);
      auto vo = measure(prod.vo, b, h, "VO", tau);
      report.heads.push_back({b, i, qk.params_at_tau, q.params_at_tau + k.params_at_tau,
                              vo.params_at_tau, v.params_at_tau + o.params_at_tau});
      for (auto* s : {&q, &k, &v, &o, &qk, &vo}) report.sites.push_back(std::move(*s));
    }
    report.sites.push_back(measure(vit::linear_product(blk.ffn.w1), b, -1, "FFN1", tau));
    report.sites.push_back(measure(vit::linear_product(blk.ffn.w2), b, -1, "FFN2", tau));
  }
  return report;
}

}  // namespace comcat::factorize
