#include "report/report.hpp"

#include <charconv>
#include <sstream>

#include "util/error.hpp"

namespace comcat::report {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string spectra_csv(const factorize::SpectrumReport& r) {
  std::ostringstream out;
  out << "layer,head,site,index,sigma,cum_ratio\n";
  for (const auto& s : r.sites) {
    const std::string head = s.head < 0 ? "" : std::to_string(s.head);
    for (std::size_t i = 0; i < s.sigma.size(); ++i)
      out << s.layer << ',' << head << ',' << s.site << ',' << i << ',' << format_double(s.sigma[i]) << ','
          << format_double(s.cumulative[i]) << '\n';
  }
  return out.str();
}

std::string params_at_tau_csv(const factorize::SpectrumReport& r) {
  std::ostringstream out;
  out << "layer,head,pair,combined_params,separate_params\n";
  for (const auto& h : r.heads) {
    out << h.layer << ',' << h.head << ",QK," << h.qk_combined << ',' << h.qk_separate << '\n';
    out << h.layer << ',' << h.head << ",VO," << h.vo_combined << ',' << h.vo_separate << '\n';
  }
  return out.str();
}

std::string train_curve_csv(const trainer::TrainResult& r) {
  std::ostringstream out;
  out << "epoch,loss,train_acc,test_acc\n";
  for (const auto& e : r.curve)
    out << e.epoch << ',' << format_double(e.loss) << ',' << format_double(e.train_acc) << ','
        << format_double(e.test_acc) << '\n';
  return out.str();
}

std::string search_trace_csv(std::span<const ranksearch::TraceRow> rows) {
  std::ostringstream out;
  out << "round,phase,ce,expected_params,argmax_params,accuracy\n";
  for (const auto& t : rows)
    out << t.round << ',' << t.phase << ',' << format_double(t.ce) << ',' << format_double(t.expected_params)
        << ',' << t.argmax_params << ',' << format_double(t.accuracy) << '\n';
  return out.str();
}

std::string loss_curve_csv(std::span<const double> losses) {
  std::ostringstream out;
  out << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << i + 1 << ',' << format_double(losses[i]) << '\n';
  return out.str();
}

json plan_json(const factorize::CompressionPlan& plan) {
  json j = json::object();
  for (const auto& [site, rank] : plan.to_site_map()) j[site] = rank;
  return j;
}

factorize::CompressionPlan plan_from_json(const vit::ModelConfig& config, const json& j) {
  if (!j.is_object()) throw ParseError("plan must be a JSON object mapping site ids to ranks");
  std::map<std::string, std::size_t> ranks;
  for (const auto& [site, rank] : j.items()) {
    if (!rank.is_number_unsigned()) throw ParseError("plan rank for '" + site + "' is not a non-negative integer");
    ranks[site] = rank.get<std::size_t>();
  }
  auto plan = factorize::CompressionPlan::from_site_map(config, ranks);
  plan.validate(config);
  return plan;
}

json cost_json(const factorize::Cost& c) {
  return json{{"params", c.params},       {"flops", c.flops},         {"mha_params", c.mha_params},
              {"ffn_params", c.ffn_params}, {"mha_flops", c.mha_flops}, {"ffn_flops", c.ffn_flops}};
}

json compression_json(const factorize::CompressionReport& r) {
  json j;
  j["plan"] = plan_json(r.plan);
  j["before"] = cost_json(r.before);
  j["after"] = cost_json(r.after);
  json err = json::object();
  for (const auto& [site, e] : r.site_error) err[site] = e;
  j["site_error"] = err;
  if (r.accuracy_before) j["accuracy_before"] = *r.accuracy_before;
  if (r.accuracy_after) j["accuracy_after"] = *r.accuracy_after;
  return j;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace comcat::report
