#pragma once

#include <span>
#include <string>

#include "json.hpp"

#include "factorize/compress.hpp"
#include "factorize/spectra.hpp"
#include "ranksearch/search.hpp"
#include "trainer/train.hpp"

// CSV and JSON emitters. Every table is written in a fixed row order and
// every JSON object with sorted keys, so repeated runs give identical bytes.
namespace comcat::report {

using nlohmann::json;

// Shortest text that reads back to the same double.
std::string format_double(double v);

// layer,head,site,index,sigma,cum_ratio (head is empty for FFN matrices).
std::string spectra_csv(const factorize::SpectrumReport& r);
// layer,head,pair,combined_params,separate_params
std::string params_at_tau_csv(const factorize::SpectrumReport& r);
// epoch,loss,train_acc,test_acc
std::string train_curve_csv(const trainer::TrainResult& r);
// round,phase,ce,expected_params,argmax_params,accuracy
std::string search_trace_csv(std::span<const ranksearch::TraceRow> rows);
// step,loss
std::string loss_curve_csv(std::span<const double> losses);

// site id -> rank.
json plan_json(const factorize::CompressionPlan& plan);
factorize::CompressionPlan plan_from_json(const vit::ModelConfig& config, const json& j);

json cost_json(const factorize::Cost& c);
json compression_json(const factorize::CompressionReport& r);

// Pretty-printed with a trailing newline.
std::string dump(const json& j);

}  // namespace comcat::report
