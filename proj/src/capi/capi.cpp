#include "comcat/comcat.h"

#include <cstring>
#include <new>
#include <string>

#include "adapter/adapter.hpp"
#include "factorize/compress.hpp"
#include "factorize/spectra.hpp"
#include "io/container.hpp"
#include "ranksearch/search.hpp"
#include "report/report.hpp"
#include "trainer/train.hpp"
#include "util/error.hpp"

struct comcat_model {
  comcat::vit::VitModel model;
};

struct comcat_dataset {
  comcat::trainer::Dataset data;
};

struct comcat_adapter {
  comcat::adapter::AdapterWeights weights;
};

namespace {

using namespace comcat;

thread_local std::string g_last_error;

template <class Fn>
comcat_status guard(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return COMCAT_OK;
  } catch (const ShapeError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_SHAPE;
  } catch (const RankRangeError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_RANK_RANGE;
  } catch (const NumericalError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_NUMERICAL;
  } catch (const DegenerateSpectrumError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_DEGENERATE_SPECTRUM;
  } catch (const ParseError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_PARSE;
  } catch (const IoError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_IO;
  } catch (const BudgetError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_BUDGET;
  } catch (const DivergenceError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_DIVERGENCE;
  } catch (const ContractError& e) {
    g_last_error = e.what();
    return COMCAT_ERR_CONTRACT;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return COMCAT_ERR_INVALID_ARGUMENT;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return COMCAT_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return COMCAT_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return COMCAT_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

vit::ModelConfig to_cpp(const comcat_model_config& c) {
  vit::ModelConfig m;
  m.d_model = c.d_model;
  m.heads = c.heads;
  m.blocks = c.blocks;
  m.ffn_dim = c.ffn_dim;
  m.classes = c.classes;
  m.image_side = c.image_side;
  m.patch_side = c.patch_side;
  m.validate();
  return m;
}

comcat_model_config to_c(const vit::ModelConfig& m) {
  return comcat_model_config{m.d_model, m.heads, m.blocks, m.ffn_dim, m.classes, m.image_side, m.patch_side};
}

void copy_sha(const std::string& sha, char* out) {
  if (!out) return;
  std::memcpy(out, sha.c_str(), 64);
  out[64] = '\0';
}

std::span<const trainer::Sample> split_of(const comcat_dataset* data, int split) {
  require(split == 0 || split == 1, "split must be 0 (train) or 1 (test)");
  return split == 0 ? std::span<const trainer::Sample>(data->data.train)
                    : std::span<const trainer::Sample>(data->data.test);
}

linalg::Matrix image_of(const vit::ModelConfig& config, const double* pixels) {
  linalg::Matrix img(config.image_side, config.image_side);
  std::memcpy(img.data().data(), pixels, img.size() * sizeof(double));
  return img;
}

void write_logits(const linalg::Matrix& logits, double* out) {
  std::memcpy(out, logits.data().data(), logits.size() * sizeof(double));
}

void finish_compression(factorize::CompressedModel c, const char* report_json, comcat_model** out) {
  if (report_json) io::write_text(report_json, report::dump(report::compression_json(c.report)));
  *out = new comcat_model{std::move(c.model)};
}

}  // namespace

extern "C" {

const char* comcat_last_error(void) { return g_last_error.c_str(); }

const char* comcat_status_name(comcat_status status) {
  switch (status) {
    case COMCAT_OK: return "ok";
    case COMCAT_ERR_INVALID_ARGUMENT: return "invalid argument";
    case COMCAT_ERR_SHAPE: return "shape mismatch";
    case COMCAT_ERR_RANK_RANGE: return "rank out of range";
    case COMCAT_ERR_NUMERICAL: return "numerical failure";
    case COMCAT_ERR_DEGENERATE_SPECTRUM: return "degenerate spectrum";
    case COMCAT_ERR_PARSE: return "parse error";
    case COMCAT_ERR_IO: return "i/o error";
    case COMCAT_ERR_BUDGET: return "infeasible budget";
    case COMCAT_ERR_DIVERGENCE: return "divergence";
    case COMCAT_ERR_CONTRACT: return "contract violation";
    case COMCAT_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* comcat_version(void) { return "1.0.0"; }

void comcat_model_config_defaults(comcat_model_config* config) {
  if (config) *config = to_c(vit::ModelConfig{});
}

void comcat_dataset_config_defaults(comcat_dataset_config* config) {
  if (!config) return;
  const trainer::DatasetSpec d;
  *config = comcat_dataset_config{d.seed, d.classes, d.samples_per_class, d.image_side, d.noise, d.train_fraction};
}

void comcat_train_config_defaults(comcat_train_config* config) {
  if (!config) return;
  const trainer::TrainConfig t;
  *config = comcat_train_config{t.epochs, t.batch_size, t.lr, t.lr_min, t.weight_decay, t.seed};
}

void comcat_search_config_defaults(comcat_search_config* config) {
  if (!config) return;
  const ranksearch::SearchConfig s;
  *config = comcat_search_config{s.eps,       s.beta,     s.rounds,   s.prob_steps,      s.weight_steps,
                                 s.batch_size, s.alpha_lr, s.weight_lr, s.tau_start,      s.tau_end,
                                 s.label_smoothing, COMCAT_PENALTY_HINGE, s.seed};
}

void comcat_adapt_config_defaults(comcat_adapt_config* config) {
  if (!config) return;
  const adapter::AdaptConfig a;
  *config = comcat_adapt_config{a.rank, a.steps, a.batch_size, a.lr, a.init.stddev, a.init.random_second ? 1 : 0,
                                a.seed};
}

comcat_status comcat_dataset_generate(const comcat_dataset_config* config, comcat_dataset** out) {
  return guard([&] {
    require(config && out, "dataset config and output must not be null");
    trainer::DatasetSpec spec;
    spec.seed = config->seed;
    spec.classes = config->classes;
    spec.samples_per_class = config->samples_per_class;
    spec.image_side = config->image_side;
    spec.noise = config->noise;
    spec.train_fraction = config->train_fraction;
    *out = new comcat_dataset{trainer::gen_dataset(spec)};
  });
}

comcat_status comcat_dataset_filter(const comcat_dataset* data, int label, int keep_equal, comcat_dataset** out) {
  return guard([&] {
    require(data && out, "dataset and output must not be null");
    trainer::Dataset d;
    d.train = trainer::filter_labels(data->data.train, label, keep_equal != 0);
    d.test = trainer::filter_labels(data->data.test, label, keep_equal != 0);
    *out = new comcat_dataset{std::move(d)};
  });
}

size_t comcat_dataset_train_size(const comcat_dataset* data) { return data ? data->data.train.size() : 0; }
size_t comcat_dataset_test_size(const comcat_dataset* data) { return data ? data->data.test.size() : 0; }
void comcat_dataset_free(comcat_dataset* data) { delete data; }

comcat_status comcat_model_init(const comcat_model_config* config, uint64_t seed, comcat_model** out) {
  return guard([&] {
    require(config && out, "model config and output must not be null");
    *out = new comcat_model{vit::init_model(to_cpp(*config), seed)};
  });
}

comcat_status comcat_model_load(const char* path, comcat_model** out) {
  return guard([&] {
    require(path && out, "path and output must not be null");
    *out = new comcat_model{io::read_model(path)};
  });
}

comcat_status comcat_model_save(const comcat_model* model, const char* path, char sha256_hex[65]) {
  return guard([&] {
    require(model && path, "model and path must not be null");
    copy_sha(io::write_model(path, model->model), sha256_hex);
  });
}

comcat_status comcat_model_clone(const comcat_model* model, comcat_model** out) {
  return guard([&] {
    require(model && out, "model and output must not be null");
    *out = new comcat_model{model->model};
  });
}

comcat_status comcat_model_get_config(const comcat_model* model, comcat_model_config* out) {
  return guard([&] {
    require(model && out, "model and output must not be null");
    *out = to_c(model->model.config);
  });
}

comcat_status comcat_model_cost(const comcat_model* model, uint64_t* params, uint64_t* flops) {
  return guard([&] {
    require(model != nullptr, "model must not be null");
    const factorize::Cost c = factorize::model_cost(model->model);
    if (params) *params = c.params;
    if (flops) *flops = c.flops;
  });
}

comcat_status comcat_model_forward(const comcat_model* model, const double* image, double* logits) {
  return guard([&] {
    require(model && image && logits, "model, image and logits must not be null");
    write_logits(vit::forward_one(model->model, image_of(model->model.config, image)), logits);
  });
}

comcat_status comcat_dense_site_params(const comcat_model_config* config, uint64_t* params) {
  return guard([&] {
    require(config && params, "config and output must not be null");
    *params = ranksearch::dense_site_params(to_cpp(*config));
  });
}

void comcat_model_free(comcat_model* model) { delete model; }

comcat_status comcat_train(comcat_model* model, const comcat_dataset* data, const comcat_train_config* config,
                           const char* curve_csv, double* final_test_accuracy) {
  return guard([&] {
    require(model && data && config, "model, dataset and config must not be null");
    trainer::TrainConfig tc;
    tc.epochs = config->epochs;
    tc.batch_size = config->batch_size;
    tc.lr = config->lr;
    tc.lr_min = config->lr_min;
    tc.weight_decay = config->weight_decay;
    tc.seed = config->seed;
    const trainer::TrainResult r = trainer::train(model->model, data->data.train, data->data.test, tc);
    if (curve_csv) io::write_text(curve_csv, report::train_curve_csv(r));
    if (final_test_accuracy)
      *final_test_accuracy = r.curve.empty() ? trainer::evaluate(model->model, data->data.test) : r.final_test_acc();
  });
}

comcat_status comcat_evaluate(const comcat_model* model, const comcat_dataset* data, int split, double* accuracy) {
  return guard([&] {
    require(model && data && accuracy, "model, dataset and output must not be null");
    *accuracy = trainer::evaluate(model->model, split_of(data, split));
  });
}

comcat_status comcat_analyze(const comcat_model* model, double tau, const char* spectra_csv, const char* params_csv,
                             size_t* qk_wins, size_t* vo_wins, size_t* heads) {
  return guard([&] {
    require(model != nullptr, "model must not be null");
    const factorize::SpectrumReport r = factorize::analyze_spectra(model->model, tau);
    if (spectra_csv) io::write_text(spectra_csv, report::spectra_csv(r));
    if (params_csv) io::write_text(params_csv, report::params_at_tau_csv(r));
    if (qk_wins) *qk_wins = r.qk_combined_wins();
    if (vo_wins) *vo_wins = r.vo_combined_wins();
    if (heads) *heads = r.heads.size();
  });
}

comcat_status comcat_compress_uniform(const comcat_model* model, size_t r1, size_t r2, size_t rffn,
                                      const char* report_json, comcat_model** out) {
  return guard([&] {
    require(model && out, "model and output must not be null");
    const auto plan = factorize::CompressionPlan::uniform(
        model->model.config, r1, r2, rffn ? std::optional<std::size_t>(rffn) : std::nullopt);
    finish_compression(factorize::compress_model(model->model, plan), report_json, out);
  });
}

comcat_status comcat_compress_plan(const comcat_model* model, const char* plan_json, const char* report_json,
                                   comcat_model** out) {
  return guard([&] {
    require(model && plan_json && out, "model, plan path and output must not be null");
    const auto bytes = io::read_file(plan_json);
    report::json j;
    try {
      j = report::json::parse(bytes.begin(), bytes.end());
    } catch (const report::json::exception& e) {
      throw ParseError(std::string(plan_json) + ": " + e.what());
    }
    const auto plan = report::plan_from_json(model->model.config, j);
    finish_compression(factorize::compress_model(model->model, plan), report_json, out);
  });
}

comcat_status comcat_model_write_plan(const comcat_model* model, const char* plan_json) {
  return guard([&] {
    require(model && plan_json, "model and plan path must not be null");
    const auto plan = factorize::model_plan(model->model);
    if (!plan) throw ContractError("model keeps dense attention; it has no rank plan");
    io::write_text(plan_json, report::dump(report::plan_json(*plan)));
  });
}

comcat_status comcat_search(const comcat_model* dense, const comcat_dataset* data, const comcat_search_config* config,
                            const char* trace_csv, const char* plan_json, comcat_model** out) {
  return guard([&] {
    require(dense && data && config && out, "model, dataset, config and output must not be null");
    ranksearch::SearchConfig sc;
    sc.eps = config->eps;
    sc.beta = config->beta;
    sc.rounds = config->rounds;
    sc.prob_steps = config->prob_steps;
    sc.weight_steps = config->weight_steps;
    sc.batch_size = config->batch_size;
    sc.alpha_lr = config->alpha_lr;
    sc.weight_lr = config->weight_lr;
    sc.tau_start = config->tau_start;
    sc.tau_end = config->tau_end;
    sc.label_smoothing = config->label_smoothing;
    require(config->penalty == COMCAT_PENALTY_HINGE || config->penalty == COMCAT_PENALTY_RATIO,
            "unknown budget penalty");
    sc.penalty = config->penalty == COMCAT_PENALTY_RATIO ? ranksearch::BudgetPenalty::kRatio
                                                         : ranksearch::BudgetPenalty::kHinge;
    sc.seed = config->seed;
    ranksearch::SearchResult r = ranksearch::run_search(dense->model, data->data.train, data->data.test, sc);
    if (trace_csv) io::write_text(trace_csv, report::search_trace_csv(r.trace));
    if (plan_json) io::write_text(plan_json, report::dump(report::plan_json(r.plan)));
    *out = new comcat_model{std::move(r.model)};
  });
}

comcat_status comcat_adapt(const comcat_model* base, const comcat_dataset* data, const comcat_adapt_config* config,
                           const char* curve_csv, comcat_adapt_result* result, comcat_adapter** out) {
  return guard([&] {
    require(base && data && config && out, "base, dataset, config and output must not be null");
    adapter::AdaptConfig ac;
    ac.rank = config->rank;
    ac.steps = config->steps;
    ac.batch_size = config->batch_size;
    ac.lr = config->lr;
    ac.init.stddev = config->init_stddev;
    ac.init.random_second = config->random_second != 0;
    ac.seed = config->seed;
    adapter::AdaptResult r = adapter::adapt(base->model, data->data.train, ac);
    if (curve_csv) io::write_text(curve_csv, report::loss_curve_csv(r.loss_curve));
    if (result) *result = comcat_adapt_result{r.initial_loss, r.final_loss, r.adapter.parameter_count()};
    *out = new comcat_adapter{std::move(r.adapter)};
  });
}

comcat_status comcat_customization_set(const comcat_dataset* data, int holdout, comcat_dataset** out) {
  return guard([&] {
    require(data && out, "dataset and output must not be null");
    trainer::Dataset d;
    d.train = adapter::customization_set(data->data.train, holdout);
    d.test = adapter::customization_set(data->data.test, holdout);
    *out = new comcat_dataset{std::move(d)};
  });
}

comcat_status comcat_adapter_init(const comcat_model_config* config, size_t rank, uint64_t seed,
                                  comcat_adapter** out) {
  return guard([&] {
    require(config && out, "config and output must not be null");
    *out = new comcat_adapter{adapter::init_adapter(to_cpp(*config), rank, seed)};
  });
}

comcat_status comcat_adapter_save(const comcat_adapter* ad, const comcat_model_config* config, const char* path,
                                  const char* base_sha256_hex, char sha256_hex[65]) {
  return guard([&] {
    require(ad && config && path && base_sha256_hex, "adapter, config, path and base checksum must not be null");
    copy_sha(adapter::write_adapter(path, to_cpp(*config), ad->weights, base_sha256_hex), sha256_hex);
  });
}

comcat_status comcat_adapter_load(const char* path, const char* base_sha256_hex, comcat_adapter** out) {
  return guard([&] {
    require(path && base_sha256_hex && out, "path, base checksum and output must not be null");
    *out = new comcat_adapter{adapter::read_adapter(path, base_sha256_hex)};
  });
}

comcat_status comcat_adapter_evaluate(const comcat_model* base, const comcat_adapter* ad, const comcat_dataset* data,
                                      int split, double* accuracy) {
  return guard([&] {
    require(base && ad && data && accuracy, "base, adapter, dataset and output must not be null");
    *accuracy = adapter::adapted_accuracy(base->model, ad->weights, split_of(data, split));
  });
}

comcat_status comcat_adapter_forward(const comcat_model* base, const comcat_adapter* ad, const double* image,
                                     double* logits) {
  return guard([&] {
    require(base && ad && image && logits, "base, adapter, image and logits must not be null");
    write_logits(adapter::adapted_forward_one(base->model, ad->weights, image_of(base->model.config, image)),
                 logits);
  });
}

size_t comcat_adapter_params(const comcat_adapter* ad) { return ad ? ad->weights.parameter_count() : 0; }
void comcat_adapter_free(comcat_adapter* ad) { delete ad; }

comcat_status comcat_file_sha256(const char* path, char sha256_hex[65]) {
  return guard([&] {
    require(path && sha256_hex, "path and output must not be null");
    copy_sha(io::file_sha256(path), sha256_hex);
  });
}

}  // extern "C"
