#ifndef COMCAT_COMCAT_H
#define COMCAT_COMCAT_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define COMCAT_API __attribute__((visibility("default")))
#else
#define COMCAT_API
#endif

typedef enum comcat_status {
  COMCAT_OK = 0,
  COMCAT_ERR_INVALID_ARGUMENT = 1,
  COMCAT_ERR_SHAPE = 2,
  COMCAT_ERR_RANK_RANGE = 3,
  COMCAT_ERR_NUMERICAL = 4,
  COMCAT_ERR_DEGENERATE_SPECTRUM = 5,
  COMCAT_ERR_PARSE = 6,
  COMCAT_ERR_IO = 7,
  COMCAT_ERR_BUDGET = 8,
  COMCAT_ERR_DIVERGENCE = 9,
  COMCAT_ERR_CONTRACT = 10,
  COMCAT_ERR_INTERNAL = 11
} comcat_status;

/* Message of the most recent failure on the calling thread ("" after success). */
COMCAT_API const char* comcat_last_error(void);
COMCAT_API const char* comcat_status_name(comcat_status status);
COMCAT_API const char* comcat_version(void);

typedef struct comcat_model comcat_model;
typedef struct comcat_dataset comcat_dataset;
typedef struct comcat_adapter comcat_adapter;

/* ---- configuration structs; fill with the *_defaults functions first ---- */

typedef struct comcat_model_config {
  size_t d_model;
  size_t heads;
  size_t blocks;
  size_t ffn_dim;
  size_t classes;
  size_t image_side;
  size_t patch_side;
} comcat_model_config;

typedef struct comcat_dataset_config {
  uint64_t seed;
  size_t classes;
  size_t samples_per_class;
  size_t image_side;
  double noise;
  double train_fraction;
} comcat_dataset_config;

typedef struct comcat_train_config {
  size_t epochs;
  size_t batch_size;
  double lr;
  double lr_min;
  double weight_decay;
  uint64_t seed;
} comcat_train_config;

typedef enum comcat_penalty { COMCAT_PENALTY_HINGE = 0, COMCAT_PENALTY_RATIO = 1 } comcat_penalty;

typedef struct comcat_search_config {
  double eps; /* absolute parameter budget of the MHA and FFN sites */
  double beta;
  size_t rounds;
  size_t prob_steps;
  size_t weight_steps;
  size_t batch_size;
  double alpha_lr;
  double weight_lr;
  double tau_start;
  double tau_end;
  double label_smoothing;
  comcat_penalty penalty;
  uint64_t seed;
} comcat_search_config;

typedef struct comcat_adapt_config {
  size_t rank;
  size_t steps;
  size_t batch_size;
  double lr;
  double init_stddev;
  int random_second; /* nonzero: sk and so start random instead of zero */
  uint64_t seed;
} comcat_adapt_config;

COMCAT_API void comcat_model_config_defaults(comcat_model_config* config);
COMCAT_API void comcat_dataset_config_defaults(comcat_dataset_config* config);
COMCAT_API void comcat_train_config_defaults(comcat_train_config* config);
COMCAT_API void comcat_search_config_defaults(comcat_search_config* config);
COMCAT_API void comcat_adapt_config_defaults(comcat_adapt_config* config);

/* ---- datasets ---- */

COMCAT_API comcat_status comcat_dataset_generate(const comcat_dataset_config* config, comcat_dataset** out);
/* Copy restricted to one label (keep_equal != 0) or to every other label. */
COMCAT_API comcat_status comcat_dataset_filter(const comcat_dataset* data, int label, int keep_equal,
                                               comcat_dataset** out);
COMCAT_API size_t comcat_dataset_train_size(const comcat_dataset* data);
COMCAT_API size_t comcat_dataset_test_size(const comcat_dataset* data);
COMCAT_API void comcat_dataset_free(comcat_dataset* data);

/* ---- models ---- */

COMCAT_API comcat_status comcat_model_init(const comcat_model_config* config, uint64_t seed, comcat_model** out);
COMCAT_API comcat_status comcat_model_load(const char* path, comcat_model** out);
/* sha256_hex receives 64 hex digits plus a terminator when not NULL. */
COMCAT_API comcat_status comcat_model_save(const comcat_model* model, const char* path, char sha256_hex[65]);
COMCAT_API comcat_status comcat_model_clone(const comcat_model* model, comcat_model** out);
COMCAT_API comcat_status comcat_model_get_config(const comcat_model* model, comcat_model_config* out);
COMCAT_API comcat_status comcat_model_cost(const comcat_model* model, uint64_t* params, uint64_t* flops);
/* Logits of one image (image_side^2 row-major pixels) into logits[classes]. */
COMCAT_API comcat_status comcat_model_forward(const comcat_model* model, const double* image, double* logits);
/* Parameters of the MHA and FFN sites with dense weights. */
COMCAT_API comcat_status comcat_dense_site_params(const comcat_model_config* config, uint64_t* params);
COMCAT_API void comcat_model_free(comcat_model* model);

/* ---- training and evaluation ---- */

/* Trains in place on the train split. curve_csv may be NULL. */
COMCAT_API comcat_status comcat_train(comcat_model* model, const comcat_dataset* data,
                                      const comcat_train_config* config, const char* curve_csv,
                                      double* final_test_accuracy);
/* split: 0 = train, 1 = test. */
COMCAT_API comcat_status comcat_evaluate(const comcat_model* model, const comcat_dataset* data, int split,
                                         double* accuracy);

/* ---- analysis and compression ---- */

/* Writes spectra.csv-style and params-at-tau CSV files (either path may be NULL). */
COMCAT_API comcat_status comcat_analyze(const comcat_model* model, double tau, const char* spectra_csv,
                                        const char* params_csv, size_t* qk_wins, size_t* vo_wins,
                                        size_t* heads);
/* Uniform ranks; rffn = 0 keeps the FFN dense. report_json may be NULL. */
COMCAT_API comcat_status comcat_compress_uniform(const comcat_model* model, size_t r1, size_t r2, size_t rffn,
                                                 const char* report_json, comcat_model** out);
/* Ranks from a plan.json file (site id -> rank). */
COMCAT_API comcat_status comcat_compress_plan(const comcat_model* model, const char* plan_json,
                                              const char* report_json, comcat_model** out);
/* Writes the model's ranks as plan.json; fails for dense attention. */
COMCAT_API comcat_status comcat_model_write_plan(const comcat_model* model, const char* plan_json);

/* ---- rank search ---- */

/* trace_csv and plan_json may be NULL. */
COMCAT_API comcat_status comcat_search(const comcat_model* dense, const comcat_dataset* data,
                                       const comcat_search_config* config, const char* trace_csv,
                                       const char* plan_json, comcat_model** out);

/* ---- adapters ---- */

typedef struct comcat_adapt_result {
  double initial_loss;
  double final_loss;
  size_t adapter_params;
} comcat_adapt_result;

/* Trains adapter factors over the frozen base on data's train split.
   curve_csv may be NULL. The base is never modified. */
COMCAT_API comcat_status comcat_adapt(const comcat_model* base, const comcat_dataset* data,
                                      const comcat_adapt_config* config, const char* curve_csv,
                                      comcat_adapt_result* result, comcat_adapter** out);
/* Adaptation set for a held-out class: all of its training samples plus as
   many from the other classes. */
COMCAT_API comcat_status comcat_customization_set(const comcat_dataset* data, int holdout, comcat_dataset** out);
COMCAT_API comcat_status comcat_adapter_init(const comcat_model_config* config, size_t rank, uint64_t seed,
                                             comcat_adapter** out);
/* Binds the adapter to the SHA-256 of the base model file. */
COMCAT_API comcat_status comcat_adapter_save(const comcat_adapter* adapter, const comcat_model_config* config,
                                             const char* path, const char* base_sha256_hex, char sha256_hex[65]);
COMCAT_API comcat_status comcat_adapter_load(const char* path, const char* base_sha256_hex, comcat_adapter** out);
COMCAT_API comcat_status comcat_adapter_evaluate(const comcat_model* base, const comcat_adapter* adapter,
                                                 const comcat_dataset* data, int split, double* accuracy);
COMCAT_API comcat_status comcat_adapter_forward(const comcat_model* base, const comcat_adapter* adapter,
                                                const double* image, double* logits);
COMCAT_API size_t comcat_adapter_params(const comcat_adapter* adapter);
COMCAT_API void comcat_adapter_free(comcat_adapter* adapter);

/* ---- files ---- */

COMCAT_API comcat_status comcat_file_sha256(const char* path, char sha256_hex[65]);

#ifdef __cplusplus
}
#endif

#endif
