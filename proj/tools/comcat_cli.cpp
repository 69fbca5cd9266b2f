#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "comcat/comcat.h"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(comcat_status s, const std::string& what) {
  if (s == COMCAT_OK) return;
  std::string msg = what + ": " + comcat_status_name(s);
  const std::string detail = comcat_last_error();
  if (!detail.empty()) msg += ": " + detail;
  throw RuntimeFailure(msg);
}

struct ModelFree {
  void operator()(comcat_model* m) const { comcat_model_free(m); }
};
struct DatasetFree {
  void operator()(comcat_dataset* d) const { comcat_dataset_free(d); }
};
struct AdapterFree {
  void operator()(comcat_adapter* a) const { comcat_adapter_free(a); }
};
using ModelPtr = std::unique_ptr<comcat_model, ModelFree>;
using DatasetPtr = std::unique_ptr<comcat_dataset, DatasetFree>;
using AdapterPtr = std::unique_ptr<comcat_adapter, AdapterFree>;

struct Common {
  std::uint64_t seed = 1;
  std::uint64_t data_seed = 1;
  std::string out_dir = "out";
  std::size_t samples_per_class = 200;
};

std::string out_path(const Common& c, const char* name) { return (fs::path(c.out_dir) / name).string(); }

std::string model_or_default(const std::string& given, const Common& c, const char* fallback) {
  return given.empty() ? out_path(c, fallback) : given;
}

void ensure_out_dir(const Common& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw RuntimeFailure("cannot create output directory " + c.out_dir + ": " + ec.message());
}

ModelPtr load_model(const std::string& path) {
  comcat_model* m = nullptr;
  check(comcat_model_load(path.c_str(), &m), "loading " + path);
  return ModelPtr(m);
}

comcat_model_config config_of(const comcat_model* m) {
  comcat_model_config c;
  check(comcat_model_get_config(m, &c), "reading model config");
  return c;
}

DatasetPtr make_dataset(const Common& c, const comcat_model_config& model) {
  comcat_dataset_config d;
  comcat_dataset_config_defaults(&d);
  d.seed = c.data_seed;
  d.classes = model.classes;
  d.image_side = model.image_side;
  d.samples_per_class = c.samples_per_class;
  comcat_dataset* out = nullptr;
  check(comcat_dataset_generate(&d, &out), "generating dataset");
  return DatasetPtr(out);
}

DatasetPtr without_label(const comcat_dataset* data, int label) {
  comcat_dataset* out = nullptr;
  check(comcat_dataset_filter(data, label, 0, &out), "filtering dataset");
  return DatasetPtr(out);
}

DatasetPtr only_label(const comcat_dataset* data, int label) {
  comcat_dataset* out = nullptr;
  check(comcat_dataset_filter(data, label, 1, &out), "filtering dataset");
  return DatasetPtr(out);
}

std::string save_model(const comcat_model* m, const std::string& path) {
  char sha[65];
  check(comcat_model_save(m, path.c_str(), sha), "writing " + path);
  return sha;
}

double test_accuracy(const comcat_model* m, const comcat_dataset* d) {
  double acc = 0.0;
  check(comcat_evaluate(m, d, 1, &acc), "evaluating");
  return acc;
}

ordered_json cost_json(const comcat_model* m) {
  std::uint64_t params = 0, flops = 0;
  check(comcat_model_cost(m, &params, &flops), "counting cost");
  return ordered_json{{"params", params}, {"flops", flops}};
}

ordered_json model_config_json(const comcat_model_config& c) {
  return ordered_json{{"d_model", c.d_model},       {"heads", c.heads},           {"blocks", c.blocks},
                      {"ffn_dim", c.ffn_dim},       {"classes", c.classes},       {"image_side", c.image_side},
                      {"patch_side", c.patch_side}};
}

ordered_json common_json(const Common& c) {
  return ordered_json{{"seed", c.seed},
                      {"data_seed", c.data_seed},
                      {"samples_per_class", c.samples_per_class},
                      {"out_dir", c.out_dir}};
}

void print_config(const std::string& command, ordered_json fields) {
  ordered_json j{{"command", command}};
  for (auto& [k, v] : fields.items()) j[k] = v;
  std::cout << j.dump() << '\n';
}

// "50%" is a fraction of the dense count, a bare value in (0, 1] likewise;
// anything larger is an absolute parameter count.
double resolve_eps(const std::string& text, std::uint64_t dense) {
  std::string body = text;
  bool percent = false;
  if (!body.empty() && body.back() == '%') {
    percent = true;
    body.pop_back();
  }
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(body, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != body.size() || !std::isfinite(v) || v <= 0.0)
    throw RuntimeFailure("--eps must be a positive count, fraction or percentage, got '" + text + "'");
  if (percent) return v / 100.0 * static_cast<double>(dense);
  if (v <= 1.0) return v * static_cast<double>(dense);
  return v;
}

// ---- train ----

struct TrainArgs {
  Common common;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  int holdout = -1;
  comcat_model_config model{};
};

int run_train(const TrainArgs& a) {
  comcat_train_config tc;
  comcat_train_config_defaults(&tc);
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.lr = a.lr;
  tc.seed = a.common.seed;

  ordered_json cfg = common_json(a.common);
  cfg["model"] = model_config_json(a.model);
  cfg["epochs"] = tc.epochs;
  cfg["batch_size"] = tc.batch_size;
  cfg["lr"] = tc.lr;
  cfg["lr_min"] = tc.lr_min;
  cfg["weight_decay"] = tc.weight_decay;
  cfg["holdout"] = a.holdout;
  print_config("train", cfg);

  ensure_out_dir(a.common);
  comcat_model* raw = nullptr;
  check(comcat_model_init(&a.model, a.common.seed, &raw), "initializing model");
  ModelPtr model(raw);
  DatasetPtr data = make_dataset(a.common, a.model);
  if (a.holdout >= 0) data = without_label(data.get(), a.holdout);

  double acc = 0.0;
  const std::string curve = out_path(a.common, "train_curve.csv");
  check(comcat_train(model.get(), data.get(), &tc, curve.c_str(), &acc), "training");
  const std::string path = out_path(a.common, "model.cmct");
  const std::string sha = save_model(model.get(), path);
  std::cout << "test accuracy " << acc << '\n' << "wrote " << path << " sha256 " << sha << '\n';
  return 0;
}

// ---- analyze ----

struct AnalyzeArgs {
  Common common;
  std::string model;
  double tau = 0.9;
};

int run_analyze(const AnalyzeArgs& a) {
  const std::string path = model_or_default(a.model, a.common, "model.cmct");
  ordered_json cfg = common_json(a.common);
  cfg["model"] = path;
  cfg["tau"] = a.tau;
  print_config("analyze", cfg);

  ensure_out_dir(a.common);
  ModelPtr model = load_model(path);
  const std::string spectra = out_path(a.common, "spectra.csv");
  const std::string params = out_path(a.common, "params90.csv");
  std::size_t qk = 0, vo = 0, heads = 0;
  check(comcat_analyze(model.get(), a.tau, spectra.c_str(), params.c_str(), &qk, &vo, &heads), "analyzing");
  std::cout << "combined cheaper than separate at tau " << a.tau << ": QK " << qk << '/' << heads << ", VO " << vo
            << '/' << heads << '\n'
            << "wrote " << spectra << " and " << params << '\n';
  return 0;
}

// ---- compress ----

struct CompressArgs {
  Common common;
  std::string model;
  std::size_t r1 = 0, r2 = 0, rffn = 0;
  std::string plan;
};

int run_compress(const CompressArgs& a) {
  const std::string path = model_or_default(a.model, a.common, "model.cmct");
  ordered_json cfg = common_json(a.common);
  cfg["model"] = path;
  if (a.plan.empty()) {
    cfg["r1"] = a.r1;
    cfg["r2"] = a.r2;
    cfg["rffn"] = a.rffn;
  } else {
    cfg["plan"] = a.plan;
  }
  print_config("compress", cfg);

  ensure_out_dir(a.common);
  ModelPtr model = load_model(path);
  const std::string report = out_path(a.common, "report.json");
  comcat_model* raw = nullptr;
  if (a.plan.empty()) {
    if (a.r1 == 0 || a.r2 == 0) throw RuntimeFailure("compress needs --r1 and --r2, or --plan");
    check(comcat_compress_uniform(model.get(), a.r1, a.r2, a.rffn, report.c_str(), &raw), "compressing");
  } else {
    check(comcat_compress_plan(model.get(), a.plan.c_str(), report.c_str(), &raw), "compressing");
  }
  ModelPtr compressed(raw);
  DatasetPtr data = make_dataset(a.common, config_of(compressed.get()));
  const std::string out = out_path(a.common, "compressed.cmct");
  const std::string sha = save_model(compressed.get(), out);
  std::cout << "cost " << cost_json(compressed.get()).dump() << '\n'
            << "test accuracy " << test_accuracy(compressed.get(), data.get()) << '\n'
            << "wrote " << out << " sha256 " << sha << " and " << report << '\n';
  return 0;
}

// ---- search ----

struct SearchArgs {
  Common common;
  std::string model;
  std::string eps = "50%";
  double beta = 1.5;
  std::size_t rounds = 10;
  std::size_t prob_steps = 40;
  std::size_t weight_steps = 40;
  std::string penalty = "hinge";
};

int run_search(const SearchArgs& a) {
  const std::string path = model_or_default(a.model, a.common, "model.cmct");
  ModelPtr model = load_model(path);
  const comcat_model_config mc = config_of(model.get());
  std::uint64_t dense = 0;
  check(comcat_dense_site_params(&mc, &dense), "counting dense parameters");

  comcat_search_config sc;
  comcat_search_config_defaults(&sc);
  sc.eps = resolve_eps(a.eps, dense);
  sc.beta = a.beta;
  sc.rounds = a.rounds;
  sc.prob_steps = a.prob_steps;
  sc.weight_steps = a.weight_steps;
  sc.penalty = a.penalty == "ratio" ? COMCAT_PENALTY_RATIO : COMCAT_PENALTY_HINGE;
  sc.seed = a.common.seed;

  ordered_json cfg = common_json(a.common);
  cfg["model"] = path;
  cfg["eps"] = sc.eps;
  cfg["dense_site_params"] = dense;
  cfg["beta"] = sc.beta;
  cfg["rounds"] = sc.rounds;
  cfg["prob_steps"] = sc.prob_steps;
  cfg["weight_steps"] = sc.weight_steps;
  cfg["batch_size"] = sc.batch_size;
  cfg["alpha_lr"] = sc.alpha_lr;
  cfg["weight_lr"] = sc.weight_lr;
  cfg["tau_start"] = sc.tau_start;
  cfg["tau_end"] = sc.tau_end;
  cfg["label_smoothing"] = sc.label_smoothing;
  cfg["penalty"] = a.penalty;
  print_config("search", cfg);

  ensure_out_dir(a.common);
  DatasetPtr data = make_dataset(a.common, mc);
  const std::string trace = out_path(a.common, "search_trace.csv");
  const std::string plan = out_path(a.common, "plan.json");
  comcat_model* raw = nullptr;
  check(comcat_search(model.get(), data.get(), &sc, trace.c_str(), plan.c_str(), &raw), "searching");
  ModelPtr searched(raw);
  const std::string out = out_path(a.common, "searched.cmct");
  const std::string sha = save_model(searched.get(), out);
  std::cout << "cost " << cost_json(searched.get()).dump() << '\n'
            << "test accuracy " << test_accuracy(searched.get(), data.get()) << '\n'
            << "wrote " << out << " sha256 " << sha << ", " << plan << " and " << trace << '\n';
  return 0;
}

// ---- finetune ----

struct FinetuneArgs {
  Common common;
  std::string model;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double lr = 2e-4;
};

int run_finetune(const FinetuneArgs& a) {
  const std::string path = model_or_default(a.model, a.common, "compressed.cmct");
  comcat_train_config tc;
  comcat_train_config_defaults(&tc);
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.lr = a.lr;
  tc.lr_min = a.lr / 100.0;
  tc.seed = a.common.seed;

  ordered_json cfg = common_json(a.common);
  cfg["model"] = path;
  cfg["epochs"] = tc.epochs;
  cfg["batch_size"] = tc.batch_size;
  cfg["lr"] = tc.lr;
  cfg["lr_min"] = tc.lr_min;
  cfg["weight_decay"] = tc.weight_decay;
  print_config("finetune", cfg);

  ensure_out_dir(a.common);
  ModelPtr model = load_model(path);
  DatasetPtr data = make_dataset(a.common, config_of(model.get()));
  const double before = test_accuracy(model.get(), data.get());
  double after = 0.0;
  const std::string curve = out_path(a.common, "finetune_curve.csv");
  check(comcat_train(model.get(), data.get(), &tc, curve.c_str(), &after), "fine-tuning");
  const std::string out = out_path(a.common, "finetuned.cmct");
  const std::string sha = save_model(model.get(), out);
  std::cout << "test accuracy " << before << " -> " << after << '\n' << "wrote " << out << " sha256 " << sha << '\n';
  return 0;
}

// ---- adapt ----

struct AdaptArgs {
  Common common;
  std::string model;
  std::size_t rank = 4;
  std::size_t steps = 500;
  double lr = 1e-2;
  int holdout = -1;
};

int run_adapt(const AdaptArgs& a) {
  const std::string path = model_or_default(a.model, a.common, "model.cmct");
  char base_sha[65];
  check(comcat_file_sha256(path.c_str(), base_sha), "hashing " + path);
  ModelPtr model = load_model(path);
  const comcat_model_config mc = config_of(model.get());
  const int holdout = a.holdout >= 0 ? a.holdout : static_cast<int>(mc.classes) - 1;

  comcat_adapt_config ac;
  comcat_adapt_config_defaults(&ac);
  ac.rank = a.rank;
  ac.steps = a.steps;
  ac.lr = a.lr;
  ac.seed = a.common.seed;

  ordered_json cfg = common_json(a.common);
  cfg["model"] = path;
  cfg["base_sha256"] = std::string(base_sha);
  cfg["rank"] = ac.rank;
  cfg["steps"] = ac.steps;
  cfg["batch_size"] = ac.batch_size;
  cfg["lr"] = ac.lr;
  cfg["init_stddev"] = ac.init_stddev;
  cfg["random_second"] = ac.random_second != 0;
  cfg["holdout"] = holdout;
  print_config("adapt", cfg);

  ensure_out_dir(a.common);
  DatasetPtr data = make_dataset(a.common, mc);
  comcat_dataset* raw_set = nullptr;
  check(comcat_customization_set(data.get(), holdout, &raw_set), "building adaptation set");
  DatasetPtr set(raw_set);
  DatasetPtr fresh = only_label(data.get(), holdout);
  DatasetPtr old = without_label(data.get(), holdout);

  const std::string curve = out_path(a.common, "adapt_curve.csv");
  comcat_adapt_result result{};
  comcat_adapter* raw = nullptr;
  check(comcat_adapt(model.get(), set.get(), &ac, curve.c_str(), &result, &raw), "adapting");
  AdapterPtr adapter(raw);

  double new_before = 0.0, new_after = 0.0, old_after = 0.0;
  check(comcat_evaluate(model.get(), fresh.get(), 1, &new_before), "evaluating");
  check(comcat_adapter_evaluate(model.get(), adapter.get(), fresh.get(), 1, &new_after), "evaluating");
  check(comcat_adapter_evaluate(model.get(), adapter.get(), old.get(), 1, &old_after), "evaluating");

  const std::string out = out_path(a.common, "adapter.cmct");
  char sha[65];
  check(comcat_adapter_save(adapter.get(), &mc, out.c_str(), base_sha, sha), "writing " + out);
  std::cout << "loss " << result.initial_loss << " -> " << result.final_loss << '\n'
            << "class " << holdout << " test accuracy " << new_before << " -> " << new_after
            << ", other classes " << old_after << '\n'
            << "adapter params " << result.adapter_params << '\n'
            << "wrote " << out << " sha256 " << sha << '\n';
  return 0;
}

// ---- eval ----

struct EvalArgs {
  Common common;
  std::string model;
  std::string adapter;
  std::string split = "test";
};

int run_eval(const EvalArgs& a) {
  const std::string path = model_or_default(a.model, a.common, "model.cmct");
  ordered_json cfg = common_json(a.common);
  cfg["model"] = path;
  cfg["adapter"] = a.adapter;
  cfg["split"] = a.split;
  print_config("eval", cfg);

  ModelPtr model = load_model(path);
  DatasetPtr data = make_dataset(a.common, config_of(model.get()));
  const int split = a.split == "train" ? 0 : 1;
  double acc = 0.0;
  if (a.adapter.empty()) {
    check(comcat_evaluate(model.get(), data.get(), split, &acc), "evaluating");
  } else {
    char base_sha[65];
    check(comcat_file_sha256(path.c_str(), base_sha), "hashing " + path);
    comcat_adapter* raw = nullptr;
    check(comcat_adapter_load(a.adapter.c_str(), base_sha, &raw), "loading " + a.adapter);
    AdapterPtr adapter(raw);
    check(comcat_adapter_evaluate(model.get(), adapter.get(), data.get(), split, &acc), "evaluating");
  }
  std::cout << "cost " << cost_json(model.get()).dump() << '\n' << a.split << " accuracy " << acc << '\n';
  return 0;
}

// ---- report ----

struct ReportArgs {
  Common common;
  std::string model;
};

int run_report(const ReportArgs& a) {
  const std::string path = model_or_default(a.model, a.common, "model.cmct");
  ordered_json cfg = common_json(a.common);
  cfg["model"] = path;
  print_config("report", cfg);

  ensure_out_dir(a.common);
  char sha[65];
  check(comcat_file_sha256(path.c_str(), sha), "hashing " + path);
  ModelPtr model = load_model(path);
  const comcat_model_config mc = config_of(model.get());
  DatasetPtr data = make_dataset(a.common, mc);
  std::uint64_t dense = 0;
  check(comcat_dense_site_params(&mc, &dense), "counting dense parameters");

  double train_acc = 0.0, test_acc = 0.0;
  check(comcat_evaluate(model.get(), data.get(), 0, &train_acc), "evaluating");
  check(comcat_evaluate(model.get(), data.get(), 1, &test_acc), "evaluating");

  const std::string plan = out_path(a.common, "model_plan.json");
  const bool low_rank = comcat_model_write_plan(model.get(), plan.c_str()) == COMCAT_OK;

  ordered_json j{{"model", path},
                 {"sha256", std::string(sha)},
                 {"config", model_config_json(mc)},
                 {"cost", cost_json(model.get())},
                 {"dense_site_params", dense},
                 {"low_rank_attention", low_rank},
                 {"train_accuracy", train_acc},
                 {"test_accuracy", test_acc}};
  if (low_rank) j["plan"] = plan;
  const std::string out = out_path(a.common, "summary.json");
  std::FILE* f = std::fopen(out.c_str(), "wb");
  if (!f) throw RuntimeFailure("cannot write " + out);
  const std::string text = j.dump(2) + "\n";
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) throw RuntimeFailure("cannot write " + out);
  std::cout << text << "wrote " << out << '\n';
  return 0;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Seed for initialization, batching and sampling")->capture_default_str();
  cmd->add_option("--data-seed", c.data_seed, "Seed of the synthetic dataset")->capture_default_str();
  cmd->add_option("--samples-per-class", c.samples_per_class, "Dataset size per class")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--out-dir", c.out_dir, "Directory for every output file")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head-level low-rank compression of vision transformer attention"};
  app.require_subcommand(1);
  app.set_version_flag("--version", comcat_version());

  TrainArgs train;
  comcat_model_config_defaults(&train.model);
  auto* train_cmd = app.add_subcommand("train", "Train the dense baseline model");
  add_common(train_cmd, train.common);
  train_cmd->add_option("--epochs", train.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", train.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", train.lr)->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--holdout", train.holdout, "Leave this class out of training (-1 keeps all)")
      ->capture_default_str();
  train_cmd->add_option("--d-model", train.model.d_model)->capture_default_str();
  train_cmd->add_option("--heads", train.model.heads)->capture_default_str();
  train_cmd->add_option("--blocks", train.model.blocks)->capture_default_str();
  train_cmd->add_option("--ffn-dim", train.model.ffn_dim)->capture_default_str();

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Singular value spectra and params-at-tau comparison");
  add_common(analyze_cmd, analyze.common);
  analyze_cmd->add_option("--model", analyze.model, "Model file (default <out-dir>/model.cmct)");
  analyze_cmd->add_option("--tau", analyze.tau)->capture_default_str()->check(CLI::Range(0.0, 1.0));

  CompressArgs compress;
  auto* compress_cmd = app.add_subcommand("compress", "Truncate combined matrices to fixed ranks or a plan");
  add_common(compress_cmd, compress.common);
  compress_cmd->add_option("--model", compress.model, "Model file (default <out-dir>/model.cmct)");
  auto* r1 = compress_cmd->add_option("--r1", compress.r1, "Rank of every W^QK");
  auto* r2 = compress_cmd->add_option("--r2", compress.r2, "Rank of every W^VO");
  auto* rffn = compress_cmd->add_option("--rffn", compress.rffn, "Rank of the FFN matrices (0 keeps them dense)");
  auto* plan = compress_cmd->add_option("--plan", compress.plan, "plan.json with per-site ranks");
  plan->excludes(r1)->excludes(r2)->excludes(rffn);

  SearchArgs search;
  auto* search_cmd = app.add_subcommand("search", "Budget-constrained per-site rank search");
  add_common(search_cmd, search.common);
  search_cmd->add_option("--model", search.model, "Dense model file (default <out-dir>/model.cmct)");
  search_cmd->add_option("--eps", search.eps, "Budget: parameter count, fraction, or percentage like 50%")
      ->capture_default_str();
  search_cmd->add_option("--beta", search.beta)->capture_default_str()->check(CLI::PositiveNumber);
  search_cmd->add_option("--rounds", search.rounds)->capture_default_str()->check(CLI::PositiveNumber);
  search_cmd->add_option("--prob-steps", search.prob_steps)->capture_default_str();
  search_cmd->add_option("--weight-steps", search.weight_steps)->capture_default_str();
  search_cmd->add_option("--penalty", search.penalty)
      ->capture_default_str()
      ->check(CLI::IsMember({"hinge", "ratio"}));

  FinetuneArgs finetune;
  auto* finetune_cmd = app.add_subcommand("finetune", "Train a compressed model's factors");
  add_common(finetune_cmd, finetune.common);
  finetune_cmd->add_option("--model", finetune.model, "Model file (default <out-dir>/compressed.cmct)");
  finetune_cmd->add_option("--epochs", finetune.epochs)->capture_default_str();
  finetune_cmd->add_option("--batch-size", finetune.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  finetune_cmd->add_option("--lr", finetune.lr)->capture_default_str()->check(CLI::PositiveNumber);

  AdaptArgs adapt;
  auto* adapt_cmd = app.add_subcommand("adapt", "Train a low-rank adapter over a frozen model");
  add_common(adapt_cmd, adapt.common);
  adapt_cmd->add_option("--model", adapt.model, "Base model file (default <out-dir>/model.cmct)");
  adapt_cmd->add_option("--rank", adapt.rank)->capture_default_str()->check(CLI::PositiveNumber);
  adapt_cmd->add_option("--steps", adapt.steps)->capture_default_str();
  adapt_cmd->add_option("--lr", adapt.lr)->capture_default_str()->check(CLI::PositiveNumber);
  adapt_cmd->add_option("--holdout", adapt.holdout, "New class to learn (default: the last class)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy and cost of a model");
  add_common(eval_cmd, eval.common);
  eval_cmd->add_option("--model", eval.model, "Model file (default <out-dir>/model.cmct)");
  eval_cmd->add_option("--adapter", eval.adapter, "Adapter file bound to the model");
  eval_cmd->add_option("--split", eval.split)->capture_default_str()->check(CLI::IsMember({"train", "test"}));

  ReportArgs report;
  auto* report_cmd = app.add_subcommand("report", "Summary of a model file as JSON");
  add_common(report_cmd, report.common);
  report_cmd->add_option("--model", report.model, "Model file (default <out-dir>/model.cmct)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    if (*train_cmd) return run_train(train);
    if (*analyze_cmd) return run_analyze(analyze);
    if (*compress_cmd) return run_compress(compress);
    if (*search_cmd) return run_search(search);
    if (*finetune_cmd) return run_finetune(finetune);
    if (*adapt_cmd) return run_adapt(adapt);
    if (*eval_cmd) return run_eval(eval);
    if (*report_cmd) return run_report(report);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
