#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmoe/config.hpp"
#include "mmoe/error.hpp"
#include "mmoe/eval.hpp"
#include "mmoe/gradcheck.hpp"
#include "mmoe/io.hpp"
#include "mmoe/training.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> out_override;
  std::optional<double> threshold_override;
};

mmoe::RunConfig load_config(const CommonOpts& opts, bool need_increment = false) {
  mmoe::RunConfig cfg = mmoe::load_run_config(opts.config_path);
  if (opts.seed_override) cfg.seed = *opts.seed_override;
  if (opts.out_override) cfg.out_dir = *opts.out_override;
  if (opts.threshold_override) cfg.gating.threshold = *opts.threshold_override;
  cfg.training.seed = cfg.seed;
  cfg.validate(need_increment);
  fs::create_directories(cfg.out_dir);
  return cfg;
}

std::string model_path(const mmoe::RunConfig& cfg) {
  return (fs::path(cfg.out_dir) / "model.mmoe").string();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw mmoe::IoError("cannot open " + path + " for writing");
  out << content;
  if (!out) throw mmoe::IoError("failed to write " + path);
}

void write_records(const std::string& path, const std::vector<mmoe::PredictionRecord>& records) {
  std::string text = "# id\tscores\tstopped\tmediator\tpredicted\ttrue\n";
  for (const mmoe::PredictionRecord& r : records) {
    text += mmoe::format_prediction_record(r);
    text += "\n";
  }
  write_text(path, text);
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::string item;
  std::istringstream in(csv);
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  if (out.empty()) throw mmoe::ConfigError("empty list: " + csv);
  return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  for (double v : parse_double_list(csv)) out.push_back(static_cast<int>(v));
  return out;
}

int run_synth_data(const std::string& out_dir, std::uint64_t seed, int classes, int per_class,
                   int test_per_class, int size) {
  fs::create_directories(out_dir);
  const mmoe::LabeledDataset train = mmoe::synth_dataset(seed, classes, per_class, size);
  const mmoe::LabeledDataset test =
      mmoe::synth_dataset(mmoe::derive_seed(seed, "test-split"), classes, test_per_class, size);
  mmoe::write_idx_images((fs::path(out_dir) / "train-images.idx").string(), train.images);
  mmoe::write_idx_labels((fs::path(out_dir) / "train-labels.idx").string(), train.labels);
  mmoe::write_idx_images((fs::path(out_dir) / "test-images.idx").string(), test.images);
  mmoe::write_idx_labels((fs::path(out_dir) / "test-labels.idx").string(), test.labels);
  std::cout << "wrote " << train.size() << " train and " << test.size() << " test samples to "
            << out_dir << "\n";
  return 0;
}

int run_train_mediator(const CommonOpts& opts) {
  const mmoe::RunConfig cfg = load_config(opts);
  const mmoe::LabeledDataset train = mmoe::load_idx(cfg.train_images, cfg.train_labels);
  const mmoe::SuperclassMap map = mmoe::load_superclass_map(cfg.superclass_map);
  mmoe::Ensemble ens = mmoe::make_ensemble(cfg.ensemble_config(train.sample_shape()), cfg.gating,
                                           map, cfg.seed);
  const mmoe::LossCurve curve = mmoe::train_mediator(ens, train, cfg.training);
  mmoe::write_curve_csv((fs::path(cfg.out_dir) / "curve_mediator.csv").string(), curve);
  mmoe::save_model(ens, model_path(cfg));
  std::cout << "mediator trained (" << curve.size() << " epochs, final loss "
            << mmoe::format_double(curve.empty() ? 0.0 : curve.back().mean_loss) << ") -> "
            << model_path(cfg) << "\n";
  return 0;
}

int run_train_experts(const CommonOpts& opts) {
  const mmoe::RunConfig cfg = load_config(opts);
  mmoe::Ensemble ens = mmoe::load_model(model_path(cfg));
  if (!ens.mediator_trained) throw mmoe::Error("mediator is untrained; run train-mediator first");
  const mmoe::LabeledDataset train = mmoe::load_idx(cfg.train_images, cfg.train_labels);
  mmoe::build_experts(ens, mmoe::derive_seed(cfg.seed, "build-experts"));
  for (int i = 0; i < ens.n_experts(); ++i) {
    const mmoe::LossCurve curve = mmoe::train_expert(ens, i, train, cfg.training);
    mmoe::write_curve_csv(
        (fs::path(cfg.out_dir) / ("curve_expert_" + std::to_string(i) + ".csv")).string(), curve);
  }
  mmoe::save_model(ens, model_path(cfg));
  std::cout << ens.n_experts() << " experts trained -> " << model_path(cfg) << "\n";
  return 0;
}

int run_train_confidence(const CommonOpts& opts) {
  const mmoe::RunConfig cfg = load_config(opts);
  mmoe::Ensemble ens = mmoe::load_model(model_path(cfg));
  const mmoe::LabeledDataset train = mmoe::load_idx(cfg.train_images, cfg.train_labels);
  const std::vector<mmoe::LossCurve> curves =
      mmoe::train_confidence_heads(ens, train, cfg.training);
  for (std::size_t i = 0; i < curves.size(); ++i) {
    mmoe::write_curve_csv(
        (fs::path(cfg.out_dir) / ("curve_head_" + std::to_string(i) + ".csv")).string(),
        curves[i]);
  }
  mmoe::save_model(ens, model_path(cfg));
  std::cout << curves.size() << " confidence heads trained -> " << model_path(cfg) << "\n";
  return 0;
}

int run_add_expert(const CommonOpts& opts) {
  const mmoe::RunConfig cfg = load_config(opts, /*need_increment=*/true);
  mmoe::Ensemble ens = mmoe::load_model(model_path(cfg));
  const mmoe::LabeledDataset old_data = mmoe::load_idx(cfg.train_images, cfg.train_labels);
  const mmoe::LabeledDataset new_data =
      mmoe::load_idx(*cfg.increment_images, *cfg.increment_labels);
  std::map<int, int> entries;
  for (const auto& [fine, super] : mmoe::parse_map_pairs(*cfg.increment_map)) {
    if (entries.count(fine)) {
      throw mmoe::DuplicateFineClassError("fine class " + std::to_string(fine) +
                                          " listed twice in increment map");
    }
    entries[fine] = super;
  }
  mmoe::add_expert_incremental(ens, old_data, new_data, entries, cfg.training);
  mmoe::save_model(ens, model_path(cfg));
  std::cout << "ensemble extended to " << ens.n_experts() << " experts, " << ens.n_classes()
            << " classes -> " << model_path(cfg) << "\n";
  return 0;
}

int run_eval(const CommonOpts& opts, const std::string& mode_name) {
  const mmoe::RunConfig cfg = load_config(opts);
  const mmoe::EvalMode mode = mmoe::eval_mode_from_string(mode_name);
  mmoe::Ensemble ens = mmoe::load_model(model_path(cfg));
  const mmoe::LabeledDataset test = mmoe::load_idx(cfg.test_images, cfg.test_labels);
  const mmoe::EvalCache cache = mmoe::build_eval_cache(ens, test);
  const mmoe::MetricsReport report = mmoe::evaluate_cached(cache, cfg.gating, mode);
  const std::string csv_path =
      (fs::path(cfg.out_dir) / ("metrics_" + mode_name + ".csv")).string();
  write_text(csv_path, mmoe::metrics_csv(report));
  write_records((fs::path(cfg.out_dir) / ("predictions_" + mode_name + ".tsv")).string(),
                mmoe::prediction_records(cache, cfg.gating, mode));
  std::cout << mode_name << " top1 " << mmoe::format_double(report.top1) << " over "
            << report.n_samples << " samples -> " << csv_path << "\n";
  return 0;
}

int run_sweep_threshold(const CommonOpts& opts, const std::string& t_list_csv) {
  const mmoe::RunConfig cfg = load_config(opts);
  mmoe::Ensemble ens = mmoe::load_model(model_path(cfg));
  const mmoe::LabeledDataset test = mmoe::load_idx(cfg.test_images, cfg.test_labels);
  const std::vector<double> t_list = parse_double_list(t_list_csv);
  const std::vector<mmoe::SweepRow> rows = mmoe::threshold_sweep(ens, test, t_list);
  const std::string path = (fs::path(cfg.out_dir) / "sweep_threshold.csv").string();
  write_text(path, mmoe::sweep_csv(rows));
  std::cout << rows.size() << " thresholds swept -> " << path << "\n";
  return 0;
}

int run_sweep_shared(const CommonOpts& opts, const std::string& k_list_csv) {
  const mmoe::RunConfig cfg = load_config(opts);
  const mmoe::LabeledDataset train = mmoe::load_idx(cfg.train_images, cfg.train_labels);
  const mmoe::LabeledDataset test = mmoe::load_idx(cfg.test_images, cfg.test_labels);
  const mmoe::SuperclassMap map = mmoe::load_superclass_map(cfg.superclass_map);
  const std::vector<int> k_list = parse_int_list(k_list_csv);
  const std::vector<mmoe::SharedSweepRow> rows =
      mmoe::shared_layers_sweep(cfg.ensemble_config(train.sample_shape()), cfg.gating, map, train,
                                test, k_list, cfg.training);
  const std::string path = (fs::path(cfg.out_dir) / "sweep_shared.csv").string();
  write_text(path, mmoe::shared_sweep_csv(rows));
  std::cout << rows.size() << " sharing depths swept -> " << path << "\n";
  return 0;
}

int run_gradcheck(int nets, double eps) {
  const mmoe::GradCheckResult r = mmoe::gradcheck_suite(nets, eps);
  std::printf("gradcheck: %zu parameters over %d nets, max relative error %.3e (%s)\n",
              r.params_checked, nets, r.max_rel_error, r.worst_location.c_str());
  return r.max_rel_error < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mediated mixture-of-experts CNN: training, gating and evaluation"};
  app.require_subcommand(1);

  CommonOpts opts;
  auto add_common = [&opts](CLI::App* cmd) {
    cmd->add_option("--config", opts.config_path, "run configuration file")->required();
    cmd->add_option("--seed", opts.seed_override, "override [run] seed");
    cmd->add_option("--out", opts.out_override, "override [run] out directory");
    cmd->add_option("--threshold", opts.threshold_override, "override [gating] threshold");
  };

  // synth-data
  std::string synth_out = "data";
  std::uint64_t synth_seed = 1;
  int synth_classes = 10, synth_per_class = 300, synth_test_per_class = 100, synth_size = 16;
  CLI::App* synth = app.add_subcommand("synth-data", "generate deterministic synthetic IDX files");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--classes", synth_classes, "number of classes");
  synth->add_option("--per-class", synth_per_class, "training samples per class");
  synth->add_option("--test-per-class", synth_test_per_class, "test samples per class");
  synth->add_option("--size", synth_size, "image side length");

  CLI::App* train_med = app.add_subcommand("train-mediator", "train the full-class mediator");
  add_common(train_med);
  CLI::App* train_exp = app.add_subcommand("train-experts", "train one expert per superclass");
  add_common(train_exp);
  CLI::App* train_conf = app.add_subcommand("train-confidence", "train the confidence heads");
  add_common(train_conf);
  CLI::App* add_exp = app.add_subcommand("add-expert", "add a new superclass incrementally");
  add_common(add_exp);

  std::string eval_mode = "mmoe";
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate the trained ensemble");
  add_common(eval_cmd);
  eval_cmd->add_option("--mode", eval_mode, "baseline|branching|unmediated|mmoe")
      ->check(CLI::IsMember({"baseline", "branching", "unmediated", "mmoe"}));

  std::string t_list = "0.5,1,1.5,2,3,4,6,8,12,16";
  CLI::App* sweep_t = app.add_subcommand("sweep-threshold", "evaluate across thresholds");
  add_common(sweep_t);
  sweep_t->add_option("--t-list", t_list, "comma-separated thresholds");

  std::string k_list = "0,1,2";
  CLI::App* sweep_k = app.add_subcommand("sweep-shared", "retrain with varying shared prefix");
  add_common(sweep_k);
  sweep_k->add_option("--k-list", k_list, "comma-separated shared conv counts");

  int gc_nets = 20;
  double gc_eps = 1e-5;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--nets", gc_nets, "number of random networks");
  gradcheck->add_option("--eps", gc_eps, "central difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) {
      return run_synth_data(synth_out, synth_seed, synth_classes, synth_per_class,
                            synth_test_per_class, synth_size);
    }
    if (train_med->parsed()) return run_train_mediator(opts);
    if (train_exp->parsed()) return run_train_experts(opts);
    if (train_conf->parsed()) return run_train_confidence(opts);
    if (add_exp->parsed()) return run_add_expert(opts);
    if (eval_cmd->parsed()) return run_eval(opts, eval_mode);
    if (sweep_t->parsed()) return run_sweep_threshold(opts, t_list);
    if (sweep_k->parsed()) return run_sweep_shared(opts, k_list);
    if (gradcheck->parsed()) return run_gradcheck(gc_nets, gc_eps);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
