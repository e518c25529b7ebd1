#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmoe/builder.hpp"
#include "mmoe/dataset.hpp"
#include "mmoe/gating.hpp"
#include "mmoe/training.hpp"

namespace mmoe {

enum class EvalMode { SingleBaseline, Branching, Unmediated, MMoE };

EvalMode eval_mode_from_string(const std::string& name);
const char* eval_mode_name(EvalMode mode);

struct MarginSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
};

struct MarginStats {
  std::optional<MarginSummary> correct;  // absent when the group is empty
  std::optional<MarginSummary> incorrect;
};

MarginSummary summarize_margins(std::span<const double> margins);

struct MetricsReport {
  EvalMode mode = EvalMode::MMoE;
  double top1 = 0.0;
  std::vector<double> p_stop;        // per-expert stop probability
  double false_stop_rate = 0.0;      // true expert stopped
  double mediator_rate = 0.0;        // mediator actually executed
  double expected_params = 0.0;      // mean parameters loaded per sample
  double superclass_top1 = 0.0;      // argmax-score superclass accuracy
  MarginStats margins;
  std::size_t n_samples = 0;
};

// Static parameter counts used by the load accounting. The shared prefix is
// counted once; per-expert terms split at the confidence checkpoint.
struct ParamAccounting {
  double shared_prefix = 0.0;
  std::vector<double> expert_prefix_to_j;  // beyond the shared prefix, up to the checkpoint
  std::vector<double> expert_head;
  std::vector<double> expert_suffix;       // checkpoint to output
  double mediator_tail = 0.0;              // mediator params beyond the shared prefix
  double mediator_full = 0.0;              // standalone mediator (single-model reference)
  double traditional_moe = 0.0;            // N standalone experts, no sharing, no mediator
  double fixed = 0.0;                      // shared + sum(prefix_to_j + head)
  double total_all = 0.0;                  // fixed + all suffixes + mediator_tail
};

ParamAccounting count_ensemble_params(const Ensemble& ens);

// E[params] = fixed + sum_i (1 - p_stop[i]) * suffix_i + p_multi * mediator_tail.
double expected_params_formula(const ParamAccounting& counts, std::span<const double> p_stop,
                               double p_multi);

// Per-sample forward results cached once; gating can then be replayed for
// any threshold without recomputing forward passes (scores do not depend
// on T).
struct SampleCache {
  ConfidenceScores scores;
  std::vector<std::vector<double>> expert_probs;  // scattered to global indices
  std::vector<double> mediator_probs;
  int fine_label = -1;
  int super_label = -1;
};

struct EvalCache {
  std::vector<SampleCache> samples;
  ParamAccounting counts;
  int n_classes = 0;
  int n_experts = 0;
};

EvalCache build_eval_cache(const Ensemble& ens, const LabeledDataset& ds);

// One sample under the given mode, from cached forward results. For MMoE this
// reproduces predict() exactly.
PredictionRecord eval_sample(const EvalCache& cache, std::size_t index, const GatingConfig& cfg,
                             EvalMode mode);

std::vector<PredictionRecord> prediction_records(const EvalCache& cache, const GatingConfig& cfg,
                                                 EvalMode mode);

MetricsReport evaluate_cached(const EvalCache& cache, const GatingConfig& cfg, EvalMode mode);

MetricsReport evaluate(const Ensemble& ens, const LabeledDataset& ds, const GatingConfig& cfg,
                       EvalMode mode);

// Eq-margin statistics (top score minus second-highest) grouped by whether
// the argmax score named the true superclass.
MarginStats margin_stats(const Ensemble& ens, const LabeledDataset& ds);

// Expected parameter load of the full pipeline at the ensemble's threshold,
// plus the reference counts.
struct ParamLoadReport {
  double expected = 0.0;
  ParamAccounting counts;
};

ParamLoadReport expected_param_load(const Ensemble& ens, const LabeledDataset& ds,
                                    const GatingConfig& cfg);

struct SweepRow {
  double threshold = 0.0;
  MetricsReport metrics;
};

// One evaluation per threshold over a single forward-pass cache.
std::vector<SweepRow> threshold_sweep(const Ensemble& ens, const LabeledDataset& ds,
                                      std::span<const double> t_list);

// CSV with header T,top1,p_stop_0..p_stop_{N-1},false_stop,mediator_rate,expected_params.
std::string sweep_csv(std::span<const SweepRow> rows);

struct SharedSweepRow {
  int k = 0;
  double top1 = 0.0;
};

// Retrains experts+heads from a fixed mediator for each k and evaluates the
// full pipeline. Seeds are fixed per k for comparability.
std::vector<SharedSweepRow> shared_layers_sweep(const EnsembleConfig& base_cfg,
                                                const GatingConfig& gating,
                                                const SuperclassMap& map,
                                                const LabeledDataset& train_ds,
                                                const LabeledDataset& test_ds,
                                                std::span<const int> k_list,
                                                const TrainConfig& tcfg);

// CSV with header k,top1.
std::string shared_sweep_csv(std::span<const SharedSweepRow> rows);

// Metrics CSV for a single evaluation (one header + one row).
std::string metrics_csv(const MetricsReport& report);

// Deterministic "%.10g" formatting used by every CSV writer.
std::string format_double(double v);

}  // namespace mmoe
