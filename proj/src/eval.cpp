#include "mmoe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "mmoe/error.hpp"

namespace mmoe {

EvalMode eval_mode_from_string(const std::string& name) {
  if (name == "baseline") return EvalMode::SingleBaseline;
  if (name == "branching") return EvalMode::Branching;
  if (name == "unmediated") return EvalMode::Unmediated;
  if (name == "mmoe") return EvalMode::MMoE;
  throw ConfigError("unknown eval mode `" + name +
                    "` (expected baseline|branching|unmediated|mmoe)");
}

const char* eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::SingleBaseline: return "baseline";
    case EvalMode::Branching: return "branching";
    case EvalMode::Unmediated: return "unmediated";
    case EvalMode::MMoE: return "mmoe";
  }
  return "?";
}

std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

MarginSummary summarize_margins(std::span<const double> margins) {
  MarginSummary s;
  s.count = margins.size();
  if (margins.empty()) return s;
  double sum = 0.0;
  for (double m : margins) sum += m;
  s.mean = sum / static_cast<double>(margins.size());
  double var = 0.0;
  for (double m : margins) var += (m - s.mean) * (m - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(margins.size()));
  return s;
}

ParamAccounting count_ensemble_params(const Ensemble& ens) {
  if (ens.experts.empty()) throw Error("count_ensemble_params: ensemble has no experts");
  const int cut = ens.shared_prefix_end();
  const int attach = ens.confidence_attach_end();

  ParamAccounting c;
  c.shared_prefix = static_cast<double>(param_count_range(ens.mediator, 0, cut));
  c.mediator_tail =
      static_cast<double>(param_count_range(ens.mediator, cut, ens.mediator.num_layers()));
  c.mediator_full = static_cast<double>(param_count(ens.mediator));
  c.fixed = c.shared_prefix;
  for (const ExpertSlot& e : ens.experts) {
    const double prefix = static_cast<double>(param_count_range(e.net, cut, attach));
    const double head = static_cast<double>(param_count(e.confidence_head));
    const double suffix =
        static_cast<double>(param_count_range(e.net, attach, e.net.num_layers()));
    c.expert_prefix_to_j.push_back(prefix);
    c.expert_head.push_back(head);
    c.expert_suffix.push_back(suffix);
    c.fixed += prefix + head;
    c.traditional_moe += static_cast<double>(param_count(e.net));
  }
  c.total_all = c.fixed + c.mediator_tail +
                std::accumulate(c.expert_suffix.begin(), c.expert_suffix.end(), 0.0);
  return c;
}

double expected_params_formula(const ParamAccounting& counts, std::span<const double> p_stop,
                               double p_multi) {
  double e = counts.fixed + p_multi * counts.mediator_tail;
  for (std::size_t i = 0; i < counts.expert_suffix.size(); ++i) {
    e += (1.0 - p_stop[i]) * counts.expert_suffix[i];
  }
  return e;
}

namespace {

std::vector<double> row_softmax(const Tensor& logits, int row) {
  const int k = logits.dim(1);
  std::vector<double> vals(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    vals[static_cast<std::size_t>(i)] =
        static_cast<double>(logits.ptr()[static_cast<std::size_t>(row) * k + i]);
  }
  return softmax(vals);
}

}  // namespace

EvalCache build_eval_cache(const Ensemble& ens, const LabeledDataset& ds) {
  if (ens.experts.empty()) throw Error("evaluate: ensemble has no experts (train them first)");
  for (const ExpertSlot& e : ens.experts) {
    if (!e.trained || !e.head_trained) {
      throw Error("evaluate: experts and confidence heads must be trained");
    }
  }
  ds.validate();

  EvalCache cache;
  cache.counts = count_ensemble_params(ens);
  cache.n_classes = ens.n_classes();
  cache.n_experts = ens.n_experts();
  cache.samples.resize(ds.size());

  const int cut = ens.shared_prefix_end();
  const int attach = ens.confidence_attach_end();

  const std::size_t chunk = 256;
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t stop = std::min(ds.size(), start + chunk);
    indices.resize(stop - start);
    std::iota(indices.begin(), indices.end(), start);
    const Tensor x = ds.gather_images(indices);
    const int rows = static_cast<int>(indices.size());

    const Trace<real> prefix = forward_range(ens.mediator, x, 0, cut);
    const Tensor& px = prefix.back();
    const Trace<real> med_tail = forward_range(ens.mediator, px, cut, ens.mediator.num_layers());
    const Tensor& med_logits = med_tail.back();

    for (int r = 0; r < rows; ++r) {
      SampleCache& s = cache.samples[start + static_cast<std::size_t>(r)];
      s.fine_label = ds.labels[start + static_cast<std::size_t>(r)];
      s.super_label = ens.map.super_of(s.fine_label);
      s.mediator_probs = row_softmax(med_logits, r);
      s.scores.s.resize(static_cast<std::size_t>(cache.n_experts));
      s.expert_probs.resize(static_cast<std::size_t>(cache.n_experts));
    }

    for (int i = 0; i < cache.n_experts; ++i) {
      const ExpertSlot& e = ens.experts[static_cast<std::size_t>(i)];
      const Trace<real> mid = forward_range(e.net, px, cut, attach);
      const Trace<real> head_out = forward(e.confidence_head, mid.back());
      const Trace<real> tail = forward_range(e.net, mid.back(), attach, e.net.num_layers());
      const Tensor& head_logits = head_out.back();
      const Tensor& local_logits = tail.back();
      for (int r = 0; r < rows; ++r) {
        SampleCache& s = cache.samples[start + static_cast<std::size_t>(r)];
        s.scores.s[static_cast<std::size_t>(i)] = static_cast<double>(head_logits.at2(r, i));
        s.expert_probs[static_cast<std::size_t>(i)] = scatter_expert_probs(
            row_softmax(local_logits, r), e.local_to_global, cache.n_classes, false);
      }
    }
  }
  return cache;
}

// One sample under the given mode, entirely from cached forward results.
// For MMoE this reproduces predict() bit for bit: stopped experts are fused
// with weight zero, which is arithmetically identical to skipping them.
PredictionRecord eval_sample(const EvalCache& cache, std::size_t index, const GatingConfig& cfg,
                             EvalMode mode) {
  const SampleCache& s = cache.samples[index];
  const int n = cache.n_experts;

  PredictionRecord rec;
  rec.sample_id = static_cast<int>(index);
  rec.true_label = s.fine_label;
  rec.scores = s.scores;

  switch (mode) {
    case EvalMode::SingleBaseline: {
      for (int i = 0; i < n; ++i) rec.decision.active.push_back(i);
      rec.decision.scores = s.scores;
      rec.weights.expert_weights.assign(static_cast<std::size_t>(n), 0.0);
      rec.weights.mediator_weight = 1.0;
      rec.mediator_executed = true;
      rec.fused = s.mediator_probs;
      rec.params_loaded = cache.counts.mediator_full;
      break;
    }
    case EvalMode::Branching: {
      const int chosen = argmax_lowest(s.scores.s);
      rec.decision.scores = s.scores;
      rec.decision.active.push_back(chosen);
      for (int i = 0; i < n; ++i) {
        if (i != chosen) rec.decision.stopped.push_back(i);
      }
      rec.weights.expert_weights.assign(static_cast<std::size_t>(n), 0.0);
      rec.weights.expert_weights[static_cast<std::size_t>(chosen)] = 1.0;
      rec.fused = s.expert_probs[static_cast<std::size_t>(chosen)];
      rec.params_loaded =
          cache.counts.fixed + cache.counts.expert_suffix[static_cast<std::size_t>(chosen)];
      break;
    }
    case EvalMode::Unmediated:
    case EvalMode::MMoE: {
      rec.decision = gate(s.scores, cfg);
      const double w_med = mode == EvalMode::MMoE ? cfg.mediator_weight : 0.0;
      rec.weights = fusion_weights(rec.decision, w_med);
      rec.mediator_executed = rec.decision.mediator_invoked && rec.weights.mediator_weight > 0.0;
      rec.fused =
          fuse(s.expert_probs, rec.mediator_executed ? &s.mediator_probs : nullptr, rec.weights);
      double params = cache.counts.fixed;
      for (int i : rec.decision.active) {
        params += cache.counts.expert_suffix[static_cast<std::size_t>(i)];
      }
      if (rec.mediator_executed) params += cache.counts.mediator_tail;
      rec.params_loaded = params;
      break;
    }
  }
  rec.predicted = argmax_lowest(rec.fused);
  return rec;
}

std::vector<PredictionRecord> prediction_records(const EvalCache& cache, const GatingConfig& cfg,
                                                 EvalMode mode) {
  std::vector<PredictionRecord> records;
  records.reserve(cache.samples.size());
  for (std::size_t i = 0; i < cache.samples.size(); ++i) {
    records.push_back(eval_sample(cache, i, cfg, mode));
  }
  return records;
}

namespace {

struct MarginAccum {
  std::vector<double> correct, incorrect;

  void add(const SampleCache& s) {
    if (s.scores.s.size() < 2) return;
    const int top = argmax_lowest(s.scores.s);
    double second = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < s.scores.s.size(); ++k) {
      if (static_cast<int>(k) != top) second = std::max(second, s.scores.s[k]);
    }
    const double margin = s.scores.s[static_cast<std::size_t>(top)] - second;
    if (top == s.super_label) {
      correct.push_back(margin);
    } else {
      incorrect.push_back(margin);
    }
  }

  MarginStats finish() const {
    MarginStats m;
    if (!correct.empty()) m.correct = summarize_margins(correct);
    if (!incorrect.empty()) m.incorrect = summarize_margins(incorrect);
    return m;
  }
};

}  // namespace

MetricsReport evaluate_cached(const EvalCache& cache, const GatingConfig& cfg, EvalMode mode) {
  cfg.validate();
  if (cache.samples.empty()) throw Error("evaluate: empty dataset");
  const int n = cache.n_experts;
  MetricsReport rep;
  rep.mode = mode;
  rep.n_samples = cache.samples.size();
  rep.p_stop.assign(static_cast<std::size_t>(n), 0.0);

  std::size_t top1 = 0, super_ok = 0, false_stop = 0, mediator_runs = 0;
  std::vector<std::size_t> stop_counts(static_cast<std::size_t>(n), 0);
  double params_sum = 0.0;
  MarginAccum margins;

  for (std::size_t idx = 0; idx < cache.samples.size(); ++idx) {
    const SampleCache& s = cache.samples[idx];
    margins.add(s);
    const PredictionRecord rec = eval_sample(cache, idx, cfg, mode);
    if (rec.predicted == s.fine_label) ++top1;
    if (argmax_lowest(s.scores.s) == s.super_label) ++super_ok;
    for (int i : rec.decision.stopped) {
      ++stop_counts[static_cast<std::size_t>(i)];
      if (i == s.super_label) ++false_stop;
    }
    if (rec.mediator_executed && mode != EvalMode::SingleBaseline) ++mediator_runs;
    params_sum += rec.params_loaded;
  }

  const double inv = 1.0 / static_cast<double>(cache.samples.size());
  rep.top1 = static_cast<double>(top1) * inv;
  rep.superclass_top1 = static_cast<double>(super_ok) * inv;
  rep.false_stop_rate = static_cast<double>(false_stop) * inv;
  rep.mediator_rate = static_cast<double>(mediator_runs) * inv;
  rep.expected_params = params_sum * inv;
  for (int i = 0; i < n; ++i) {
    rep.p_stop[static_cast<std::size_t>(i)] =
        static_cast<double>(stop_counts[static_cast<std::size_t>(i)]) * inv;
  }
  rep.margins = margins.finish();
  return rep;
}

MetricsReport evaluate(const Ensemble& ens, const LabeledDataset& ds, const GatingConfig& cfg,
                       EvalMode mode) {
  return evaluate_cached(build_eval_cache(ens, ds), cfg, mode);
}

MarginStats margin_stats(const Ensemble& ens, const LabeledDataset& ds) {
  const EvalCache cache = build_eval_cache(ens, ds);
  MarginAccum margins;
  for (const SampleCache& s : cache.samples) margins.add(s);
  return margins.finish();
}

ParamLoadReport expected_param_load(const Ensemble& ens, const LabeledDataset& ds,
                                    const GatingConfig& cfg) {
  const EvalCache cache = build_eval_cache(ens, ds);
  const MetricsReport rep = evaluate_cached(cache, cfg, EvalMode::MMoE);
  ParamLoadReport out;
  out.counts = cache.counts;
  out.expected = rep.expected_params;
  return out;
}

std::vector<SweepRow> threshold_sweep(const Ensemble& ens, const LabeledDataset& ds,
                                      std::span<const double> t_list) {
  for (double t : t_list) {
    if (!(t > 0.0)) throw ConfigError("threshold sweep values must be > 0");
  }
  const EvalCache cache = build_eval_cache(ens, ds);
  std::vector<SweepRow> rows;
  rows.reserve(t_list.size());
  for (double t : t_list) {
    GatingConfig cfg = ens.gating;
    cfg.threshold = t;
    rows.push_back({t, evaluate_cached(cache, cfg, EvalMode::MMoE)});
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  if (rows.empty()) return "";
  const std::size_t n = rows.front().metrics.p_stop.size();
  std::string out = "T,top1";
  for (std::size_t i = 0; i < n; ++i) out += ",p_stop_" + std::to_string(i);
  out += ",false_stop,mediator_rate,expected_params\n";
  for (const SweepRow& r : rows) {
    out += format_double(r.threshold) + "," + format_double(r.metrics.top1);
    for (double p : r.metrics.p_stop) out += "," + format_double(p);
    out += "," + format_double(r.metrics.false_stop_rate);
    out += "," + format_double(r.metrics.mediator_rate);
    out += "," + format_double(r.metrics.expected_params);
    out += "\n";
  }
  return out;
}

std::vector<SharedSweepRow> shared_layers_sweep(const EnsembleConfig& base_cfg,
                                                const GatingConfig& gating,
                                                const SuperclassMap& map,
                                                const LabeledDataset& train_ds,
                                                const LabeledDataset& test_ds,
                                                std::span<const int> k_list,
                                                const TrainConfig& tcfg) {
  // The mediator does not depend on k; train it once and hand every row a
  // clone, so each k finetunes its experts from identical weights.
  EnsembleConfig cfg0 = base_cfg;
  cfg0.shared_prefix_convs = 0;
  Ensemble base = make_ensemble(cfg0, gating, map, tcfg.seed);
  train_mediator(base, train_ds, tcfg);

  std::vector<SharedSweepRow> rows;
  for (int k : k_list) {
    EnsembleConfig cfg = base_cfg;
    cfg.shared_prefix_convs = k;
    // A head can not sit strictly inside the shared prefix; the fully shared
    // endpoint keeps it at the prefix boundary.
    cfg.confidence_attach_conv = std::max(cfg.confidence_attach_conv, k);
    cfg.validate();

    Ensemble ens;
    ens.cfg = cfg;
    ens.gating = gating;
    ens.map = map;
    ens.mediator = base.mediator.clone();
    ens.mediator_trained = true;
    build_experts(ens, derive_seed(tcfg.seed, "shared-sweep", static_cast<std::uint64_t>(k)));
    for (int i = 0; i < ens.n_experts(); ++i) train_expert(ens, i, train_ds, tcfg);
    train_confidence_heads(ens, train_ds, tcfg);

    const MetricsReport rep = evaluate(ens, test_ds, gating, EvalMode::MMoE);
    rows.push_back({k, rep.top1});
  }
  return rows;
}

std::string shared_sweep_csv(std::span<const SharedSweepRow> rows) {
  std::string out = "k,top1\n";
  for (const SharedSweepRow& r : rows) {
    out += std::to_string(r.k) + "," + format_double(r.top1) + "\n";
  }
  return out;
}

std::string metrics_csv(const MetricsReport& rep) {
  std::string out = "mode,n_samples,top1,superclass_top1";
  for (std::size_t i = 0; i < rep.p_stop.size(); ++i) out += ",p_stop_" + std::to_string(i);
  out += ",false_stop,mediator_rate,expected_params";
  out += ",margin_correct_mean,margin_correct_std,margin_false_mean,margin_false_std\n";

  out += std::string(eval_mode_name(rep.mode)) + "," + std::to_string(rep.n_samples);
  out += "," + format_double(rep.top1) + "," + format_double(rep.superclass_top1);
  for (double p : rep.p_stop) out += "," + format_double(p);
  out += "," + format_double(rep.false_stop_rate);
  out += "," + format_double(rep.mediator_rate);
  out += "," + format_double(rep.expected_params);
  auto opt = [](const std::optional<MarginSummary>& m, bool mean) {
    if (!m) return std::string("-");
    return format_double(mean ? m->mean : m->stddev);
  };
  out += "," + opt(rep.margins.correct, true) + "," + opt(rep.margins.correct, false);
  out += "," + opt(rep.margins.incorrect, true) + "," + opt(rep.margins.incorrect, false);
  out += "\n";
  return out;
}

}  // namespace mmoe
