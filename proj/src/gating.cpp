#include "mmoe/gating.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>

#include "mmoe/builder.hpp"
#include "mmoe/error.hpp"
#include "mmoe/eval.hpp"

namespace mmoe {

void GatingConfig::validate() const {
  if (!(threshold > 0.0)) throw ConfigError("gating threshold must be > 0");
  if (mediator_weight < 0.0 || mediator_weight > 1.0) {
    throw ConfigError("mediator weight must be in [0,1]");
  }
}

bool GatingDecision::is_active(int i) const {
  return std::binary_search(active.begin(), active.end(), i);
}

int argmax_lowest(std::span<const double> values) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

double self_score(int expert_id, const Network& head, const Tensor& activation_at_j) {
  const Trace<real> t = forward(head, activation_at_j);
  const Tensor& out = t.back();
  const int n = out.dim(1);
  if (expert_id < 0 || expert_id >= n) {
    throw Error("self_score: expert id " + std::to_string(expert_id) +
                " out of head output range " + std::to_string(n));
  }
  return static_cast<double>(out.at2(0, expert_id));
}

bool stop_decision(const ConfidenceScores& scores, int i, double threshold) {
  const int n = scores.size();
  if (n <= 1) return false;  // empty max over k != i: never stop
  double best_other = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k) {
    if (k != i) best_other = std::max(best_other, scores.s[static_cast<std::size_t>(k)]);
  }
  return best_other - scores.s[static_cast<std::size_t>(i)] >= threshold;
}

GatingDecision gate(const ConfidenceScores& scores, const GatingConfig& cfg) {
  cfg.validate();
  const int n = scores.size();
  GatingDecision d;
  d.scores = scores;
  if (n == 1) {
    d.active = {0};
    d.mediator_invoked = false;
    return d;
  }
  // max over k != i is the global top unless i is the (first) argmax, in
  // which case it is the runner-up.
  int top = 0;
  for (int i = 1; i < n; ++i) {
    if (scores.s[static_cast<std::size_t>(i)] > scores.s[static_cast<std::size_t>(top)]) top = i;
  }
  double second = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    if (i != top) second = std::max(second, scores.s[static_cast<std::size_t>(i)]);
  }
  for (int i = 0; i < n; ++i) {
    const double best_other = i == top ? second : scores.s[static_cast<std::size_t>(top)];
    if (best_other - scores.s[static_cast<std::size_t>(i)] >= cfg.threshold) {
      d.stopped.push_back(i);
    } else {
      d.active.push_back(i);
    }
  }
  d.mediator_invoked = d.active.size() > 1;
  return d;
}

std::vector<double> scatter_expert_probs(std::span<const double> local_probs,
                                         std::span<const int> local_to_global, int n_classes,
                                         bool is_stopped) {
  std::vector<double> global(static_cast<std::size_t>(n_classes), 0.0);
  if (is_stopped) return global;
  if (local_probs.size() != local_to_global.size()) {
    throw Error("scatter_expert_probs: mapping size does not match probability vector");
  }
  for (std::size_t i = 0; i < local_probs.size(); ++i) {
    const int g = local_to_global[i];
    if (g < 0 || g >= n_classes) {
      throw Error("scatter_expert_probs: global index " + std::to_string(g) + " out of range [0," +
                  std::to_string(n_classes) + ")");
    }
    global[static_cast<std::size_t>(g)] = local_probs[i];
  }
  return global;
}

FusionWeights fusion_weights(const GatingDecision& decision, double mediator_weight) {
  const int n = decision.scores.size();
  FusionWeights w;
  w.expert_weights.assign(static_cast<std::size_t>(n), 0.0);
  w.mediator_weight = decision.mediator_invoked ? mediator_weight : 0.0;

  std::vector<double> active_scores;
  active_scores.reserve(decision.active.size());
  for (int i : decision.active) {
    active_scores.push_back(decision.scores.s[static_cast<std::size_t>(i)]);
  }
  const std::vector<double> norm = softmax(active_scores);
  const double scale = 1.0 - w.mediator_weight;
  for (std::size_t a = 0; a < decision.active.size(); ++a) {
    w.expert_weights[static_cast<std::size_t>(decision.active[a])] = scale * norm[a];
  }
  return w;
}

std::vector<double> fuse(const std::vector<std::vector<double>>& scattered,
                         const std::vector<double>* mediator_probs,
                         const FusionWeights& weights) {
  if (scattered.empty()) throw Error("fuse: no expert distributions");
  if (weights.mediator_weight > 0.0 && mediator_probs == nullptr) {
    throw Error("fuse: mediator weight is positive but no mediator distribution was given");
  }
  const std::size_t n_classes = scattered.front().size();
  std::vector<double> out(n_classes, 0.0);
  for (std::size_t i = 0; i < scattered.size(); ++i) {
    const double w = weights.expert_weights[i];
    if (w == 0.0) continue;
    for (std::size_t c = 0; c < n_classes; ++c) out[c] += w * scattered[i][c];
  }
  if (weights.mediator_weight > 0.0) {
    for (std::size_t c = 0; c < n_classes; ++c) {
      out[c] += weights.mediator_weight * (*mediator_probs)[c];
    }
  }
  return out;
}

namespace {

std::vector<double> logits_to_probs(const Tensor& logits_row) {
  std::vector<double> logits(static_cast<std::size_t>(logits_row.dim(1)));
  for (std::size_t i = 0; i < logits.size(); ++i) {
    logits[i] = static_cast<double>(logits_row.data[i]);
  }
  return softmax(logits);
}

}  // namespace

PredictionRecord predict(const Ensemble& ens, const Tensor& input, const GatingConfig& cfg,
                         int sample_id, int true_label) {
  cfg.validate();
  if (ens.experts.empty()) throw Error("predict: ensemble has no experts (train them first)");
  if (!ens.mediator_trained) throw Error("predict: mediator is untrained");
  for (const ExpertSlot& slot : ens.experts) {
    if (!slot.trained || !slot.head_trained) {
      throw Error("predict: experts and confidence heads must be trained");
    }
  }
  const int n = ens.n_experts();
  const int n_classes = ens.n_classes();
  const int cut = ens.shared_prefix_end();
  const int attach = ens.confidence_attach_end();
  const ParamAccounting counts = count_ensemble_params(ens);

  // Shared prefix once (the mediator owns the shared storage).
  Trace<real> prefix = forward_range(ens.mediator, input, 0, cut);
  const Tensor& prefix_out = prefix.back();

  PredictionRecord rec;
  rec.sample_id = sample_id;
  rec.true_label = true_label;

  // Every expert runs to the confidence checkpoint and scores itself.
  std::vector<Tensor> act_at_j;
  act_at_j.reserve(static_cast<std::size_t>(n));
  rec.scores.s.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const ExpertSlot& e = ens.experts[static_cast<std::size_t>(i)];
    Trace<real> mid = forward_range(e.net, prefix_out, cut, attach);
    rec.scores.s[static_cast<std::size_t>(i)] = self_score(i, e.confidence_head, mid.back());
    act_at_j.push_back(std::move(mid.back()));
  }

  rec.decision = gate(rec.scores, cfg);
  rec.weights = fusion_weights(rec.decision, cfg.mediator_weight);
  rec.mediator_executed = rec.decision.mediator_invoked && cfg.mediator_weight > 0.0;

  // Only active experts are completed.
  std::vector<std::vector<double>> scattered(static_cast<std::size_t>(n));
  double params = counts.fixed;
  for (int i = 0; i < n; ++i) {
    const bool stopped = !rec.decision.is_active(i);
    if (stopped) {
      scattered[static_cast<std::size_t>(i)] =
          std::vector<double>(static_cast<std::size_t>(n_classes), 0.0);
      continue;
    }
    const ExpertSlot& e = ens.experts[static_cast<std::size_t>(i)];
    Trace<real> tail = forward_range(e.net, act_at_j[static_cast<std::size_t>(i)], attach,
                                     e.net.num_layers());
    scattered[static_cast<std::size_t>(i)] = scatter_expert_probs(
        logits_to_probs(tail.back()), e.local_to_global, n_classes, false);
    params += counts.expert_suffix[static_cast<std::size_t>(i)];
  }

  std::vector<double> mediator_probs;
  if (rec.mediator_executed) {
    Trace<real> tail = forward_range(ens.mediator, prefix_out, cut, ens.mediator.num_layers());
    mediator_probs = logits_to_probs(tail.back());
    params += counts.mediator_tail;
  }

  rec.fused = fuse(scattered, mediator_probs.empty() ? nullptr : &mediator_probs, rec.weights);
  rec.predicted = argmax_lowest(rec.fused);
  rec.params_loaded = params;
  return rec;
}

std::string format_prediction_record(const PredictionRecord& rec) {
  auto join = [](const auto& values, const char* fmt) {
    std::string out;
    char buf[64];
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::snprintf(buf, sizeof(buf), fmt, values[i]);
      if (i) out += ",";
      out += buf;
    }
    return out;
  };
  std::string line = std::to_string(rec.sample_id);
  line += "\t" + join(rec.scores.s, "%.10g");
  line += "\t";
  line += rec.decision.stopped.empty() ? "-" : join(rec.decision.stopped, "%d");
  line += "\t";
  line += rec.mediator_executed ? "1" : "0";
  line += "\t" + std::to_string(rec.predicted);
  line += "\t" + std::to_string(rec.true_label);
  return line;
}

}  // namespace mmoe
