#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmoe/nn.hpp"

namespace mmoe {

struct Ensemble;

// Inference-time gating parameters. The confidence checkpoint depth lives in
// EnsembleConfig; it is structural, not a per-run knob.
struct GatingConfig {
  double threshold = 4.0;       // T > 0
  double mediator_weight = 0.6; // w in [0,1]; forced to 0 in unmediated mode

  void validate() const;
};

// Score vector: s[i] is the i-th output of expert i's own confidence head.
struct ConfidenceScores {
  std::vector<double> s;

  int size() const { return static_cast<int>(s.size()); }
};

struct GatingDecision {
  std::vector<int> active;   // ascending expert ids
  std::vector<int> stopped;  // ascending expert ids
  bool mediator_invoked = false;
  ConfidenceScores scores;

  bool is_active(int i) const;
};

struct FusionWeights {
  std::vector<double> expert_weights;  // 0 for stopped experts
  double mediator_weight = 0.0;
};

// Component i of the head's output on the (flattened) activation.
double self_score(int expert_id, const Network& head, const Tensor& activation_at_j);

// Early-stop rule: expert i stops iff max over k != i of s[k] minus s[i]
// reaches T. A single expert never stops (empty max).
bool stop_decision(const ConfidenceScores& scores, int i, double threshold);

// Applies stop_decision per expert. The top-scoring expert always survives,
// so `active` is never empty; the mediator is invoked iff more than one
// expert remains.
GatingDecision gate(const ConfidenceScores& scores, const GatingConfig& cfg);

// Places an expert's local softmax probabilities at their global class
// indices; a stopped expert contributes an all-zero vector.
std::vector<double> scatter_expert_probs(std::span<const double> local_probs,
                                         std::span<const int> local_to_global, int n_classes,
                                         bool is_stopped);

// Mediator gets `mediator_weight` when invoked; active experts share the
// remaining mass proportionally to the softmax of their scores (over active
// experts only). Stopped experts get 0. Weights always sum to 1.
FusionWeights fusion_weights(const GatingDecision& decision, double mediator_weight);

// Weighted mixture of the scattered expert distributions and, when its
// weight is positive, the mediator distribution.
std::vector<double> fuse(const std::vector<std::vector<double>>& scattered,
                         const std::vector<double>* mediator_probs, const FusionWeights& weights);

// Everything recorded about one prediction.
struct PredictionRecord {
  int sample_id = -1;
  ConfidenceScores scores;
  GatingDecision decision;
  FusionWeights weights;
  std::vector<double> fused;  // global probability vector
  int predicted = -1;
  int true_label = -1;
  double params_loaded = 0.0;  // parameters touched by this prediction
  bool mediator_executed = false;
};

// Full conditional-execution pipeline: shared prefix once, every expert to
// the confidence checkpoint, gate, complete only the active experts, run the
// mediator only when invoked, fuse. Ties in the final argmax break toward
// the lowest class id.
PredictionRecord predict(const Ensemble& ensemble, const Tensor& input, const GatingConfig& cfg,
                         int sample_id = -1, int true_label = -1);

// One-line tab-separated form:
// id, comma-joined scores, comma-joined stopped set (- if empty),
// mediator flag, predicted class, true class.
std::string format_prediction_record(const PredictionRecord& rec);

// argmax with ties broken toward the lowest index.
int argmax_lowest(std::span<const double> values);

}  // namespace mmoe
