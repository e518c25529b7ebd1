#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmoe/builder.hpp"
#include "mmoe/dataset.hpp"

namespace mmoe {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  int confidence_finetune_epochs = 3;
  int mediator_finetune_epochs = 3;

  void validate() const;
};

struct EpochStats {
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

using LossCurve = std::vector<EpochStats>;

// Shared momentum-SGD loop: seeded shuffle each epoch, mean cross-entropy
// loss. Throws DivergedError (with the epoch index) on non-finite loss.
LossCurve train_network(Network& net, const LabeledDataset& ds, const TrainConfig& cfg);

// epoch,mean_loss,train_acc rows.
void write_curve_csv(const std::string& path, const LossCurve& curve);

// Mediator trains on fine labels over the complete dataset.
LossCurve train_mediator(Ensemble& ens, const LabeledDataset& full_dataset,
                         const TrainConfig& cfg);

// Expert i trains on its superclass subset with expert-local labels; the
// shared prefix stays frozen.
LossCurve train_expert(Ensemble& ens, int i, const LabeledDataset& full_dataset,
                       const TrainConfig& cfg);

// Confidence heads train on superclass labels over the complete dataset with
// the expert backbones frozen. Activations at the checkpoint are cached once
// per expert, so only the single FC layer is optimized.
std::vector<LossCurve> train_confidence_heads(Ensemble& ens, const LabeledDataset& full_dataset,
                                              const TrainConfig& cfg);

// Adds superclass N: trains a new expert on `new_data`, extends every
// confidence head N -> N+1 and finetunes them for confidence_finetune_epochs
// on old+new superclass-labeled data, extends the mediator output by the new
// fine classes and finetunes it (shared prefix frozen). Existing expert
// backbones are untouched.
//
// `new_map_entries` maps each new fine class id to the new superclass id N.
void add_expert_incremental(Ensemble& ens, const LabeledDataset& old_data,
                            const LabeledDataset& new_data,
                            const std::map<int, int>& new_map_entries, const TrainConfig& cfg);

}  // namespace mmoe
