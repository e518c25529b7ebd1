#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mmoe/gating.hpp"
#include "mmoe/nn.hpp"
#include "mmoe/partition.hpp"

namespace mmoe {

// Shared architecture description for mediator and experts. The trunk holds
// the convolutional feature extractor (conv/relu/pool blocks ending in a
// Flatten); classifier heads are composed on top of it per role.
//
// `shared_prefix_convs` (k) and `confidence_attach_conv` (j) are counted in
// conv blocks: k is the number of lowest conv layers physically shared with
// the mediator and frozen; the confidence head attaches to the activation at
// the end of conv block j (after its trailing relu/pool). j >= k, so a head
// never sits strictly inside the shared prefix; j == k puts it right at the
// prefix boundary, which is the fully-shared endpoint of the sharing sweep.
struct EnsembleConfig {
  std::vector<LayerSpec> trunk;
  int n_fc_hidden = 1;
  int expert_fc_width = 64;
  int mediator_fc_width = 64;
  int shared_prefix_convs = 1;     // k
  int confidence_attach_conv = 2;  // j, 1-based conv block index
  std::vector<int> input_shape = {1, 16, 16};

  int conv_count() const;
  void validate() const;
};

// Conv blocks (out_channels, kernel) -> conv(stride 1, pad k/2) + relu +
// maxpool(2), ending with a Flatten.
std::vector<LayerSpec> make_conv_trunk(const std::vector<std::pair<int, int>>& blocks,
                                       int in_channels);

// Exclusive end index of the prefix made of the first `m` conv blocks
// (each block extends through its trailing non-conv, non-FC layers).
int prefix_end_index(const std::vector<LayerSpec>& layers, int m);

// Full layer list for a classifier with `n_outputs` on top of the trunk.
std::vector<LayerSpec> classifier_spec(const EnsembleConfig& cfg, int fc_width, int n_outputs);

Network build_mediator(const EnsembleConfig& cfg, int n_classes, std::uint64_t seed);

// Expert initialized from the mediator: the lowest k conv layers share the
// mediator's parameter storage and are frozen; remaining layers copy the
// mediator's values where shapes match and are freshly initialized otherwise.
Network build_expert(const EnsembleConfig& cfg, const Network& mediator, int superclass_size,
                     std::uint64_t seed);

// Single fully connected layer (behind a structural Flatten) that maps the
// activation at layer index `attach_layer` to n_superclasses outputs.
Network attach_confidence_head(const Network& expert, int attach_layer, int n_superclasses,
                               std::uint64_t seed);

// Adds `extra_units` output rows to the final FullyConnected layer. Old rows
// are preserved bit-exactly; new rows get the usual fresh initialization.
void extend_output_layer(Network& net, int extra_units, std::uint64_t seed);

struct ExpertSlot {
  Network net;
  Network confidence_head;
  std::vector<int> local_to_global;
  bool trained = false;
  bool head_trained = false;
};

struct Ensemble {
  EnsembleConfig cfg;
  GatingConfig gating;
  SuperclassMap map;
  Network mediator;
  bool mediator_trained = false;
  std::vector<ExpertSlot> experts;

  int n_classes() const { return map.n_classes(); }
  int n_experts() const { return static_cast<int>(experts.size()); }

  // Layer index boundaries shared by mediator and experts (the trunk is
  // structurally identical across them).
  int shared_prefix_end() const;     // exclusive end of the shared segment
  int confidence_attach_end() const; // exclusive end; activation = trace at this index
};

// Builds the mediator for the map's class count. Experts are added by
// build_experts once the mediator is trained.
Ensemble make_ensemble(EnsembleConfig cfg, GatingConfig gating, SuperclassMap map,
                       std::uint64_t seed);

// Creates all expert networks and confidence heads from the (trained)
// mediator.
void build_experts(Ensemble& ens, std::uint64_t seed);

}  // namespace mmoe
