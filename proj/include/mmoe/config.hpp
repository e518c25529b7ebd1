#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmoe/builder.hpp"
#include "mmoe/training.hpp"

namespace mmoe {

// Flat sectioned key-value run configuration.
//
//   [data]          train_images/train_labels/test_images/test_labels,
//                   superclass_map
//   [architecture]  conv_blocks (e.g. "8x3,16x3"), fc_hidden,
//                   expert_fc_width, mediator_fc_width, shared_prefix,
//                   confidence_attach
//   [training]      epochs, batch, lr, momentum, weight_decay,
//                   confidence_finetune_epochs, mediator_finetune_epochs
//   [gating]        threshold, mediator_weight
//   [run]           seed, out
//   [increment]     images, labels, map   (only for add-expert)
struct RunConfig {
  std::string train_images, train_labels;
  std::string test_images, test_labels;
  std::string superclass_map;

  std::vector<std::pair<int, int>> conv_blocks = {{8, 3}, {16, 3}};
  int fc_hidden = 1;
  int expert_fc_width = 64;
  int mediator_fc_width = 64;
  int shared_prefix = 1;
  int confidence_attach = 2;

  TrainConfig training;
  GatingConfig gating;

  std::uint64_t seed = 1;
  std::string out_dir = "out";

  std::optional<std::string> increment_images, increment_labels, increment_map;

  // Checks values and that every referenced file exists.
  void validate(bool need_increment = false) const;

  // Architecture section resolved against a concrete input shape.
  EnsembleConfig ensemble_config(const std::vector<int>& input_shape) const;
};

RunConfig load_run_config(const std::string& path);

}  // namespace mmoe
