#include "mmoe/builder.hpp"

#include <string>

#include "mmoe/error.hpp"

namespace mmoe {

int EnsembleConfig::conv_count() const {
  int n = 0;
  for (const LayerSpec& l : trunk) {
    if (l.kind == LayerSpec::Kind::Conv2D) ++n;
  }
  return n;
}

void EnsembleConfig::validate() const {
  const int convs = conv_count();
  for (const LayerSpec& l : trunk) {
    if (l.kind == LayerSpec::Kind::FullyConnected) {
      throw ConfigError("trunk must not contain FullyConnected layers");
    }
  }
  if (trunk.empty() || trunk.back().kind != LayerSpec::Kind::Flatten) {
    throw ConfigError("trunk must end with a Flatten layer");
  }
  if (shared_prefix_convs < 0 || shared_prefix_convs > convs) {
    throw ConfigError("shared_prefix must be in [0," + std::to_string(convs) + "], got " +
                      std::to_string(shared_prefix_convs));
  }
  if (confidence_attach_conv < 1 || confidence_attach_conv > convs) {
    throw ConfigError("confidence_attach must be in [1," + std::to_string(convs) + "], got " +
                      std::to_string(confidence_attach_conv));
  }
  if (confidence_attach_conv < shared_prefix_convs) {
    throw ConfigError("confidence_attach (" + std::to_string(confidence_attach_conv) +
                      ") must not sit inside the shared prefix (shared_prefix = " +
                      std::to_string(shared_prefix_convs) + ")");
  }
  if (n_fc_hidden < 0 || n_fc_hidden > 2) throw ConfigError("fc_hidden must be 0, 1 or 2");
  if (expert_fc_width < 1 || mediator_fc_width < 1) {
    throw ConfigError("fc widths must be positive");
  }
  if (input_shape.size() != 3) throw ConfigError("input shape must be (C,H,W)");
  infer_shapes(trunk, input_shape);  // shape-consistency of the trunk itself
}

std::vector<LayerSpec> make_conv_trunk(const std::vector<std::pair<int, int>>& blocks,
                                       int in_channels) {
  std::vector<LayerSpec> trunk;
  int ch = in_channels;
  for (const auto& [out_ch, kernel] : blocks) {
    trunk.push_back(LayerSpec::conv2d(ch, out_ch, kernel, 1, kernel / 2));
    trunk.push_back(LayerSpec::relu());
    trunk.push_back(LayerSpec::maxpool(2, 2));
    ch = out_ch;
  }
  trunk.push_back(LayerSpec::flatten());
  return trunk;
}

int prefix_end_index(const std::vector<LayerSpec>& layers, int m) {
  if (m <= 0) return 0;
  int convs_seen = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec::Kind k = layers[i].kind;
    if (k == LayerSpec::Kind::Conv2D) {
      if (convs_seen == m) return static_cast<int>(i);
      ++convs_seen;
    } else if (k == LayerSpec::Kind::Flatten || k == LayerSpec::Kind::FullyConnected) {
      if (convs_seen < m) {
        throw ConfigError("architecture has only " + std::to_string(convs_seen) +
                          " conv layers, need " + std::to_string(m));
      }
      return static_cast<int>(i);
    }
  }
  if (convs_seen < m) {
    throw ConfigError("architecture has only " + std::to_string(convs_seen) +
                      " conv layers, need " + std::to_string(m));
  }
  return static_cast<int>(layers.size());
}

std::vector<LayerSpec> classifier_spec(const EnsembleConfig& cfg, int fc_width, int n_outputs) {
  std::vector<LayerSpec> layers = cfg.trunk;
  const auto shapes = infer_shapes(cfg.trunk, cfg.input_shape);
  int features = shapes.back()[0];
  for (int i = 0; i < cfg.n_fc_hidden; ++i) {
    layers.push_back(LayerSpec::fully_connected(features, fc_width));
    layers.push_back(LayerSpec::relu());
    features = fc_width;
  }
  layers.push_back(LayerSpec::fully_connected(features, n_outputs));
  return layers;
}

Network build_mediator(const EnsembleConfig& cfg, int n_classes, std::uint64_t seed) {
  if (n_classes < 2) throw ConfigError("mediator needs at least 2 classes");
  cfg.validate();
  Network net = make_network<real>(classifier_spec(cfg, cfg.mediator_fc_width, n_classes),
                                   cfg.input_shape);
  init_he_uniform(net, derive_seed(seed, "mediator-init"));
  return net;
}

Network build_expert(const EnsembleConfig& cfg, const Network& mediator, int superclass_size,
                     std::uint64_t seed) {
  if (superclass_size < 1) throw ConfigError("superclass must have at least one class");
  cfg.validate();
  Network net = make_network<real>(classifier_spec(cfg, cfg.expert_fc_width, superclass_size),
                                   cfg.input_shape);
  init_he_uniform(net, derive_seed(seed, "expert-init"));

  const int cut = prefix_end_index(net.layers, cfg.shared_prefix_convs);
  for (int l = 0; l < net.num_layers(); ++l) {
    if (!net.weights[l]) continue;
    const bool shape_match = l < mediator.num_layers() && mediator.weights[l] &&
                             mediator.weights[l]->shape == net.weights[l]->shape &&
                             mediator.biases[l]->shape == net.biases[l]->shape;
    if (l < cut) {
      // Shared prefix: literally the mediator's storage, frozen.
      net.weights[l] = mediator.weights[l];
      net.biases[l] = mediator.biases[l];
      net.frozen[l] = 1;
    } else if (shape_match) {
      // Finetuning start point: copy the mediator's values.
      net.weights[l] = std::make_shared<Tensor>(*mediator.weights[l]);
      net.biases[l] = std::make_shared<Tensor>(*mediator.biases[l]);
    }
    // Otherwise keep the fresh initialization (e.g. the local output layer).
  }
  return net;
}

Network attach_confidence_head(const Network& expert, int attach_layer, int n_superclasses,
                               std::uint64_t seed) {
  if (attach_layer < 0 || attach_layer >= expert.num_layers()) {
    throw ConfigError("confidence attach layer " + std::to_string(attach_layer) +
                      " out of range [0," + std::to_string(expert.num_layers()) + ")");
  }
  const auto shapes = infer_shapes(expert.layers, expert.input_shape);
  const std::vector<int>& act = shapes[static_cast<std::size_t>(attach_layer) + 1];
  int features = 1;
  for (int e : act) features *= e;

  std::vector<LayerSpec> layers;
  if (act.size() != 1) layers.push_back(LayerSpec::flatten());
  layers.push_back(LayerSpec::fully_connected(features, n_superclasses));
  Network head = make_network<real>(std::move(layers), act);
  init_he_uniform(head, derive_seed(seed, "confidence-head"));
  return head;
}

void extend_output_layer(Network& net, int extra_units, std::uint64_t seed) {
  if (extra_units < 1) throw ConfigError("extend_output_layer: extra_units must be >= 1");
  const int last = net.num_layers() - 1;
  if (last < 0 || net.layers[last].kind != LayerSpec::Kind::FullyConnected) {
    throw ConfigError("extend_output_layer: final layer is not FullyConnected");
  }
  const int in_f = net.layers[last].in_features;
  const int old_out = net.layers[last].out_features;
  const int new_out = old_out + extra_units;

  auto w = std::make_shared<Tensor>(std::vector<int>{new_out, in_f});
  auto b = std::make_shared<Tensor>(std::vector<int>{new_out});
  std::copy(net.weights[last]->data.begin(), net.weights[last]->data.end(), w->data.begin());
  std::copy(net.biases[last]->data.begin(), net.biases[last]->data.end(), b->data.begin());
  init_he_uniform_rows(*w, old_out, new_out, derive_seed(seed, "extend-rows"));
  // New biases stay zero, matching fresh initialization.

  net.layers[last].out_features = new_out;
  net.weights[last] = std::move(w);
  net.biases[last] = std::move(b);
}

int Ensemble::shared_prefix_end() const {
  return prefix_end_index(mediator.layers, cfg.shared_prefix_convs);
}

int Ensemble::confidence_attach_end() const {
  return prefix_end_index(mediator.layers, cfg.confidence_attach_conv);
}

Ensemble make_ensemble(EnsembleConfig cfg, GatingConfig gating, SuperclassMap map,
                       std::uint64_t seed) {
  cfg.validate();
  gating.validate();
  Ensemble ens;
  ens.cfg = std::move(cfg);
  ens.gating = gating;
  ens.map = std::move(map);
  ens.mediator = build_mediator(ens.cfg, ens.map.n_classes(), seed);
  return ens;
}

void build_experts(Ensemble& ens, std::uint64_t seed) {
  const int n = ens.map.n_superclasses();
  const int attach = ens.confidence_attach_end() - 1;
  // The shared storage becomes read-only once experts reference it: any
  // later mediator finetune must leave the prefix untouched.
  const int cut = ens.shared_prefix_end();
  for (int l = 0; l < cut; ++l) ens.mediator.frozen[static_cast<std::size_t>(l)] = 1;
  ens.experts.clear();
  ens.experts.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    ExpertSlot slot;
    slot.net = build_expert(ens.cfg, ens.mediator,
                            static_cast<int>(ens.map.members[static_cast<std::size_t>(i)].size()),
                            derive_seed(seed, "expert", static_cast<std::uint64_t>(i)));
    slot.confidence_head = attach_confidence_head(
        slot.net, attach, n, derive_seed(seed, "head", static_cast<std::uint64_t>(i)));
    slot.local_to_global = ens.map.members[static_cast<std::size_t>(i)];
    ens.experts.push_back(std::move(slot));
  }
}

}  // namespace mmoe
