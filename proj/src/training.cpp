#include "mmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mmoe/error.hpp"
#include "mmoe/rng.hpp"

namespace mmoe {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  if (confidence_finetune_epochs < 0 || mediator_finetune_epochs < 0) {
    throw ConfigError("finetune epoch counts must be >= 0");
  }
}

namespace {

int batch_argmax(const Tensor& logits, int row) {
  const int k = logits.dim(1);
  const real* p = logits.ptr() + static_cast<std::size_t>(row) * k;
  int best = 0;
  for (int i = 1; i < k; ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

}  // namespace

LossCurve train_network(Network& net, const LabeledDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  ds.validate();
  if (ds.empty()) throw Error("train_network: dataset is empty");

  const int n_out = infer_shapes(net.layers, net.input_shape).back()[0];
  for (int l : ds.labels) {
    if (l >= n_out) {
      throw Error("train_network: label " + std::to_string(l) + " out of range for " +
                  std::to_string(n_out) + " outputs");
    }
  }

  Sgd opt(cfg.lr, cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  LossCurve curve;
  curve.reserve(static_cast<std::size_t>(cfg.epochs));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> indices(order.begin() + start, order.begin() + stop);
      const Tensor x = ds.gather_images(indices);
      const std::vector<int> y = ds.gather_labels(indices);

      Trace<real> trace = forward(net, x);
      Tensor loss_grad;
      const double loss = softmax_cross_entropy_batch(trace.back(), std::span<const int>(y),
                                                      &loss_grad);
      if (!std::isfinite(loss)) {
        throw DivergedError("training diverged (non-finite loss) at epoch " +
                            std::to_string(epoch),
                            epoch);
      }
      for (std::size_t r = 0; r < y.size(); ++r) {
        if (batch_argmax(trace.back(), static_cast<int>(r)) == y[r]) ++correct;
      }
      const Gradients grads = backward(net, trace, loss_grad);
      opt.step(net, grads);
      loss_sum += loss * static_cast<double>(indices.size());
    }
    curve.push_back({loss_sum / static_cast<double>(ds.size()),
                     static_cast<double>(correct) / static_cast<double>(ds.size())});
  }
  return curve;
}

void write_curve_csv(const std::string& path, const LossCurve& curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "epoch,mean_loss,train_acc\n";
  char buf[96];
  for (std::size_t e = 0; e < curve.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g\n", e, curve[e].mean_loss,
                  curve[e].train_accuracy);
    out << buf;
  }
}

LossCurve train_mediator(Ensemble& ens, const LabeledDataset& full_dataset,
                         const TrainConfig& cfg) {
  TrainConfig phase = cfg;
  phase.seed = derive_seed(cfg.seed, "train-mediator");
  LossCurve curve = train_network(ens.mediator, full_dataset, phase);
  ens.mediator_trained = true;
  return curve;
}

LossCurve train_expert(Ensemble& ens, int i, const LabeledDataset& full_dataset,
                       const TrainConfig& cfg) {
  if (!ens.mediator_trained) throw Error("train_expert: mediator must be trained first");
  if (i < 0 || i >= ens.n_experts()) {
    throw Error("train_expert: expert id " + std::to_string(i) + " out of range");
  }
  const RestrictedDataset sub = restrict_to_superclass(full_dataset, ens.map, i);
  TrainConfig phase = cfg;
  phase.seed = derive_seed(cfg.seed, "train-expert", static_cast<std::uint64_t>(i));
  LossCurve curve = train_network(ens.experts[static_cast<std::size_t>(i)].net, sub.data, phase);
  ens.experts[static_cast<std::size_t>(i)].trained = true;
  return curve;
}

namespace {

// Activations at layers [0, end_layer) for a whole dataset, computed in
// chunks to bound peak memory.
Tensor activations_at(const Network& net, const LabeledDataset& ds, int end_layer) {
  const auto shapes = infer_shapes(net.layers, net.input_shape);
  const std::vector<int>& act = shapes[static_cast<std::size_t>(end_layer)];
  std::vector<int> out_shape = {static_cast<int>(ds.size())};
  out_shape.insert(out_shape.end(), act.begin(), act.end());
  // Confidence heads expect (N,C,H,W); flat activations become (N,F,1,1).
  while (out_shape.size() < 4) out_shape.push_back(1);
  Tensor out(out_shape);
  const std::size_t sample_elems = out.numel() / ds.size();

  const std::size_t chunk = 256;
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t stop = std::min(ds.size(), start + chunk);
    indices.resize(stop - start);
    std::iota(indices.begin(), indices.end(), start);
    const Tensor x = ds.gather_images(indices);
    const Trace<real> trace = forward_range(net, x, 0, end_layer);
    std::copy(trace.back().data.begin(), trace.back().data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start * sample_elems));
  }
  return out;
}

LabeledDataset head_training_set(const Ensemble& ens, int expert_id,
                                 const LabeledDataset& super_labeled) {
  const ExpertSlot& e = ens.experts[static_cast<std::size_t>(expert_id)];
  LabeledDataset feats;
  feats.images = activations_at(e.net, super_labeled, ens.confidence_attach_end());
  feats.labels = super_labeled.labels;
  // The head was built against the unbatched activation shape; line the
  // dataset's sample shape up with it.
  std::vector<int> head_in = e.confidence_head.input_shape;
  while (head_in.size() < 3) head_in.push_back(1);
  feats.images.shape = {static_cast<int>(super_labeled.size()), head_in[0], head_in[1],
                        head_in[2]};
  return feats;
}

}  // namespace

std::vector<LossCurve> train_confidence_heads(Ensemble& ens, const LabeledDataset& full_dataset,
                                              const TrainConfig& cfg) {
  for (const ExpertSlot& e : ens.experts) {
    if (!e.trained) throw Error("train_confidence_heads: experts must be trained first");
  }
  const LabeledDataset super_labeled = relabel_superclass(full_dataset, ens.map);
  std::vector<LossCurve> curves;
  curves.reserve(ens.experts.size());
  for (int i = 0; i < ens.n_experts(); ++i) {
    ExpertSlot& e = ens.experts[static_cast<std::size_t>(i)];
    const LabeledDataset feats = head_training_set(ens, i, super_labeled);
    TrainConfig phase = cfg;
    phase.seed = derive_seed(cfg.seed, "train-head", static_cast<std::uint64_t>(i));
    curves.push_back(train_network(e.confidence_head, feats, phase));
    e.head_trained = true;
  }
  return curves;
}

void add_expert_incremental(Ensemble& ens, const LabeledDataset& old_data,
                            const LabeledDataset& new_data,
                            const std::map<int, int>& new_map_entries, const TrainConfig& cfg) {
  cfg.validate();
  if (new_map_entries.empty()) throw PartitionError("no new map entries given");
  const int old_n_classes = ens.n_classes();
  const int new_super = ens.map.n_superclasses();
  for (const auto& [fine, super] : new_map_entries) {
    if (fine < old_n_classes) {
      throw PartitionError("new fine class " + std::to_string(fine) +
                           " overlaps the existing map");
    }
    if (super != new_super) {
      throw PartitionError("new entries must map to superclass " + std::to_string(new_super));
    }
  }

  // Merge and re-validate the full partition.
  std::vector<std::pair<int, int>> pairs;
  for (int f = 0; f < old_n_classes; ++f) pairs.emplace_back(f, ens.map.super_of(f));
  for (const auto& [fine, super] : new_map_entries) pairs.emplace_back(fine, super);
  SuperclassMap merged = SuperclassMap::from_pairs(pairs);
  const int extra_classes = merged.n_classes() - old_n_classes;

  // New expert, trained on the new subset only.
  ExpertSlot slot;
  slot.net = build_expert(ens.cfg, ens.mediator,
                          static_cast<int>(merged.members[static_cast<std::size_t>(new_super)]
                                               .size()),
                          derive_seed(cfg.seed, "incr-expert"));
  slot.local_to_global = merged.members[static_cast<std::size_t>(new_super)];
  {
    const RestrictedDataset sub = restrict_to_superclass(new_data, merged, new_super);
    TrainConfig phase = cfg;
    phase.seed = derive_seed(cfg.seed, "incr-expert-train");
    train_network(slot.net, sub.data, phase);
    slot.trained = true;
  }
  slot.confidence_head =
      attach_confidence_head(slot.net, ens.confidence_attach_end() - 1, new_super + 1,
                             derive_seed(cfg.seed, "incr-head"));

  ens.map = std::move(merged);
  // Existing heads grow one output for the new superclass.
  for (std::size_t i = 0; i < ens.experts.size(); ++i) {
    extend_output_layer(ens.experts[i].confidence_head, 1,
                        derive_seed(cfg.seed, "incr-extend-head", i));
  }
  ens.experts.push_back(std::move(slot));

  // Short confidence finetune over the combined data.
  {
    const LabeledDataset combined = concat(old_data, new_data);
    TrainConfig head_cfg = cfg;
    head_cfg.epochs = cfg.confidence_finetune_epochs;
    head_cfg.seed = derive_seed(cfg.seed, "incr-head-finetune");
    train_confidence_heads(ens, combined, head_cfg);
  }

  // Flat increment of the mediator: extra output neurons, then a short
  // finetune. The shared prefix stays frozen so existing expert backbones
  // are untouched.
  extend_output_layer(ens.mediator, extra_classes, derive_seed(cfg.seed, "incr-extend-mediator"));
  {
    const LabeledDataset combined = concat(old_data, new_data);
    TrainConfig med_cfg = cfg;
    med_cfg.epochs = cfg.mediator_finetune_epochs;
    med_cfg.seed = derive_seed(cfg.seed, "incr-mediator-finetune");
    train_network(ens.mediator, combined, med_cfg);
  }
}

}  // namespace mmoe
