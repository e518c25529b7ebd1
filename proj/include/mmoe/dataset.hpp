#pragma once

#include <cstddef>
#include <vector>

#include "mmoe/tensor.hpp"

namespace mmoe {

// Image batch plus integer labels. Images are (N,C,H,W); labels index depends
// on context (fine class, superclass, or expert-local).
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  // Shape of one sample, (C,H,W).
  std::vector<int> sample_shape() const {
    return {images.dim(1), images.dim(2), images.dim(3)};
  }

  void validate() const;

  // Copies sample `i` into a batch-of-one tensor.
  Tensor sample(std::size_t i) const;

  // Gathers the given sample indices into a batch tensor (labels via
  // gather_labels).
  Tensor gather_images(const std::vector<std::size_t>& indices) const;
  std::vector<int> gather_labels(const std::vector<std::size_t>& indices) const;
};

// Concatenates two datasets with identical sample shape.
LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b);

// Keeps only samples whose label satisfies `keep[label] != 0`.
LabeledDataset filter_labels(const LabeledDataset& ds, const std::vector<std::uint8_t>& keep);

}  // namespace mmoe
