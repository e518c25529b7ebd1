#include "mmoe/dataset.hpp"

#include <cstring>

#include "mmoe/error.hpp"

namespace mmoe {

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw ShapeError("dataset images must be (N,C,H,W)");
  if (static_cast<std::size_t>(images.dim(0)) != labels.size()) {
    throw CountMismatchError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                             std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0) throw Error("dataset labels must be non-negative");
  }
}

Tensor LabeledDataset::sample(std::size_t i) const {
  const std::size_t stride = images.numel() / static_cast<std::size_t>(images.dim(0));
  Tensor out({1, images.dim(1), images.dim(2), images.dim(3)});
  std::memcpy(out.ptr(), images.ptr() + i * stride, stride * sizeof(real));
  return out;
}

Tensor LabeledDataset::gather_images(const std::vector<std::size_t>& indices) const {
  const std::size_t stride = images.numel() / static_cast<std::size_t>(images.dim(0));
  Tensor out({static_cast<int>(indices.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    std::memcpy(out.ptr() + n * stride, images.ptr() + indices[n] * stride,
                stride * sizeof(real));
  }
  return out;
}

std::vector<int> LabeledDataset::gather_labels(const std::vector<std::size_t>& indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t n = 0; n < indices.size(); ++n) out[n] = labels[indices[n]];
  return out;
}

LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.sample_shape() != b.sample_shape()) {
    throw ShapeError("concat: datasets have different sample shapes");
  }
  LabeledDataset out;
  out.images = Tensor({a.images.dim(0) + b.images.dim(0), a.images.dim(1), a.images.dim(2),
                       a.images.dim(3)});
  std::memcpy(out.images.ptr(), a.images.ptr(), a.images.numel() * sizeof(real));
  std::memcpy(out.images.ptr() + a.images.numel(), b.images.ptr(),
              b.images.numel() * sizeof(real));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

LabeledDataset filter_labels(const LabeledDataset& ds, const std::vector<std::uint8_t>& keep) {
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int l = ds.labels[i];
    if (l < static_cast<int>(keep.size()) && keep[l]) indices.push_back(i);
  }
  LabeledDataset out;
  out.images = ds.gather_images(indices);
  out.labels = ds.gather_labels(indices);
  return out;
}

}  // namespace mmoe
