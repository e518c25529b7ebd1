#pragma once

#include <cstdint>
#include <string>

#include "mmoe/builder.hpp"
#include "mmoe/dataset.hpp"

namespace mmoe {

// IDX (MNIST-family) ingestion. Big-endian 32-bit magic 0x00000803 for
// images / 0x00000801 for labels, big-endian dimension sizes, unsigned
// 8-bit payload. Pixels are scaled to [0,1].
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Writers for the same format (tests, synthetic data export). Pixel values
// are mapped back with round(v * 255); data generated by synth_dataset lies
// on the 1/255 grid, so a write/read round trip is exact.
void write_idx_images(const std::string& path, const Tensor& images);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

// Deterministic class-conditional oriented-bar images: class c draws a soft
// line at angle pi*c/n_classes through a jittered center, plus pixel noise.
// Neighboring angles overlap under noise, which makes the class ring
// genuinely confusable at the boundaries while staying learnable.
LabeledDataset synth_dataset(std::uint64_t seed, int n_classes, int n_per_class, int size);

// Binary model archive: magic "MMOE", format version, little-endian fields,
// f32 parameter blobs, CRC32 content checksum. save/load round trips are
// bit-exact, including frozen masks, the superclass map and gating config;
// parameter sharing between mediator and experts is re-established on load.
void save_model(const Ensemble& ens, const std::string& path);
Ensemble load_model(const std::string& path);

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803u;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801u;
inline constexpr std::uint32_t kArchiveVersion = 1u;

}  // namespace mmoe
