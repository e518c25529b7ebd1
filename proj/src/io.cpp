#include "mmoe/io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mmoe/error.hpp"
#include "mmoe/rng.hpp"

namespace mmoe {

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(len));
  if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!in) throw IoError("failed to read file: " + path);
  return bytes;
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                        const std::string& path) {
  if (off + 4 > b.size()) {
    throw TruncatedError(path + ": truncated header (file has " + std::to_string(b.size()) +
                         " bytes)");
  }
  return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
         (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const std::vector<unsigned char> img = read_file(images_path);
  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != kIdxImagesMagic) {
    char got[16];
    std::snprintf(got, sizeof(got), "0x%08x", img_magic);
    throw BadMagicError(images_path + ": wrong magic " + got + " (expected 0x00000803)");
  }
  const std::uint32_t count = read_be32(img, 4, images_path);
  const std::uint32_t rows = read_be32(img, 8, images_path);
  const std::uint32_t cols = read_be32(img, 12, images_path);
  const std::size_t expected = 16 + static_cast<std::size_t>(count) * rows * cols;
  if (img.size() < expected) {
    throw TruncatedError(images_path + ": expected " + std::to_string(expected) +
                         " bytes, file has " + std::to_string(img.size()));
  }

  const std::vector<unsigned char> lab = read_file(labels_path);
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelsMagic) {
    char got[16];
    std::snprintf(got, sizeof(got), "0x%08x", lab_magic);
    throw BadMagicError(labels_path + ": wrong magic " + got + " (expected 0x00000801)");
  }
  const std::uint32_t lab_count = read_be32(lab, 4, labels_path);
  if (lab.size() < 8 + static_cast<std::size_t>(lab_count)) {
    throw TruncatedError(labels_path + ": expected " + std::to_string(8 + lab_count) +
                         " bytes, file has " + std::to_string(lab.size()));
  }
  if (lab_count != count) {
    throw CountMismatchError("image count " + std::to_string(count) +
                             " does not match label count " + std::to_string(lab_count));
  }

  LabeledDataset ds;
  ds.images = Tensor({static_cast<int>(count), 1, static_cast<int>(rows), static_cast<int>(cols)});
  for (std::size_t i = 0; i < static_cast<std::size_t>(count) * rows * cols; ++i) {
    // Divide in double, then narrow: the same rounding path the synthetic
    // generator uses, so grid-valued data round-trips bit-exactly.
    ds.images.data[i] = static_cast<real>(static_cast<double>(img[16 + i]) / 255.0);
  }
  ds.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) ds.labels[i] = static_cast<int>(lab[8 + i]);
  return ds;
}

namespace {

void write_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void write_idx_images(const std::string& path, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw IoError("write_idx_images: expected single-channel (N,1,H,W) images");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_be32(out, kIdxImagesMagic);
  write_be32(out, static_cast<std::uint32_t>(images.dim(0)));
  write_be32(out, static_cast<std::uint32_t>(images.dim(2)));
  write_be32(out, static_cast<std::uint32_t>(images.dim(3)));
  std::vector<unsigned char> bytes(images.numel());
  for (std::size_t i = 0; i < images.numel(); ++i) {
    const double v = std::clamp(static_cast<double>(images.data[i]), 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed to write " + path);
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_be32(out, kIdxLabelsMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  std::vector<unsigned char> bytes(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 255) throw IoError("label out of u8 range");
    bytes[i] = static_cast<unsigned char>(labels[i]);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed to write " + path);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

LabeledDataset synth_dataset(std::uint64_t seed, int n_classes, int n_per_class, int size) {
  if (n_classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
  if (n_per_class < 1 || size < 4) throw ConfigError("synth_dataset: bad shape parameters");

  const double bar_width = 0.9;
  const double jitter = 2.5;
  const double noise_sigma = 0.55;
  const double pi = 3.14159265358979323846;

  LabeledDataset ds;
  ds.images = Tensor({n_classes * n_per_class, 1, size, size});
  ds.labels.resize(static_cast<std::size_t>(n_classes) * n_per_class);

  std::size_t idx = 0;
  for (int c = 0; c < n_classes; ++c) {
    Rng rng(derive_seed(seed, "synth-class", static_cast<std::uint64_t>(c)));
    const double theta = pi * static_cast<double>(c) / static_cast<double>(n_classes);
    const double nx = -std::sin(theta);
    const double ny = std::cos(theta);
    for (int s = 0; s < n_per_class; ++s, ++idx) {
      const double cx = (size - 1) * 0.5 + rng.uniform(-jitter, jitter);
      const double cy = (size - 1) * 0.5 + rng.uniform(-jitter, jitter);
      const double amp = rng.uniform(0.5, 1.0);
      real* px = ds.images.ptr() + idx * static_cast<std::size_t>(size) * size;
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double d = (x - cx) * nx + (y - cy) * ny;
          double v = amp * std::exp(-(d * d) / (2.0 * bar_width * bar_width));
          v += noise_sigma * rng.normal();
          v = std::clamp(v, 0.0, 1.0);
          // Quantize to the u8 grid so IDX export round-trips exactly.
          px[y * size + x] = static_cast<real>(std::lround(v * 255.0) / 255.0);
        }
      }
      ds.labels[idx] = c;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Model archive
// ---------------------------------------------------------------------------

namespace {

// CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320).
std::uint32_t crc32(const unsigned char* data, std::size_t len) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  const std::vector<unsigned char>& bytes() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  Reader(const unsigned char* data, std::size_t len, std::string path)
      : data_(data), len_(len), path_(std::move(path)) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const unsigned char* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  bool done() const { return pos_ == len_; }

 private:
  const unsigned char* take(std::size_t n) {
    if (pos_ + n > len_) {
      throw TruncatedError(path_ + ": archive truncated at offset " + std::to_string(pos_));
    }
    const unsigned char* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  const unsigned char* data_;
  std::size_t len_;
  std::size_t pos_ = 0;
  std::string path_;
};

void write_layer_spec(Writer& w, const LayerSpec& l) {
  w.u8(static_cast<std::uint8_t>(l.kind));
  w.i32(l.in_channels);
  w.i32(l.out_channels);
  w.i32(l.kernel);
  w.i32(l.stride);
  w.i32(l.pad);
  w.i32(l.pool);
  w.i32(l.pool_stride);
  w.i32(l.in_features);
  w.i32(l.out_features);
}

LayerSpec read_layer_spec(Reader& r) {
  LayerSpec l;
  const std::uint8_t kind = r.u8();
  if (kind > 4) throw ArchiveFormatError("invalid layer kind tag " + std::to_string(kind));
  l.kind = static_cast<LayerSpec::Kind>(kind);
  l.in_channels = r.i32();
  l.out_channels = r.i32();
  l.kernel = r.i32();
  l.stride = r.i32();
  l.pad = r.i32();
  l.pool = r.i32();
  l.pool_stride = r.i32();
  l.in_features = r.i32();
  l.out_features = r.i32();
  return l;
}

void write_tensor(Writer& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) w.i32(t.dim(i));
  for (real v : t.data) w.f32(static_cast<float>(v));
}

Tensor read_tensor(Reader& r) {
  const int rank = r.u8();
  if (rank < 1 || rank > 4) throw ArchiveFormatError("invalid tensor rank " + std::to_string(rank));
  std::vector<int> shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) shape[static_cast<std::size_t>(i)] = r.i32();
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<real>(r.f32());
  return t;
}

// `shared_cut < 0` stores every parameter; otherwise layers below the cut are
// marked shared and omitted (the loader re-links them to the mediator).
void write_network(Writer& w, const Network& net, int shared_cut) {
  w.u32(static_cast<std::uint32_t>(net.input_shape.size()));
  for (int e : net.input_shape) w.i32(e);
  w.u32(static_cast<std::uint32_t>(net.num_layers()));
  for (int l = 0; l < net.num_layers(); ++l) {
    write_layer_spec(w, net.layers[static_cast<std::size_t>(l)]);
    w.u8(net.frozen[static_cast<std::size_t>(l)]);
    const bool shared = shared_cut >= 0 && l < shared_cut;
    w.u8(shared ? 1 : 0);
    if (net.weights[static_cast<std::size_t>(l)] && !shared) {
      w.u8(1);
      write_tensor(w, *net.weights[static_cast<std::size_t>(l)]);
      write_tensor(w, *net.biases[static_cast<std::size_t>(l)]);
    } else {
      w.u8(0);
    }
  }
}

Network read_network(Reader& r, const Network* mediator_for_sharing) {
  const std::uint32_t in_rank = r.u32();
  if (in_rank < 1 || in_rank > 3) throw ArchiveFormatError("invalid network input rank");
  std::vector<int> input_shape(in_rank);
  for (std::uint32_t i = 0; i < in_rank; ++i) input_shape[i] = r.i32();

  const std::uint32_t n_layers = r.u32();
  std::vector<LayerSpec> layers;
  std::vector<std::uint8_t> frozen;
  struct Blob {
    bool shared = false;
    bool present = false;
    Tensor w, b;
  };
  std::vector<Blob> blobs;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    layers.push_back(read_layer_spec(r));
    frozen.push_back(r.u8());
    Blob blob;
    blob.shared = r.u8() != 0;
    blob.present = r.u8() != 0;
    if (blob.present) {
      blob.w = read_tensor(r);
      blob.b = read_tensor(r);
    }
    blobs.push_back(std::move(blob));
  }

  Network net = make_network<real>(layers, input_shape);
  net.frozen = frozen;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    if (!net.weights[l]) continue;
    Blob& blob = blobs[l];
    if (blob.shared) {
      if (!mediator_for_sharing || static_cast<int>(l) >= mediator_for_sharing->num_layers() ||
          !mediator_for_sharing->weights[l] ||
          mediator_for_sharing->weights[l]->shape != net.weights[l]->shape) {
        throw ArchiveFormatError("layer " + std::to_string(l) +
                                 " marked shared but no matching mediator parameters exist");
      }
      net.weights[l] = mediator_for_sharing->weights[l];
      net.biases[l] = mediator_for_sharing->biases[l];
    } else if (blob.present) {
      if (blob.w.shape != net.weights[l]->shape || blob.b.shape != net.biases[l]->shape) {
        throw ArchiveFormatError("layer " + std::to_string(l) + " blob shape mismatch");
      }
      *net.weights[l] = std::move(blob.w);
      *net.biases[l] = std::move(blob.b);
    } else {
      throw ArchiveFormatError("layer " + std::to_string(l) + " missing parameter blob");
    }
  }
  return net;
}

}  // namespace

void save_model(const Ensemble& ens, const std::string& path) {
  Writer w;
  w.u32(kArchiveVersion);
  w.u8(4);  // bytes per stored real (f32)

  // Gating + architecture configuration.
  w.f64(ens.gating.threshold);
  w.f64(ens.gating.mediator_weight);
  w.i32(ens.cfg.n_fc_hidden);
  w.i32(ens.cfg.expert_fc_width);
  w.i32(ens.cfg.mediator_fc_width);
  w.i32(ens.cfg.shared_prefix_convs);
  w.i32(ens.cfg.confidence_attach_conv);
  w.u32(static_cast<std::uint32_t>(ens.cfg.input_shape.size()));
  for (int e : ens.cfg.input_shape) w.i32(e);
  w.u32(static_cast<std::uint32_t>(ens.cfg.trunk.size()));
  for (const LayerSpec& l : ens.cfg.trunk) write_layer_spec(w, l);

  // Superclass map.
  w.u32(static_cast<std::uint32_t>(ens.map.fine_to_super.size()));
  for (int s : ens.map.fine_to_super) w.i32(s);

  // Networks. Experts store their shared prefix as a reference.
  w.u8(ens.mediator_trained ? 1 : 0);
  write_network(w, ens.mediator, -1);
  const int cut = ens.experts.empty() ? 0 : ens.shared_prefix_end();
  w.u32(static_cast<std::uint32_t>(ens.experts.size()));
  for (const ExpertSlot& e : ens.experts) {
    w.u8(e.trained ? 1 : 0);
    w.u8(e.head_trained ? 1 : 0);
    write_network(w, e.net, cut);
    write_network(w, e.confidence_head, -1);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write("MMOE", 4);
  out.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.bytes().size()));
  const std::uint32_t crc = crc32(w.bytes().data(), w.bytes().size());
  const unsigned char cb[4] = {static_cast<unsigned char>(crc), static_cast<unsigned char>(crc >> 8),
                               static_cast<unsigned char>(crc >> 16),
                               static_cast<unsigned char>(crc >> 24)};
  out.write(reinterpret_cast<const char*>(cb), 4);
  if (!out) throw IoError("failed to write " + path);
}

Ensemble load_model(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "MMOE", 4) != 0) {
    throw BadMagicError(path + ": not a model archive (bad magic)");
  }
  const std::size_t payload_len = bytes.size() - 8;
  const unsigned char* payload = bytes.data() + 4;
  const unsigned char* cb = bytes.data() + bytes.size() - 4;
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(cb[0]) |
                                   (static_cast<std::uint32_t>(cb[1]) << 8) |
                                   (static_cast<std::uint32_t>(cb[2]) << 16) |
                                   (static_cast<std::uint32_t>(cb[3]) << 24);
  const std::uint32_t actual_crc = crc32(payload, payload_len);
  if (stored_crc != actual_crc) {
    throw ChecksumError(path + ": checksum mismatch (archive corrupted)");
  }

  Reader r(payload, payload_len, path);
  const std::uint32_t version = r.u32();
  if (version != kArchiveVersion) {
    throw UnknownVersionError(path + ": unsupported archive version " + std::to_string(version));
  }
  const std::uint8_t precision = r.u8();
  if (precision != 4) {
    throw ArchiveFormatError(path + ": unsupported precision tag " + std::to_string(precision));
  }

  Ensemble ens;
  ens.gating.threshold = r.f64();
  ens.gating.mediator_weight = r.f64();
  ens.cfg.n_fc_hidden = r.i32();
  ens.cfg.expert_fc_width = r.i32();
  ens.cfg.mediator_fc_width = r.i32();
  ens.cfg.shared_prefix_convs = r.i32();
  ens.cfg.confidence_attach_conv = r.i32();
  const std::uint32_t in_rank = r.u32();
  if (in_rank < 1 || in_rank > 3) throw ArchiveFormatError(path + ": bad input shape rank");
  ens.cfg.input_shape.resize(in_rank);
  for (std::uint32_t i = 0; i < in_rank; ++i) ens.cfg.input_shape[i] = r.i32();
  const std::uint32_t trunk_len = r.u32();
  ens.cfg.trunk.clear();
  for (std::uint32_t i = 0; i < trunk_len; ++i) ens.cfg.trunk.push_back(read_layer_spec(r));

  const std::uint32_t n_fine = r.u32();
  std::vector<std::pair<int, int>> pairs;
  for (std::uint32_t f = 0; f < n_fine; ++f) pairs.emplace_back(static_cast<int>(f), r.i32());
  ens.map = SuperclassMap::from_pairs(pairs);

  ens.mediator_trained = r.u8() != 0;
  ens.mediator = read_network(r, nullptr);
  const std::uint32_t n_experts = r.u32();
  for (std::uint32_t i = 0; i < n_experts; ++i) {
    ExpertSlot slot;
    slot.trained = r.u8() != 0;
    slot.head_trained = r.u8() != 0;
    slot.net = read_network(r, &ens.mediator);
    slot.confidence_head = read_network(r, nullptr);
    slot.local_to_global = ens.map.members[i];
    ens.experts.push_back(std::move(slot));
  }
  if (!r.done()) throw ArchiveFormatError(path + ": trailing bytes after archive content");
  return ens;
}

}  // namespace mmoe
