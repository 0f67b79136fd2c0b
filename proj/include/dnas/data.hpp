#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dnas/errors.hpp"
#include "dnas/io.hpp"
#include "dnas/random.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

/// Labelled u8 images stored CHW, record after record.
struct Dataset {
  int64_t resolution = 32;
  int64_t channels = 3;
  int64_t num_classes = 10;
  std::vector<uint8_t> pixels;
  std::vector<int> labels;

  size_t size() const { return labels.size(); }
  int64_t image_bytes() const { return channels * resolution * resolution; }
  std::span<const uint8_t> image(size_t i) const {
    return {pixels.data() + i * static_cast<size_t>(image_bytes()), static_cast<size_t>(image_bytes())};
  }
  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Binary format: per record one label byte followed by C*H*W pixel bytes
// (CIFAR-10 binary layout, resolution configurable).

inline int64_t record_bytes(int64_t resolution, int64_t channels = 3) {
  return 1 + channels * resolution * resolution;
}

inline Dataset decode_binary(std::span<const uint8_t> bytes, int64_t resolution,
                             int64_t num_classes, const std::string& source = "<memory>") {
  if (resolution < 1) throw ConfigError("dataset: resolution must be >= 1");
  if (num_classes < 2 || num_classes > 256) throw ConfigError("dataset: num_classes must be in [2,256]");
  Dataset ds;
  ds.resolution = resolution;
  ds.num_classes = num_classes;
  const auto rec = static_cast<size_t>(record_bytes(resolution));
  const size_t full = bytes.size() / rec;
  if (bytes.size() % rec != 0) {
    throw ParseError(source + ": truncated at byte offset " + std::to_string(bytes.size()) +
                     ": record " + std::to_string(full) + " starts at offset " +
                     std::to_string(full * rec) + " and needs " + std::to_string(rec) + " bytes");
  }
  ds.labels.reserve(full);
  ds.pixels.reserve(full * (rec - 1));
  for (size_t r = 0; r < full; ++r) {
    const uint8_t label = bytes[r * rec];
    if (label >= num_classes) {
      throw ParseError(source + ": record " + std::to_string(r) + " has label " +
                       std::to_string(label) + " >= num_classes " + std::to_string(num_classes));
    }
    ds.labels.push_back(label);
    ds.pixels.insert(ds.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(r * rec + 1),
                     bytes.begin() + static_cast<std::ptrdiff_t>((r + 1) * rec));
  }
  return ds;
}

inline Dataset load_binary(const std::filesystem::path& path, int64_t resolution, int64_t num_classes) {
  const std::string raw = read_text_file(path);
  return decode_binary({reinterpret_cast<const uint8_t*>(raw.data()), raw.size()}, resolution,
                       num_classes, path.string());
}

inline std::string encode_binary(const Dataset& ds) {
  std::string out;
  out.reserve(ds.size() * static_cast<size_t>(record_bytes(ds.resolution, ds.channels)));
  for (size_t i = 0; i < ds.size(); ++i) {
    out.push_back(static_cast<char>(ds.labels[i]));
    const auto img = ds.image(i);
    out.append(reinterpret_cast<const char*>(img.data()), img.size());
  }
  return out;
}

inline void write_binary(const std::filesystem::path& path, const Dataset& ds) {
  if (ds.channels != 3) throw ConfigError("dataset: binary format stores 3-channel images");
  atomic_write_file(path, encode_binary(ds));
}

/// Per-channel mean/std applied after scaling pixels to [0, 1].
struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.25f, 0.25f, 0.25f};

  static Normalization compute(const Dataset& ds) {
    Normalization n;
    const int64_t plane = ds.resolution * ds.resolution;
    for (int64_t c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0;
      size_t count = 0;
      for (size_t i = 0; i < ds.size(); ++i) {
        const auto img = ds.image(i);
        for (int64_t p = 0; p < plane; ++p) {
          const double v = img[c * plane + p] / 255.0;
          s += v;
          s2 += v * v;
        }
        count += static_cast<size_t>(plane);
      }
      if (count == 0) continue;
      const double mean = s / count;
      const double var = std::max(s2 / count - mean * mean, 1e-12);
      n.mean[c] = static_cast<float>(mean);
      n.std[c] = static_cast<float>(std::max(std::sqrt(var), 1e-3));
    }
    return n;
  }

  json to_json() const { return {{"mean", mean}, {"std", std}}; }
  static Normalization from_json(const json& doc) {
    Normalization n;
    const auto m = json_required<std::vector<float>>(doc, "mean", "normalization");
    const auto s = json_required<std::vector<float>>(doc, "std", "normalization");
    if (m.size() != 3 || s.size() != 3) throw ConfigError("normalization: mean/std need 3 entries");
    for (int c = 0; c < 3; ++c) {
      if (!(s[c] > 0.0f)) throw ConfigError("normalization: std must be > 0");
      n.mean[c] = m[c];
      n.std[c] = s[c];
    }
    return n;
  }
  void save(const std::filesystem::path& path) const { write_json_file(path, to_json()); }
  static Normalization load(const std::filesystem::path& path) { return from_json(read_json_file(path)); }
};

/// Sidecar next to a dataset file: "<file>.norm.json".
inline std::filesystem::path normalization_sidecar(const std::filesystem::path& data_path) {
  std::filesystem::path p = data_path;
  p += ".norm.json";
  return p;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Procedural gratings. Class c of K gets orientation pi*c/K, a spatial
/// frequency of 2 + 1.5*(c mod 3) cycles per image and a colour tint
/// 128 + 24*cos(2*pi*c/K + 2*pi*ch/3) per channel. Each sample draws a random
/// phase, an orientation jitter of +-pi/(4K), an amplitude in [40, 70] and
/// per-pixel Gaussian noise with sigma 25. Records are class-major.
inline Dataset synth_dataset(int64_t classes, int64_t per_class, int64_t resolution, uint64_t seed) {
  if (classes < 2) throw ConfigError("synth_dataset: classes must be >= 2");
  if (classes > 256) throw ConfigError("synth_dataset: classes must be <= 256");
  if (per_class < 0 || resolution < 1) throw ConfigError("synth_dataset: bad size");
  Dataset ds;
  ds.resolution = resolution;
  ds.num_classes = classes;
  Rng rng(seed);
  const double pi = std::numbers::pi;
  for (int64_t c = 0; c < classes; ++c) {
    const double angle = pi * static_cast<double>(c) / static_cast<double>(classes);
    const double freq = 2.0 + 1.5 * static_cast<double>(c % 3);
    std::array<double, 3> tint{};
    for (int ch = 0; ch < 3; ++ch) {
      tint[ch] = 128.0 + 24.0 * std::cos(2.0 * pi * static_cast<double>(c) / static_cast<double>(classes) +
                                         2.0 * pi * ch / 3.0);
    }
    for (int64_t s = 0; s < per_class; ++s) {
      const double phase = 2.0 * pi * uniform01(rng);
      const double a = angle + (uniform01(rng) - 0.5) * pi / (2.0 * static_cast<double>(classes));
      const double amp = 40.0 + 30.0 * uniform01(rng);
      const double ca = std::cos(a), sa = std::sin(a);
      ds.labels.push_back(static_cast<int>(c));
      for (int ch = 0; ch < 3; ++ch) {
        for (int64_t y = 0; y < resolution; ++y) {
          for (int64_t x = 0; x < resolution; ++x) {
            const double u = (static_cast<double>(x) * ca + static_cast<double>(y) * sa) /
                             static_cast<double>(resolution);
            const double v = tint[ch] + amp * std::sin(2.0 * pi * freq * u + phase) +
                             25.0 * normal01(rng);
            ds.pixels.push_back(static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
          }
        }
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting and subsetting

struct SplitSpec {
  double fraction = 0.8;
  uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<size_t> a;
  std::vector<size_t> b;
};

/// Stratified deterministic split: within each class the indices are shuffled
/// with the seed and the first round(fraction * count) go to part a. Both
/// parts are returned in ascending index order.
inline SplitIndices split(const Dataset& ds, const SplitSpec& spec) {
  if (!(spec.fraction >= 0.0 && spec.fraction <= 1.0)) {
    throw ConfigError("split: fraction must be in [0, 1]");
  }
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  Rng rng(spec.seed);
  SplitIndices out;
  for (auto& [label, idx] : by_class) {
    for (size_t i = idx.size(); i > 1; --i) {
      const auto j = static_cast<size_t>(uniform01(rng) * static_cast<double>(i));
      std::swap(idx[i - 1], idx[j]);
    }
    const auto take = static_cast<size_t>(std::llround(spec.fraction * static_cast<double>(idx.size())));
    out.a.insert(out.a.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    out.b.insert(out.b.end(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end());
  }
  std::sort(out.a.begin(), out.a.end());
  std::sort(out.b.begin(), out.b.end());
  return out;
}

inline Dataset subset(const Dataset& ds, std::span<const size_t> indices) {
  Dataset out;
  out.resolution = ds.resolution;
  out.channels = ds.channels;
  out.num_classes = ds.num_classes;
  for (size_t i : indices) {
    out.labels.push_back(ds.labels.at(i));
    const auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

/// Keeps `count` randomly chosen classes and relabels them 0..count-1.
inline Dataset select_classes(const Dataset& ds, int64_t count, uint64_t seed) {
  if (count <= 0 || count >= ds.num_classes) return ds;
  std::vector<int> classes(static_cast<size_t>(ds.num_classes));
  for (size_t i = 0; i < classes.size(); ++i) classes[i] = static_cast<int>(i);
  Rng rng(seed);
  for (size_t i = classes.size(); i > 1; --i) {
    std::swap(classes[i - 1], classes[static_cast<size_t>(uniform01(rng) * static_cast<double>(i))]);
  }
  classes.resize(static_cast<size_t>(count));
  std::sort(classes.begin(), classes.end());
  std::map<int, int> relabel;
  for (size_t i = 0; i < classes.size(); ++i) relabel[classes[i]] = static_cast<int>(i);
  std::vector<size_t> keep;
  for (size_t i = 0; i < ds.size(); ++i) {
    if (relabel.count(ds.labels[i])) keep.push_back(i);
  }
  Dataset out = subset(ds, keep);
  for (auto& l : out.labels) l = relabel.at(l);
  out.num_classes = count;
  return out;
}

// ---------------------------------------------------------------------------
// Batching and augmentation

struct Batch {
  Tensor images;  // [B, 3, R, R]
  std::vector<int> labels;
};

inline Batch make_batch(const Dataset& ds, std::span<const size_t> indices, const Normalization& norm) {
  const int64_t r = ds.resolution, plane = r * r;
  Batch b;
  b.images = Tensor({static_cast<int64_t>(indices.size()), ds.channels, r, r});
  auto out = b.images.data();
  for (size_t k = 0; k < indices.size(); ++k) {
    const auto img = ds.image(indices[k]);
    b.labels.push_back(ds.labels[indices[k]]);
    for (int64_t c = 0; c < ds.channels; ++c) {
      const float m = norm.mean[c], inv = 1.0f / norm.std[c];
      for (int64_t p = 0; p < plane; ++p) {
        out[(k * ds.channels + c) * plane + p] = (img[c * plane + p] / 255.0f - m) * inv;
      }
    }
  }
  return b;
}

/// Mirrors image n of a [B,C,H,W] buffer left-right in place.
inline void hflip_image(std::span<float> batch, const Shape& shape, int64_t n) {
  const int64_t c = shape[1], h = shape[2], w = shape[3];
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < h; ++y) {
      float* row = batch.data() + ((n * c + ch) * h + y) * w;
      std::reverse(row, row + w);
    }
  }
}

/// Shifts image n by (dy, dx) with zero fill; equivalent to zero-padding and
/// cropping a window offset by (dy, dx).
inline void shift_image(std::span<float> batch, const Shape& shape, int64_t n, int64_t dy, int64_t dx) {
  const int64_t c = shape[1], h = shape[2], w = shape[3];
  std::vector<float> tmp(static_cast<size_t>(h * w));
  for (int64_t ch = 0; ch < c; ++ch) {
    float* plane = batch.data() + (n * c + ch) * h * w;
    std::fill(tmp.begin(), tmp.end(), 0.0f);
    for (int64_t y = 0; y < h; ++y) {
      const int64_t sy = y + dy;
      if (sy < 0 || sy >= h) continue;
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sx = x + dx;
        if (sx >= 0 && sx < w) tmp[y * w + x] = plane[sy * w + sx];
      }
    }
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

enum class AugmentMode { train, eval };

struct AugmentOptions {
  double flip_p = 0.5;
  int64_t pad = 4;
};

/// Train mode: horizontal flip with probability flip_p, then a random crop
/// from the zero-padded image. Eval mode returns the batch unchanged.
inline Tensor augment(const Tensor& batch, Rng& rng, AugmentMode mode, const AugmentOptions& opt = {}) {
  if (mode == AugmentMode::eval) return batch;
  Tensor out = batch.clone();
  auto data = out.data();
  for (int64_t n = 0; n < out.dim(0); ++n) {
    if (uniform01(rng) < opt.flip_p) hflip_image(data, out.shape(), n);
    if (opt.pad > 0) {
      const int64_t span = 2 * opt.pad + 1;
      const auto dy = static_cast<int64_t>(uniform01(rng) * static_cast<double>(span)) - opt.pad;
      const auto dx = static_cast<int64_t>(uniform01(rng) * static_cast<double>(span)) - opt.pad;
      if (dy != 0 || dx != 0) shift_image(data, out.shape(), n, dy, dx);
    }
  }
  return out;
}

/// Fisher-Yates shuffle driven by uniform01 so orderings are portable.
inline void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[static_cast<size_t>(uniform01(rng) * static_cast<double>(i))]);
  }
}

}  // namespace dnas
