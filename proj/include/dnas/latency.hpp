#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <compare>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dnas/blocks.hpp"
#include "dnas/errors.hpp"
#include "dnas/io.hpp"
#include "dnas/random.hpp"
#include "dnas/search_space.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

// Reserved kinds for the fixed operators around the searchable layers.
inline constexpr const char* kStemKind = "stem";
inline constexpr const char* kHeadConvKind = "head_conv";
inline constexpr const char* kClassifierKind = "classifier";

/// Identifies one benchmarked operator instance: (kind, channels, stride,
/// input resolution). Layers that share all of these share a table entry.
struct LatencyKey {
  std::string kind;
  int64_t c_in = 0;
  int64_t c_out = 0;
  int stride = 1;
  int64_t h = 0;
  int64_t w = 0;

  auto operator<=>(const LatencyKey&) const = default;
  bool operator==(const LatencyKey&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << kind << "(c_in=" << c_in << ", c_out=" << c_out << ", stride=" << stride << ", h=" << h
       << ", w=" << w << ")";
    return os.str();
  }
};

inline LatencyKey block_key(const LayerSlot& slot, int candidate) {
  const BlockConfig& cfg = slot.candidates.at(static_cast<size_t>(candidate));
  return {std::string(kind_name(cfg.kind)), cfg.c_in, cfg.c_out, cfg.stride, slot.in_h, slot.in_w};
}

inline LatencyKey stem_key(const SearchSpace& space) {
  return {kStemKind, space.input_channels, space.stem_channels, space.stem_stride,
          space.config.input_resolution, space.config.input_resolution};
}

inline LatencyKey head_conv_key(const SearchSpace& space) {
  return {kHeadConvKind, space.last_channels, space.head_width, 1, space.final_resolution,
          space.final_resolution};
}

inline LatencyKey classifier_key(const SearchSpace& space) {
  return {kClassifierKind, space.head_width, space.num_classes, 1, space.final_resolution,
          space.final_resolution};
}

/// Every distinct key needed to price any architecture in the space, fixed
/// operators first, then searchable layers in slot order.
inline std::vector<LatencyKey> distinct_keys(const SearchSpace& space) {
  std::vector<LatencyKey> keys;
  std::set<LatencyKey> seen;
  auto push = [&](LatencyKey k) {
    if (seen.insert(k).second) keys.push_back(std::move(k));
  };
  push(stem_key(space));
  push(head_conv_key(space));
  push(classifier_key(space));
  for (const auto& slot : space.slots) {
    for (int i = 0; i < slot.candidate_count(); ++i) push(block_key(slot, i));
  }
  return keys;
}

// ---------------------------------------------------------------------------
// Timing harness

/// Smallest observable non-zero steady_clock step, in nanoseconds.
inline double timer_resolution_ns() {
  using clock = std::chrono::steady_clock;
  double best = 1e9;
  for (int i = 0; i < 200; ++i) {
    const auto t0 = clock::now();
    auto t1 = clock::now();
    while (t1 == t0) t1 = clock::now();
    best = std::min(best, std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  return best;
}

struct BenchResult {
  double median_us = 0.0;
  int inner_iterations = 1;
  std::vector<double> samples_us;
};

/// Times fn: discards `warmup` samples, returns the median of `repeats`. Each
/// sample runs fn enough times to span at least 100x the timer resolution.
inline BenchResult bench_callable(const std::function<void()>& fn, int repeats, int warmup) {
  if (repeats < 5) throw ConfigError("benchmark: repeats must be >= 5");
  if (warmup < 1) throw ConfigError("benchmark: warmup must be >= 1");
  using clock = std::chrono::steady_clock;
  static const double resolution_ns = timer_resolution_ns();
  const double min_sample_ns = 100.0 * resolution_ns;

  fn();
  int inner = 1;
  for (;;) {
    const auto t0 = clock::now();
    for (int i = 0; i < inner; ++i) fn();
    const double ns = std::chrono::duration<double, std::nano>(clock::now() - t0).count();
    if (ns >= min_sample_ns || inner >= (1 << 20)) break;
    const double grow = ns > 0.0 ? std::ceil(min_sample_ns / ns) : 2.0;
    inner = static_cast<int>(std::min<double>(inner * std::max(2.0, grow), 1 << 20));
  }

  BenchResult r;
  r.inner_iterations = inner;
  for (int s = 0; s < warmup + repeats; ++s) {
    const auto t0 = clock::now();
    for (int i = 0; i < inner; ++i) fn();
    const double us = std::chrono::duration<double, std::micro>(clock::now() - t0).count() / inner;
    if (s >= warmup) r.samples_us.push_back(us);
  }
  std::vector<double> sorted = r.samples_us;
  std::sort(sorted.begin(), sorted.end());
  const size_t mid = sorted.size() / 2;
  r.median_us = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return r;
}

inline Tensor random_input(Shape shape, Rng& rng) {
  Tensor x(std::move(shape));
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : x.data()) v = dist(rng);
  return x;
}

/// Median eval-mode forward latency of one block at batch size 1, in
/// microseconds. Skip blocks are 0 by definition and never timed.
inline double bench_block(const BlockConfig& cfg, int64_t h, int64_t w, int repeats, int warmup,
                          Rng& rng) {
  cfg.validate();
  if (cfg.is_skip()) return 0.0;
  NoGradGuard no_grad;
  BlockWeights weights = BlockWeights::init(cfg, rng);
  const Tensor x = random_input({1, cfg.c_in, h, w}, rng);
  volatile float sink = 0.0f;
  auto fn = [&] {
    Tensor y = block_forward(cfg, weights, x, BnMode::eval);
    sink = sink + y.data()[0];
  };
  return bench_callable(fn, repeats, warmup).median_us;
}

/// Benchmarks whatever operator the key names.
inline double bench_key(const LatencyKey& key, int repeats, int warmup, Rng& rng) {
  if (key.kind == kStemKind || key.kind == kHeadConvKind || key.kind == kClassifierKind) {
    NoGradGuard no_grad;
    const Tensor x = random_input({1, key.c_in, key.h, key.w}, rng);
    volatile float sink = 0.0f;
    std::function<void()> fn;
    Stem stem;
    HeadConv head;
    Classifier cls;
    if (key.kind == kStemKind) {
      stem = Stem::init(key.c_in, key.c_out, key.stride, rng);
      fn = [&] { sink = sink + stem.forward(x, BnMode::eval).data()[0]; };
    } else if (key.kind == kHeadConvKind) {
      head = HeadConv::init(key.c_in, key.c_out, rng);
      fn = [&] { sink = sink + head.forward(x, BnMode::eval).data()[0]; };
    } else {
      cls = Classifier::init(key.c_in, key.c_out, rng);
      fn = [&] { sink = sink + cls.forward(x, 0.0f, nullptr, false).data()[0]; };
    }
    return bench_callable(fn, repeats, warmup).median_us;
  }
  const BlockConfig cfg = BlockConfig::make(parse_kind(key.kind), key.c_in, key.c_out, key.stride);
  return bench_block(cfg, key.h, key.w, repeats, warmup, rng);
}

// ---------------------------------------------------------------------------
// Lookup table

struct LatencyTable {
  std::string device_label;
  int64_t created_unix = 0;
  int repeats = 0;
  int warmup = 0;
  std::string aggregation = "median";
  std::string space_hash;
  std::map<LatencyKey, double> entries;

  size_t size() const { return entries.size(); }
  bool contains(const LatencyKey& key) const { return entries.count(key) != 0; }

  double lookup(const LatencyKey& key) const {
    auto it = entries.find(key);
    if (it == entries.end()) throw LookupError("latency table has no entry for " + key.str());
    return it->second;
  }

  json to_json() const {
    json rows = json::array();
    for (const auto& [k, v] : entries) {
      rows.push_back({{"kind", k.kind},
                      {"c_in", k.c_in},
                      {"c_out", k.c_out},
                      {"stride", k.stride},
                      {"h", k.h},
                      {"w", k.w},
                      {"latency_us", v}});
    }
    return {{"device_label", device_label}, {"created_unix", created_unix},
            {"repeats", repeats},           {"warmup", warmup},
            {"aggregation", aggregation},   {"space_hash", space_hash},
            {"entries", rows}};
  }

  static LatencyTable from_json(const json& doc) {
    const std::string where = "latency table";
    LatencyTable t;
    t.device_label = json_required<std::string>(doc, "device_label", where);
    t.created_unix = json_optional<int64_t>(doc, "created_unix", 0, where);
    t.repeats = json_optional<int>(doc, "repeats", 0, where);
    t.warmup = json_optional<int>(doc, "warmup", 0, where);
    t.aggregation = json_optional<std::string>(doc, "aggregation", "median", where);
    t.space_hash = json_optional<std::string>(doc, "space_hash", "", where);
    if (!doc.contains("entries") || !doc.at("entries").is_array()) {
      throw ConfigError(where + ": 'entries' must be an array");
    }
    size_t i = 0;
    for (const auto& row : doc.at("entries")) {
      const std::string rw = where + " entry " + std::to_string(i++);
      LatencyKey k{json_required<std::string>(row, "kind", rw), json_required<int64_t>(row, "c_in", rw),
                   json_required<int64_t>(row, "c_out", rw), json_required<int>(row, "stride", rw),
                   json_required<int64_t>(row, "h", rw), json_required<int64_t>(row, "w", rw)};
      const double v = json_required<double>(row, "latency_us", rw);
      const bool is_skip = k.kind == "skip";
      if (!std::isfinite(v) || v < 0.0 || (is_skip && v != 0.0) || (!is_skip && v <= 0.0)) {
        throw ConfigError(rw + ": invalid latency " + std::to_string(v) + " for " + k.str());
      }
      t.entries[k] = v;
    }
    return t;
  }

  void save(const std::filesystem::path& path) const { write_json_file(path, to_json()); }
  static LatencyTable load(const std::filesystem::path& path) {
    return from_json(read_json_file(path));
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "kind,c_in,c_out,stride,h,w,latency_us\n";
    for (const auto& [k, v] : entries) {
      os << k.kind << ',' << k.c_in << ',' << k.c_out << ',' << k.stride << ',' << k.h << ','
         << k.w << ',' << v << '\n';
    }
    return os.str();
  }
};

/// Throws LookupError naming the first key the table cannot resolve.
inline void check_coverage(const LatencyTable& table, const SearchSpace& space) {
  for (const auto& k : distinct_keys(space)) table.lookup(k);
}

/// Benchmarks every distinct key of the space, one at a time on the calling
/// thread. Skip entries are stored as exactly 0.
inline LatencyTable build_lut(const SearchSpace& space, int repeats, int warmup,
                              const std::string& device_label, uint64_t seed = 0,
                              const std::function<void(size_t, size_t, const LatencyKey&, double)>&
                                  progress = nullptr) {
  if (repeats < 5) throw ConfigError("build_lut: repeats must be >= 5");
  if (warmup < 1) throw ConfigError("build_lut: warmup must be >= 1");
  LatencyTable t;
  t.device_label = device_label;
  t.created_unix = static_cast<int64_t>(std::time(nullptr));
  t.repeats = repeats;
  t.warmup = warmup;
  t.space_hash = space.hash;
  Rng rng(seed);
  const auto keys = distinct_keys(space);
  for (size_t i = 0; i < keys.size(); ++i) {
    const double us = keys[i].kind == "skip" ? 0.0 : bench_key(keys[i], repeats, warmup, rng);
    t.entries[keys[i]] = keys[i].kind == "skip" ? 0.0 : std::max(us, 1e-3);
    if (progress) progress(i, keys.size(), keys[i], us);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Latency model

/// Dense view of a table for one space: fixed-op total plus per-layer,
/// per-candidate constants.
struct LatencyModel {
  double fixed_us = 0.0;
  std::vector<std::vector<double>> per_layer;

  static LatencyModel from(const LatencyTable& table, const SearchSpace& space) {
    LatencyModel m;
    m.fixed_us = table.lookup(stem_key(space));
    m.fixed_us += table.lookup(head_conv_key(space));
    m.fixed_us += table.lookup(classifier_key(space));
    for (const auto& slot : space.slots) {
      std::vector<double> row;
      for (int i = 0; i < slot.candidate_count(); ++i) row.push_back(table.lookup(block_key(slot, i)));
      m.per_layer.push_back(std::move(row));
    }
    return m;
  }

  /// Index of the cheapest candidate per layer.
  std::vector<int> argmin() const {
    std::vector<int> out;
    for (const auto& row : per_layer) {
      out.push_back(static_cast<int>(std::min_element(row.begin(), row.end()) - row.begin()));
    }
    return out;
  }
};

/// Sum of per-layer table entries plus the fixed operators.
inline double arch_latency(const LatencyModel& model, const ArchDescriptor& arch) {
  if (arch.choices.size() != model.per_layer.size()) {
    throw ConfigError("arch_latency: descriptor has " + std::to_string(arch.choices.size()) +
                      " layers, model has " + std::to_string(model.per_layer.size()));
  }
  double acc = model.fixed_us;
  for (size_t l = 0; l < arch.choices.size(); ++l) {
    const auto& row = model.per_layer[l];
    const int c = arch.choices[l];
    if (c < 0 || c >= static_cast<int>(row.size())) {
      throw ConfigError("arch_latency: choice " + std::to_string(c) + " out of range at layer " +
                        std::to_string(l));
    }
    acc += row[static_cast<size_t>(c)];
  }
  return acc;
}

inline double arch_latency(const LatencyTable& table, const SearchSpace& space,
                           const ArchDescriptor& arch) {
  require_valid_arch(space, arch);
  return arch_latency(LatencyModel::from(table, space), arch);
}

/// Mask-weighted latency in double precision; masks[l][i] pairs with
/// per_layer[l][i].
inline double expected_latency_value(const LatencyModel& model,
                                     const std::vector<std::vector<double>>& masks) {
  if (masks.size() != model.per_layer.size()) {
    throw ConfigError("expected_latency: " + std::to_string(masks.size()) + " mask rows for " +
                      std::to_string(model.per_layer.size()) + " layers");
  }
  double acc = model.fixed_us;
  for (size_t l = 0; l < masks.size(); ++l) {
    const auto& row = model.per_layer[l];
    if (masks[l].size() != row.size()) {
      throw ConfigError("expected_latency: layer " + std::to_string(l) + " mask has " +
                        std::to_string(masks[l].size()) + " entries, expected " +
                        std::to_string(row.size()));
    }
    for (size_t i = 0; i < row.size(); ++i) acc += masks[l][i] * row[i];
  }
  return acc;
}

/// Differentiable expected latency: fixed + Σ_l Σ_i m[l][i] * LAT[l][i].
/// The gradient with respect to m[l][i] is exactly LAT[l][i].
inline Tensor expected_latency(const LatencyModel& model, const std::vector<Tensor>& masks) {
  std::vector<std::vector<double>> rows;
  rows.reserve(masks.size());
  for (const auto& m : masks) rows.emplace_back(m.data().begin(), m.data().end());
  const double value = expected_latency_value(model, rows);
  const auto* per_layer = &model.per_layer;
  std::vector<std::vector<float>> coeffs;
  for (const auto& row : *per_layer) coeffs.emplace_back(row.begin(), row.end());
  return make_result(Shape{1}, {static_cast<float>(value)}, masks, "expected_latency",
                     [coeffs = std::move(coeffs)](Node& self) {
                       const float g = self.grad[0];
                       for (size_t l = 0; l < coeffs.size(); ++l) {
                         Node& m = *self.inputs[l];
                         if (!m.requires_grad) continue;
                         for (size_t i = 0; i < coeffs[l].size(); ++i) m.grad[i] += g * coeffs[l][i];
                       }
                     });
}

inline Tensor expected_latency(const LatencyTable& table, const SearchSpace& space,
                               const std::vector<Tensor>& masks) {
  return expected_latency(LatencyModel::from(table, space), masks);
}

// ---------------------------------------------------------------------------
// Additivity check

struct AdditivitySample {
  std::string arch_id;
  ArchDescriptor arch;
  double predicted_us = 0.0;
  double measured_us = 0.0;
  double rel_err = 0.0;
};

struct AdditivityReport {
  std::string device_label;
  std::vector<AdditivitySample> samples;
  double mean_rel_err = 0.0;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool within_tolerance = false;

  json to_json() const {
    json rows = json::array();
    for (const auto& s : samples) {
      rows.push_back({{"arch_id", s.arch_id},
                      {"choices", s.arch.to_json().at("choices")},
                      {"predicted_us", s.predicted_us},
                      {"measured_us", s.measured_us},
                      {"rel_err", s.rel_err}});
    }
    return {{"device_label", device_label},
            {"samples", rows},
            {"mean_rel_err", mean_rel_err},
            {"max_rel_err", max_rel_err},
            {"tolerance", tolerance},
            {"within_tolerance", within_tolerance},
            {"note",
             "predictions sum isolated per-operator medians and assume operators run "
             "sequentially without interference; desktop CPUs with shared caches and "
             "frequency scaling violate this, so a tolerance band is applied"}};
  }
};

inline ArchDescriptor random_arch(const SearchSpace& space, Rng& rng) {
  ArchDescriptor a;
  a.space_hash = space.hash;
  for (const auto& slot : space.slots) {
    a.choices.push_back(static_cast<int>(uniform01(rng) * slot.candidate_count()));
  }
  return a;
}

/// Compares end-to-end measured latency of materialized networks against the
/// table prediction for `sample_archs` random architectures.
inline AdditivityReport validate_additivity(const LatencyTable& table, const SearchSpace& space,
                                            int sample_archs, double tolerance, Rng& rng,
                                            int repeats = 50, int warmup = 10) {
  if (sample_archs < 5) throw ConfigError("validate_additivity: need at least 5 sample archs");
  const LatencyModel model = LatencyModel::from(table, space);
  AdditivityReport report;
  report.device_label = table.device_label;
  report.tolerance = tolerance;
  NoGradGuard no_grad;
  const int64_t r = space.config.input_resolution;
  const Tensor x = random_input({1, space.input_channels, r, r}, rng);
  for (int s = 0; s < sample_archs; ++s) {
    AdditivitySample sample;
    sample.arch = random_arch(space, rng);
    sample.arch_id = "arch_" + std::to_string(s);
    sample.predicted_us = arch_latency(model, sample.arch);
    Network net = materialize(space, sample.arch, rng);
    volatile float sink = 0.0f;
    sample.measured_us =
        bench_callable([&] { sink = sink + net.forward(x, BnMode::eval).data()[0]; }, repeats, warmup)
            .median_us;
    sample.rel_err = std::abs(sample.predicted_us - sample.measured_us) / sample.measured_us;
    report.samples.push_back(std::move(sample));
  }
  double total = 0.0;
  for (const auto& s : report.samples) {
    total += s.rel_err;
    report.max_rel_err = std::max(report.max_rel_err, s.rel_err);
  }
  report.mean_rel_err = total / static_cast<double>(report.samples.size());
  report.within_tolerance = report.mean_rel_err <= tolerance;
  return report;
}

}  // namespace dnas
