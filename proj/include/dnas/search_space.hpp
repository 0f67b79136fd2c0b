#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dnas/blocks.hpp"
#include "dnas/errors.hpp"
#include "dnas/io.hpp"
#include "dnas/random.hpp"

namespace dnas {

struct StageSpec {
  int64_t f = 0;
  int n = 1;
  int s = 1;
  bool searchable = true;
};

/// Search-space configuration document:
///   {input_resolution, channel_scale, num_classes, head_width,
///    stages: [{f, n, s, searchable}, ...]}
/// stages[0] is the fixed 3x3 stem conv; every later stage is searchable.
struct SpaceConfig {
  int64_t input_resolution = 32;
  double channel_scale = 1.0;
  int64_t num_classes = 10;
  int64_t head_width = 128;
  std::vector<StageSpec> stages;

  json to_json() const {
    json st = json::array();
    for (const auto& s : stages) {
      st.push_back({{"f", s.f}, {"n", s.n}, {"s", s.s}, {"searchable", s.searchable}});
    }
    return {{"input_resolution", input_resolution},
            {"channel_scale", channel_scale},
            {"num_classes", num_classes},
            {"head_width", head_width},
            {"stages", st}};
  }

  static SpaceConfig from_json(const json& doc) {
    const std::string where = "space config";
    SpaceConfig c;
    c.input_resolution = json_required<int64_t>(doc, "input_resolution", where);
    c.channel_scale = json_optional<double>(doc, "channel_scale", 1.0, where);
    c.num_classes = json_required<int64_t>(doc, "num_classes", where);
    c.head_width = json_required<int64_t>(doc, "head_width", where);
    if (!doc.contains("stages") || !doc.at("stages").is_array()) {
      throw ConfigError(where + ": 'stages' must be an array");
    }
    int i = 0;
    for (const auto& st : doc.at("stages")) {
      const std::string sw = where + " stage " + std::to_string(i++);
      StageSpec s;
      s.f = json_required<int64_t>(st, "f", sw);
      s.n = json_required<int>(st, "n", sw);
      s.s = json_required<int>(st, "s", sw);
      s.searchable = json_optional<bool>(st, "searchable", true, sw);
      c.stages.push_back(s);
    }
    return c;
  }

  static SpaceConfig load(const std::filesystem::path& path) {
    return from_json(read_json_file(path));
  }

  std::string hash() const { return json_hash(to_json()); }

  /// The full-size macro-architecture: 224x224 input, 22 searchable layers.
  static SpaceConfig full_scale(int64_t head_width = 1984) {
    SpaceConfig c;
    c.input_resolution = 224;
    c.channel_scale = 1.0;
    c.num_classes = 1000;
    c.head_width = head_width;
    c.stages = {{16, 1, 2, false}, {16, 1, 1, true},  {24, 4, 2, true},  {32, 4, 2, true},
                {64, 4, 2, true},  {112, 4, 1, true}, {184, 4, 2, true}, {352, 1, 1, true}};
    return c;
  }

  /// CI-sized space: 32x32 input, 7 searchable layers, 10 classes.
  static SpaceConfig desk_default() {
    SpaceConfig c;
    c.input_resolution = 32;
    c.channel_scale = 1.0;
    c.num_classes = 10;
    c.head_width = 128;
    c.stages = {{8, 1, 2, false}, {8, 1, 1, true}, {16, 2, 2, true}, {24, 2, 2, true},
                {32, 2, 2, true}};
    return c;
  }
};

/// Scaled channel count; non-unit scales round to the nearest multiple of 2.
inline int64_t scale_channels(int64_t f, double scale) {
  if (scale == 1.0) return f;
  const int64_t r = static_cast<int64_t>(std::llround(static_cast<double>(f) * scale / 2.0)) * 2;
  return std::max<int64_t>(r, 2);
}

enum class StageRole { fixed_conv, searchable, fixed_head };

struct StageInfo {
  StageRole role;
  int64_t f;
  int n;
  int s;
  int64_t input_resolution;
};

struct LayerSlot {
  int index = 0;
  int stage = 0;
  int64_t c_in = 0;
  int64_t c_out = 0;
  int stride = 1;
  int64_t in_h = 0;
  int64_t in_w = 0;
  std::vector<BlockConfig> candidates;

  int64_t out_h() const { return out_extent(in_h, stride); }
  int64_t out_w() const { return out_extent(in_w, stride); }
  int candidate_count() const { return static_cast<int>(candidates.size()); }
};

/// Expanded macro-architecture plus per-layer candidate lists.
struct SearchSpace {
  SpaceConfig config;
  std::string hash;
  std::vector<StageInfo> stages;  // includes the stem and head rows
  std::vector<LayerSlot> slots;
  int64_t input_channels = 3;
  int64_t stem_channels = 0;
  int stem_stride = 1;
  int64_t stem_out_resolution = 0;
  int64_t last_channels = 0;
  int64_t final_resolution = 0;
  int64_t head_width = 0;
  int64_t num_classes = 0;

  size_t num_layers() const { return slots.size(); }

  double log10_size() const {
    double s = 0.0;
    for (const auto& slot : slots) s += std::log10(static_cast<double>(slot.candidate_count()));
    return s;
  }

  int64_t fixed_param_count() const {
    return Stem::param_count(input_channels, stem_channels) +
           HeadConv::param_count(last_channels, head_width) +
           Classifier::param_count(head_width, num_classes);
  }

  int64_t fixed_flops() const {
    return Stem::flops(input_channels, stem_channels, stem_stride, config.input_resolution,
                       config.input_resolution) +
           HeadConv::flops(last_channels, head_width, final_resolution, final_resolution) +
           Classifier::flops(head_width, num_classes);
  }
};

/// Expands the stage table into per-layer slots. Pure function of the config.
inline SearchSpace build_space(const SpaceConfig& config) {
  if (!(config.channel_scale > 0.0)) throw ConfigError("space: channel_scale must be > 0");
  if (config.stages.empty()) throw ConfigError("space: need at least the fixed stem stage");
  if (config.num_classes < 2) throw ConfigError("space: num_classes must be >= 2");
  if (config.head_width < 1) throw ConfigError("space: head_width must be >= 1");
  if (config.input_resolution < 1) throw ConfigError("space: input_resolution must be >= 1");
  int64_t stride_product = 1;
  for (size_t i = 0; i < config.stages.size(); ++i) {
    const auto& st = config.stages[i];
    const std::string tag = "space stage " + std::to_string(i);
    if (st.s != 1 && st.s != 2) throw ConfigError(tag + ": stride must be 1 or 2");
    if (st.n < 1) throw ConfigError(tag + ": repeat count must be >= 1");
    if (st.f < 1) throw ConfigError(tag + ": filter count must be >= 1");
    if (i == 0 && (st.searchable || st.n != 1)) {
      throw ConfigError(tag + ": the first stage is the fixed stem conv (searchable=false, n=1)");
    }
    if (i > 0 && !st.searchable) {
      throw ConfigError(tag + ": only the first stage may be fixed");
    }
    stride_product *= st.s;
  }
  if (config.input_resolution % stride_product != 0) {
    throw ConfigError("space: input_resolution " + std::to_string(config.input_resolution) +
                      " is not divisible by the total stride " + std::to_string(stride_product));
  }

  SearchSpace sp;
  sp.config = config;
  sp.hash = config.hash();
  sp.num_classes = config.num_classes;
  sp.head_width = config.head_width;
  const auto& stem = config.stages.front();
  sp.stem_channels = scale_channels(stem.f, config.channel_scale);
  sp.stem_stride = stem.s;
  sp.stages.push_back({StageRole::fixed_conv, sp.stem_channels, 1, stem.s, config.input_resolution});
  int64_t res = config.input_resolution / stem.s;
  sp.stem_out_resolution = res;
  int64_t channels = sp.stem_channels;
  for (size_t i = 1; i < config.stages.size(); ++i) {
    const auto& st = config.stages[i];
    const int64_t f = scale_channels(st.f, config.channel_scale);
    sp.stages.push_back({StageRole::searchable, f, st.n, st.s, res});
    for (int r = 0; r < st.n; ++r) {
      LayerSlot slot;
      slot.index = static_cast<int>(sp.slots.size());
      slot.stage = static_cast<int>(i);
      slot.c_in = channels;
      slot.c_out = f;
      slot.stride = r == 0 ? st.s : 1;
      slot.in_h = slot.in_w = res;
      const int count = skip_legal(slot.c_in, slot.c_out, slot.stride) ? kNumBlockKinds
                                                                        : kNumBlockKinds - 1;
      for (int k = 0; k < count; ++k) {
        try {
          slot.candidates.push_back(
              BlockConfig::make(static_cast<BlockKind>(k), slot.c_in, slot.c_out, slot.stride));
        } catch (const ConfigError& e) {
          throw ConfigError("space stage " + std::to_string(i) + " layer " +
                            std::to_string(slot.index) + ": " + e.what());
        }
      }
      res = slot.out_h();
      channels = f;
      sp.slots.push_back(std::move(slot));
    }
  }
  sp.last_channels = channels;
  sp.final_resolution = res;
  sp.stages.push_back({StageRole::fixed_head, config.head_width, 1, 1, res});
  return sp;
}

/// One block choice per searchable layer. A choice is the BlockKind value,
/// which is also the candidate index inside the slot.
struct ArchDescriptor {
  std::string space_hash;
  std::vector<int> choices;

  json to_json() const {
    json kinds = json::array();
    for (int c : choices) {
      if (c >= 0 && c < kNumBlockKinds) {
        kinds.push_back(std::string(kind_name(static_cast<BlockKind>(c))));
      } else {
        kinds.push_back(c);
      }
    }
    return {{"space_config_hash", space_hash}, {"choices", kinds}};
  }

  static ArchDescriptor from_json(const json& doc) {
    ArchDescriptor a;
    a.space_hash = json_required<std::string>(doc, "space_config_hash", "arch descriptor");
    if (!doc.contains("choices") || !doc.at("choices").is_array()) {
      throw ConfigError("arch descriptor: 'choices' must be an array");
    }
    for (const auto& c : doc.at("choices")) {
      if (c.is_string()) {
        a.choices.push_back(static_cast<int>(parse_kind(c.get<std::string>())));
      } else if (c.is_number_integer()) {
        a.choices.push_back(c.get<int>());
      } else {
        throw ConfigError("arch descriptor: choices must be kind names");
      }
    }
    return a;
  }

  static ArchDescriptor load(const std::filesystem::path& path) {
    return from_json(read_json_file(path));
  }

  bool operator==(const ArchDescriptor&) const = default;
};

struct ArchIssue {
  int layer;  // -1 for whole-descriptor problems
  std::string reason;
};

inline std::vector<ArchIssue> validate_arch(const SearchSpace& space, const ArchDescriptor& arch) {
  std::vector<ArchIssue> issues;
  if (!arch.space_hash.empty() && arch.space_hash != space.hash) {
    issues.push_back({-1, "descriptor was built for space " + arch.space_hash + ", not " + space.hash});
  }
  if (arch.choices.size() != space.slots.size()) {
    issues.push_back({-1, "descriptor has " + std::to_string(arch.choices.size()) +
                              " choices but the space has " + std::to_string(space.slots.size()) +
                              " searchable layers"});
    return issues;
  }
  for (size_t l = 0; l < arch.choices.size(); ++l) {
    const int c = arch.choices[l];
    const auto& slot = space.slots[l];
    if (c == static_cast<int>(BlockKind::skip) && slot.candidate_count() < kNumBlockKinds) {
      issues.push_back({static_cast<int>(l), "skip is not allowed at layer " + std::to_string(l) +
                                                 " (stride " + std::to_string(slot.stride) + ", " +
                                                 std::to_string(slot.c_in) + "->" +
                                                 std::to_string(slot.c_out) + " channels)"});
    } else if (c < 0 || c >= slot.candidate_count()) {
      issues.push_back({static_cast<int>(l), "choice " + std::to_string(c) + " out of range [0," +
                                                 std::to_string(slot.candidate_count()) + ")"});
    }
  }
  return issues;
}

inline std::string format_issues(const std::vector<ArchIssue>& issues) {
  std::string s;
  for (const auto& i : issues) {
    if (!s.empty()) s += "; ";
    s += (i.layer >= 0 ? "layer " + std::to_string(i.layer) + ": " : std::string()) + i.reason;
  }
  return s;
}

inline void require_valid_arch(const SearchSpace& space, const ArchDescriptor& arch) {
  const auto issues = validate_arch(space, arch);
  if (!issues.empty()) throw ConfigError("invalid architecture: " + format_issues(issues));
}

inline int64_t arch_param_count(const SearchSpace& space, const ArchDescriptor& arch) {
  int64_t n = space.fixed_param_count();
  for (size_t l = 0; l < space.slots.size(); ++l) {
    n += block_param_count(space.slots[l].candidates.at(static_cast<size_t>(arch.choices[l])));
  }
  return n;
}

inline int64_t arch_flops(const SearchSpace& space, const ArchDescriptor& arch) {
  int64_t n = space.fixed_flops();
  for (size_t l = 0; l < space.slots.size(); ++l) {
    const auto& slot = space.slots[l];
    n += block_flops(slot.candidates.at(static_cast<size_t>(arch.choices[l])), slot.in_h, slot.in_w);
  }
  return n;
}

/// A standalone single-path network: stem, one block per layer, head.
class Network {
 public:
  Network(const SearchSpace& space, std::vector<BlockConfig> configs, Stem stem,
          std::vector<BlockWeights> blocks, HeadConv head, Classifier classifier)
      : input_resolution_(space.config.input_resolution),
        input_channels_(space.input_channels),
        configs_(std::move(configs)),
        stem_(std::move(stem)),
        blocks_(std::move(blocks)),
        head_(std::move(head)),
        classifier_(std::move(classifier)) {}

  float dropout = 0.0f;

  Tensor forward(const Tensor& x, BnMode mode, Rng* rng = nullptr) {
    if (x.rank() != 4 || x.dim(1) != input_channels_ || x.dim(2) != input_resolution_ ||
        x.dim(3) != input_resolution_) {
      throw ConfigError("network: expected input [N," + std::to_string(input_channels_) + "," +
                        std::to_string(input_resolution_) + "," +
                        std::to_string(input_resolution_) + "], got " + shape_str(x.shape()));
    }
    Tensor h = stem_.forward(x, mode);
    for (size_t l = 0; l < blocks_.size(); ++l) h = block_forward(configs_[l], blocks_[l], h, mode);
    h = head_.forward(h, mode);
    return classifier_.forward(h, dropout, rng, mode == BnMode::train);
  }

  ParamList params() const {
    ParamList out;
    stem_.append_params(out);
    for (size_t l = 0; l < blocks_.size(); ++l) {
      blocks_[l].append_params(out, "layer" + std::to_string(l));
    }
    head_.append_params(out);
    classifier_.append_params(out);
    return out;
  }

  int64_t param_count() const { return dnas::param_count(params()); }
  const std::vector<BlockConfig>& configs() const { return configs_; }

 private:
  int64_t input_resolution_;
  int64_t input_channels_;
  std::vector<BlockConfig> configs_;
  Stem stem_;
  std::vector<BlockWeights> blocks_;
  HeadConv head_;
  Classifier classifier_;
};

/// Builds the chosen architecture with freshly initialized weights.
inline Network materialize(const SearchSpace& space, const ArchDescriptor& arch, Rng& rng) {
  require_valid_arch(space, arch);
  Stem stem = Stem::init(space.input_channels, space.stem_channels, space.stem_stride, rng);
  std::vector<BlockConfig> cfgs;
  std::vector<BlockWeights> blocks;
  for (size_t l = 0; l < space.slots.size(); ++l) {
    const BlockConfig& cfg = space.slots[l].candidates.at(static_cast<size_t>(arch.choices[l]));
    cfgs.push_back(cfg);
    blocks.push_back(BlockWeights::init(cfg, rng));
  }
  HeadConv head = HeadConv::init(space.last_channels, space.head_width, rng);
  Classifier cls = Classifier::init(space.head_width, space.num_classes, rng);
  return Network(space, std::move(cfgs), std::move(stem), std::move(blocks), std::move(head),
                 std::move(cls));
}

}  // namespace dnas
