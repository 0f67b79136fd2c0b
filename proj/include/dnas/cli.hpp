#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dnas/data.hpp"
#include "dnas/errors.hpp"
#include "dnas/io.hpp"
#include "dnas/latency.hpp"
#include "dnas/parallel.hpp"
#include "dnas/search_space.hpp"
#include "dnas/supernet.hpp"
#include "dnas/trainer.hpp"

namespace dnas::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfig = 2, kIo = 3, kNumeric = 4 };

/// "desk" and "full_scale" name the built-in spaces; anything else is a path.
inline SpaceConfig load_space_config(const std::string& spec) {
  if (spec == "desk") return SpaceConfig::desk_default();
  if (spec == "full_scale") return SpaceConfig::full_scale();
  if (!fs::exists(spec)) throw IoError("space config '" + spec + "' does not exist");
  return SpaceConfig::load(spec);
}

inline std::string iso_time(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string join_args(const std::vector<std::string>& args) {
  std::string s;
  for (const auto& a : args) {
    if (!s.empty()) s += ' ';
    s += a.find_first_of(" \t\"'") == std::string::npos ? a : "'" + a + "'";
  }
  return s;
}

struct Manifest {
  std::string command;
  std::string config_hash;
  uint64_t seed = 0;
  bool seed_from_entropy = false;
  std::string lut_path;
  std::string device_label;
  std::string output;
  std::chrono::system_clock::time_point started = std::chrono::system_clock::now();
  std::string command_line;
  json extra = json::object();

  json to_json() const {
    json j = {{"command", command},
              {"config_hash", config_hash},
              {"seed", seed},
              {"seed_source", seed_from_entropy ? "entropy" : "flag"},
              {"lut_path", lut_path.empty() ? json(nullptr) : json(lut_path)},
              {"device_label", device_label.empty() ? json(nullptr) : json(device_label)},
              {"output", output},
              {"started_utc", iso_time(started)},
              {"finished_utc", iso_time(std::chrono::system_clock::now())},
              {"command_line", command_line}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    return j;
  }
};

/// Refuses to mix two commands' artifacts in one directory.
inline void claim_dir(const fs::path& dir, const std::string& command) {
  const fs::path m = dir / "manifest.json";
  if (fs::exists(m)) {
    const json old = read_json_file(m);
    const std::string prev = old.value("command", "");
    if (prev != command) {
      throw ConfigError("'" + dir.string() + "' already holds a '" + prev +
                        "' manifest; pick another --out");
    }
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

inline uint64_t resolve_seed(const std::optional<uint64_t>& flag, Manifest& m) {
  if (flag) {
    m.seed = *flag;
  } else {
    std::random_device rd;
    m.seed = (static_cast<uint64_t>(rd()) << 32) ^ rd();
    m.seed_from_entropy = true;
  }
  return m.seed;
}

/// Kernel threads for compute commands; benchmarking commands pin to one.
inline void configure_threads(bool benchmarking) {
  if (benchmarking) {
    set_num_threads(1);
  } else {
    set_num_threads(threads_from_env(static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))));
  }
}

/// `--data synth` or a binary file. A "<file>.norm.json" sidecar, when present,
/// supplies the normalization.
struct LoadedData {
  Dataset data;
  std::optional<Normalization> norm;
  std::string source;
};

inline LoadedData load_data(const std::string& spec, const SearchSpace& space, int64_t synth_per_class,
                            uint64_t synth_seed) {
  LoadedData out;
  if (spec == "synth") {
    out.data = synth_dataset(space.num_classes, synth_per_class, space.config.input_resolution, synth_seed);
    out.source = "synth(per_class=" + std::to_string(synth_per_class) +
                 ",seed=" + std::to_string(synth_seed) + ")";
    return out;
  }
  if (!fs::exists(spec)) throw IoError("dataset '" + spec + "' does not exist");
  out.data = load_binary(spec, space.config.input_resolution, space.num_classes);
  const fs::path side = normalization_sidecar(spec);
  if (fs::exists(side)) out.norm = Normalization::load(side);
  out.source = spec;
  return out;
}

inline std::string fmt_us(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// bench-lut

struct BenchLutArgs {
  std::string space;
  std::string out;
  int repeats = 20;
  int warmup = 5;
  std::string device_label = "local-cpu";
  uint64_t seed = 0;
  bool quiet = false;
};

inline int cmd_bench_lut(const BenchLutArgs& a, const std::string& cmdline) {
  configure_threads(true);
  const SearchSpace space = build_space(load_space_config(a.space));
  Manifest m;
  m.command = "bench-lut";
  m.command_line = cmdline;
  const auto keys = distinct_keys(space);
  if (!a.quiet) std::cerr << "benchmarking " << keys.size() << " keys\n";
  LatencyTable t = build_lut(space, a.repeats, a.warmup, a.device_label, a.seed,
                             [&](size_t i, size_t n, const LatencyKey& k, double us) {
                               if (!a.quiet) {
                                 std::cerr << "  [" << i + 1 << "/" << n << "] " << k.str() << " "
                                           << fmt_us(us) << " us\n";
                               }
                             });
  t.save(a.out);
  m.config_hash = space.hash;
  m.seed = a.seed;
  m.lut_path = a.out;
  m.device_label = a.device_label;
  m.output = a.out;
  m.extra["repeats"] = a.repeats;
  m.extra["warmup"] = a.warmup;
  fs::path mp = a.out;
  mp += ".manifest.json";
  write_json_file(mp, m.to_json());

  const LatencyKey* slow = nullptr;
  const LatencyKey* fast = nullptr;
  for (const auto& [k, v] : t.entries) {
    if (k.kind == "skip") continue;
    if (!slow || v > t.entries.at(*slow)) slow = &k;
    if (!fast || v < t.entries.at(*fast)) fast = &k;
  }
  std::cout << "entries: " << t.size() << "\n";
  if (slow) std::cout << "slowest: " << slow->str() << " " << fmt_us(t.entries.at(*slow)) << " us\n";
  if (fast) std::cout << "fastest: " << fast->str() << " " << fmt_us(t.entries.at(*fast)) << " us\n";
  std::cout << "wrote " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// search

struct SearchArgs {
  std::string space;
  std::string lut;
  std::string data = "synth";
  std::string out;
  std::optional<uint64_t> seed;
  int64_t synth_per_class = 128;
  uint64_t synth_seed = 0;
  SearchHyperParams hyper;
  std::string loss_form = "multiplicative";
  bool no_augment = false;
  bool quiet = false;
};

inline int cmd_search(SearchArgs a, const std::string& cmdline) {
  configure_threads(false);
  const SearchSpace space = build_space(load_space_config(a.space));
  if (!fs::exists(a.lut)) throw IoError("latency table '" + a.lut + "' does not exist");
  const LatencyTable lut = LatencyTable::load(a.lut);
  if (!lut.space_hash.empty() && lut.space_hash != space.hash) {
    throw ConfigError("latency table was built for space " + lut.space_hash + " but --space hashes to " +
                      space.hash + "; rebuild it with bench-lut");
  }
  check_coverage(lut, space);
  a.hyper.loss_form = parse_loss_form(a.loss_form);
  if (a.no_augment) a.hyper.augment = false;
  a.hyper.validate();

  const fs::path dir = a.out;
  claim_dir(dir, "search");
  Manifest m;
  m.command = "search";
  m.command_line = cmdline;
  m.config_hash = space.hash;
  m.lut_path = fs::absolute(a.lut).string();
  m.device_label = lut.device_label;
  m.output = dir.string();
  const uint64_t seed = resolve_seed(a.seed, m);
  const LoadedData d = load_data(a.data, space, a.synth_per_class, a.synth_seed);
  m.extra["data"] = d.source;
  m.extra["hyper"] = a.hyper.to_json();
  write_json_file(dir / "manifest.json", m.to_json());

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot open '" + (dir / "metrics.jsonl").string() + "' for writing");
  auto result = run_search(space, lut, a.hyper, d.data, seed,
                           [&](const EpochMetrics& em) {
                             metrics << em.to_json().dump() << "\n";
                             metrics.flush();
                             if (!a.quiet) std::cerr << em.to_json().dump() << "\n";
                           },
                           d.norm);
  metrics.close();
  if (!metrics) throw IoError("write failed for metrics.jsonl");
  result.checkpoint.save(dir / "theta.json");

  const ArchDescriptor best = argmax_arch(result.state->supernet.theta(), space);
  m.extra["initial_entropy_nats"] = result.initial_entropy;
  m.extra["final_entropy_nats"] = result.final_entropy;
  m.extra["argmax_arch"] = best.to_json();
  m.extra["argmax_predicted_latency_us"] = arch_latency(result.state->model, best);
  write_json_file(dir / "manifest.json", m.to_json());
  std::cout << "entropy " << result.initial_entropy << " -> " << result.final_entropy << " nats\n";
  std::cout << "wrote " << (dir / "theta.json").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
  std::string theta;
  int count = 6;
  std::optional<uint64_t> seed;
  std::string out;
  std::string lut;  // defaults to the LUT recorded by the search manifest
};

/// The LUT path a search run recorded next to its theta.json.
inline std::string lut_from_run(const fs::path& theta_path) {
  const fs::path m = theta_path.parent_path() / "manifest.json";
  if (!fs::exists(m)) return {};
  const json j = read_json_file(m);
  return j.contains("lut_path") && j.at("lut_path").is_string() ? j.at("lut_path").get<std::string>()
                                                                : std::string();
}

inline int cmd_sample(const SampleArgs& a, const std::string& cmdline) {
  configure_threads(false);
  if (a.count < 1) throw ConfigError("--count must be >= 1");
  if (!fs::exists(a.theta)) throw IoError("theta checkpoint '" + a.theta + "' does not exist");
  const ThetaCheckpoint ck = ThetaCheckpoint::load(a.theta);
  const SearchSpace space = ck.build();
  if (space.hash != ck.space_hash) {
    throw ConfigError("theta checkpoint space hash " + ck.space_hash + " does not match its embedded space " +
                      space.hash);
  }
  ThetaParams theta = ck.params();
  if (theta.rows.size() != space.slots.size()) {
    throw ConfigError("theta has " + std::to_string(theta.rows.size()) + " rows, space has " +
                      std::to_string(space.slots.size()) + " layers");
  }
  for (size_t l = 0; l < space.slots.size(); ++l) {
    if (theta.rows[l].numel() != space.slots[l].candidate_count()) {
      throw ConfigError("theta row " + std::to_string(l) + " has the wrong candidate count");
    }
  }
  const std::string lut_path = a.lut.empty() ? lut_from_run(a.theta) : a.lut;
  if (lut_path.empty()) throw ConfigError("no --lut given and none recorded next to the checkpoint");
  if (!fs::exists(lut_path)) throw IoError("latency table '" + lut_path + "' does not exist");
  const LatencyTable lut = LatencyTable::load(lut_path);
  const LatencyModel model = LatencyModel::from(lut, space);

  const fs::path dir = a.out;
  claim_dir(dir, "sample");
  Manifest m;
  m.command = "sample";
  m.command_line = cmdline;
  m.config_hash = space.hash;
  m.lut_path = lut_path;
  m.device_label = lut.device_label;
  m.output = dir.string();
  const uint64_t seed = resolve_seed(a.seed, m);
  Rng rng = derive_rng(seed, 4);

  struct Row {
    std::string file;
    json doc;
    double lat;
  };
  std::vector<Row> rows;
  for (int i = 0; i < a.count; ++i) {
    const ArchDescriptor arch = sample_arch(theta, space, rng);
    require_valid_arch(space, arch);
    json doc = arch.to_json();
    const double lat = arch_latency(model, arch);
    doc["log_prob"] = arch_log_prob(theta, arch);
    doc["predicted_latency_us"] = lat;
    doc["flops"] = arch_flops(space, arch);
    doc["params"] = arch_param_count(space, arch);
    char name[32];
    std::snprintf(name, sizeof name, "arch_%02d.json", i);
    write_json_file(dir / name, doc);
    rows.push_back({name, doc, lat});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) { return x.lat < y.lat; });
  json index = json::array();
  for (const auto& r : rows) {
    index.push_back({{"file", r.file},
                     {"predicted_latency_us", r.lat},
                     {"log_prob", r.doc.at("log_prob")},
                     {"flops", r.doc.at("flops")},
                     {"params", r.doc.at("params")}});
  }
  write_json_file(dir / "index.json", index);
  m.extra["theta"] = a.theta;
  m.extra["count"] = a.count;
  write_json_file(dir / "manifest.json", m.to_json());
  for (const auto& r : rows) std::cout << r.file << " " << fmt_us(r.lat) << " us\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string space;
  std::string arch;
  std::string data = "synth";
  std::string out;
  std::string lut;
  int epochs = 40;
  std::optional<uint64_t> seed;
  int64_t synth_per_class = 128;
  uint64_t synth_seed = 0;
  double split_fraction = 0.8;
  RetrainParams params;
  bool no_augment = false;
  bool quiet = false;
};

inline int cmd_train(TrainArgs a, const std::string& cmdline) {
  configure_threads(false);
  if (a.epochs < 0) throw ConfigError("--epochs must be >= 0");
  if (!fs::exists(a.arch)) throw IoError("architecture '" + a.arch + "' does not exist");
  const ArchDescriptor arch = ArchDescriptor::load(a.arch);
  const SearchSpace space = build_space(load_space_config(a.space));
  require_valid_arch(space, arch);
  std::optional<LatencyTable> lut;
  if (!a.lut.empty()) {
    if (!fs::exists(a.lut)) throw IoError("latency table '" + a.lut + "' does not exist");
    lut = LatencyTable::load(a.lut);
  }
  if (a.no_augment) a.params.augment = false;
  const fs::path dir = a.out;
  claim_dir(dir, "train");
  Manifest m;
  m.command = "train";
  m.command_line = cmdline;
  m.config_hash = space.hash;
  m.output = dir.string();
  if (lut) {
    m.lut_path = a.lut;
    m.device_label = lut->device_label;
  }
  const uint64_t seed = resolve_seed(a.seed, m);
  const LoadedData d = load_data(a.data, space, a.synth_per_class, a.synth_seed);
  const SplitIndices parts = split(d.data, {a.split_fraction, seed});
  m.extra["data"] = d.source;
  m.extra["arch"] = arch.to_json();
  m.extra["epochs"] = a.epochs;
  write_json_file(dir / "manifest.json", m.to_json());

  const RetrainMetrics r = train_from_scratch(
      space, arch, d.data, parts.a, parts.b, a.epochs, a.params, seed, lut ? &*lut : nullptr, d.norm,
      [&](int e, double loss) {
        if (!a.quiet) std::cerr << "epoch " << e << " loss " << loss << "\n";
      });
  json metrics = r.to_json();
  metrics["epochs"] = a.epochs;
  metrics["epoch_loss"] = r.epoch_loss;
  write_json_file(dir / "metrics.json", metrics);
  write_json_file(dir / "manifest.json", m.to_json());
  std::cout << "top1 " << r.top1 << " params " << r.param_count << " flops " << r.flops
            << " measured_us " << fmt_us(r.measured_latency_us) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string lut;
  std::string space;
  std::string arch;
  bool csv = false;
};

struct PredictRow {
  std::string layer;
  std::string kind;
  int64_t ns = 0;
};

/// Per-operator breakdown in integer nanoseconds, so the printed rows add up
/// to the printed total exactly.
inline std::vector<PredictRow> predict_rows(const LatencyTable& lut, const SearchSpace& space,
                                            const ArchDescriptor& arch) {
  auto ns = [](double us) { return static_cast<int64_t>(std::llround(us * 1000.0)); };
  std::vector<PredictRow> rows;
  rows.push_back({"stem", kStemKind, ns(lut.lookup(stem_key(space)))});
  for (size_t l = 0; l < space.slots.size(); ++l) {
    const int c = arch.choices[l];
    rows.push_back({std::to_string(l), std::string(kind_name(static_cast<BlockKind>(c))),
                    ns(lut.lookup(block_key(space.slots[l], c)))});
  }
  rows.push_back({"head", kHeadConvKind, ns(lut.lookup(head_conv_key(space)))});
  rows.push_back({"classifier", kClassifierKind, ns(lut.lookup(classifier_key(space)))});
  return rows;
}

inline std::string fmt_ns(int64_t ns) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%lld.%03lld", static_cast<long long>(ns / 1000),
                static_cast<long long>(ns % 1000));
  return buf;
}

inline int cmd_predict(const PredictArgs& a, std::ostream& os) {
  for (const auto& p : {a.lut, a.arch}) {
    if (!fs::exists(p)) throw IoError("'" + p + "' does not exist");
  }
  const LatencyTable lut = LatencyTable::load(a.lut);
  const SearchSpace space = build_space(load_space_config(a.space));
  const ArchDescriptor arch = ArchDescriptor::load(a.arch);
  require_valid_arch(space, arch);
  check_coverage(lut, space);
  const auto rows = predict_rows(lut, space, arch);
  int64_t total = 0;
  for (const auto& r : rows) total += r.ns;
  if (a.csv) {
    os << "layer,kind,latency_us\n";
    for (const auto& r : rows) os << r.layer << ',' << r.kind << ',' << fmt_ns(r.ns) << '\n';
    os << "total,," << fmt_ns(total) << '\n';
  } else {
    os << "total_us " << fmt_ns(total) << "\n";
    char line[128];
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "  %-10s %-12s %12s\n", r.layer.c_str(), r.kind.c_str(),
                    fmt_ns(r.ns).c_str());
      os << line;
    }
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// report

inline constexpr const char* kReportHeader = "epoch,phase,tau,ce,expected_lat_us,entropy_nats";

inline std::string render_report(const std::vector<EpochMetrics>& rows) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << kReportHeader << "\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.phase << ',' << r.tau << ',';
    if (std::isfinite(r.ce)) os << r.ce;
    os << ',' << r.expected_lat_us << ',' << r.entropy_nats << '\n';
  }
  return os.str();
}

inline std::vector<EpochMetrics> read_metrics(const fs::path& file) {
  std::vector<EpochMetrics> rows;
  std::istringstream in(read_text_file(file));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(EpochMetrics::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(file.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

inline int cmd_report(const std::string& run, const std::string& out, std::ostream& os) {
  const fs::path file = fs::path(run) / "metrics.jsonl";
  if (!fs::exists(file)) throw IoError("'" + file.string() + "' does not exist");
  const std::string csv = render_report(read_metrics(file));
  if (out.empty()) {
    os << csv;
  } else {
    atomic_write_file(out, csv);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// synth-data, check-additivity

struct SynthArgs {
  std::string out;
  int64_t classes = 10;
  int64_t per_class = 128;
  int64_t resolution = 32;
  uint64_t seed = 0;
};

inline int cmd_synth(const SynthArgs& a) {
  const Dataset ds = synth_dataset(a.classes, a.per_class, a.resolution, a.seed);
  write_binary(a.out, ds);
  Normalization::compute(ds).save(normalization_sidecar(a.out));
  std::cout << "wrote " << ds.size() << " records to " << a.out << "\n";
  return kOk;
}

struct AdditivityArgs {
  std::string lut;
  std::string space;
  int archs = 10;
  double tolerance = 0.3;
  uint64_t seed = 0;
  int repeats = 30;
  int warmup = 5;
  std::string out;
};

inline int cmd_additivity(const AdditivityArgs& a) {
  configure_threads(true);
  if (!fs::exists(a.lut)) throw IoError("latency table '" + a.lut + "' does not exist");
  const LatencyTable lut = LatencyTable::load(a.lut);
  const SearchSpace space = build_space(load_space_config(a.space));
  Rng rng(a.seed);
  const AdditivityReport r = validate_additivity(lut, space, a.archs, a.tolerance, rng, a.repeats, a.warmup);
  if (!a.out.empty()) write_json_file(a.out, r.to_json());
  for (const auto& s : r.samples) {
    std::cout << s.arch_id << " predicted " << fmt_us(s.predicted_us) << " measured "
              << fmt_us(s.measured_us) << " rel_err " << s.rel_err << "\n";
  }
  std::cout << "mean_rel_err " << r.mean_rel_err << " max_rel_err " << r.max_rel_err
            << (r.within_tolerance ? " (within tolerance)" : " (outside tolerance)") << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

/// Parses argv and dispatches. Returns the process exit code.
inline int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  const std::string cmdline = join_args(args);

  CLI::App app{"Differentiable architecture search on a CPU budget"};
  app.require_subcommand(1);

  BenchLutArgs bl;
  auto* c_bench = app.add_subcommand("bench-lut", "Measure per-operator latency for a search space");
  c_bench->add_option("--space", bl.space, "Space config JSON (or 'desk', 'full_scale')")->required();
  c_bench->add_option("--out", bl.out, "Output LUT JSON")->required();
  c_bench->add_option("--repeats", bl.repeats, "Timed runs per operator (>= 5)");
  c_bench->add_option("--warmup", bl.warmup, "Untimed runs per operator (>= 1)");
  c_bench->add_option("--device-label", bl.device_label, "Free-form device name");
  c_bench->add_option("--seed", bl.seed, "Seed for benchmark inputs");
  c_bench->add_flag("--quiet", bl.quiet);

  SearchArgs sa;
  auto* c_search = app.add_subcommand("search", "Run the alternating weight/theta search");
  c_search->add_option("--space", sa.space)->required();
  c_search->add_option("--lut", sa.lut)->required();
  c_search->add_option("--data", sa.data, "Binary dataset path or 'synth'");
  c_search->add_option("--epochs", sa.hyper.epochs);
  c_search->add_option("--seed", sa.seed);
  c_search->add_option("--out", sa.out, "Run directory")->required();
  c_search->add_option("--alpha", sa.hyper.alpha);
  c_search->add_option("--beta", sa.hyper.beta);
  c_search->add_option("--tau0", sa.hyper.tau0);
  c_search->add_option("--postpone", sa.hyper.postpone, "Epochs before theta starts training");
  c_search->add_option("--batch", sa.hyper.batch_size);
  c_search->add_option("--theta-batch", sa.hyper.theta_batch_size, "0: same as --batch");
  c_search->add_option("--w-lr", sa.hyper.w_lr);
  c_search->add_option("--theta-lr", sa.hyper.theta_lr);
  c_search->add_option("--theta-wd", sa.hyper.theta_weight_decay);
  c_search->add_flag_callback(
      "--theta-l2-decay", [&sa] { sa.hyper.theta_decoupled_wd = false; },
      "Fold theta weight decay into the Adam gradient");
  c_search->add_option("--split", sa.hyper.split_fraction);
  c_search->add_option("--class-subset", sa.hyper.class_subset);
  c_search->add_option("--loss-form", sa.loss_form, "multiplicative | additive");
  c_search->add_flag("--latency-only", sa.hyper.latency_only, "Replace CE by 1 (ablation)");
  c_search->add_flag("--no-augment", sa.no_augment);
  c_search->add_option("--synth-per-class", sa.synth_per_class);
  c_search->add_option("--synth-seed", sa.synth_seed);
  c_search->add_flag("--quiet", sa.quiet);

  SampleArgs sm;
  auto* c_sample = app.add_subcommand("sample", "Draw architectures from a theta checkpoint");
  c_sample->add_option("--theta", sm.theta)->required();
  c_sample->add_option("--count", sm.count);
  c_sample->add_option("--seed", sm.seed);
  c_sample->add_option("--out", sm.out)->required();
  c_sample->add_option("--lut", sm.lut, "Overrides the LUT recorded by the search run");

  TrainArgs ta;
  auto* c_train = app.add_subcommand("train", "Train one architecture from scratch");
  c_train->add_option("--space", ta.space)->required();
  c_train->add_option("--arch", ta.arch)->required();
  c_train->add_option("--data", ta.data);
  c_train->add_option("--epochs", ta.epochs);
  c_train->add_option("--out", ta.out)->required();
  c_train->add_option("--lut", ta.lut, "Adds predicted_latency_us to the metrics");
  c_train->add_option("--seed", ta.seed);
  c_train->add_option("--lr", ta.params.lr);
  c_train->add_option("--batch", ta.params.batch_size);
  c_train->add_option("--split", ta.split_fraction);
  c_train->add_option("--synth-per-class", ta.synth_per_class);
  c_train->add_option("--synth-seed", ta.synth_seed);
  c_train->add_flag("--no-augment", ta.no_augment);
  c_train->add_flag("--quiet", ta.quiet);

  PredictArgs pa;
  auto* c_predict = app.add_subcommand("predict", "Table latency of an architecture");
  c_predict->add_option("--lut", pa.lut)->required();
  c_predict->add_option("--space", pa.space)->required();
  c_predict->add_option("--arch", pa.arch)->required();
  c_predict->add_flag("--csv", pa.csv);

  std::string run_dir, report_out;
  auto* c_report = app.add_subcommand("report", "Render a search run's metrics as CSV");
  c_report->add_option("--run", run_dir)->required();
  c_report->add_option("--out", report_out, "Write the CSV here instead of stdout");

  SynthArgs sy;
  auto* c_synth = app.add_subcommand("synth-data", "Write a synthetic dataset in the binary format");
  c_synth->add_option("--out", sy.out)->required();
  c_synth->add_option("--classes", sy.classes);
  c_synth->add_option("--per-class", sy.per_class);
  c_synth->add_option("--resolution", sy.resolution);
  c_synth->add_option("--seed", sy.seed);

  AdditivityArgs ad;
  auto* c_add = app.add_subcommand("check-additivity", "Compare LUT sums against measured networks");
  c_add->add_option("--lut", ad.lut)->required();
  c_add->add_option("--space", ad.space)->required();
  c_add->add_option("--archs", ad.archs);
  c_add->add_option("--tolerance", ad.tolerance);
  c_add->add_option("--seed", ad.seed);
  c_add->add_option("--repeats", ad.repeats);
  c_add->add_option("--warmup", ad.warmup);
  c_add->add_option("--out", ad.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (c_bench->parsed()) return cmd_bench_lut(bl, cmdline);
    if (c_search->parsed()) return cmd_search(sa, cmdline);
    if (c_sample->parsed()) return cmd_sample(sm, cmdline);
    if (c_train->parsed()) return cmd_train(ta, cmdline);
    if (c_predict->parsed()) return cmd_predict(pa, std::cout);
    if (c_report->parsed()) return cmd_report(run_dir, report_out, std::cout);
    if (c_synth->parsed()) return cmd_synth(sy);
    if (c_add->parsed()) return cmd_additivity(ad);
  } catch (const NumericError& e) {
    std::cerr << "error: numerical divergence: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kConfig;
}

}  // namespace dnas::cli
