#include <gtest/gtest.h>

#include "dnas/latency.hpp"
#include "dnas/supernet.hpp"
#include "support.hpp"

using namespace dnas;
using dnas::testing::TempDir;

namespace {

// Deterministic fake table: every key priced from its position, skip at 0.
LatencyTable fake_table(const SearchSpace& sp) {
  LatencyTable t;
  t.device_label = "fake";
  t.space_hash = sp.hash;
  t.repeats = 5;
  t.warmup = 1;
  double v = 1.25;
  for (const auto& k : distinct_keys(sp)) {
    t.entries[k] = k.kind == "skip" ? 0.0 : v;
    v = v * 1.7 + 0.5;
  }
  return t;
}

}  // namespace

TEST(Latency, DistinctKeysCoverFixedOpsAndCandidates) {
  const auto sp = build_space(dnas::testing::tiny_space_config());
  const auto keys = distinct_keys(sp);
  // stem, head_conv, classifier + 9 + 8 candidates
  EXPECT_EQ(keys.size(), 3u + 9u + 8u);
  EXPECT_EQ(keys[0].kind, kStemKind);
  const auto desk = build_space(SpaceConfig::desk_default());
  EXPECT_EQ(distinct_keys(desk).size(), 3u + 4 * 9 + 3 * 8);
  // repeated identical layers share keys
  auto cfg = dnas::testing::tiny_space_config();
  cfg.stages[2].n = 3;
  const auto rep = build_space(cfg);
  EXPECT_EQ(rep.num_layers(), 4u);
  EXPECT_EQ(distinct_keys(rep).size(), 3u + 9 + 8 + 9);
}

TEST(Latency, TableJsonRoundTripIsByteIdentical) {
  const auto sp = build_space(dnas::testing::tiny_space_config());
  TempDir dir;
  const auto t = fake_table(sp);
  t.save(dir / "a.json");
  const auto back = LatencyTable::load(dir / "a.json");
  back.save(dir / "b.json");
  EXPECT_EQ(read_text_file(dir / "a.json"), read_text_file(dir / "b.json"));
  EXPECT_EQ(back.entries, t.entries);
}

TEST(Latency, LoadRejectsBadEntries) {
  const auto sp = build_space(dnas::testing::tiny_space_config());
  json doc = fake_table(sp).to_json();
  json neg = doc;
  neg["entries"][0]["latency_us"] = -1.0;
  EXPECT_THROW(LatencyTable::from_json(neg), ConfigError);
  json missing = doc;
  missing["entries"][0].erase("c_in");
  EXPECT_THROW(LatencyTable::from_json(missing), ConfigError);
  json noent = doc;
  noent.erase("entries");
  EXPECT_THROW(LatencyTable::from_json(noent), ConfigError);
}

TEST(Latency, LookupGapNamesTheKey) {
  const auto sp = build_space(dnas::testing::tiny_space_config());
  auto t = fake_table(sp);
  const auto gone = block_key(sp.slots[1], 3);
  t.entries.erase(gone);
  try {
    check_coverage(t, sp);
    FAIL() << "expected LookupError";
  } catch (const LookupError& e) {
    EXPECT_NE(std::string(e.what()).find(gone.str()), std::string::npos);
  }
}

TEST(Latency, OneHotExpectedLatencyEqualsArchLatency) {
  const auto sp = build_space(SpaceConfig::desk_default());
  const auto t = fake_table(sp);
  const auto model = LatencyModel::from(t, sp);
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_arch(sp, rng);
    std::vector<Tensor> masks;
    for (size_t l = 0; l < sp.num_layers(); ++l) {
      Tensor m = Tensor::zeros({sp.slots[l].candidate_count()}, true);
      m.data()[static_cast<size_t>(a.choices[l])] = 1.0f;
      masks.push_back(m);
    }
    Tensor e = expected_latency(model, masks);
    EXPECT_EQ(static_cast<double>(e.item()), static_cast<double>(static_cast<float>(arch_latency(model, a))));
    std::vector<std::vector<double>> dense;
    for (const auto& m : masks) dense.emplace_back(m.data().begin(), m.data().end());
    EXPECT_EQ(expected_latency_value(model, dense), arch_latency(model, a));
  }
}

TEST(Latency, MaskGradientIsTheTableRow) {
  const auto sp = build_space(SpaceConfig::desk_default());
  const auto t = fake_table(sp);
  const auto model = LatencyModel::from(t, sp);
  std::vector<Tensor> masks;
  for (const auto& slot : sp.slots) {
    masks.push_back(Tensor({slot.candidate_count()}, 1.0f / static_cast<float>(slot.candidate_count()), true));
  }
  expected_latency(model, masks).backward();
  for (size_t l = 0; l < masks.size(); ++l) {
    for (size_t i = 0; i < model.per_layer[l].size(); ++i) {
      EXPECT_EQ(masks[l].grad()[i], static_cast<float>(model.per_layer[l][i]));
    }
  }
}

TEST(Latency, ArgminPicksCheapest) {
  const auto sp = build_space(dnas::testing::tiny_space_config());
  const auto model = LatencyModel::from(fake_table(sp), sp);
  const auto best = model.argmin();
  for (size_t l = 0; l < best.size(); ++l) {
    const auto& row = model.per_layer[l];
    EXPECT_EQ(row[static_cast<size_t>(best[l])], *std::min_element(row.begin(), row.end()));
  }
  EXPECT_EQ(best[0], static_cast<int>(BlockKind::skip));
}

TEST(Latency, BenchCallableValidatesAndMeasures) {
  EXPECT_THROW(bench_callable([] {}, 4, 1), ConfigError);
  EXPECT_THROW(bench_callable([] {}, 5, 0), ConfigError);
  volatile double sink = 0;
  const auto r = bench_callable(
      [&] {
        for (int i = 0; i < 1000; ++i) sink = sink + i;
      },
      5, 1);
  EXPECT_GT(r.median_us, 0.0);
  EXPECT_EQ(r.samples_us.size(), 5u);
}

TEST(Latency, BuildLutOnTinySpace) {
  const auto sp = build_space(dnas::testing::tiny_space_config());
  size_t calls = 0;
  const auto t = build_lut(sp, 5, 1, "test", 1, [&](size_t, size_t, const LatencyKey&, double) { ++calls; });
  EXPECT_EQ(t.size(), distinct_keys(sp).size());
  EXPECT_EQ(calls, t.size());
  EXPECT_EQ(t.space_hash, sp.hash);
  for (const auto& [k, v] : t.entries) {
    if (k.kind == "skip") {
      EXPECT_EQ(v, 0.0);
    } else {
      EXPECT_GT(v, 0.0);
    }
  }
  EXPECT_NO_THROW(check_coverage(t, sp));
  EXPECT_THROW(build_lut(sp, 4, 1, "x"), ConfigError);
  const std::string csv = t.to_csv();
  EXPECT_EQ(csv.rfind("kind,c_in,c_out,stride,h,w,latency_us\n", 0), 0u);
}

TEST(Latency, AdditivityReportShape) {
  const auto sp = build_space(dnas::testing::tiny_space_config());
  const auto t = build_lut(sp, 5, 1, "test");
  Rng rng(2);
  const auto r = validate_additivity(t, sp, 5, 10.0, rng, 5, 1);
  EXPECT_EQ(r.samples.size(), 5u);
  for (const auto& s : r.samples) {
    EXPECT_GT(s.measured_us, 0.0);
    EXPECT_GT(s.predicted_us, 0.0);
  }
  EXPECT_TRUE(r.to_json().contains("note"));
  EXPECT_THROW(validate_additivity(t, sp, 4, 0.3, rng), ConfigError);
}
