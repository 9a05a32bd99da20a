#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ulike/cost.hpp"
#include "ulike/instrument.hpp"

using namespace ulike;

namespace {

NetworkConfig small(Variant v) {
  NetworkConfig c;
  c.variant = v;
  c.stem_channels = 4;
  c.stage_channels = {8, 8, 16, 16};
  c.expansion = 2;
  c.state_dim = 4;
  c.heads = {1, 1, 2, 2};
  c.ffn_expansion = 2;
  return c;
}

std::uint64_t conv_macs(const CostReport& r) {
  std::uint64_t s = 0;
  for (const auto& row : r.rows)
    if (row.type == "conv3d" || row.type == "tconv3d") s += row.macs;
  return s;
}

}  // namespace

TEST(Cost, AnalyticMacsMatchInstrumentedForward) {
  for (Variant v : {Variant::Mamba1D, Variant::Mamba3D, Variant::TransSRA}) {
    NetworkConfig cfg = small(v);
    cfg.sra_ratios = {2, 2, 1, 1};
    Network<float> net(cfg);
    const CostReport rep = count_flops(net, {16, 16, 16});
    MacCounter mc;
    (void)net.forward(Tensor<float>({1, 16, 16, 16}));
    EXPECT_EQ(mc.macs(), rep.macs) << to_string(v);
    EXPECT_EQ(rep.flops, 2 * rep.macs);
  }
}

TEST(Cost, ScanDirectionIncrementsAreEqual) {
  NetworkConfig base = small(Variant::Mamba3D);
  std::vector<CompareEntry> entries;
  for (const char* p : {"single", "dual_fb", "dual_rand", "tri"}) entries.push_back({p, apply_preset(base, p)});
  const auto r = compare_table(entries, {32, 32, 32});
  EXPECT_EQ(r[1].params - r[0].params, r[3].params - r[1].params);
  EXPECT_EQ(r[1].params, r[2].params);
  EXPECT_EQ(r[1].flops - r[0].flops, r[3].flops - r[1].flops);
}

TEST(Cost, ConvFlopsScaleWithVolume) {
  Network<float> net(small(Variant::Mamba3D));
  const auto big = count_flops(net, {64, 64, 64}), half = count_flops(net, {32, 32, 32});
  EXPECT_EQ(conv_macs(big), 8 * conv_macs(half));
}

TEST(Cost, ExponentFit) {
  EXPECT_NEAR(fit_exponent(1.0, 3.0, 2.0, 12.0), 2.0, 1e-12);
  EXPECT_NEAR(fit_exponent(10.0, 5.0, 1000.0, 500.0), 1.0, 1e-12);
}

TEST(Cost, PresetsCompose) {
  const NetworkConfig c = apply_preset(NetworkConfig{}, "mamba_1d+tri+msv2");
  EXPECT_EQ(c.variant, Variant::Mamba1D);
  EXPECT_EQ(c.scan, ScanStrategy::Tri);
  EXPECT_EQ(c.multiscale, MultiScale::V2);
  EXPECT_THROW(apply_preset(NetworkConfig{}, "mamba_3d+bogus"), ConfigError);
}

TEST(Cost, EmittersAndOomMarking) {
  CostReport a;
  a.label = "mamba_3d";
  a.params = 2500000;
  a.macs = 46000000000ull;
  a.flops = 2 * a.macs;
  CostReport b;
  b.label = "trans_vanilla";
  b.params = 100;
  b.peak_attention_entries = 5000000000000ull;
  std::ostringstream csv;
  write_compare_csv(csv, {a, b});
  EXPECT_EQ(csv.str(),
            "variant,params,macs,flops,peak_attention_entries\n"
            "mamba_3d,2500000,46000000000,92000000000,0\n"
            "trans_vanilla,100,0,0,5000000000000\n");
  std::ostringstream md;
  write_compare_markdown(md, {a, b}, 1ull << 30);
  std::istringstream lines(md.str());
  std::string header, rule, row_a, row_b;
  std::getline(lines, header);
  std::getline(lines, rule);
  std::getline(lines, row_a);
  std::getline(lines, row_b);
  EXPECT_EQ(row_a, "| mamba_3d | 2.50 | 46.00 | 92.00 | 0 |");
  EXPECT_EQ(row_b.find("OOM"), row_b.rfind("| ") + 2);
}

TEST(Cost, VanillaAttentionEntriesAreQuadratic) {
  NetworkConfig c = small(Variant::TransVanilla);
  Network<float> net(c);
  const auto r1 = count_flops(net, {32, 32, 32}), r2 = count_flops(net, {64, 64, 64});
  // Peak is the first stage at half resolution, one head: L² entries.
  const double l1 = 16.0 * 16 * 16;
  EXPECT_EQ(r1.peak_attention_entries, static_cast<std::uint64_t>(l1 * l1));
  EXPECT_EQ(r2.peak_attention_entries, 64 * r1.peak_attention_entries);
}
