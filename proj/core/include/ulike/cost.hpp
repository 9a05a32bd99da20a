#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "ulike/network.hpp"

namespace ulike {

/// Totals over a per-layer breakdown. flops = 2·macs.
struct CostReport {
  std::string label;
  GridShape input;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t peak_attention_entries = 0;
  CostRows rows;

  static CostReport from_rows(std::string label, const GridShape& input, CostRows rows);
};

template <typename T>
std::uint64_t count_params(Network<T>& net);

template <typename T>
CostReport count_flops(const Network<T>& net, const GridShape& input, std::string label = "");

/// Builds each config (32-bit) and reports it at `input`, in the given order.
struct CompareEntry {
  std::string label;
  NetworkConfig config;
};
std::vector<CostReport> compare_table(const std::vector<CompareEntry>& entries, const GridShape& input);

/// variant,params,macs,flops,peak_attention_entries
void write_compare_csv(std::ostream& os, const std::vector<CostReport>& reports);
/// Params (M) and FLOPs (G, counted as MACs) columns; rows whose peak
/// attention exceeds `attention_cap` are marked OOM.
void write_compare_markdown(std::ostream& os, const std::vector<CostReport>& reports, std::uint64_t attention_cap);
void write_breakdown_csv(std::ostream& os, const CostReport& report);

/// Applies '+'-separated preset tokens to a base config: variant names
/// (mamba_1d, mamba_3d, mamba_3dmt, trans_sra, trans_vanilla), scan
/// strategies (single, dual_fb, dual_rand, tri) and schemes (msv1..msv4).
NetworkConfig apply_preset(NetworkConfig base, std::string_view preset);

/// log(y2/y1) / log(x2/x1).
double fit_exponent(double x1, double y1, double x2, double y2);

}  // namespace ulike
