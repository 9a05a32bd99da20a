#include "ulike/cost.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "ulike/error.hpp"

namespace ulike {

CostReport CostReport::from_rows(std::string label, const GridShape& input, CostRows rows) {
  CostReport r;
  r.label = std::move(label);
  r.input = input;
  for (const auto& row : rows) {
    r.params += row.params;
    r.macs += row.macs;
    r.elementwise += row.elementwise;
    r.peak_attention_entries = std::max(r.peak_attention_entries, row.attention_entries);
  }
  r.flops = 2 * r.macs;
  r.rows = std::move(rows);
  return r;
}

template <typename T>
std::uint64_t count_params(Network<T>& net) {
  return static_cast<std::uint64_t>(net.parameter_count());
}

template <typename T>
CostReport count_flops(const Network<T>& net, const GridShape& input, std::string label) {
  if (label.empty()) label = std::string(to_string(net.config().variant));
  return CostReport::from_rows(std::move(label), input, net.cost(input));
}

std::vector<CostReport> compare_table(const std::vector<CompareEntry>& entries, const GridShape& input) {
  std::vector<CostReport> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    const Network<float> net(e.config);
    out.push_back(count_flops(net, input, e.label));
  }
  return out;
}

void write_compare_csv(std::ostream& os, const std::vector<CostReport>& reports) {
  os << "variant,params,macs,flops,peak_attention_entries\n";
  for (const auto& r : reports) {
    os << r.label << ',' << r.params << ',' << r.macs << ',' << r.flops << ',' << r.peak_attention_entries << '\n';
  }
}

void write_compare_markdown(std::ostream& os, const std::vector<CostReport>& reports, std::uint64_t attention_cap) {
  os << "| Variant | Params (M) | FLOPs (G, MACs) | FLOPs (G, 2·MACs) | Peak attention entries |\n";
  os << "|---|---:|---:|---:|---:|\n";
  const auto flags = os.flags();
  os << std::fixed << std::setprecision(2);
  for (const auto& r : reports) {
    os << "| " << r.label << " | " << static_cast<double>(r.params) / 1e6 << " | "
       << static_cast<double>(r.macs) / 1e9 << " | " << static_cast<double>(r.flops) / 1e9 << " | ";
    if (r.peak_attention_entries > attention_cap) {
      os << "OOM (" << r.peak_attention_entries << ")";
    } else {
      os << r.peak_attention_entries;
    }
    os << " |\n";
  }
  os.flags(flags);
}

void write_breakdown_csv(std::ostream& os, const CostReport& report) {
  os << "variant,layer,type,in,out,params,macs,elementwise,attention_entries\n";
  for (const auto& r : report.rows) {
    os << report.label << ',' << r.name << ',' << r.type << ',' << to_string(r.in) << ',' << to_string(r.out) << ','
       << r.params << ',' << r.macs << ',' << r.elementwise << ',' << r.attention_entries << '\n';
  }
}

NetworkConfig apply_preset(NetworkConfig base, std::string_view preset) {
  if (preset.empty()) throw ConfigError("empty preset");
  std::size_t start = 0;
  while (start <= preset.size()) {
    const std::size_t end = std::min(preset.find('+', start), preset.size());
    const std::string_view tok = preset.substr(start, end - start);
    if (tok.empty()) throw ConfigError("empty token in preset '" + std::string(preset) + "'");
    if (tok == "single" || tok == "dual_fb" || tok == "dual_rand" || tok == "tri") {
      base.scan = parse_scan_strategy(tok);
    } else if (tok.rfind("msv", 0) == 0 || tok == "none") {
      base.multiscale = parse_multiscale(tok);
    } else {
      base.variant = parse_variant(tok);
    }
    start = end + 1;
  }
  return base;
}

double fit_exponent(double x1, double y1, double x2, double y2) {
  return std::log(y2 / y1) / std::log(x2 / x1);
}

template std::uint64_t count_params(Network<float>&);
template std::uint64_t count_params(Network<double>&);
template CostReport count_flops(const Network<float>&, const GridShape&, std::string);
template CostReport count_flops(const Network<double>&, const GridShape&, std::string);

}  // namespace ulike
