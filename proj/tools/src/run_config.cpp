#include "run_config.hpp"

#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>

#include "ulike/error.hpp"
#include "ulike/serialize.hpp"

namespace ulike::cli {

using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename V>
void read(const json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename V, std::size_t K>
void read_array(const json& obj, const char* key, std::array<V, K>& out, const std::string& where) {
  if (!obj.contains(key)) return;
  std::vector<V> v;
  read(obj, key, v, where);
  if (v.size() != K) throw ConfigError(where + "." + key + " needs " + std::to_string(K) + " entries");
  std::copy(v.begin(), v.end(), out.begin());
}

std::string read_string(const json& obj, const char* key, std::string fallback, const std::string& where) {
  read(obj, key, fallback, where);
  return fallback;
}

std::string_view discretization_name(Discretization d) { return d == Discretization::EulerB ? "euler" : "zoh"; }
Discretization parse_discretization(const std::string& s) {
  if (s == "euler") return Discretization::EulerB;
  if (s == "zoh") return Discretization::ZeroOrderHold;
  throw ConfigError("unknown discretization '" + s + "' (expected euler or zoh)");
}

std::string_view algorithm_name(ScanAlgorithm a) { return a == ScanAlgorithm::Sequential ? "sequential" : "parallel"; }
ScanAlgorithm parse_algorithm(const std::string& s) {
  if (s == "sequential") return ScanAlgorithm::Sequential;
  if (s == "parallel") return ScanAlgorithm::Parallel;
  throw ConfigError("unknown scan_algorithm '" + s + "' (expected sequential or parallel)");
}

std::string_view reduction_name(ReductionKind r) { return r == ReductionKind::StridedConv ? "strided_conv" : "avg_pool"; }
ReductionKind parse_reduction(const std::string& s) {
  if (s == "strided_conv") return ReductionKind::StridedConv;
  if (s == "avg_pool") return ReductionKind::AvgPool;
  throw ConfigError("unknown reduction '" + s + "' (expected strided_conv or avg_pool)");
}

std::string_view dwconv_name(const NetworkConfig& n) {
  if (!n.is_mamba()) return "none";
  return n.variant == Variant::Mamba1D ? "1d" : "3d";
}

void parse_network(const json& j, NetworkConfig& n) {
  const std::string w = "network";
  require_keys(j, w,
               {"variant", "in_channels", "classes", "stem_channels", "stage_channels", "stage_strides", "expansion",
                "state_dim", "multiscale", "multiscale_scope", "directions", "dwconv", "gated", "sra_ratios", "heads",
                "ffn_expansion", "reduction", "discretization", "scan_algorithm", "attention_cap"});
  n.variant = parse_variant(read_string(j, "variant", std::string(to_string(n.variant)), w));
  read(j, "in_channels", n.in_channels, w);
  read(j, "classes", n.num_classes, w);
  read(j, "stem_channels", n.stem_channels, w);
  read_array(j, "stage_channels", n.stage_channels, w);
  read_array(j, "stage_strides", n.stage_strides, w);
  read(j, "expansion", n.expansion, w);
  read(j, "state_dim", n.state_dim, w);
  n.multiscale = parse_multiscale(read_string(j, "multiscale", std::string(to_string(n.multiscale)), w));
  n.multiscale_scope =
      parse_multiscale_scope(read_string(j, "multiscale_scope", std::string(to_string(n.multiscale_scope)), w));
  n.scan = parse_scan_strategy(read_string(j, "directions", std::string(to_string(n.scan)), w));
  if (j.contains("dwconv")) {
    const std::string k = read_string(j, "dwconv", "", w);
    if (k != "1d" && k != "3d") throw ConfigError("network.dwconv must be 1d or 3d");
    if (n.variant == Variant::Mamba1D || n.variant == Variant::Mamba3D) {
      n.variant = k == "1d" ? Variant::Mamba1D : Variant::Mamba3D;
    } else if (n.variant == Variant::Mamba3DMT && k == "1d") {
      throw ConfigError("network.dwconv 1d conflicts with variant mamba_3dmt");
    } else if (!n.is_mamba()) {
      throw ConfigError("network.dwconv applies to Mamba variants only");
    }
  }
  read(j, "gated", n.gated, w);
  read_array(j, "sra_ratios", n.sra_ratios, w);
  read_array(j, "heads", n.heads, w);
  read(j, "ffn_expansion", n.ffn_expansion, w);
  n.reduction_kind = parse_reduction(read_string(j, "reduction", std::string(reduction_name(n.reduction_kind)), w));
  n.discretization =
      parse_discretization(read_string(j, "discretization", std::string(discretization_name(n.discretization)), w));
  n.scan_algorithm =
      parse_algorithm(read_string(j, "scan_algorithm", std::string(algorithm_name(n.scan_algorithm)), w));
  read(j, "attention_cap", n.attention_cap, w);
}

GridShape parse_grid(const json& j, const std::string& where) {
  std::vector<Index> v;
  try {
    v = j.get<std::vector<Index>>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  if (v.size() != 3) throw ConfigError(where + " needs three extents (D H W)");
  return {v[0], v[1], v[2]};
}

}  // namespace

void RunConfig::propagate_seed() {
  network.seed = seed;
  train.seed = seed;
  data.volume.seed = seed;
}

void RunConfig::validate() const {
  (void)network.resolved();
  train.validate();
  data.volume.validate();
  if (data.n_train < 1 || data.n_val < 1) throw ConfigError("data.n_train and data.n_val must be >= 1");
  if (cost.input.d < 1 || cost.input.h < 1 || cost.input.w < 1) throw ConfigError("cost.input_shape must be positive");
}

RunConfig parse_run_config(const json& j) {
  require_keys(j, "config", {"seed", "network", "cost", "train", "data"});
  RunConfig cfg;
  read(j, "seed", cfg.seed, "config");
  if (j.contains("network")) parse_network(j.at("network"), cfg.network);
  if (j.contains("cost")) {
    const json& c = j.at("cost");
    require_keys(c, "cost", {"input_shape", "variants"});
    if (c.contains("input_shape")) cfg.cost.input = parse_grid(c.at("input_shape"), "cost.input_shape");
    read(c, "variants", cfg.cost.variants, "cost");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    const std::string w = "train";
    require_keys(t, w, {"lr", "beta1", "beta2", "weight_decay", "epochs", "iterations", "batch_size"});
    read(t, "lr", cfg.train.lr, w);
    read(t, "beta1", cfg.train.beta1, w);
    read(t, "beta2", cfg.train.beta2, w);
    read(t, "weight_decay", cfg.train.weight_decay, w);
    read(t, "epochs", cfg.train.epochs, w);
    read(t, "iterations", cfg.train.iterations, w);
    read(t, "batch_size", cfg.train.batch_size, w);
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    const std::string w = "data";
    require_keys(d, w,
                 {"extent", "n_train", "n_val", "body_radius", "lesions", "lesion_radius", "class_means",
                  "noise_sigma"});
    auto& v = cfg.data.volume;
    read(d, "extent", v.extent, w);
    read(d, "n_train", cfg.data.n_train, w);
    read(d, "n_val", cfg.data.n_val, w);
    std::array<double, 2> body{v.body_radius_min, v.body_radius_max};
    std::array<Index, 2> lesions{v.lesions_min, v.lesions_max};
    std::array<double, 2> lesion_r{v.lesion_radius_min, v.lesion_radius_max};
    read_array(d, "body_radius", body, w);
    read_array(d, "lesions", lesions, w);
    read_array(d, "lesion_radius", lesion_r, w);
    v.body_radius_min = body[0];
    v.body_radius_max = body[1];
    v.lesions_min = lesions[0];
    v.lesions_max = lesions[1];
    v.lesion_radius_min = lesion_r[0];
    v.lesion_radius_max = lesion_r[1];
    read_array(d, "class_means", v.class_means, w);
    read(d, "noise_sigma", v.noise_sigma, w);
  }
  cfg.propagate_seed();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& cfg) {
  const NetworkConfig& n = cfg.network;
  const auto& v = cfg.data.volume;
  json j;
  j["seed"] = cfg.seed;
  j["network"] = {{"variant", to_string(n.variant)},
                  {"in_channels", n.in_channels},
                  {"classes", n.num_classes},
                  {"stem_channels", n.stem_channels},
                  {"stage_channels", n.stage_channels},
                  {"stage_strides", n.stage_strides},
                  {"expansion", n.expansion},
                  {"state_dim", n.state_dim},
                  {"multiscale", to_string(n.multiscale)},
                  {"multiscale_scope", to_string(n.multiscale_scope)},
                  {"directions", to_string(n.scan)},
                  {"dwconv", dwconv_name(n)},
                  {"gated", n.gated},
                  {"sra_ratios", n.sra_ratios},
                  {"heads", n.heads},
                  {"ffn_expansion", n.ffn_expansion},
                  {"reduction", reduction_name(n.reduction_kind)},
                  {"discretization", discretization_name(n.discretization)},
                  {"scan_algorithm", algorithm_name(n.scan_algorithm)},
                  {"attention_cap", n.attention_cap}};
  j["cost"] = {{"input_shape", {cfg.cost.input.d, cfg.cost.input.h, cfg.cost.input.w}},
               {"variants", cfg.cost.variants}};
  j["train"] = {{"lr", cfg.train.lr},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"weight_decay", cfg.train.weight_decay},
                {"epochs", cfg.train.epochs},
                {"iterations", cfg.train.iterations},
                {"batch_size", cfg.train.batch_size}};
  j["data"] = {{"extent", v.extent},
               {"n_train", cfg.data.n_train},
               {"n_val", cfg.data.n_val},
               {"body_radius", {v.body_radius_min, v.body_radius_max}},
               {"lesions", {v.lesions_min, v.lesions_max}},
               {"lesion_radius", {v.lesion_radius_min, v.lesion_radius_max}},
               {"class_means", v.class_means},
               {"noise_sigma", v.noise_sigma}};
  return j;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string s = to_json(cfg).dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

}  // namespace ulike::cli
