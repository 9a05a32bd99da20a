#include "ulike/network.hpp"

#include <iomanip>
#include <ostream>
#include <sstream>

#include "ulike/error.hpp"
#include "ulike/rng.hpp"

namespace ulike {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& values, const char* what) {
  for (E v : values) {
    if (to_string(v) == s) return v;
  }
  std::string msg = std::string("unknown ") + what + " '" + std::string(s) + "' (expected one of:";
  for (E v : values) msg += " " + std::string(to_string(v));
  throw ConfigError(msg + ")");
}

std::string grid_string(const GridShape& g) {
  return std::to_string(g.d) + "x" + std::to_string(g.h) + "x" + std::to_string(g.w);
}

constexpr std::array<Variant, 5> kVariants{Variant::Mamba1D, Variant::Mamba3D, Variant::Mamba3DMT, Variant::TransSRA,
                                           Variant::TransVanilla};
constexpr std::array<MultiScale, 5> kMultiScales{MultiScale::None, MultiScale::V1, MultiScale::V2, MultiScale::V3,
                                                 MultiScale::V4};
constexpr std::array<MultiScaleScope, 3> kScopes{MultiScaleScope::Auto, MultiScaleScope::Encoder,
                                                 MultiScaleScope::All};
constexpr std::array<ScanStrategy, 4> kStrategies{ScanStrategy::Single, ScanStrategy::DualFB, ScanStrategy::DualRand,
                                                  ScanStrategy::Tri};

MultiScaleKind block_kind(MultiScale m) {
  switch (m) {
    case MultiScale::V1: return MultiScaleKind::V1;
    case MultiScale::V2: return MultiScaleKind::V2;
    default: return MultiScaleKind::V3;
  }
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Mamba1D: return "mamba_1d";
    case Variant::Mamba3D: return "mamba_3d";
    case Variant::Mamba3DMT: return "mamba_3dmt";
    case Variant::TransSRA: return "trans_sra";
    case Variant::TransVanilla: return "trans_vanilla";
  }
  return "?";
}

std::string_view to_string(MultiScale m) {
  switch (m) {
    case MultiScale::None: return "none";
    case MultiScale::V1: return "msv1";
    case MultiScale::V2: return "msv2";
    case MultiScale::V3: return "msv3";
    case MultiScale::V4: return "msv4";
  }
  return "?";
}

std::string_view to_string(MultiScaleScope s) {
  switch (s) {
    case MultiScaleScope::Auto: return "auto";
    case MultiScaleScope::Encoder: return "encoder";
    case MultiScaleScope::All: return "all";
  }
  return "?";
}

std::string_view to_string(ScanStrategy s) {
  switch (s) {
    case ScanStrategy::Single: return "single";
    case ScanStrategy::DualFB: return "dual_fb";
    case ScanStrategy::DualRand: return "dual_rand";
    case ScanStrategy::Tri: return "tri";
  }
  return "?";
}

Variant parse_variant(std::string_view s) { return parse_enum(s, kVariants, "variant"); }
MultiScale parse_multiscale(std::string_view s) { return parse_enum(s, kMultiScales, "multiscale scheme"); }
MultiScaleScope parse_multiscale_scope(std::string_view s) { return parse_enum(s, kScopes, "multiscale scope"); }
ScanStrategy parse_scan_strategy(std::string_view s) { return parse_enum(s, kStrategies, "scan strategy"); }

std::vector<ScanKind> scan_directions(ScanStrategy s) {
  switch (s) {
    case ScanStrategy::Single: return {ScanKind::ForwardW};
    case ScanStrategy::DualFB: return {ScanKind::ForwardW, ScanKind::BackwardW};
    case ScanStrategy::DualRand: return {ScanKind::ForwardW, ScanKind::RandomPerm};
    case ScanStrategy::Tri: return {ScanKind::ForwardW, ScanKind::HFirst, ScanKind::DFirst};
  }
  return {};
}

// ---------------------------------------------------------------------------
// NetworkConfig

NetworkConfig NetworkConfig::resolved() const {
  NetworkConfig r = *this;
  if (r.variant == Variant::Mamba3DMT) {
    if (r.multiscale != MultiScale::None && r.multiscale != MultiScale::V4) {
      throw ConfigError("mamba_3dmt already uses msv4; got multiscale " + std::string(to_string(r.multiscale)));
    }
    if (r.scan != ScanStrategy::Single && r.scan != ScanStrategy::Tri) {
      throw ConfigError("mamba_3dmt already uses the tri scan; got " + std::string(to_string(r.scan)));
    }
    r.multiscale = MultiScale::V4;
    r.scan = ScanStrategy::Tri;
  }
  if (!r.is_mamba()) {
    if (r.multiscale == MultiScale::V4) throw ConfigError("MSv4 is Mamba-specific");
    if (r.scan != ScanStrategy::Single) throw ConfigError("scan strategies apply to Mamba layers only");
    if (r.variant == Variant::TransVanilla) r.sra_ratios = {1, 1, 1, 1};
  }
  if (r.multiscale == MultiScale::V4 && r.variant == Variant::Mamba1D) {
    throw ConfigError("msv4 replaces the 3D depthwise conv; use mamba_3d");
  }
  if (r.in_channels < 1 || r.num_classes < 1 || r.stem_channels < 1) {
    throw ConfigError("in_channels, num_classes and stem_channels must be ≥ 1");
  }
  for (int i = 0; i < kStages; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (r.stage_channels[k] < 1) throw ConfigError("stage channels must be ≥ 1");
    if (r.stage_strides[k] < 1) throw ConfigError("stage strides must be ≥ 1");
    if (r.sra_ratios[k] < 1) throw ConfigError("SRA reduction ratios must be ≥ 1");
    if (r.heads[k] < 1 || (!r.is_mamba() && r.stage_channels[k] % r.heads[k] != 0)) {
      throw ConfigError("stage " + std::to_string(i + 1) + ": channels " + std::to_string(r.stage_channels[k]) +
                        " not divisible by heads " + std::to_string(r.heads[k]));
    }
  }
  if (r.expansion < 1 || r.state_dim < 1 || r.ffn_expansion < 1) {
    throw ConfigError("expansion, state_dim and ffn_expansion must be ≥ 1");
  }
  return r;
}

Index NetworkConfig::downsampling() const {
  Index f = 1;
  for (Index s : stage_strides) f *= s;
  return f;
}

void NetworkConfig::check_input(const GridShape& g) const {
  const Index f = downsampling();
  if (g.d < 1 || g.h < 1 || g.w < 1 || g.d % f != 0 || g.h % f != 0 || g.w % f != 0) {
    throw ShapeError("input grid " + grid_string(g) + " must be a positive multiple of " + std::to_string(f) +
                     " along every axis");
  }
}

bool NetworkConfig::multiscale_in_encoder() const {
  return multiscale != MultiScale::None;
}

bool NetworkConfig::multiscale_in_decoder() const {
  if (multiscale == MultiScale::None) return false;
  if (multiscale_scope == MultiScaleScope::Auto) return multiscale == MultiScale::V4;
  return multiscale_scope == MultiScaleScope::All;
}

SeqLayerSpec stage_seq_spec(const NetworkConfig& r, int stage, std::uint64_t layer_index) {
  const auto k = static_cast<std::size_t>(stage);
  SeqLayerSpec s;
  if (r.is_mamba()) {
    s.kind = SeqKind::Mamba;
    s.mamba.expansion = r.expansion;
    s.mamba.dwconv = r.variant == Variant::Mamba1D ? DWConvKind::Conv1D : DWConvKind::Conv3D;
    s.mamba.state_dim = r.state_dim;
    s.mamba.directions = scan_directions(r.scan);
    s.mamba.gated = r.gated;
    s.mamba.discretization = r.discretization;
    s.mamba.algorithm = r.scan_algorithm;
    s.mamba.order_seed = derive_seed(r.seed, 0x5CA9000 + layer_index);
  } else {
    s.kind = SeqKind::Transformer;
    s.attention.heads = r.heads[k];
    s.attention.reduction = r.sra_ratios[k];
    s.attention.ffn_expansion = r.ffn_expansion;
    s.attention.reduction_kind = r.reduction_kind;
    s.attention.memory_cap = r.attention_cap;
  }
  return s;
}

// ---------------------------------------------------------------------------
// DecoderStage

template <typename T>
DecoderStage<T>::DecoderStage(Index in_channels, Index out_channels, Index stride, LayerPtr<T> h, Rng& rng)
    : out_channels_(out_channels),
      up_(ConvSpec::cubic(in_channels, out_channels, stride, stride, 0), rng),
      fuse_(ConvSpec::cubic(2 * out_channels, out_channels, 1), rng),
      norm_(NormSpec{out_channels, 1e-5}),
      h_(std::move(h)) {}

template <typename T>
VolumeShape DecoderStage<T>::output_shape(const VolumeShape& in) const {
  return up_.output_shape(in);
}

template <typename T>
Tensor<T> DecoderStage<T>::forward(const Tensor<T>& x, const Tensor<T>& skip) {
  const Tensor<T> up = up_.forward(x);
  if (up.shape() != skip.shape()) {
    throw ShapeError("decoder: upsampled " + to_string(up.shape()) + " does not match skip " + to_string(skip.shape()));
  }
  const std::vector<Tensor<T>> parts{up, skip};
  const Tensor<T> f = fuse_.forward(concat_channels<T>(parts));
  out_ = h_->forward(act_.forward(norm_.forward(f)));
  return out_;
}

template <typename T>
typename DecoderStage<T>::Grads DecoderStage<T>::backward(const Tensor<T>& dy) {
  const Tensor<T> dcat = fuse_.backward(norm_.backward(act_.backward(h_->backward(dy))));
  const std::vector<Index> counts{out_channels_, out_channels_};
  std::vector<Tensor<T>> parts = split_channels(dcat, counts);
  return {up_.backward(parts[0]), std::move(parts[1])};
}

template <typename T>
void DecoderStage<T>::collect(ParamList<T>& out, const std::string& prefix) {
  up_.collect(out, join_name(prefix, "up"));
  fuse_.collect(out, join_name(prefix, "fuse"));
  norm_.collect(out, join_name(prefix, "norm"));
  h_->collect(out, join_name(prefix, "h"));
}

template <typename T>
void DecoderStage<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  const VolumeShape up = up_.output_shape(in);
  VolumeShape cat = up;
  cat.c = 2 * up.c;
  up_.cost(in, join_name(prefix, "up"), rows);
  fuse_.cost(cat, join_name(prefix, "fuse"), rows);
  norm_.cost(up, join_name(prefix, "norm"), rows);
  act_.cost(up, join_name(prefix, "act"), rows);
  h_->cost(up, join_name(prefix, "h"), rows);
}

template <typename T>
void DecoderStage<T>::check_memory(const VolumeShape& in, std::uint64_t cap) const {
  h_->check_memory(up_.output_shape(in), cap);
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T>::Network(const NetworkConfig& cfg) : cfg_(cfg.resolved()) {
  Rng rng(cfg_.seed);
  std::uint64_t layer_index = 0;
  const auto& ch = cfg_.stage_channels;
  const auto& st = cfg_.stage_strides;
  const bool ms_blocks = cfg_.multiscale != MultiScale::None && cfg_.multiscale != MultiScale::V4;

  auto seq_spec = [&](int stage) {
    SeqLayerSpec s = stage_seq_spec(cfg_, stage, layer_index++);
    return s;
  };

  stem_ = make_conv_block<T>(cfg_.in_channels, cfg_.stem_channels, 3, 1, rng);
  Index prev = cfg_.stem_channels;
  for (int i = 0; i < kStages; ++i) {
    const auto k = static_cast<std::size_t>(i);
    SeqLayerSpec spec = seq_spec(i);
    if (cfg_.multiscale == MultiScale::V4 && cfg_.multiscale_in_encoder()) spec.mamba.multiscale = true;
    if (ms_blocks && cfg_.multiscale_in_encoder()) {
      enc_.push_back(std::make_unique<MultiScaleBlock<T>>(block_kind(cfg_.multiscale), prev, ch[k], st[k], spec, rng));
    } else {
      auto stage = std::make_unique<Sequence<T>>("encoder_stage");
      stage->add("f", make_conv_block<T>(prev, ch[k], 3, st[k], rng));
      stage->add("h", make_seq_layer<T>(spec, ch[k], rng));
      enc_.push_back(std::move(stage));
    }
    prev = ch[k];
  }
  for (int j = 0; j < kStages - 1; ++j) {
    const int t = kStages - 2 - j;  // encoder stage providing the skip
    const auto k = static_cast<std::size_t>(t);
    SeqLayerSpec spec = seq_spec(t);
    if (cfg_.multiscale == MultiScale::V4 && cfg_.multiscale_in_decoder()) spec.mamba.multiscale = true;
    LayerPtr<T> h;
    if (ms_blocks && cfg_.multiscale_in_decoder()) {
      h = std::make_unique<MultiScaleBlock<T>>(block_kind(cfg_.multiscale), ch[k], ch[k], 1, spec, rng);
    } else {
      h = make_seq_layer<T>(spec, ch[k], rng);
    }
    dec_.push_back(std::make_unique<DecoderStage<T>>(ch[k + 1], ch[k], st[k + 1], std::move(h), rng));
  }
  head_up_ = std::make_unique<TConv3dLayer<T>>(ConvSpec::cubic(ch[0], cfg_.stem_channels, st[0], st[0], 0), rng);
  head_out_ = std::make_unique<Conv3dLayer<T>>(ConvSpec::cubic(cfg_.stem_channels, cfg_.num_classes, 1), rng);
}

template <typename T>
Tensor<T> Network<T>::run(const Tensor<T>& x, std::optional<std::string>* nonfinite) {
  const VolumeShape vs = VolumeShape::of(x.shape());
  if (vs.c != cfg_.in_channels) {
    throw ShapeError("network expects " + std::to_string(cfg_.in_channels) + " input channels, got " + to_string(vs));
  }
  cfg_.check_input(GridShape::of(vs));
  check_memory(GridShape::of(vs));
  auto watch = [&](const Tensor<T>& t, const std::string& name) {
    if (nonfinite != nullptr && !nonfinite->has_value() && !all_finite(t)) *nonfinite = name;
  };
  has_forward_ = false;
  std::vector<Tensor<T>> skips;
  Tensor<T> h = stem_->forward(x);
  watch(h, "stem");
  for (int i = 0; i < kStages; ++i) {
    h = enc_[static_cast<std::size_t>(i)]->forward(h);
    watch(h, "ES" + std::to_string(i + 1));
    skips.push_back(h);
  }
  for (int j = 0; j < kStages - 1; ++j) {
    h = dec_[static_cast<std::size_t>(j)]->forward(h, skips[static_cast<std::size_t>(kStages - 2 - j)]);
    watch(h, "DS" + std::to_string(j + 1));
  }
  h = head_out_->forward(head_up_->forward(h));
  watch(h, "head");
  has_forward_ = true;
  return h;
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x) {
  return run(x, nullptr);
}

template <typename T>
std::optional<std::string> Network<T>::first_nonfinite_layer(const Tensor<T>& x) {
  std::optional<std::string> name;
  run(x, &name);
  return name;
}

template <typename T>
Tensor<T> Network<T>::forward_batch(const Tensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("forward_batch: expected B×C×D×H×W, got " + to_string(x.shape()));
  const Index b = x.extent(0);
  const Index per = x.size() / std::max<Index>(b, 1);
  Extents sample(x.shape().begin() + 1, x.shape().end());
  std::vector<T> out;
  Extents out_shape;
  for (Index i = 0; i < b; ++i) {
    Tensor<T> xi(sample, std::vector<T>(x.raw() + i * per, x.raw() + (i + 1) * per));
    Tensor<T> yi = forward(xi);
    if (out_shape.empty()) {
      out_shape = yi.shape();
      out.reserve(static_cast<std::size_t>(b * yi.size()));
    }
    out.insert(out.end(), yi.values().begin(), yi.values().end());
  }
  out_shape.insert(out_shape.begin(), b);
  return Tensor<T>(out_shape, std::move(out));
}

template <typename T>
Tensor<T> Network<T>::backward(const Tensor<T>& dlogits) {
  if (!has_forward_) throw StateError("network backward: no cached forward pass");
  Tensor<T> g = head_up_->backward(head_out_->backward(dlogits));
  std::array<Tensor<T>, kStages> dskip;
  for (int j = kStages - 2; j >= 0; --j) {
    typename DecoderStage<T>::Grads dg = dec_[static_cast<std::size_t>(j)]->backward(g);
    g = std::move(dg.dx);
    dskip[static_cast<std::size_t>(kStages - 2 - j)] = std::move(dg.dskip);
  }
  for (int i = kStages - 1; i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    if (i < kStages - 1) accumulate(g, dskip[k]);
    g = enc_[k]->backward(g);
  }
  return stem_->backward(g);
}

template <typename T>
ParamList<T> Network<T>::parameters() {
  ParamList<T> out;
  stem_->collect(out, "stem");
  for (int i = 0; i < kStages; ++i) enc_[static_cast<std::size_t>(i)]->collect(out, "ES" + std::to_string(i + 1));
  for (int j = 0; j < kStages - 1; ++j) dec_[static_cast<std::size_t>(j)]->collect(out, "DS" + std::to_string(j + 1));
  head_up_->collect(out, "head.up");
  head_out_->collect(out, "head.out");
  return out;
}

template <typename T>
Index Network<T>::parameter_count() {
  Index n = 0;
  for (const auto& p : parameters()) n += p.value->size();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : parameters()) p.grad->fill(T(0));
}

template <typename T>
CostRows Network<T>::cost(const GridShape& input) const {
  cfg_.check_input(input);
  CostRows rows;
  VolumeShape s{cfg_.in_channels, input.d, input.h, input.w};
  stem_->cost(s, "stem", rows);
  s = stem_->output_shape(s);
  for (int i = 0; i < kStages; ++i) {
    const auto& e = enc_[static_cast<std::size_t>(i)];
    e->cost(s, "ES" + std::to_string(i + 1), rows);
    s = e->output_shape(s);
  }
  for (int j = 0; j < kStages - 1; ++j) {
    const auto& d = dec_[static_cast<std::size_t>(j)];
    d->cost(s, "DS" + std::to_string(j + 1), rows);
    s = d->output_shape(s);
  }
  head_up_->cost(s, "head.up", rows);
  s = head_up_->output_shape(s);
  head_out_->cost(s, "head.out", rows);
  return rows;
}

template <typename T>
void Network<T>::check_memory(const GridShape& input) const {
  cfg_.check_input(input);
  VolumeShape s = stem_->output_shape({cfg_.in_channels, input.d, input.h, input.w});
  for (const auto& e : enc_) {
    e->check_memory(s, cfg_.attention_cap);
    s = e->output_shape(s);
  }
  for (const auto& d : dec_) {
    d->check_memory(s, cfg_.attention_cap);
    s = d->output_shape(s);
  }
}

template <typename T>
NamedTensors<T> Network<T>::state() {
  NamedTensors<T> out;
  for (const auto& p : parameters()) out.emplace_back(p.name, *p.value);
  return out;
}

template <typename T>
void Network<T>::load_state(const NamedTensors<T>& entries) {
  ParamList<T> params = parameters();
  if (entries.size() != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(entries.size()) + " tensors, network has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (entries[i].first != params[i].name || entries[i].second.shape() != params[i].value->shape()) {
      throw FormatError("checkpoint entry '" + entries[i].first + "' does not match parameter '" + params[i].name +
                        "'");
    }
    *params[i].value = entries[i].second;
  }
}

// ---------------------------------------------------------------------------
// Reports

std::string_view component_of(std::string_view row_name) {
  const auto dot = row_name.find('.');
  return dot == std::string_view::npos ? row_name : row_name.substr(0, dot);
}

std::string structure_text(const NetworkConfig& cfg, const CostRows& rows) {
  std::ostringstream os;
  int enc = 0, dec = 0;
  std::string last;
  for (const auto& r : rows) {
    const std::string comp(component_of(r.name));
    if (comp == last) continue;
    last = comp;
    if (comp.rfind("ES", 0) == 0) ++enc;
    if (comp.rfind("DS", 0) == 0) ++dec;
  }
  os << "variant " << to_string(cfg.variant) << ", multiscale " << to_string(cfg.multiscale) << ", scan "
     << to_string(cfg.scan) << "\n";
  os << "encoder stages " << enc << ", decoder stages " << dec << "\n";
  os << std::left << std::setw(28) << "layer" << std::setw(44) << "type" << std::setw(18) << "in" << std::setw(18)
     << "out" << std::right << std::setw(12) << "params" << "\n";
  std::uint64_t total = 0;
  for (const auto& r : rows) {
    os << std::left << std::setw(28) << r.name << std::setw(44) << r.type << std::setw(18) << to_string(r.in)
       << std::setw(18) << to_string(r.out) << std::right << std::setw(12) << r.params << "\n";
    total += r.params;
  }
  os << "total params " << total << "\n";
  os << "skips DS1<-ES3 DS2<-ES2 DS3<-ES1\n";
  return os.str();
}

void write_structure_csv(std::ostream& os, const CostRows& rows) {
  os << "layer,type,in,out,params,macs,elementwise,attention_entries\n";
  for (const auto& r : rows) {
    os << r.name << ',' << r.type << ',' << to_string(r.in) << ',' << to_string(r.out) << ',' << r.params << ','
       << r.macs << ',' << r.elementwise << ',' << r.attention_entries << '\n';
  }
}

template class DecoderStage<float>;
template class DecoderStage<double>;
template class Network<float>;
template class Network<double>;

}  // namespace ulike
