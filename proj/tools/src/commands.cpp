#include "commands.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "run_config.hpp"
#include "ulike/cost.hpp"
#include "ulike/error.hpp"
#include "ulike/gradcheck.hpp"
#include "ulike/instrument.hpp"
#include "ulike/metrics.hpp"
#include "ulike/scan_order.hpp"
#include "ulike/serialize.hpp"
#include "ulike/ssm.hpp"
#include "ulike/trainer.hpp"

namespace ulike::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::string out_dir;
  bool force = false;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c, bool with_config = true) {
  if (with_config) sub->add_option("-c,--config", c.config_path, "JSON run configuration");
  sub->add_option("--out", c.out_dir, "output directory (default $ULIKE_OUT/<config hash> or runs/<config hash>)");
  sub->add_flag("--force", c.force, "overwrite existing artifacts");
  sub->add_option("--seed", c.seed, "override the configuration seed");
}

RunConfig load(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.propagate_seed();
  }
  return cfg;
}

void echo(std::ostream& out, const std::string& command, const json& resolved) {
  out << "# " << command << " resolved config\n" << resolved.dump(2) << "\n# end config\n";
}

fs::path output_dir(const Common& c, const RunConfig& cfg) {
  if (!c.out_dir.empty()) return c.out_dir;
  const char* root = std::getenv("ULIKE_OUT");
  return fs::path(root != nullptr && *root != '\0' ? root : "runs") / config_hash(cfg);
}

/// Creates `dir` and refuses to clobber any of `files` unless forced.
void prepare(const fs::path& dir, const std::vector<std::string>& files, bool force) {
  fs::create_directories(dir);
  if (force) return;
  for (const auto& f : files) {
    if (fs::exists(dir / f)) {
      throw ConfigError("refusing to overwrite " + (dir / f).string() + " (pass --force)");
    }
  }
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_describe(const Common& c, const std::vector<Index>& shape, std::ostream& out) {
  RunConfig cfg = load(c);
  if (!shape.empty()) cfg.cost.input = {shape[0], shape[1], shape[2]};
  cfg.validate();
  echo(out, "describe", to_json(cfg));
  const NetworkConfig resolved = cfg.network.resolved();
  resolved.check_input(cfg.cost.input);
  Network<float> net(resolved);
  out << structure_text(resolved, net.cost(cfg.cost.input));
  return kExitOk;
}

int cmd_count(const Common& c, const std::vector<Index>& shape, const std::string& emit,
              const std::vector<std::string>& variants, std::ostream& out) {
  RunConfig cfg = load(c);
  if (!shape.empty()) cfg.cost.input = {shape[0], shape[1], shape[2]};
  if (!variants.empty()) cfg.cost.variants = variants;
  if (cfg.cost.variants.empty()) throw ConfigError("count: no variants listed");
  if (emit != "csv" && emit != "md") throw ConfigError("count: --emit must be csv or md");
  cfg.validate();
  echo(out, "count", to_json(cfg));

  std::vector<CompareEntry> entries;
  for (const auto& v : cfg.cost.variants) entries.push_back({v, apply_preset(cfg.network, v)});
  const std::vector<CostReport> reports = compare_table(entries, cfg.cost.input);

  const fs::path dir = output_dir(c, cfg);
  std::vector<std::string> files{"count.csv", "count.md"};
  for (const auto& r : reports) files.push_back("breakdown_" + r.label + ".csv");
  prepare(dir, files, c.force);
  {
    auto os = open_out(dir / "count.csv");
    write_compare_csv(os, reports);
  }
  {
    auto os = open_out(dir / "count.md");
    write_compare_markdown(os, reports, cfg.network.attention_cap);
  }
  for (const auto& r : reports) {
    auto os = open_out(dir / ("breakdown_" + r.label + ".csv"));
    write_breakdown_csv(os, r);
  }
  if (emit == "csv") {
    write_compare_csv(out, reports);
  } else {
    write_compare_markdown(out, reports, cfg.network.attention_cap);
  }
  out << "# artifacts " << dir.string() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const std::vector<std::string>& components, bool inject_bug, std::uint64_t seed,
                  std::ostream& out) {
  std::vector<std::string> names;
  for (const auto& comp : components) {
    if (comp == "all") {
      for (auto& n : gradcheck_components()) names.push_back(n);
    } else if (!comp.empty()) {
      names.push_back(comp);
    }
  }
  if (names.empty()) throw ConfigError("gradcheck: empty component list");
  for (const auto& n : names) (void)make_probe(n, seed);  // rejects unknown names before any work

  GradCheckOptions opts;
  opts.seed = seed;
  opts.inject_bug = inject_bug;
  echo(out, "gradcheck",
       {{"components", names}, {"seed", seed}, {"inject_bug", inject_bug}, {"step", opts.step},
        {"samples_per_group", opts.samples_per_group}, {"floor", opts.floor}});
  out << "component,groups,max_rel_error,tolerance,status\n";
  std::vector<std::string> failed;
  for (const auto& n : names) {
    const GradCheckReport r = grad_check(n, opts);
    std::ostringstream err;
    err << std::setprecision(3) << std::scientific << r.max_error();
    std::ostringstream tol;
    tol << std::setprecision(0) << std::scientific << r.tolerance;
    out << n << ',' << r.groups.size() << ',' << err.str() << ',' << tol.str() << ',' << (r.pass() ? "pass" : "FAIL")
        << '\n';
    if (!r.pass()) {
      failed.push_back(n);
      for (const auto& g : r.groups) {
        if (!(g.max_rel_error <= r.tolerance)) out << "  worst group " << g.name << " rel " << g.max_rel_error << '\n';
      }
    }
  }
  if (!failed.empty()) {
    std::string list;
    for (const auto& f : failed) list += (list.empty() ? "" : ", ") + f;
    throw CheckFailed("gradient check failed: " + list);
  }
  out << "all " << names.size() << " components pass\n";
  return kExitOk;
}

template <typename T>
struct ScanBench {
  double seq_seconds = 0, par_seconds = 0, rel_diff = 0;
  bool bit_exact = false;
  std::uint64_t combines = 0, combines_2l = 0, macs = 0;
};

template <typename T>
ScanBench<T> bench_scan(Index l, Index n, Index c, std::uint64_t seed, int repeat) {
  Rng rng(seed);
  const SSMParams<T> p = SSMParams<T>::init(c, n, rng);
  auto input = [&](Index len) {
    Tensor<T> x({len, c});
    for (T& v : x.data()) v = static_cast<T>(rng.normal());
    return x;
  };
  const Tensor<T> x = input(l);
  ScanBench<T> b;
  Tensor<T> ys, yp;
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  {
    MacCounter counter;
    for (int i = 0; i < repeat; ++i) ys = selective_scan_seq(x, p);
    b.macs = counter.macs() / static_cast<std::uint64_t>(repeat);
  }
  auto t1 = clock::now();
  for (int i = 0; i < repeat; ++i) {
    ScanWork w;
    yp = selective_scan_par(x, p, Discretization::EulerB, &w);
    b.combines = w.combines;
  }
  auto t2 = clock::now();
  b.seq_seconds = std::chrono::duration<double>(t1 - t0).count() / repeat;
  b.par_seconds = std::chrono::duration<double>(t2 - t1).count() / repeat;
  b.rel_diff = max_relative_diff(yp, ys);
  b.bit_exact = ys.data().size() == yp.data().size() && std::equal(ys.data().begin(), ys.data().end(), yp.data().begin());
  ScanWork w2;
  (void)selective_scan_par(input(2 * l), p, Discretization::EulerB, &w2);
  b.combines_2l = w2.combines;
  return b;
}

int cmd_bench_scan(Index l, Index n, Index c, const std::string& mode, const std::string& precision,
                   std::uint64_t seed, int repeat, std::ostream& out) {
  if (l < 1 || n < 1 || c < 1) throw ConfigError("bench-scan: --L, --N and --C must be >= 1");
  if (mode != "seq" && mode != "par" && mode != "both") throw ConfigError("bench-scan: --mode must be seq, par or both");
  if (precision != "f32" && precision != "f64") throw ConfigError("bench-scan: --precision must be f32 or f64");
  if (repeat < 1) throw ConfigError("bench-scan: --repeat must be >= 1");
  echo(out, "bench-scan",
       {{"L", l}, {"N", n}, {"C", c}, {"mode", mode}, {"precision", precision}, {"seed", seed}, {"repeat", repeat}});
  const bool f32 = precision == "f32";
  const double tol = f32 ? 1e-5 : 1e-10;
  auto report = [&](const auto& b) {
    out << "mode,seconds\n";
    if (mode != "par") out << "seq," << b.seq_seconds << '\n';
    if (mode != "seq") out << "par," << b.par_seconds << '\n';
    out << "max_rel_diff " << b.rel_diff << " (tolerance " << tol << ")\n";
    out << "bit_exact " << (b.bit_exact ? "yes" : "no") << '\n';
    out << "scan_macs " << b.macs << '\n';
    const double ratio = b.combines == 0 ? 0.0 : double(b.combines_2l) / double(b.combines);
    out << "combines L=" << l << ' ' << b.combines << ", 2L=" << 2 * l << ' ' << b.combines_2l << ", ratio "
        << fixed(ratio, 4) << '\n';
    if (!(b.rel_diff <= tol)) throw CheckFailed("parallel scan differs from the sequential scan");
    if (l == 1 && !b.bit_exact) throw CheckFailed("L=1 scans are not bit-identical");
  };
  if (f32) {
    report(bench_scan<float>(l, n, c, seed, repeat));
  } else {
    report(bench_scan<double>(l, n, c, seed, repeat));
  }
  return kExitOk;
}

void print_dice(std::ostream& out, const DiceReport& d) {
  out << "class,dice\n";
  for (std::size_t k = 0; k < d.per_class.size(); ++k) out << k << ',' << fixed(d.per_class[k], 6) << '\n';
  out << "macro_dice " << fixed(d.macro, 6) << '\n';
}

int cmd_train(const Common& c, std::optional<Index> epochs, std::optional<double> lr, std::ostream& out) {
  RunConfig cfg = load(c);
  if (epochs) cfg.train.epochs = *epochs;
  if (lr) cfg.train.lr = *lr;
  cfg.validate();
  echo(out, "train", to_json(cfg));
  const NetworkConfig resolved = cfg.network.resolved();
  const Index e = cfg.data.volume.extent;
  const GridShape grid{e, e, e};
  resolved.check_input(grid);
  Network<float> net(resolved);
  net.check_memory(grid);

  const fs::path dir = output_dir(c, cfg);
  prepare(dir, {"config.json", "train_log.csv", "timing.csv", "checkpoint.bin"}, c.force);
  {
    auto os = open_out(dir / "config.json");
    os << to_json(cfg).dump(2) << '\n';
  }
  const DatasetSplit split = gen_split(cfg.data.volume, cfg.data.n_train, cfg.data.n_val);
  out << "epoch,loss,val_dice_macro\n";
  const auto log = train(net, split.train, split.val, cfg.train, [&](const EpochLog& ep) {
    out << ep.epoch << ',' << fixed(ep.loss, 6) << ',' << fixed(ep.val_dice_macro, 6) << std::endl;
  });
  {
    auto os = open_out(dir / "train_log.csv");
    write_train_log(os, log);
  }
  {
    auto os = open_out(dir / "timing.csv");
    write_timing_log(os, log);
  }
  save_network(net, (dir / "checkpoint.bin").string());
  out << "checkpoint_hash " << hex64(hash_file((dir / "checkpoint.bin").string())) << '\n';
  std::vector<double> losses;
  for (const auto& ep : log) losses.push_back(ep.loss);
  out << "smoothed_loss_non_increasing " << (non_increasing(smoothed(losses, 5)) ? "yes" : "no") << '\n';
  print_dice(out, log.empty() ? DiceReport{} : DiceReport{log.back().val_dice, log.back().val_dice_macro});
  out << "# artifacts " << dir.string() << '\n';
  return kExitOk;
}

std::vector<std::int32_t> load_labels(const std::string& path, Index num_classes) {
  const Tensor<float> t = load_tensor<float>(path);
  std::vector<std::int32_t> labels;
  labels.reserve(static_cast<std::size_t>(t.size()));
  for (float v : t.data()) {
    const auto k = static_cast<std::int32_t>(v);
    if (static_cast<float>(k) != v || k < 0 || k >= num_classes) {
      throw FormatError("label file '" + path + "' holds a value outside 0.." + std::to_string(num_classes - 1));
    }
    labels.push_back(k);
  }
  return labels;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& pred, const std::string& truth,
             std::ostream& out) {
  RunConfig cfg = load(c);
  cfg.validate();
  echo(out, "eval", to_json(cfg));
  const Index k = cfg.network.num_classes;
  if (!pred.empty() || !truth.empty()) {
    if (pred.empty() || truth.empty()) throw ConfigError("eval: --pred and --truth go together");
    const auto p = load_labels(pred, k);
    const auto t = load_labels(truth, k);
    if (p.size() != t.size()) throw ShapeError("eval: prediction and truth label maps differ in size");
    print_dice(out, dice_score(p, t, k));
    return kExitOk;
  }
  const NetworkConfig resolved = cfg.network.resolved();
  Network<float> net(resolved);
  const std::string path = checkpoint.empty() ? (output_dir(c, cfg) / "checkpoint.bin").string() : checkpoint;
  load_network(net, path);
  const Dataset val = gen_dataset(cfg.data.volume, cfg.data.n_val, static_cast<std::uint64_t>(cfg.data.n_train));
  print_dice(out, evaluate(net, val));
  return kExitOk;
}

int cmd_gen_data(const Common& c, std::optional<Index> n, std::ostream& out) {
  RunConfig cfg = load(c);
  cfg.validate();
  echo(out, "gen-data", to_json(cfg));
  const Index count = n ? *n : cfg.data.n_train + cfg.data.n_val;
  if (count < 1) throw ConfigError("gen-data: --n must be >= 1");
  const fs::path dir = output_dir(c, cfg) / "data";
  prepare(dir, {"manifest.csv"}, c.force);
  const Dataset data = gen_dataset(cfg.data.volume, count);
  auto manifest = open_out(dir / "manifest.csv");
  manifest << "index,split,image,labels,background,body,lesion\n";
  for (Index i = 0; i < count; ++i) {
    const Sample& s = data[static_cast<std::size_t>(i)];
    std::ostringstream stem;
    stem << "sample_" << std::setw(4) << std::setfill('0') << i;
    Tensor<float> labels(s.image.shape());
    for (Index v = 0; v < labels.size(); ++v) labels[v] = static_cast<float>(s.labels.labels[static_cast<std::size_t>(v)]);
    save_tensor((dir / (stem.str() + "_image.tensor")).string(), s.image);
    save_tensor((dir / (stem.str() + "_labels.tensor")).string(), labels);
    const auto counts = class_voxel_counts(Dataset{s}, SyntheticVolumeSpec::kClasses);
    manifest << i << ',' << (i < cfg.data.n_train ? "train" : "val") << ',' << stem.str() << "_image.tensor,"
             << stem.str() << "_labels.tensor," << counts[0] << ',' << counts[1] << ',' << counts[2] << '\n';
  }
  const auto totals = class_voxel_counts(data, SyntheticVolumeSpec::kClasses);
  out << "samples " << count << "\nvoxels background " << totals[0] << " body " << totals[1] << " lesion "
      << totals[2] << "\n# artifacts " << dir.string() << '\n';
  return kExitOk;
}

int cmd_order_export(const std::string& kind, const std::vector<Index>& shape, std::uint64_t seed,
                     const std::string& file, std::ostream& out) {
  if (shape.size() != 3) throw ConfigError("order export: --shape needs D H W");
  const ScanKind k = parse_scan_kind(kind);
  const GridShape g{shape[0], shape[1], shape[2]};
  const ScanOrder order = ScanOrder::make(k, g, seed);
  echo(out, "order export", {{"kind", to_string(k)}, {"shape", shape}, {"seed", seed}, {"file", file}});
  if (file.empty()) {
    order.write_csv(out);
  } else {
    auto os = open_out(file);
    order.write_csv(os);
    out << "# wrote " << order.length() << " positions to " << file << '\n';
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"U-shaped volumetric segmentation networks: structure, cost, gradient checks, scans and training"};
  app.name("ulike");
  app.require_subcommand(1);

  Common common;
  std::vector<Index> shape;
  std::string emit = "csv";
  std::vector<std::string> variants;

  auto* describe = app.add_subcommand("describe", "print the layer table of the configured network");
  add_common(describe, common);
  describe->add_option("--input-shape", shape, "D H W")->expected(3);

  auto* count = app.add_subcommand("count", "params and FLOPs across the configured variants");
  add_common(count, common);
  count->add_option("--input-shape", shape, "D H W")->expected(3);
  count->add_option("--emit", emit, "csv or md");
  count->add_option("--variants", variants, "preset list overriding cost.variants")->delimiter(',');

  std::vector<std::string> components{"all"};
  bool inject_bug = false;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--component", components, "component names or 'all'")->delimiter(',');
  gradcheck->add_flag("--inject-bug", inject_bug, "flip the sign of one analytic gradient (checker self-test)");
  gradcheck->add_option("--seed", gc_seed, "sampling seed");
  bool list_components = false;
  gradcheck->add_flag("--list", list_components, "list component names");

  Index bl = 1024, bn = 16, bc = 8;
  std::string mode = "both", precision = "f32";
  std::uint64_t b_seed = 0;
  int repeat = 1;
  auto* bench = app.add_subcommand("bench-scan", "time the sequential and parallel selective scans");
  bench->add_option("--L", bl, "sequence length");
  bench->add_option("--N", bn, "state dimension");
  bench->add_option("--C", bc, "channels");
  bench->add_option("--mode", mode, "seq, par or both");
  bench->add_option("--precision", precision, "f32 or f64");
  bench->add_option("--seed", b_seed, "input seed");
  bench->add_option("--repeat", repeat, "timed repetitions");

  std::optional<Index> epochs;
  std::optional<double> lr;
  auto* train_cmd = app.add_subcommand("train", "train on the synthetic volume set");
  add_common(train_cmd, common);
  train_cmd->add_option("--epochs", epochs, "override train.epochs");
  train_cmd->add_option("--lr", lr, "override train.lr");

  std::string checkpoint, pred, truth;
  auto* eval = app.add_subcommand("eval", "Dice of a checkpoint on the validation split, or of two label maps");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.bin)");
  eval->add_option("--pred", pred, "predicted label tensor file");
  eval->add_option("--truth", truth, "ground-truth label tensor file");

  std::optional<Index> n_samples;
  auto* gen = app.add_subcommand("gen-data", "write synthetic samples as tensor files");
  add_common(gen, common);
  gen->add_option("--n", n_samples, "number of samples (default n_train + n_val)");

  auto* order = app.add_subcommand("order", "scan order utilities");
  order->require_subcommand(1);
  std::string kind = "forward_w", order_file;
  std::vector<Index> order_shape;
  std::uint64_t order_seed = 0;
  auto* order_export = order->add_subcommand("export", "write the position → voxel index table as CSV");
  order_export->add_option("--kind", kind, "forward_w, backward_w, h_first, d_first, random");
  order_export->add_option("--shape", order_shape, "D H W")->expected(3)->required();
  order_export->add_option("--seed", order_seed, "seed for random orders");
  order_export->add_option("--file", order_file, "output CSV (default stdout)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*describe) return cmd_describe(common, shape, out);
    if (*count) return cmd_count(common, shape, emit, variants, out);
    if (*gradcheck) {
      if (list_components) {
        for (const auto& n : gradcheck_components()) out << n << '\n';
        return kExitOk;
      }
      return cmd_gradcheck(components, inject_bug, gc_seed, out);
    }
    if (*bench) return cmd_bench_scan(bl, bn, bc, mode, precision, b_seed, repeat, out);
    if (*train_cmd) return cmd_train(common, epochs, lr, out);
    if (*eval) return cmd_eval(common, checkpoint, pred, truth, out);
    if (*gen) return cmd_gen_data(common, n_samples, out);
    if (*order_export) return cmd_order_export(kind, order_shape, order_seed, order_file, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kExitShape;
  } catch (const MemoryGuardError& e) {
    err << "memory guard: " << e.what() << '\n';
    return kExitShape;
  } catch (const CheckFailed& e) {
    err << "check failed: " << e.what() << '\n';
    return kExitCheck;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace ulike::cli
