#include "ulike/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ulike/error.hpp"
#include "ulike/rng.hpp"
#include "ulike/serialize.hpp"

namespace ulike {

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw ConfigError("train: lr must be ≥ 0");
  if (epochs < 1) throw ConfigError("train: epochs must be ≥ 1");
  if (iterations < 1) throw ConfigError("train: iterations must be ≥ 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be ≥ 1");
  optimizer().validate();
}

template <typename T>
DiceReport evaluate(Network<T>& net, const Dataset& data) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  const Index k = net.config().num_classes;
  DiceReport mean;
  mean.per_class.assign(static_cast<std::size_t>(k), 0.0);
  for (const auto& s : data) {
    const std::vector<std::int32_t> pred = argmax_labels(net.forward(s.image.template cast<T>()));
    const DiceReport d = dice_score(pred, s.labels.labels, k);
    for (std::size_t c = 0; c < mean.per_class.size(); ++c) mean.per_class[c] += d.per_class[c];
  }
  double macro = 0;
  for (std::size_t c = 0; c < mean.per_class.size(); ++c) {
    mean.per_class[c] /= static_cast<double>(data.size());
    if (c > 0) macro += mean.per_class[c];
  }
  mean.macro = macro / static_cast<double>(k - 1);
  return mean;
}

template <typename T>
std::vector<EpochLog> train(Network<T>& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  AdamW<T> opt(net.parameters(), cfg.optimizer());
  const auto n = static_cast<Index>(train_set.size());
  std::vector<EpochLog> log;
  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Permutation order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (Index i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
    }
    double epoch_loss = 0;
    Index cursor = 0;
    for (Index it = 0; it < cfg.iterations; ++it) {
      net.zero_grad();
      double batch_loss = 0;
      for (Index b = 0; b < cfg.batch_size; ++b) {
        const Sample& s = train_set[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor % n)])];
        ++cursor;
        const Tensor<T> x = s.image.template cast<T>();
        LossResult<T> lr = dice_ce_loss(net.forward(x), s.labels.labels);
        if (!std::isfinite(lr.loss)) {
          const auto where = net.first_nonfinite_layer(x);
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(it) +
                               "; first non-finite output in " + where.value_or("loss"));
        }
        batch_loss += lr.loss;
        net.backward(scale(lr.grad, T(1) / static_cast<T>(cfg.batch_size)));
      }
      opt.step();
      epoch_loss += batch_loss / static_cast<double>(cfg.batch_size);
    }
    EpochLog e;
    e.epoch = epoch;
    e.loss = epoch_loss / static_cast<double>(cfg.iterations);
    if (!val_set.empty()) {
      const DiceReport d = evaluate(net, val_set);
      e.val_dice = d.per_class;
      e.val_dice_macro = d.macro;
    }
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

void write_train_log(std::ostream& os, const std::vector<EpochLog>& log) {
  os << "epoch,loss,val_dice_macro";
  const std::size_t k = log.empty() ? 0 : log.front().val_dice.size();
  for (std::size_t c = 0; c < k; ++c) os << ",dice_class" << c;
  os << '\n';
  for (const auto& e : log) {
    os << e.epoch << ',' << num(e.loss) << ',' << num(e.val_dice_macro);
    for (double d : e.val_dice) os << ',' << num(d);
    os << '\n';
  }
}

void write_timing_log(std::ostream& os, const std::vector<EpochLog>& log) {
  os << "epoch,wall_seconds\n";
  for (const auto& e : log) os << e.epoch << ',' << num(e.wall_seconds) << '\n';
}

std::vector<double> smoothed(std::span<const double> values, Index window) {
  if (window < 1) throw ConfigError("smoothed: window must be ≥ 1");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t lo = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - static_cast<std::size_t>(window) : 0;
    double s = 0;
    for (std::size_t j = lo; j <= i; ++j) s += values[j];
    out[i] = s / static_cast<double>(i - lo + 1);
  }
  return out;
}

bool non_increasing(std::span<const double> values) {
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[i - 1]) return false;
  }
  return true;
}

template <typename T>
std::string checkpoint_bytes(Network<T>& net) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, net.state());
  return os.str();
}

template <typename T>
std::uint64_t checkpoint_hash(Network<T>& net) {
  const std::string b = checkpoint_bytes(net);
  return fnv1a64(b.data(), b.size());
}

template <typename T>
void save_network(Network<T>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_checkpoint(os, net.state());
}

template <typename T>
void load_network(Network<T>& net, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  net.load_state(read_checkpoint<T>(is));
}

#define ULIKE_INSTANTIATE(T)                                                                                    \
  template DiceReport evaluate(Network<T>&, const Dataset&);                                                    \
  template std::vector<EpochLog> train(Network<T>&, const Dataset&, const Dataset&, const TrainConfig&,          \
                                       const std::function<void(const EpochLog&)>&);                            \
  template std::string checkpoint_bytes(Network<T>&);                                                           \
  template std::uint64_t checkpoint_hash(Network<T>&);                                                          \
  template void save_network(Network<T>&, const std::string&);                                                 \
  template void load_network(Network<T>&, const std::string&);

ULIKE_INSTANTIATE(float)
ULIKE_INSTANTIATE(double)

}  // namespace ulike
