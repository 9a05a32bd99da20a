#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ulike/data.hpp"
#include "ulike/metrics.hpp"
#include "ulike/network.hpp"
#include "ulike/optim.hpp"

namespace ulike {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  Index epochs = 30;
  Index iterations = 50;  // optimizer steps per epoch
  Index batch_size = 2;
  std::uint64_t seed = 0;

  void validate() const;
  AdamWConfig optimizer() const { return {lr, beta1, beta2, 1e-8, weight_decay}; }
};

struct EpochLog {
  Index epoch = 0;
  double loss = 0.0;  // mean training loss over the epoch's steps
  double val_dice_macro = 0.0;
  std::vector<double> val_dice;  // per class, background first
  double wall_seconds = 0.0;
};

/// Mini-batch AdamW on Dice + CE. Each epoch draws a seeded permutation of
/// the training set and takes `iterations` consecutive batches from it
/// (wrapping). Throws NumericalError naming the first non-finite component
/// if the loss stops being finite.
template <typename T>
std::vector<EpochLog> train(Network<T>& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

/// Per-class Dice averaged over samples; macro over foreground classes.
template <typename T>
DiceReport evaluate(Network<T>& net, const Dataset& data);

/// epoch,loss,val_dice_macro,dice_class0..K−1. Wall-clock time is kept
/// out of this file so it is byte-identical across runs.
void write_train_log(std::ostream& os, const std::vector<EpochLog>& log);
/// epoch,wall_seconds
void write_timing_log(std::ostream& os, const std::vector<EpochLog>& log);

/// Trailing moving average; entry i averages [max(0, i − w + 1), i].
std::vector<double> smoothed(std::span<const double> values, Index window);
bool non_increasing(std::span<const double> values);

template <typename T>
std::string checkpoint_bytes(Network<T>& net);
template <typename T>
std::uint64_t checkpoint_hash(Network<T>& net);
template <typename T>
void save_network(Network<T>& net, const std::string& path);
template <typename T>
void load_network(Network<T>& net, const std::string& path);

}  // namespace ulike
