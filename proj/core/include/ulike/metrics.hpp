#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ulike/tensor.hpp"

namespace ulike {

/// Per-class Dice 2|P∩G| / (|P| + |G|), with 1 for a class absent from both.
/// `macro` is the mean over foreground classes (1 .. K−1).
struct DiceReport {
  std::vector<double> per_class;
  double macro = 0.0;
};

DiceReport dice_score(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, Index num_classes);

/// Per-voxel argmax over the leading class axis of K×D×H×W logits.
template <typename T>
std::vector<std::int32_t> argmax_labels(const Tensor<T>& logits);

template <typename T>
struct LossResult {
  double loss = 0.0;
  double ce = 0.0;
  double dice = 0.0;  // 1 − mean foreground soft Dice
  Tensor<T> grad;     // d loss / d logits
};

/// Cross-entropy (mean over voxels) plus soft Dice loss on softmax
/// probabilities over foreground classes, smoothing 1e-5, equal weights.
template <typename T>
LossResult<T> dice_ce_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels);

}  // namespace ulike
