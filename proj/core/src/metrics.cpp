#include "ulike/metrics.hpp"

#include <cmath>

#include "ulike/error.hpp"

namespace ulike {

namespace {

constexpr double kSmooth = 1e-5;

void check_labels(std::span<const std::int32_t> labels, Index num_classes, const char* op) {
  for (std::int32_t l : labels) {
    if (l < 0 || l >= num_classes) {
      throw ShapeError(std::string(op) + ": label " + std::to_string(l) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace

DiceReport dice_score(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, Index num_classes) {
  if (pred.size() != truth.size()) {
    throw ShapeError("dice_score: prediction has " + std::to_string(pred.size()) + " voxels, truth has " +
                     std::to_string(truth.size()));
  }
  if (num_classes < 2) throw ConfigError("dice_score: need at least two classes");
  check_labels(pred, num_classes, "dice_score");
  check_labels(truth, num_classes, "dice_score");
  const auto k = static_cast<std::size_t>(num_classes);
  std::vector<std::uint64_t> inter(k, 0), np(k, 0), ng(k, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = static_cast<std::size_t>(pred[i]), g = static_cast<std::size_t>(truth[i]);
    ++np[p];
    ++ng[g];
    if (p == g) ++inter[p];
  }
  DiceReport r;
  r.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t denom = np[c] + ng[c];
    r.per_class[c] = denom == 0 ? 1.0 : 2.0 * static_cast<double>(inter[c]) / static_cast<double>(denom);
  }
  double sum = 0;
  for (std::size_t c = 1; c < k; ++c) sum += r.per_class[c];
  r.macro = sum / static_cast<double>(k - 1);
  return r;
}

template <typename T>
std::vector<std::int32_t> argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() < 2) throw ShapeError("argmax_labels: expected K×..., got " + to_string(logits.shape()));
  const Index k = logits.extent(0), v = logits.size() / k;
  std::vector<std::int32_t> out(static_cast<std::size_t>(v), 0);
  for (Index i = 0; i < v; ++i) {
    T best = logits[i];
    for (Index c = 1; c < k; ++c) {
      if (logits[c * v + i] > best) {
        best = logits[c * v + i];
        out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(c);
      }
    }
  }
  return out;
}

template <typename T>
LossResult<T> dice_ce_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() < 2) throw ShapeError("dice_ce_loss: expected K×..., got " + to_string(logits.shape()));
  const Index k = logits.extent(0), v = logits.size() / k;
  if (k < 2) throw ConfigError("dice_ce_loss: need at least two classes");
  if (static_cast<Index>(labels.size()) != v) {
    throw ShapeError("dice_ce_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(v) + " voxels");
  }
  check_labels(labels, k, "dice_ce_loss");

  const auto kk = static_cast<std::size_t>(k);
  std::vector<double> p(static_cast<std::size_t>(k * v));
  double ce = 0;
  for (Index i = 0; i < v; ++i) {
    double m = static_cast<double>(logits[i]);
    for (Index c = 1; c < k; ++c) m = std::max(m, static_cast<double>(logits[c * v + i]));
    double z = 0;
    for (Index c = 0; c < k; ++c) {
      const double e = std::exp(static_cast<double>(logits[c * v + i]) - m);
      p[static_cast<std::size_t>(c * v + i)] = e;
      z += e;
    }
    for (Index c = 0; c < k; ++c) p[static_cast<std::size_t>(c * v + i)] /= z;
    const Index y = labels[static_cast<std::size_t>(i)];
    ce -= static_cast<double>(logits[y * v + i]) - m - std::log(z);
  }
  ce /= static_cast<double>(v);

  // Soft Dice over foreground classes.
  std::vector<double> inter(kk, 0), denom(kk, 0);
  for (Index c = 1; c < k; ++c) {
    for (Index i = 0; i < v; ++i) {
      const double pc = p[static_cast<std::size_t>(c * v + i)];
      const double g = labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
      inter[static_cast<std::size_t>(c)] += pc * g;
      denom[static_cast<std::size_t>(c)] += pc + g;
    }
  }
  const double nfg = static_cast<double>(k - 1);
  double dice_sum = 0;
  for (Index c = 1; c < k; ++c) {
    const auto cc = static_cast<std::size_t>(c);
    dice_sum += (2 * inter[cc] + kSmooth) / (denom[cc] + kSmooth);
  }

  LossResult<T> r;
  r.ce = ce;
  r.dice = 1.0 - dice_sum / nfg;
  r.loss = r.ce + r.dice;
  r.grad = Tensor<T>(logits.shape());

  std::vector<double> dp(kk);
  for (Index i = 0; i < v; ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    for (Index c = 0; c < k; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      double g = 0;
      if (c > 0) {
        const double gt = y == c ? 1.0 : 0.0;
        const double u = denom[cc] + kSmooth;
        g = -((2 * gt * u - (2 * inter[cc] + kSmooth)) / (u * u)) / nfg;
      }
      dp[cc] = g;
    }
    double dot = 0;
    for (Index c = 0; c < k; ++c) dot += p[static_cast<std::size_t>(c * v + i)] * dp[static_cast<std::size_t>(c)];
    for (Index c = 0; c < k; ++c) {
      const double pc = p[static_cast<std::size_t>(c * v + i)];
      const double dce = (pc - (y == c ? 1.0 : 0.0)) / static_cast<double>(v);
      r.grad[c * v + i] = static_cast<T>(dce + pc * (dp[static_cast<std::size_t>(c)] - dot));
    }
  }
  return r;
}

template std::vector<std::int32_t> argmax_labels(const Tensor<float>&);
template std::vector<std::int32_t> argmax_labels(const Tensor<double>&);
template LossResult<float> dice_ce_loss(const Tensor<float>&, std::span<const std::int32_t>);
template LossResult<double> dice_ce_loss(const Tensor<double>&, std::span<const std::int32_t>);

}  // namespace ulike
