#include "maskfill/losses.hpp"

#include <cstdint>

namespace maskfill {

template <typename T>
double dice_loss(std::span<const T> pred, std::span<const T> ref, std::span<T> grad, double eps) {
  if (pred.size() != ref.size()) throw ShapeError("dice_loss: size mismatch");
  if (!grad.empty() && grad.size() != pred.size()) throw ShapeError("dice_loss: gradient size mismatch");
  double inter = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += double(pred[i]) * double(ref[i]);
    sum += double(pred[i]) + double(ref[i]);
  }
  const double denom = sum + eps;
  if (!grad.empty()) {
    // d/dp_i [-2 I / S] = -2 r_i / S + 2 I / S^2
    const double a = -2.0 / denom;
    const double b = 2.0 * inter / (denom * denom);
    for (std::size_t i = 0; i < pred.size(); ++i) grad[i] = static_cast<T>(a * double(ref[i]) + b);
  }
  return -2.0 * inter / denom;
}

template double dice_loss<float>(std::span<const float>, std::span<const float>, std::span<float>, double);
template double dice_loss<double>(std::span<const double>, std::span<const double>, std::span<double>, double);

double dice_loss(const SoftMask& pred, const SoftMask& ref) {
  require_same_grid(pred.lattice(), ref.lattice(), "dice_loss");
  return dice_loss<float>(pred.values(), ref.values());
}

double dice_loss(const SoftMask& pred, const LabelMask& ref) {
  return dice_loss(pred, to_soft(ref));
}

double dice_score(const LabelMask& pred, const LabelMask& ref) {
  require_same_grid(pred.lattice(), ref.lattice(), "dice_score");
  std::int64_t inter = 0, a = 0, b = 0;
  const auto p = pred.values();
  const auto r = ref.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] & r[i];
    a += p[i];
    b += r[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * double(inter) / double(a + b);
}

double dice_score(const SoftMask& pred, const LabelMask& ref) { return dice_score(binarize(pred), ref); }

template <typename T>
double mse_loss(std::span<const T> target, std::span<const T> recon, std::span<T> grad) {
  if (target.size() != recon.size() || target.empty()) throw ShapeError("mse_loss: size mismatch");
  if (!grad.empty() && grad.size() != recon.size()) throw ShapeError("mse_loss: gradient size mismatch");
  const double n = double(target.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = double(recon[i]) - double(target[i]);
    acc += d * d;
    if (!grad.empty()) grad[i] = static_cast<T>(2.0 * d / n);
  }
  return acc / n;
}

template double mse_loss<float>(std::span<const float>, std::span<const float>, std::span<float>);
template double mse_loss<double>(std::span<const double>, std::span<const double>, std::span<double>);

double mlm_mse_loss(const SoftMask& target, const SoftMask& recon) {
  require_same_grid(target.lattice(), recon.lattice(), "mlm_mse_loss");
  return mse_loss<float>(target.values(), recon.values());
}

double mlm_mse_loss(const LabelMask& target, const SoftMask& recon) {
  return mlm_mse_loss(to_soft(target), recon);
}

}  // namespace maskfill
