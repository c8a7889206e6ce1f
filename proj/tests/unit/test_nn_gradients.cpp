#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "maskfill/losses.hpp"
#include "maskfill/mlm.hpp"
#include "maskfill/nn/conv.hpp"
#include "maskfill/nn/transformer.hpp"
#include "maskfill/seg.hpp"

using namespace maskfill;
using nn::Mat;

namespace {

// Worst sampled relative error; the floor absorbs parameters whose true gradient is zero.
double check_param_grads(nn::ParamStore<double>& store, const std::function<double()>& loss, int per_param = 6,
                         double h = 1e-5) {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (auto& p : store) {
    if (!p.trainable) continue;
    std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
    for (int s = 0; s < per_param; ++s) {
      const auto k = pick(rng);
      const double orig = p.value[k];
      p.value[k] = orig + h;
      const double up = loss();
      p.value[k] = orig - h;
      const double down = loss();
      p.value[k] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad[k];
      const double denom = std::max(std::abs(analytic) + std::abs(numeric), 1e-4);
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

}  // namespace

TEST(NnGradients, TransformerBlock) {
  nn::ParamStore<double> store;
  nn::Rng rng(3);
  auto block = nn::TransformerBlock<double>::make(store, "b", 8, 2, 2, rng);
  const Mat<double> x = random_mat(5, 8, 11);
  const Mat<double> w = random_mat(5, 8, 12);
  auto loss = [&] { return block.forward(store, x, nullptr).cwiseProduct(w).sum(); };
  store.zero_grad();
  nn::TransformerBlock<double>::Cache cache;
  block.forward(store, x, &cache);
  const Mat<double> dx = block.backward(store, cache, w);
  EXPECT_LT(check_param_grads(store, loss), 1e-5);

  Mat<double> xp = x;
  const double h = 1e-5;
  for (int k : {0, 7, 23, 39}) {
    xp.data()[k] += h;
    const double up = block.forward(store, xp, nullptr).cwiseProduct(w).sum();
    xp.data()[k] -= 2 * h;
    const double down = block.forward(store, xp, nullptr).cwiseProduct(w).sum();
    xp.data()[k] += h;
    EXPECT_NEAR(dx.data()[k], (up - down) / (2 * h), 1e-6);
  }
}

TEST(NnGradients, MicroMlmThroughMse) {
  MlmConfig cfg;
  cfg.input_shape = {4, 4, 4};
  cfg.patch_size = 2;
  cfg.encoder_blocks = cfg.decoder_blocks = 1;
  cfg.encoder_dim = cfg.decoder_dim = 8;
  cfg.encoder_heads = cfg.decoder_heads = 2;
  cfg.mlp_ratio = 2;
  MlmNetwork<double> net(cfg, 5);
  std::vector<double> mask(64, 0.0);
  for (int i = 0; i < 64; ++i) mask[i] = (i % 3 == 0 || i % 7 == 1) ? 1.0 : 0.0;
  LabelMask lm(Lattice::cube(4), std::vector<std::uint8_t>(mask.begin(), mask.end()));
  const auto plan = plan_mask(lm, net.grid(), 0.5, 9);
  ASSERT_FALSE(plan.corrupted.empty());

  auto loss = [&] { return mse_loss<double>(mask, net.forward(mask, plan), {}); };
  net.params().zero_grad();
  MlmNetwork<double>::Pass pass;
  auto out = net.forward(mask, plan, &pass);
  std::vector<double> grad(64);
  mse_loss<double>(mask, out, grad);
  net.backward(pass, grad);
  EXPECT_LT(check_param_grads(net.params(), loss), 1e-3);
}

TEST(NnGradients, ConvBatchNormTranspose) {
  nn::ParamStore<double> store;
  nn::Rng rng(1);
  auto conv = nn::Conv3d<double>::make(store, "c", 2, 3, {3, 2, 1}, rng);
  auto bn = nn::BatchNorm3d<double>::make(store, "bn", 3);
  auto up = nn::ConvTranspose3d<double>::make(store, "u", 3, 2, rng);
  nn::Tensor5<double> x(2, 2, 4, 4, 4);
  std::mt19937_64 g(4);
  std::normal_distribution<double> d;
  for (auto& v : x.data) v = d(g);
  nn::Tensor5<double> w(2, 2, 4, 4, 4);
  for (auto& v : w.data) v = d(g);

  auto run = [&](nn::BatchNorm3d<double>::Cache* cache, nn::Tensor5<double>* a, nn::Tensor5<double>* b) {
    auto y = conv.forward(store, x);
    if (a) *a = y;
    auto saved = store;  // keep running stats fixed across probes
    auto z = bn.forward_train(store, y, cache);
    store.assign_values(saved);
    nn::relu_inplace(z);
    if (b) *b = z;
    return up.forward(store, z);
  };
  auto loss = [&] {
    auto o = run(nullptr, nullptr, nullptr);
    double s = 0;
    for (std::size_t i = 0; i < o.data.size(); ++i) s += o.data[i] * w.data[i];
    return s;
  };
  store.zero_grad();
  nn::BatchNorm3d<double>::Cache cache;
  nn::Tensor5<double> y, z;
  auto o = run(&cache, &y, &z);
  ASSERT_EQ(o.shape, x.shape);
  auto dz = up.backward(store, z, w);
  dz = nn::relu_backward(z, dz);
  auto dy = bn.backward(store, cache, dz);
  conv.backward(store, x, dy);
  EXPECT_LT(check_param_grads(store, loss, 8), 1e-4);
}

TEST(NnGradients, DiceLoss2Cubed) {
  std::vector<double> pred{0.1, 0.8, 0.3, 0.55, 0.9, 0.05, 0.6, 0.4};
  std::vector<double> ref{1, 0.2, 0, 1, 0.7, 0, 1, 0.5};
  std::vector<double> grad(8);
  dice_loss<double>(pred, ref, grad);
  const double h = 1e-6;
  for (int i = 0; i < 8; ++i) {
    auto p = pred;
    p[i] += h;
    const double up = dice_loss<double>(p, ref);
    p[i] -= 2 * h;
    const double down = dice_loss<double>(p, ref);
    const double numeric = (up - down) / (2 * h);
    EXPECT_LT(std::abs(numeric - grad[i]) / std::max(std::abs(numeric), 1e-12), 1e-4);
  }
}

TEST(NnGradients, UNetThroughDice) {
  SegConfig cfg;
  cfg.channels = {2, 3};
  cfg.input_shape = {4, 4, 4};
  SegNetwork<double> net(cfg, 2);
  nn::Tensor5<double> x(2, 1, 4, 4, 4);
  std::mt19937_64 g(8);
  std::normal_distribution<double> d;
  for (auto& v : x.data) v = d(g);
  std::vector<double> ref(64);
  for (int i = 0; i < 64; ++i) ref[i] = (i % 5 < 2) ? 1.0 : 0.0;

  auto loss_of = [&](const nn::Tensor5<double>& prob, nn::Tensor5<double>* grad) {
    double s = 0;
    for (int n = 0; n < 2; ++n) {
      std::span<double> gs;
      if (grad) gs = {grad->channel(n, 0), 64};
      s += dice_loss<double>({prob.channel(n, 0), 64}, ref, gs);
    }
    return s;
  };
  auto loss = [&] { return loss_of(net.forward_train(x, nullptr), nullptr); };
  net.params().zero_grad();
  SegNetwork<double>::Pass pass;
  const auto prob = net.forward_train(x, &pass);
  nn::Tensor5<double> grad(2, 1, 4, 4, 4);
  loss_of(prob, &grad);
  net.backward(pass, grad);
  EXPECT_LT(check_param_grads(net.params(), loss, 4), 1e-3);
}

TEST(NnGradients, UNetFrozenNormThroughDice) {
  SegConfig cfg;
  cfg.channels = {2, 3};
  cfg.input_shape = {4, 4, 4};
  SegNetwork<double> net(cfg, 5);
  nn::Tensor5<double> x(2, 1, 4, 4, 4);
  std::mt19937_64 g(9);
  std::normal_distribution<double> d;
  for (auto& v : x.data) v = d(g);
  net.forward_train(x, nullptr);  // move running stats off their initial values
  std::vector<double> ref(64);
  for (int i = 0; i < 64; ++i) ref[i] = (i % 3 == 0) ? 1.0 : 0.0;

  auto loss_of = [&](const nn::Tensor5<double>& prob, nn::Tensor5<double>* grad) {
    double s = 0;
    for (int n = 0; n < 2; ++n) {
      std::span<double> gs;
      if (grad) gs = {grad->channel(n, 0), 64};
      s += dice_loss<double>({prob.channel(n, 0), 64}, ref, gs);
    }
    return s;
  };
  const auto stats = net.params().checksum();
  auto loss = [&] { return loss_of(net.forward_eval(x, nullptr), nullptr); };
  net.params().zero_grad();
  SegNetwork<double>::Pass pass;
  const auto prob = net.forward_eval(x, &pass);
  nn::Tensor5<double> grad(2, 1, 4, 4, 4);
  loss_of(prob, &grad);
  net.backward(pass, grad);
  EXPECT_EQ(net.params().checksum(), stats);
  EXPECT_LT(check_param_grads(net.params(), loss, 4), 1e-3);
}
