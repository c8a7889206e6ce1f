#include "maskfill/seg.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "maskfill/losses.hpp"
#include "maskfill/nn/optim.hpp"
#include "maskfill/seeding.hpp"

namespace maskfill {

SegConfig SegConfig::scaled(int scale) const {
  if (scale < 1) throw InvalidArgument("scale must be >= 1");
  SegConfig c = *this;
  for (auto& s : c.input_shape) s = std::max<std::int64_t>(1, s / scale);
  int d = depth();
  const auto smallest = *std::min_element(c.input_shape.begin(), c.input_shape.end());
  while (d > 0 && (smallest >> d) < 4) --d;
  c.channels.resize(std::size_t(d + 1));
  for (auto& ch : c.channels) ch = std::max(4, ch / scale);
  return c;
}

void SegConfig::validate() const {
  if (channels.empty()) throw InvalidArgument("SegConfig: empty channel schedule");
  for (int ch : channels)
    if (ch < 1) throw InvalidArgument("SegConfig: channel widths must be positive");
  if (num_classes != 2) throw InvalidArgument("SegConfig: only two-class heads are supported");
  const std::int64_t f = std::int64_t(1) << depth();
  for (auto s : input_shape) {
    if (s < 1 || s % f != 0) throw ShapeError("SegConfig: input shape must be divisible by 2^depth");
  }
}

void to_json(nlohmann::json& j, const SegConfig& c) {
  j = nlohmann::json{{"channels", c.channels}, {"input_shape", c.input_shape}, {"num_classes", c.num_classes}};
}

void from_json(const nlohmann::json& j, SegConfig& c) {
  SegConfig d;
  c.channels = j.value("channels", d.channels);
  c.input_shape = j.value("input_shape", d.input_shape);
  c.num_classes = j.value("num_classes", d.num_classes);
}

std::string to_string(SegRole role) {
  switch (role) {
    case SegRole::source: return "source";
    case SegRole::pseudo: return "pseudo";
    case SegRole::target: return "target";
  }
  return "source";
}

SegRole seg_role_from_string(const std::string& s) {
  if (s == "source") return SegRole::source;
  if (s == "pseudo") return SegRole::pseudo;
  if (s == "target") return SegRole::target;
  throw FormatError("unknown segmentation role: " + s);
}

void to_json(nlohmann::json& j, const SegTrainOptions& o) {
  j = nlohmann::json{{"lr", o.lr},           {"iters", o.iters},
                     {"batch", o.batch},     {"seed", o.seed},
                     {"warmup_fraction", o.warmup_fraction}, {"weight_decay", o.weight_decay},
                     {"augment", o.augment}, {"recalibrate", o.recalibrate}};
}

void from_json(const nlohmann::json& j, SegTrainOptions& o) {
  SegTrainOptions d;
  o.lr = j.value("lr", d.lr);
  o.iters = j.value("iters", d.iters);
  o.batch = j.value("batch", d.batch);
  o.seed = j.value("seed", d.seed);
  o.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  o.weight_decay = j.value("weight_decay", d.weight_decay);
  o.augment = j.value("augment", d.augment);
  o.recalibrate = j.value("recalibrate", d.recalibrate);
}

template <typename T>
SegNetwork<T>::SegNetwork(const SegConfig& config, std::uint64_t seed, SegRole role) : config_(config), role_(role) {
  config_.validate();
  nn::Rng rng(seed);
  const auto& ch = config_.channels;
  auto unit = [&](const std::string& name, int cin, int cout, nn::ConvGeometry g, bool norm) {
    Unit u;
    u.conv = nn::Conv3d<T>::make(params_, name + ".conv", cin, cout, g, rng);
    u.norm = norm;
    if (norm) u.bn = nn::BatchNorm3d<T>::make(params_, name + ".bn", cout);
    return u;
  };
  stem_ = unit("stem", 1, ch[0], {}, true);
  const int depth = config_.depth();
  for (int i = 0; i < depth; ++i) {
    const std::string p = "down" + std::to_string(i);
    const int cin = ch[std::size_t(i)], cout = ch[std::size_t(i + 1)];
    down_.push_back({unit(p + ".0", cin, cin, {3, 2, 1}, false), unit(p + ".1", cin, cout, {}, true),
                     unit(p + ".2", cout, cout, {}, true), unit(p + ".3", cout, cout, {}, true)});
  }
  for (int i = 0; i < depth; ++i) {
    const std::string p = "up" + std::to_string(i);
    const int cin = ch[std::size_t(i + 1)], cout = ch[std::size_t(i)];
    up_conv_.push_back(nn::ConvTranspose3d<T>::make(params_, p + ".0", cin, cin, rng));
    up_.push_back({unit(p + ".1", cin + cout, cout, {}, true), unit(p + ".2", cout, cout, {}, true),
                   unit(p + ".3", cout, cout, {}, true)});
  }
  head_ = unit("head", ch[0], config_.num_classes, {1, 1, 0}, false);
}

template <typename T>
typename SegNetwork<T>::Tensor SegNetwork<T>::run_unit(const Unit& u, const Tensor& x, bool train,
                                                       UnitCache* cache) {
  Tensor y = u.conv.forward(params_, x);
  if (u.norm) {
    auto* bn_cache = cache ? &cache->bn : nullptr;
    y = train ? u.bn.forward_train(params_, y, bn_cache) : u.bn.forward_eval(params_, y, bn_cache);
    nn::relu_inplace(y);
  }
  if (cache) {
    cache->x = x;
    cache->y = y;
  }
  return y;
}

template <typename T>
typename SegNetwork<T>::Tensor SegNetwork<T>::unit_backward(const Unit& u, const UnitCache& cache, const Tensor& dy) {
  if (!u.norm) return u.conv.backward(params_, cache.x, dy);
  Tensor d = nn::relu_backward(cache.y, dy);
  d = u.bn.backward(params_, cache.bn, d);
  return u.conv.backward(params_, cache.x, d);
}

template <typename T>
typename SegNetwork<T>::Tensor SegNetwork<T>::run(const Tensor& x, bool train, Pass* pass) {
  if (x.c() != 1 || x.shape[2] != config_.input_shape[0] || x.shape[3] != config_.input_shape[1] ||
      x.shape[4] != config_.input_shape[2]) {
    throw ShapeError("seg_forward: input does not match the configured input shape");
  }
  const int depth = config_.depth();
  if (pass) {
    pass->down.assign(std::size_t(depth), {});
    pass->up.assign(std::size_t(depth), {});
    pass->up_in.assign(std::size_t(depth), {});
    pass->up_channels.assign(std::size_t(depth), 0);
  }
  std::vector<Tensor> skips;
  Tensor h = run_unit(stem_, x, train, pass ? &pass->stem : nullptr);
  skips.push_back(h);
  for (int i = 0; i < depth; ++i) {
    auto& units = down_[std::size_t(i)];
    if (pass) pass->down[std::size_t(i)].resize(units.size());
    for (std::size_t k = 0; k < units.size(); ++k) {
      h = run_unit(units[k], h, train, pass ? &pass->down[std::size_t(i)][k] : nullptr);
    }
    skips.push_back(h);
  }
  for (int i = depth - 1; i >= 0; --i) {
    if (pass) pass->up_in[std::size_t(i)] = h;
    Tensor u = up_conv_[std::size_t(i)].forward(params_, h);
    if (pass) pass->up_channels[std::size_t(i)] = u.c();
    h = nn::concat_channels(u, skips[std::size_t(i)]);
    auto& units = up_[std::size_t(i)];
    if (pass) pass->up[std::size_t(i)].resize(units.size());
    for (std::size_t k = 0; k < units.size(); ++k) {
      h = run_unit(units[k], h, train, pass ? &pass->up[std::size_t(i)][k] : nullptr);
    }
  }
  const Tensor logits = run_unit(head_, h, train, pass ? &pass->head : nullptr);
  Tensor prob(x.n(), 1, x.shape[2], x.shape[3], x.shape[4]);
  const std::int64_t L = prob.spatial();
  for (std::int64_t n = 0; n < x.n(); ++n) {
    const T* z0 = logits.channel(n, 0);
    const T* z1 = logits.channel(n, 1);
    T* p = prob.channel(n, 0);
    for (std::int64_t v = 0; v < L; ++v) p[v] = T(1) / (T(1) + std::exp(z0[v] - z1[v]));
  }
  if (pass) pass->prob = prob;
  return prob;
}

template <typename T>
typename SegNetwork<T>::Tensor SegNetwork<T>::forward_train(const Tensor& x, Pass* pass) {
  return run(x, true, pass);
}

template <typename T>
typename SegNetwork<T>::Tensor SegNetwork<T>::forward_eval(const Tensor& x, Pass* pass) const {
  // Eval mode never writes parameters, so the cast is safe.
  return const_cast<SegNetwork*>(this)->run(x, false, pass);
}

template <typename T>
void SegNetwork<T>::backward(const Pass& pass, const Tensor& grad_prob) {
  const int depth = config_.depth();
  const Tensor& p = pass.prob;
  Tensor dlogits(p.n(), 2, p.shape[2], p.shape[3], p.shape[4]);
  const std::int64_t L = p.spatial();
  for (std::int64_t n = 0; n < p.n(); ++n) {
    const T* pp = p.channel(n, 0);
    const T* g = grad_prob.channel(n, 0);
    T* d0 = dlogits.channel(n, 0);
    T* d1 = dlogits.channel(n, 1);
    for (std::int64_t v = 0; v < L; ++v) {
      const T d = g[v] * pp[v] * (T(1) - pp[v]);
      d1[v] = d;
      d0[v] = -d;
    }
  }
  Tensor dh = unit_backward(head_, pass.head, dlogits);
  std::vector<Tensor> dskip(static_cast<std::size_t>(depth));
  for (int i = 0; i < depth; ++i) {
    auto& units = up_[std::size_t(i)];
    for (std::size_t k = units.size(); k-- > 0;) dh = unit_backward(units[k], pass.up[std::size_t(i)][k], dh);
    auto [du, ds] = nn::split_channels(dh, pass.up_channels[std::size_t(i)]);
    dskip[std::size_t(i)] = std::move(ds);
    dh = up_conv_[std::size_t(i)].backward(params_, pass.up_in[std::size_t(i)], du);
  }
  for (int i = depth - 1; i >= 0; --i) {
    auto& units = down_[std::size_t(i)];
    for (std::size_t k = units.size(); k-- > 0;) dh = unit_backward(units[k], pass.down[std::size_t(i)][k], dh);
    for (std::size_t v = 0; v < dh.data.size(); ++v) dh.data[v] += dskip[std::size_t(i)].data[v];
  }
  unit_backward(stem_, pass.stem, dh);
}

template <typename T>
void SegNetwork<T>::recalibrate(const std::vector<const Volume*>& images, int batch) {
  if (images.empty() || batch < 1) return;
  std::vector<nn::BatchNorm3d<T>*> norms;
  auto collect = [&](Unit& u) {
    if (u.norm) norms.push_back(&u.bn);
  };
  collect(stem_);
  for (auto& blk : down_)
    for (auto& u : blk) collect(u);
  for (auto& blk : up_)
    for (auto& u : blk) collect(u);
  std::vector<double> saved;
  for (auto* bn : norms) {
    saved.push_back(bn->momentum);
    std::fill(params_[bn->running_mean].value.begin(), params_[bn->running_mean].value.end(), T(0));
    std::fill(params_[bn->running_var].value.begin(), params_[bn->running_var].value.end(), T(1));
  }
  int k = 0;
  for (std::size_t start = 0; start < images.size(); start += std::size_t(batch), ++k) {
    // Momentum 1/(k+1) turns the running update into a cumulative mean.
    for (auto* bn : norms) bn->momentum = 1.0 / double(k + 1);
    const std::size_t end = std::min(images.size(), start + std::size_t(batch));
    Tensor x(std::int64_t(end - start), 1, config_.input_shape[0], config_.input_shape[1], config_.input_shape[2]);
    for (std::size_t i = start; i < end; ++i) {
      const auto v = images[i]->values();
      std::transform(v.begin(), v.end(), x.sample(std::int64_t(i - start)), [](float f) { return T(f); });
    }
    run(x, true, nullptr);
  }
  for (std::size_t i = 0; i < norms.size(); ++i) norms[i]->momentum = saved[i];
}

template class SegNetwork<float>;
template class SegNetwork<double>;

nn::Tensor5<float> to_tensor(const std::vector<const Volume*>& batch) {
  if (batch.empty()) throw InvalidArgument("to_tensor: empty batch");
  const auto& s = batch.front()->shape();
  nn::Tensor5<float> t(std::int64_t(batch.size()), 1, s[0], s[1], s[2]);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->shape() != s) throw ShapeError("to_tensor: mixed shapes in batch");
    std::copy(batch[i]->values().begin(), batch[i]->values().end(), t.sample(std::int64_t(i)));
  }
  return t;
}

SoftMask slice_prob(const nn::Tensor5<float>& prob, std::int64_t n, const Lattice& lattice) {
  const float* p = prob.channel(n, 0);
  std::vector<float> v(p, p + prob.spatial());
  for (auto& x : v) x = std::clamp(x, 0.0f, 1.0f);
  return SoftMask(lattice, std::move(v));
}

SoftMask seg_forward(const SegModel& model, const Volume& x) {
  const auto prob = model.forward_eval(to_tensor({&x}));
  return slice_prob(prob, 0, x.lattice());
}

std::vector<SoftMask> seg_forward(const SegModel& model, const std::vector<Volume>& xs) {
  std::vector<SoftMask> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(seg_forward(model, x));
  return out;
}

namespace {

void fit(SegModel& model, const std::vector<LabeledCase>& cases, const SegTrainOptions& opts, TrainLog& log) {
  log.columns = {"iter", "dice_loss"};
  if (opts.iters <= 0) return;
  if (opts.batch < 1) throw InvalidArgument("batch must be >= 1");
  nn::Adam<float> adam(model.params(), {.weight_decay = opts.weight_decay});
  nn::Rng rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, cases.size() - 1);
  SegModel::Pass pass;
  for (std::int64_t it = 0; it < opts.iters; ++it) {
    std::vector<Crop> batch;
    for (int b = 0; b < opts.batch; ++b) {
      const auto& c = cases[pick(rng)];
      if (opts.augment) {
        batch.push_back(augment(c.image, c.mask, derive_seed(opts.seed, std::uint64_t(it), std::uint64_t(b)),
                                opts.ranges));
      } else {
        batch.push_back({c.image, c.mask});
      }
    }
    std::vector<const Volume*> xs;
    for (const auto& c : batch) xs.push_back(&c.image);
    model.params().zero_grad();
    const auto prob = model.forward_train(to_tensor(xs), &pass);
    nn::Tensor5<float> grad(prob.n(), 1, prob.shape[2], prob.shape[3], prob.shape[4]);
    double loss = 0.0;
    const std::size_t L = std::size_t(prob.spatial());
    std::vector<float> ref(L);
    for (std::int64_t n = 0; n < prob.n(); ++n) {
      const auto m = batch[std::size_t(n)].mask.values();
      std::copy(m.begin(), m.end(), ref.begin());
      loss += dice_loss<float>({prob.channel(n, 0), L}, ref, {grad.channel(n, 0), L});
    }
    for (auto& g : grad.data) g /= float(prob.n());
    model.backward(pass, grad);
    adam.step(model.params(), nn::cosine_lr(opts.lr, it, opts.iters, opts.warmup_fraction));
    log.add({double(it), loss / double(prob.n())});
  }
  if (opts.recalibrate) {
    std::vector<const Volume*> images;
    for (const auto& c : cases) images.push_back(&c.image);
    model.recalibrate(images, opts.batch);
  }
}

}  // namespace

SegTrainResult train_source(const std::vector<LabeledCase>& cases, const SegConfig& config,
                            const SegTrainOptions& opts) {
  if (cases.empty()) throw EmptyDatasetError("train_source: no labeled cases");
  SegTrainResult r{SegModel(config, derive_seed(opts.seed, 0x5345), SegRole::source), {}};
  fit(r.model, cases, opts, r.log);
  return r;
}

SegTrainResult train_supervised(const SegModel& init, const std::vector<LabeledCase>& cases,
                                const SegTrainOptions& opts) {
  if (cases.empty()) throw EmptyDatasetError("train_supervised: no labeled cases");
  SegTrainResult r{init, {}};
  fit(r.model, cases, opts, r.log);
  return r;
}

}  // namespace maskfill
