#include "maskfill/nn/transformer.hpp"

#include <cmath>
#include <numbers>

namespace maskfill::nn {

template <typename T>
Linear<T> Linear<T>::make(ParamStore<T>& store, const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", {out, in});
  l.bias = store.add(name + ".bias", {out});
  // Xavier-uniform
  fill_uniform(store[l.weight].value, std::sqrt(6.0 / double(in + out)), rng);
  return l;
}

template <typename T>
Mat<T> Linear<T>::forward(const ParamStore<T>& store, const Mat<T>& x) const {
  const auto w = as_matrix(store[weight], out, in);
  const auto b = Eigen::Map<const RowVec<T>>(store[bias].value.data(), out);
  Mat<T> y = x * w.transpose();
  y.rowwise() += b;
  return y;
}

template <typename T>
Mat<T> Linear<T>::backward(ParamStore<T>& store, const Mat<T>& x, const Mat<T>& dy) const {
  grad_matrix(store[weight], out, in).noalias() += dy.transpose() * x;
  Eigen::Map<RowVec<T>>(store[bias].grad.data(), out) += dy.colwise().sum();
  return dy * as_matrix(store[weight], out, in);
}

template <typename T>
LayerNorm<T> LayerNorm<T>::make(ParamStore<T>& store, const std::string& name, int dim) {
  LayerNorm l;
  l.dim = dim;
  l.gamma = store.add(name + ".weight", {dim});
  l.beta = store.add(name + ".bias", {dim});
  std::fill(store[l.gamma].value.begin(), store[l.gamma].value.end(), T(1));
  return l;
}

template <typename T>
Mat<T> LayerNorm<T>::forward(const ParamStore<T>& store, const Mat<T>& x, Cache* cache) const {
  const auto g = Eigen::Map<const RowVec<T>>(store[gamma].value.data(), dim);
  const auto b = Eigen::Map<const RowVec<T>>(store[beta].value.data(), dim);
  const ColVec<T> mean = x.rowwise().mean();
  Mat<T> xc = x.colwise() - mean;
  const ColVec<T> var = xc.array().square().rowwise().mean();
  const ColVec<T> rstd = (var.array() + T(eps)).rsqrt();
  Mat<T> xhat = xc.array().colwise() * rstd.array();
  Mat<T> y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = rstd;
  }
  return y;
}

template <typename T>
Mat<T> LayerNorm<T>::backward(ParamStore<T>& store, const Cache& cache, const Mat<T>& dy) const {
  const auto g = Eigen::Map<const RowVec<T>>(store[gamma].value.data(), dim);
  Eigen::Map<RowVec<T>>(store[gamma].grad.data(), dim) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  Eigen::Map<RowVec<T>>(store[beta].grad.data(), dim) += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * g.array();
  const ColVec<T> mean_d = dxhat.rowwise().mean();
  const ColVec<T> mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().mean();
  Mat<T> dx = (dxhat.colwise() - mean_d) - (cache.xhat.array().colwise() * mean_dx.array()).matrix();
  return dx.array().colwise() * cache.rstd.array();
}

template <typename T>
Mat<T> gelu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); });
}

template <typename T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  const T inv_sqrt_2pi = T(1.0 / std::sqrt(2.0 * std::numbers::pi));
  Mat<T> d = x.unaryExpr([inv_sqrt_2pi](T v) {
    const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
    return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
  });
  return d.cwiseProduct(dy);
}

template <typename T>
MultiHeadAttention<T> MultiHeadAttention<T>::make(ParamStore<T>& store, const std::string& name, int dim, int heads,
                                                  Rng& rng) {
  MultiHeadAttention a;
  a.dim = dim;
  a.heads = heads;
  a.qkv = Linear<T>::make(store, name + ".qkv", dim, 3 * dim, rng);
  a.proj = Linear<T>::make(store, name + ".proj", dim, dim, rng);
  return a;
}

template <typename T>
Mat<T> MultiHeadAttention<T>::forward(const ParamStore<T>& store, const Mat<T>& x, Cache* cache) const {
  const Eigen::Index n = x.rows();
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  Mat<T> qkv_out = qkv.forward(store, x);
  Mat<T> context(n, dim);
  if (cache) cache->probs.resize(std::size_t(heads));
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv_out.middleCols(h * hd, hd);
    const auto k = qkv_out.middleCols(dim + h * hd, hd);
    const auto v = qkv_out.middleCols(2 * dim + h * hd, hd);
    Mat<T> s = (q * k.transpose()) * scale;
    const ColVec<T> row_max = s.rowwise().maxCoeff();
    s = (s.colwise() - row_max).array().exp();
    const ColVec<T> row_sum = s.rowwise().sum();
    s = s.array().colwise() / row_sum.array();
    context.middleCols(h * hd, hd).noalias() = s * v;
    if (cache) cache->probs[std::size_t(h)] = std::move(s);
  }
  Mat<T> y = proj.forward(store, context);
  if (cache) {
    cache->x = x;
    cache->qkv = std::move(qkv_out);
    cache->context = std::move(context);
  }
  return y;
}

template <typename T>
Mat<T> MultiHeadAttention<T>::backward(ParamStore<T>& store, const Cache& cache, const Mat<T>& dy) const {
  const Eigen::Index n = cache.x.rows();
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  const Mat<T> dcontext = proj.backward(store, cache.context, dy);
  Mat<T> dqkv(n, 3 * dim);
  for (int h = 0; h < heads; ++h) {
    const auto q = cache.qkv.middleCols(h * hd, hd);
    const auto k = cache.qkv.middleCols(dim + h * hd, hd);
    const auto v = cache.qkv.middleCols(2 * dim + h * hd, hd);
    const Mat<T>& a = cache.probs[std::size_t(h)];
    const auto dout = dcontext.middleCols(h * hd, hd);
    const Mat<T> da = dout * v.transpose();
    dqkv.middleCols(2 * dim + h * hd, hd).noalias() = a.transpose() * dout;
    const ColVec<T> inner = (da.array() * a.array()).rowwise().sum();
    const Mat<T> ds = (a.array() * (da.colwise() - inner).array()).matrix() * scale;
    dqkv.middleCols(h * hd, hd).noalias() = ds * k;
    dqkv.middleCols(dim + h * hd, hd).noalias() = ds.transpose() * q;
  }
  return qkv.backward(store, cache.x, dqkv);
}

template <typename T>
TransformerBlock<T> TransformerBlock<T>::make(ParamStore<T>& store, const std::string& name, int dim, int heads,
                                              int mlp_ratio, Rng& rng) {
  TransformerBlock b;
  b.norm1 = LayerNorm<T>::make(store, name + ".norm1", dim);
  b.attn = MultiHeadAttention<T>::make(store, name + ".attn", dim, heads, rng);
  b.norm2 = LayerNorm<T>::make(store, name + ".norm2", dim);
  b.fc1 = Linear<T>::make(store, name + ".mlp.fc1", dim, dim * mlp_ratio, rng);
  b.fc2 = Linear<T>::make(store, name + ".mlp.fc2", dim * mlp_ratio, dim, rng);
  return b;
}

template <typename T>
Mat<T> TransformerBlock<T>::forward(const ParamStore<T>& store, const Mat<T>& x, Cache* cache) const {
  Mat<T> h1 = norm1.forward(store, x, cache ? &cache->n1 : nullptr);
  Mat<T> x1 = x + attn.forward(store, h1, cache ? &cache->attn : nullptr);
  Mat<T> h2 = norm2.forward(store, x1, cache ? &cache->n2 : nullptr);
  Mat<T> pre = fc1.forward(store, h2);
  Mat<T> act = gelu(pre);
  Mat<T> y = x1 + fc2.forward(store, act);
  if (cache) {
    cache->h1 = std::move(h1);
    cache->h2 = std::move(h2);
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <typename T>
Mat<T> TransformerBlock<T>::backward(ParamStore<T>& store, const Cache& cache, const Mat<T>& dy) const {
  const Mat<T> dact = fc2.backward(store, cache.act, dy);
  const Mat<T> dpre = gelu_backward(cache.pre_act, dact);
  const Mat<T> dh2 = fc1.backward(store, cache.h2, dpre);
  const Mat<T> dx1 = dy + norm2.backward(store, cache.n2, dh2);
  const Mat<T> dh1 = attn.backward(store, cache.attn, dx1);
  return dx1 + norm1.backward(store, cache.n1, dh1);
}

Mat<double> sincos_position_encoding(int dim, const std::array<std::int64_t, 3>& grid_dims) {
  const std::int64_t n = grid_dims[0] * grid_dims[1] * grid_dims[2];
  Mat<double> pe = Mat<double>::Zero(n, dim);
  const int per_axis = (dim / 6) * 2;  // even share per axis: sin/cos pairs
  const int freqs = per_axis / 2;
  for (std::int64_t p = 0; p < n; ++p) {
    const double coord[3] = {double(p / (grid_dims[1] * grid_dims[2])), double((p / grid_dims[2]) % grid_dims[1]),
                             double(p % grid_dims[2])};
    for (int a = 0; a < 3; ++a) {
      for (int f = 0; f < freqs; ++f) {
        const double omega = 1.0 / std::pow(10000.0, double(f) / double(std::max(freqs, 1)));
        pe(p, a * per_axis + f) = std::sin(coord[a] * omega);
        pe(p, a * per_axis + freqs + f) = std::cos(coord[a] * omega);
      }
    }
  }
  return pe;
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct MultiHeadAttention<float>;
template struct MultiHeadAttention<double>;
template struct TransformerBlock<float>;
template struct TransformerBlock<double>;
template Mat<float> gelu(const Mat<float>&);
template Mat<double> gelu(const Mat<double>&);
template Mat<float> gelu_backward(const Mat<float>&, const Mat<float>&);
template Mat<double> gelu_backward(const Mat<double>&, const Mat<double>&);

}  // namespace maskfill::nn
