#include "maskfill/nn/conv.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace maskfill::nn {
namespace {

struct Dims {
  std::int64_t d, h, w;
  std::int64_t size() const { return d * h * w; }
};

// Unfolds one sample [C, D, H, W] into a (C k^3) x (Do Ho Wo) matrix.
template <typename T>
void im2col(const T* x, std::int64_t channels, Dims in, Dims out, const ConvGeometry& g, Mat<T>& cols) {
  const int k = g.kernel;
  cols.resize(channels * k * k * k, out.size());
  T* dst = cols.data();
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* xc = x + c * in.size();
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          for (std::int64_t od = 0; od < out.d; ++od) {
            const std::int64_t id = od * g.stride - g.pad + kd;
            if (id < 0 || id >= in.d) {
              std::fill(dst, dst + out.h * out.w, T(0));
              dst += out.h * out.w;
              continue;
            }
            for (std::int64_t oh = 0; oh < out.h; ++oh) {
              const std::int64_t ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= in.h) {
                std::fill(dst, dst + out.w, T(0));
                dst += out.w;
                continue;
              }
              const T* row = xc + (id * in.h + ih) * in.w;
              if (g.stride == 1) {
                for (std::int64_t ow = 0; ow < out.w; ++ow) {
                  const std::int64_t iw = ow - g.pad + kw;
                  *dst++ = (iw >= 0 && iw < in.w) ? row[iw] : T(0);
                }
              } else {
                for (std::int64_t ow = 0; ow < out.w; ++ow) {
                  const std::int64_t iw = ow * g.stride - g.pad + kw;
                  *dst++ = (iw >= 0 && iw < in.w) ? row[iw] : T(0);
                }
              }
            }
          }
        }
  }
}

// Adjoint of im2col: scatters columns back into an accumulated [C, D, H, W] sample.
template <typename T>
void col2im(const Mat<T>& cols, std::int64_t channels, Dims in, Dims out, const ConvGeometry& g, T* x) {
  const int k = g.kernel;
  const T* src = cols.data();
  for (std::int64_t c = 0; c < channels; ++c) {
    T* xc = x + c * in.size();
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          for (std::int64_t od = 0; od < out.d; ++od) {
            const std::int64_t id = od * g.stride - g.pad + kd;
            if (id < 0 || id >= in.d) {
              src += out.h * out.w;
              continue;
            }
            for (std::int64_t oh = 0; oh < out.h; ++oh) {
              const std::int64_t ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= in.h) {
                src += out.w;
                continue;
              }
              T* row = xc + (id * in.h + ih) * in.w;
              for (std::int64_t ow = 0; ow < out.w; ++ow, ++src) {
                const std::int64_t iw = ow * g.stride - g.pad + kw;
                if (iw >= 0 && iw < in.w) row[iw] += *src;
              }
            }
          }
        }
  }
}

template <typename T>
Dims spatial_of(const Tensor5<T>& x) {
  return {x.shape[2], x.shape[3], x.shape[4]};
}

Dims conv_out(Dims in, const ConvGeometry& g) { return {g.out_size(in.d), g.out_size(in.h), g.out_size(in.w)}; }

}  // namespace

template <typename T>
Conv3d<T> Conv3d<T>::make(ParamStore<T>& store, const std::string& name, int cin, int cout, ConvGeometry geom,
                          Rng& rng) {
  Conv3d c;
  c.cin = cin;
  c.cout = cout;
  c.geom = geom;
  const std::int64_t k = geom.kernel;
  c.weight = store.add(name + ".weight", {cout, cin, k, k, k});
  c.bias = store.add(name + ".bias", {cout});
  fill_uniform(store[c.weight].value, std::sqrt(6.0 / double(cin * k * k * k)), rng);
  return c;
}

template <typename T>
Tensor5<T> Conv3d<T>::forward(const ParamStore<T>& store, const Tensor5<T>& x) const {
  if (x.c() != cin) throw std::invalid_argument("Conv3d: channel mismatch");
  const Dims in = spatial_of(x);
  const Dims out = conv_out(in, geom);
  const std::int64_t kk = std::int64_t(geom.kernel) * geom.kernel * geom.kernel;
  const auto w = as_matrix(store[weight], cout, cin * kk);
  const auto b = Eigen::Map<const ColVec<T>>(store[bias].value.data(), cout);
  Tensor5<T> y(x.n(), cout, out.d, out.h, out.w);
  Mat<T> cols;
  for (std::int64_t i = 0; i < x.n(); ++i) {
    im2col(x.sample(i), cin, in, out, geom, cols);
    Eigen::Map<Mat<T>> ys(y.sample(i), cout, out.size());
    ys.noalias() = w * cols;
    ys.colwise() += b;
  }
  return y;
}

template <typename T>
Tensor5<T> Conv3d<T>::backward(ParamStore<T>& store, const Tensor5<T>& x, const Tensor5<T>& dy) const {
  const Dims in = spatial_of(x);
  const Dims out = spatial_of(dy);
  const std::int64_t kk = std::int64_t(geom.kernel) * geom.kernel * geom.kernel;
  const auto w = as_matrix(store[weight], cout, cin * kk);
  auto gw = grad_matrix(store[weight], cout, cin * kk);
  auto gb = Eigen::Map<ColVec<T>>(store[bias].grad.data(), cout);
  Tensor5<T> dx(x.n(), cin, in.d, in.h, in.w);
  Mat<T> cols, dcols;
  for (std::int64_t i = 0; i < x.n(); ++i) {
    im2col(x.sample(i), cin, in, out, geom, cols);
    Eigen::Map<const Mat<T>> dys(dy.sample(i), cout, out.size());
    gw.noalias() += dys * cols.transpose();
    gb += dys.rowwise().sum();
    dcols.noalias() = w.transpose() * dys;
    col2im(dcols, cin, in, out, geom, dx.sample(i));
  }
  return dx;
}

template <typename T>
ConvTranspose3d<T> ConvTranspose3d<T>::make(ParamStore<T>& store, const std::string& name, int cin, int cout,
                                            Rng& rng) {
  ConvTranspose3d c;
  c.cin = cin;
  c.cout = cout;
  const std::int64_t k = c.geom.kernel;
  c.weight = store.add(name + ".weight", {cin, cout, k, k, k});
  c.bias = store.add(name + ".bias", {cout});
  // Each output voxel of a stride-2 transposed conv sees about cin * k^3 / 8 inputs.
  fill_uniform(store[c.weight].value, std::sqrt(6.0 / (double(cin * k * k * k) / 8.0)), rng);
  return c;
}

template <typename T>
Tensor5<T> ConvTranspose3d<T>::forward(const ParamStore<T>& store, const Tensor5<T>& x) const {
  if (x.c() != cin) throw std::invalid_argument("ConvTranspose3d: channel mismatch");
  const Dims in = spatial_of(x);
  const Dims out{in.d * geom.stride, in.h * geom.stride, in.w * geom.stride};
  const std::int64_t kk = std::int64_t(geom.kernel) * geom.kernel * geom.kernel;
  const auto w = as_matrix(store[weight], cin, cout * kk);
  Tensor5<T> y(x.n(), cout, out.d, out.h, out.w);
  Mat<T> cols;
  for (std::int64_t i = 0; i < x.n(); ++i) {
    Eigen::Map<const Mat<T>> xs(x.sample(i), cin, in.size());
    cols.noalias() = w.transpose() * xs;
    // The transposed conv is the adjoint of a stride-2 conv from `out` to `in`.
    col2im(cols, cout, out, in, geom, y.sample(i));
    for (std::int64_t c = 0; c < cout; ++c) {
      T* yc = y.channel(i, c);
      const T bc = store[bias].value[std::size_t(c)];
      for (std::int64_t v = 0; v < out.size(); ++v) yc[v] += bc;
    }
  }
  return y;
}

template <typename T>
Tensor5<T> ConvTranspose3d<T>::backward(ParamStore<T>& store, const Tensor5<T>& x, const Tensor5<T>& dy) const {
  const Dims in = spatial_of(x);
  const Dims out = spatial_of(dy);
  const std::int64_t kk = std::int64_t(geom.kernel) * geom.kernel * geom.kernel;
  const auto w = as_matrix(store[weight], cin, cout * kk);
  auto gw = grad_matrix(store[weight], cin, cout * kk);
  Tensor5<T> dx(x.n(), cin, in.d, in.h, in.w);
  Mat<T> dcols;
  for (std::int64_t i = 0; i < x.n(); ++i) {
    im2col(dy.sample(i), cout, out, in, geom, dcols);
    Eigen::Map<const Mat<T>> xs(x.sample(i), cin, in.size());
    gw.noalias() += xs * dcols.transpose();
    Eigen::Map<Mat<T>> dxs(dx.sample(i), cin, in.size());
    dxs.noalias() = w * dcols;
    for (std::int64_t c = 0; c < cout; ++c) {
      const T* g = dy.channel(i, c);
      double acc = 0.0;
      for (std::int64_t v = 0; v < out.size(); ++v) acc += double(g[v]);
      store[bias].grad[std::size_t(c)] += T(acc);
    }
  }
  return dx;
}

template <typename T>
BatchNorm3d<T> BatchNorm3d<T>::make(ParamStore<T>& store, const std::string& name, int channels) {
  BatchNorm3d b;
  b.channels = channels;
  b.gamma = store.add(name + ".weight", {channels});
  b.beta = store.add(name + ".bias", {channels});
  b.running_mean = store.add(name + ".running_mean", {channels}, false);
  b.running_var = store.add(name + ".running_var", {channels}, false);
  std::fill(store[b.gamma].value.begin(), store[b.gamma].value.end(), T(1));
  std::fill(store[b.running_var].value.begin(), store[b.running_var].value.end(), T(1));
  return b;
}

template <typename T>
Tensor5<T> BatchNorm3d<T>::forward_train(ParamStore<T>& store, const Tensor5<T>& x, Cache* cache) const {
  const std::int64_t L = x.spatial();
  const std::int64_t M = x.n() * L;
  Tensor5<T> y = x;
  if (cache) {
    cache->xhat.resize(x.data.size());
    cache->rstd.assign(std::size_t(channels), T(0));
    cache->train = true;
  }
  for (std::int64_t c = 0; c < channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::int64_t i = 0; i < x.n(); ++i) {
      const T* xc = x.channel(i, c);
      for (std::int64_t v = 0; v < L; ++v) sum += double(xc[v]);
    }
    const double mean = sum / double(M);
    for (std::int64_t i = 0; i < x.n(); ++i) {
      const T* xc = x.channel(i, c);
      for (std::int64_t v = 0; v < L; ++v) {
        const double d = double(xc[v]) - mean;
        sq += d * d;
      }
    }
    const double var = sq / double(M);
    const double rstd = 1.0 / std::sqrt(var + eps);
    const T g = store[gamma].value[std::size_t(c)];
    const T b = store[beta].value[std::size_t(c)];
    for (std::int64_t i = 0; i < x.n(); ++i) {
      const T* xc = x.channel(i, c);
      T* yc = y.channel(i, c);
      T* hc = cache ? cache->xhat.data() + (yc - y.data.data()) : nullptr;
      for (std::int64_t v = 0; v < L; ++v) {
        const T xh = T((double(xc[v]) - mean) * rstd);
        if (hc) hc[v] = xh;
        yc[v] = g * xh + b;
      }
    }
    if (cache) cache->rstd[std::size_t(c)] = T(rstd);
    auto& rm = store[running_mean].value[std::size_t(c)];
    auto& rv = store[running_var].value[std::size_t(c)];
    const double unbiased = M > 1 ? sq / double(M - 1) : var;
    rm = T((1.0 - momentum) * double(rm) + momentum * mean);
    rv = T((1.0 - momentum) * double(rv) + momentum * unbiased);
  }
  return y;
}

template <typename T>
Tensor5<T> BatchNorm3d<T>::forward_eval(const ParamStore<T>& store, const Tensor5<T>& x, Cache* cache) const {
  const std::int64_t L = x.spatial();
  Tensor5<T> y = x;
  if (cache) {
    cache->rstd.assign(std::size_t(channels), T(0));
    cache->train = false;
  }
  for (std::int64_t c = 0; c < channels; ++c) {
    const double mean = double(store[running_mean].value[std::size_t(c)]);
    const double rstd = 1.0 / std::sqrt(double(store[running_var].value[std::size_t(c)]) + eps);
    const T scale = T(rstd * double(store[gamma].value[std::size_t(c)]));
    const T shift = T(double(store[beta].value[std::size_t(c)]) - mean * rstd * double(store[gamma].value[std::size_t(c)]));
    if (cache) cache->rstd[std::size_t(c)] = T(rstd);
    for (std::int64_t i = 0; i < x.n(); ++i) {
      T* yc = y.channel(i, c);
      for (std::int64_t v = 0; v < L; ++v) yc[v] = yc[v] * scale + shift;
    }
  }
  if (cache) {
    // xhat is only needed for gamma's gradient.
    cache->xhat.resize(x.data.size());
    for (std::int64_t c = 0; c < channels; ++c) {
      const double mean = double(store[running_mean].value[std::size_t(c)]);
      for (std::int64_t i = 0; i < x.n(); ++i) {
        const T* xc = x.channel(i, c);
        T* hc = cache->xhat.data() + (xc - x.data.data());
        for (std::int64_t v = 0; v < L; ++v) hc[v] = T((double(xc[v]) - mean) * double(cache->rstd[std::size_t(c)]));
      }
    }
  }
  return y;
}

template <typename T>
Tensor5<T> BatchNorm3d<T>::backward(ParamStore<T>& store, const Cache& cache, const Tensor5<T>& dy) const {
  const std::int64_t L = dy.spatial();
  const std::int64_t M = dy.n() * L;
  Tensor5<T> dx = dy;
  for (std::int64_t c = 0; c < channels; ++c) {
    const double g = double(store[gamma].value[std::size_t(c)]);
    const double rstd = double(cache.rstd[std::size_t(c)]);
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::int64_t i = 0; i < dy.n(); ++i) {
      const T* dc = dy.channel(i, c);
      const T* hc = cache.xhat.data() + (dc - dy.data.data());
      for (std::int64_t v = 0; v < L; ++v) {
        sum_dy += double(dc[v]);
        sum_dy_xhat += double(dc[v]) * double(hc[v]);
      }
    }
    store[gamma].grad[std::size_t(c)] += T(sum_dy_xhat);
    store[beta].grad[std::size_t(c)] += T(sum_dy);
    for (std::int64_t i = 0; i < dy.n(); ++i) {
      const T* dc = dy.channel(i, c);
      const T* hc = cache.xhat.data() + (dc - dy.data.data());
      T* out = dx.channel(i, c);
      if (cache.train) {
        // dx = g rstd / M (M dy - sum(dy) - xhat sum(dy xhat))
        const double a = g * rstd / double(M);
        for (std::int64_t v = 0; v < L; ++v)
          out[v] = T(a * (double(M) * double(dc[v]) - sum_dy - double(hc[v]) * sum_dy_xhat));
      } else {
        for (std::int64_t v = 0; v < L; ++v) out[v] = T(g * rstd * double(dc[v]));
      }
    }
  }
  return dx;
}

template <typename T>
void relu_inplace(Tensor5<T>& x) {
  for (auto& v : x.data) v = v > T(0) ? v : T(0);
}

template <typename T>
Tensor5<T> relu_backward(const Tensor5<T>& y, const Tensor5<T>& dy) {
  Tensor5<T> dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i)
    if (!(y.data[i] > T(0))) dx.data[i] = T(0);
  return dx;
}

template <typename T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b) {
  if (a.n() != b.n() || a.spatial() != b.spatial()) throw std::invalid_argument("concat_channels: shape mismatch");
  Tensor5<T> out(a.n(), a.c() + b.c(), a.shape[2], a.shape[3], a.shape[4]);
  for (std::int64_t i = 0; i < a.n(); ++i) {
    std::copy(a.sample(i), a.sample(i) + a.sample_size(), out.sample(i));
    std::copy(b.sample(i), b.sample(i) + b.sample_size(), out.sample(i) + a.sample_size());
  }
  return out;
}

template <typename T>
std::pair<Tensor5<T>, Tensor5<T>> split_channels(const Tensor5<T>& x, std::int64_t first) {
  Tensor5<T> a(x.n(), first, x.shape[2], x.shape[3], x.shape[4]);
  Tensor5<T> b(x.n(), x.c() - first, x.shape[2], x.shape[3], x.shape[4]);
  for (std::int64_t i = 0; i < x.n(); ++i) {
    std::copy(x.sample(i), x.sample(i) + a.sample_size(), a.sample(i));
    std::copy(x.sample(i) + a.sample_size(), x.sample(i) + x.sample_size(), b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

template struct Conv3d<float>;
template struct Conv3d<double>;
template struct ConvTranspose3d<float>;
template struct ConvTranspose3d<double>;
template struct BatchNorm3d<float>;
template struct BatchNorm3d<double>;
template void relu_inplace(Tensor5<float>&);
template void relu_inplace(Tensor5<double>&);
template Tensor5<float> relu_backward(const Tensor5<float>&, const Tensor5<float>&);
template Tensor5<double> relu_backward(const Tensor5<double>&, const Tensor5<double>&);
template Tensor5<float> concat_channels(const Tensor5<float>&, const Tensor5<float>&);
template Tensor5<double> concat_channels(const Tensor5<double>&, const Tensor5<double>&);
template std::pair<Tensor5<float>, Tensor5<float>> split_channels(const Tensor5<float>&, std::int64_t);
template std::pair<Tensor5<double>, Tensor5<double>> split_channels(const Tensor5<double>&, std::int64_t);

}  // namespace maskfill::nn
