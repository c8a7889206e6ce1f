#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "maskfill/nn/params.hpp"

namespace maskfill::nn {

/// Batch of multi-channel volumes, layout [N, C, D, H, W].
template <typename T>
struct Tensor5 {
  std::array<std::int64_t, 5> shape{0, 0, 0, 0, 0};
  Buffer<T> data;

  Tensor5() = default;
  Tensor5(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, T fill = T(0))
      : shape{n, c, d, h, w}, data(static_cast<std::size_t>(n * c * d * h * w), fill) {}

  std::int64_t n() const { return shape[0]; }
  std::int64_t c() const { return shape[1]; }
  std::int64_t spatial() const { return shape[2] * shape[3] * shape[4]; }
  std::int64_t sample_size() const { return shape[1] * spatial(); }
  T* sample(std::int64_t i) { return data.data() + i * sample_size(); }
  const T* sample(std::int64_t i) const { return data.data() + i * sample_size(); }
  T* channel(std::int64_t i, std::int64_t ch) { return sample(i) + ch * spatial(); }
  const T* channel(std::int64_t i, std::int64_t ch) const { return sample(i) + ch * spatial(); }
};

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  std::int64_t out_size(std::int64_t in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

/// Dense 3D convolution via im2col + GEMM. Weight layout [Cout, Cin, k, k, k].
template <typename T>
struct Conv3d {
  std::size_t weight = 0, bias = 0;
  int cin = 0, cout = 0;
  ConvGeometry geom;

  static Conv3d make(ParamStore<T>& store, const std::string& name, int cin, int cout, ConvGeometry geom, Rng& rng);
  Tensor5<T> forward(const ParamStore<T>& store, const Tensor5<T>& x) const;
  Tensor5<T> backward(ParamStore<T>& store, const Tensor5<T>& x, const Tensor5<T>& dy) const;
};

/// Transposed 3D convolution (kernel 3, stride 2, pad 1, output padding 1):
/// doubles each spatial dimension. Weight layout [Cin, Cout, k, k, k].
template <typename T>
struct ConvTranspose3d {
  std::size_t weight = 0, bias = 0;
  int cin = 0, cout = 0;
  ConvGeometry geom{3, 2, 1};

  static ConvTranspose3d make(ParamStore<T>& store, const std::string& name, int cin, int cout, Rng& rng);
  Tensor5<T> forward(const ParamStore<T>& store, const Tensor5<T>& x) const;
  Tensor5<T> backward(ParamStore<T>& store, const Tensor5<T>& x, const Tensor5<T>& dy) const;
};

/// Per-channel batch normalization over (N, D, H, W).
template <typename T>
struct BatchNorm3d {
  std::size_t gamma = 0, beta = 0, running_mean = 0, running_var = 0;
  int channels = 0;
  double momentum = 0.1;
  double eps = 1e-5;

  struct Cache {
    std::vector<T> xhat;
    std::vector<T> rstd;  // per channel
    bool train = false;
  };

  static BatchNorm3d make(ParamStore<T>& store, const std::string& name, int channels);
  /// Batch statistics; updates the running buffers.
  Tensor5<T> forward_train(ParamStore<T>& store, const Tensor5<T>& x, Cache* cache) const;
  /// Running statistics; read-only.
  Tensor5<T> forward_eval(const ParamStore<T>& store, const Tensor5<T>& x, Cache* cache = nullptr) const;
  Tensor5<T> backward(ParamStore<T>& store, const Cache& cache, const Tensor5<T>& dy) const;
};

template <typename T>
void relu_inplace(Tensor5<T>& x);
/// dy masked by (y > 0), where y is the ReLU output.
template <typename T>
Tensor5<T> relu_backward(const Tensor5<T>& y, const Tensor5<T>& dy);

template <typename T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b);
/// Splits a channel-concatenated gradient back into its two parts.
template <typename T>
std::pair<Tensor5<T>, Tensor5<T>> split_channels(const Tensor5<T>& x, std::int64_t first);

}  // namespace maskfill::nn
