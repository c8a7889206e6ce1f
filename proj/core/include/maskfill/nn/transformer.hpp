#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "maskfill/nn/params.hpp"

namespace maskfill::nn {

/// y = x W^T + b over token rows.
template <typename T>
struct Linear {
  std::size_t weight = 0, bias = 0;
  int in = 0, out = 0;

  static Linear make(ParamStore<T>& store, const std::string& name, int in, int out, Rng& rng);
  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x) const;
  /// Accumulates parameter gradients and returns dL/dx.
  Mat<T> backward(ParamStore<T>& store, const Mat<T>& x, const Mat<T>& dy) const;
};

template <typename T>
struct LayerNorm {
  std::size_t gamma = 0, beta = 0;
  int dim = 0;
  double eps = 1e-6;

  struct Cache {
    Mat<T> xhat;
    ColVec<T> rstd;
  };

  static LayerNorm make(ParamStore<T>& store, const std::string& name, int dim);
  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x, Cache* cache) const;
  Mat<T> backward(ParamStore<T>& store, const Cache& cache, const Mat<T>& dy) const;
};

/// Exact (erf) GELU and its derivative.
template <typename T>
Mat<T> gelu(const Mat<T>& x);
template <typename T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy);

template <typename T>
struct MultiHeadAttention {
  Linear<T> qkv, proj;
  int dim = 0, heads = 1;

  struct Cache {
    Mat<T> x, qkv, context;
    std::vector<Mat<T>> probs;  // one (n x n) matrix per head
  };

  static MultiHeadAttention make(ParamStore<T>& store, const std::string& name, int dim, int heads, Rng& rng);
  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x, Cache* cache) const;
  Mat<T> backward(ParamStore<T>& store, const Cache& cache, const Mat<T>& dy) const;
};

/// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.)).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> norm1, norm2;
  MultiHeadAttention<T> attn;
  Linear<T> fc1, fc2;

  struct Cache {
    typename LayerNorm<T>::Cache n1, n2;
    typename MultiHeadAttention<T>::Cache attn;
    Mat<T> h1, h2, pre_act, act;
  };

  static TransformerBlock make(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio,
                               Rng& rng);
  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x, Cache* cache) const;
  Mat<T> backward(ParamStore<T>& store, const Cache& cache, const Mat<T>& dy) const;
};

/// Fixed 3D sinusoidal encoding for a grid of patches; row p belongs to patch
/// index p. Each axis gets an equal, even share of the channels; leftover
/// channels are zero.
Mat<double> sincos_position_encoding(int dim, const std::array<std::int64_t, 3>& grid_dims);

}  // namespace maskfill::nn
