#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace maskfill::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Rng = std::mt19937_64;

/// Storage aligned to Eigen's vector width, so mapped reductions take the
/// same code path for every allocation.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Named tensor with its gradient accumulator. Non-trainable entries
/// (normalization running statistics) are skipped by the optimizer but are
/// checkpointed and averaged by EMA like any other entry.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<std::int64_t> shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool trainable = true;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
};

/// Flat, index-addressed parameter container. Layers hold indices into the
/// store, so copying a network copies its parameters by value.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, std::vector<std::int64_t> shape, bool trainable = true) {
    Parameter<T> p;
    p.name = std::move(name);
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    p.shape = std::move(shape);
    p.value.assign(static_cast<std::size_t>(n), T(0));
    p.grad.assign(static_cast<std::size_t>(n), T(0));
    p.trainable = trainable;
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
  void scale_grad(T s) {
    for (auto& p : params_)
      for (auto& g : p.grad) g *= s;
  }

  std::int64_t num_scalars(bool trainable_only = true) const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p.trainable || !trainable_only) n += p.numel();
    return n;
  }

  const Parameter<T>* find(std::string_view name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  bool same_layout(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != other.params_[i].name || params_[i].shape != other.params_[i].shape) return false;
    }
    return true;
  }

  /// FNV-1a over the raw bytes of every value.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
      for (std::size_t i = 0; i < p.value.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
    return h;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) {
      auto idx = out.add(p.name, p.shape, p.trainable);
      for (std::size_t i = 0; i < p.value.size(); ++i) out[idx].value[i] = static_cast<U>(p.value[i]);
    }
    return out;
  }

  /// Copies values (not gradients) from a store with the same layout.
  template <typename U>
  void assign_values(const ParamStore<U>& other) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& src = other[i].value;
      for (std::size_t k = 0; k < src.size(); ++k) params_[i].value[k] = static_cast<T>(src[k]);
    }
  }

 private:
  std::vector<Parameter<T>> params_;
};

template <typename T>
Eigen::Map<const Mat<T>> as_matrix(const Parameter<T>& p, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Mat<T>>(p.value.data(), rows, cols);
}
template <typename T>
Eigen::Map<Mat<T>> grad_matrix(Parameter<T>& p, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<Mat<T>>(p.grad.data(), rows, cols);
}

template <typename T>
void fill_uniform(Buffer<T>& v, double bound, Rng& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto& x : v) x = static_cast<T>(d(rng));
}

template <typename T>
void fill_normal(Buffer<T>& v, double stddev, Rng& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& x : v) x = static_cast<T>(d(rng));
}

}  // namespace maskfill::nn
