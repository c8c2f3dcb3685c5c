#pragma once

#include <functional>
#include <string>

#include "dcollab/ops.hpp"
#include "dcollab/rng.hpp"
#include "dcollab/tensor.hpp"

namespace dcollab {

// Learnable parameters receive gradients and optimizer updates; buffers
// (batch-norm running stats) are checkpointed but never differentiated.
enum class ParamKind { kParam, kBuffer };

template <typename T>
using ParamVisitor =
    std::function<void(const std::string&, Tensor<T>&, ParamKind)>;

// Fan-in-scaled zero-mean init with rectifier gain (std = sqrt(2/fan_in)).
template <typename T>
void he_normal_init(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  T* p = w.data();
  const std::int64_t n = w.numel();
  for (std::int64_t i = 0; i < n; ++i)
    p[i] = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;  // [Cout, Cin, k, k]
  Tensor<T> bias;    // undefined when the conv feeds a batch norm
  int stride = 1;
  int padding = 0;

  Conv2dLayer() = default;

  Conv2dLayer(int in_ch, int out_ch, int kernel, int stride_, int padding_,
              bool with_bias, Rng& rng)
      : stride(stride_), padding(padding_) {
    weight = Tensor<T>::zeros({out_ch, in_ch, kernel, kernel});
    he_normal_init(weight, static_cast<std::int64_t>(in_ch) * kernel * kernel,
                   rng);
    weight.set_requires_grad(true);
    if (with_bias) {
      bias = Tensor<T>::zeros({out_ch});
      bias.set_requires_grad(true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, padding);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight, ParamKind::kParam);
    if (bias.defined()) fn(prefix + ".bias", bias, ParamKind::kParam);
  }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  BatchNormLayer() = default;

  // gamma defaults to 1 (identity scale); pass zero_gamma for layers that
  // should start as the zero map.
  explicit BatchNormLayer(int channels, bool zero_gamma = false) {
    gamma = Tensor<T>::filled({channels}, zero_gamma ? T(0) : T(1));
    beta = Tensor<T>::zeros({channels});
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
    running_mean = Tensor<T>::zeros({channels});
    running_var = Tensor<T>::filled({channels}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return batch_norm(x, gamma, beta, running_mean, running_var, mode, epsilon,
                      momentum);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma, ParamKind::kParam);
    fn(prefix + ".beta", beta, ParamKind::kParam);
    fn(prefix + ".running_mean", running_mean, ParamKind::kBuffer);
    fn(prefix + ".running_var", running_var, ParamKind::kBuffer);
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [Dout, Din]
  Tensor<T> bias;    // [Dout]

  LinearLayer() = default;

  LinearLayer(int in_dim, int out_dim, Rng& rng) {
    weight = Tensor<T>::zeros({out_dim, in_dim});
    he_normal_init(weight, in_dim, rng);
    weight.set_requires_grad(true);
    bias = Tensor<T>::zeros({out_dim});
    bias.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear(x, weight, bias);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight, ParamKind::kParam);
    fn(prefix + ".bias", bias, ParamKind::kParam);
  }
};

}  // namespace dcollab
