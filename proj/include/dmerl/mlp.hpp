#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmerl/errors.hpp"
#include "dmerl/rng.hpp"
#include "dmerl/tensor.hpp"

namespace dmerl {

enum class Activation { identity, tanh, relu };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "identity";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

/// y = act(x W + b) with W stored as [in, out].
struct DenseLayer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::identity;

  [[nodiscard]] std::size_t in_dim() const { return weight.shape()[0]; }
  [[nodiscard]] std::size_t out_dim() const { return weight.shape()[1]; }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Parameters of a fully connected network. Also used as the container for
/// parameter gradients and optimizer moments, which share its shapes.
struct MlpParams {
  std::vector<DenseLayer> layers;

  [[nodiscard]] std::size_t in_dim() const { return layers.front().in_dim(); }
  [[nodiscard]] std::size_t out_dim() const { return layers.back().out_dim(); }

  [[nodiscard]] std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Throws unless adjacent layers chain and biases match their layer width.
  void validate() const {
    if (layers.empty()) throw DimensionError("network has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.out_dim())
        throw DimensionError("layer " + std::to_string(i) + ": inconsistent weight/bias shapes " +
                             shape_string(l.weight.shape()) + " / " + shape_string(l.bias.shape()));
      if (i > 0 && layers[i - 1].out_dim() != l.in_dim())
        throw DimensionError("layer " + std::to_string(i) + ": input width " + std::to_string(l.in_dim()) +
                             " does not chain with previous output width " +
                             std::to_string(layers[i - 1].out_dim()));
    }
  }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Glorot-uniform weights, zero biases. `zero_output_layer` zeroes the last
/// layer's weights so the network starts as the zero function.
inline MlpParams make_mlp(std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
                          Activation hidden_activation, Rng& rng, bool zero_output_layer = false) {
  MlpParams p;
  std::size_t prev = in_dim;
  std::vector<std::size_t> widths = hidden;
  widths.push_back(out_dim);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::size_t w = widths[i];
    const bool last = i + 1 == widths.size();
    DenseLayer layer{Tensor::matrix(prev, w), Tensor({w}), last ? Activation::identity : hidden_activation};
    if (!(last && zero_output_layer)) {
      const double limit = std::sqrt(6.0 / static_cast<double>(prev + w));
      for (double& v : layer.weight.data()) v = rng.uniform(-limit, limit);
    }
    p.layers.push_back(std::move(layer));
    prev = w;
  }
  return p;
}

inline MlpParams zeros_like(const MlpParams& p) {
  MlpParams z = p;
  for (auto& l : z.layers) {
    l.weight.fill(0.0);
    l.bias.fill(0.0);
  }
  return z;
}

/// Visits every parameter tensor in declaration order (w0, b0, w1, b1, ...).
template <typename F>
void for_each_tensor(MlpParams& p, F&& f) {
  for (auto& l : p.layers) {
    f(l.weight);
    f(l.bias);
  }
}

template <typename F>
void for_each_tensor(const MlpParams& p, F&& f) {
  for (const auto& l : p.layers) {
    f(l.weight);
    f(l.bias);
  }
}

inline std::vector<double> flatten(const MlpParams& p) {
  std::vector<double> out;
  out.reserve(p.param_count());
  for_each_tensor(p, [&](const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

inline MlpParams unflatten(std::span<const double> flat, const MlpParams& like) {
  if (flat.size() != like.param_count())
    throw DimensionError("unflatten: " + std::to_string(flat.size()) + " values for " +
                         std::to_string(like.param_count()) + " parameters");
  MlpParams out = like;
  std::size_t offset = 0;
  for_each_tensor(out, [&](Tensor& t) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.data().begin());
    offset += t.size();
  });
  return out;
}

/// y += a * x over matching parameter containers.
inline void axpy(MlpParams& y, double a, const MlpParams& x) {
  for (std::size_t i = 0; i < y.layers.size(); ++i) {
    y.layers[i].weight.mat() += a * x.layers[i].weight.mat();
    y.layers[i].bias.mat() += a * x.layers[i].bias.mat();
  }
}

inline void scale(MlpParams& y, double a) {
  for_each_tensor(y, [a](Tensor& t) { t.mat() *= a; });
}

inline bool all_finite(const MlpParams& p) {
  bool ok = true;
  for_each_tensor(p, [&](const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

/// Layer inputs and outputs retained from a forward pass.
/// values[0] is the network input, values[i + 1] the output of layer i.
struct MlpCache {
  std::vector<Tensor> values;
};

namespace detail {

inline void check_input(const MlpParams& p, const Tensor& input) {
  if (input.rank() != 2) throw DimensionError("mlp input must be [batch, in_dim], got " + shape_string(input.shape()));
  if (input.cols() != p.in_dim())
    throw DimensionError("layer 0: expected input width " + std::to_string(p.in_dim()) + ", got " +
                         std::to_string(input.cols()));
}

inline void apply_activation(Activation a, MatrixMap z) {
  switch (a) {
    case Activation::identity: break;
    case Activation::tanh: z = z.array().tanh(); break;
    case Activation::relu: z = z.array().max(0.0); break;
  }
}

/// Multiplies an upstream gradient by the activation derivative, expressed
/// through the layer output.
inline void activation_backward(Activation a, const Tensor& output, RowMatrix& grad) {
  switch (a) {
    case Activation::identity: break;
    case Activation::tanh: grad.array() *= 1.0 - output.mat().array().square(); break;
    case Activation::relu: grad.array() *= (output.mat().array() > 0.0).cast<double>(); break;
  }
}

}  // namespace detail

inline Tensor mlp_forward(const MlpParams& p, const Tensor& input, MlpCache& cache) {
  detail::check_input(p, input);
  cache.values.resize(p.layers.size() + 1);
  cache.values[0] = input;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    const Tensor& x = cache.values[i];
    if (x.cols() != l.in_dim())
      throw DimensionError("layer " + std::to_string(i) + ": expected input width " + std::to_string(l.in_dim()) +
                           ", got " + std::to_string(x.cols()));
    Tensor z = Tensor::matrix(x.rows(), l.out_dim());
    auto zm = z.mat();
    zm.noalias() = x.mat() * l.weight.mat();
    zm.rowwise() += l.bias.mat().row(0);
    detail::apply_activation(l.activation, zm);
    cache.values[i + 1] = std::move(z);
  }
  return cache.values.back();
}

inline Tensor mlp_forward(const MlpParams& p, const Tensor& input) {
  MlpCache cache;
  return mlp_forward(p, input, cache);
}

/// Reverse pass for sum(upstream ⊙ forward(input)). Parameter gradients are
/// accumulated into `param_grads` (which must be shaped like `p`); the input
/// gradient is written to `input_grad` when non-null.
inline void mlp_backward_into(const MlpParams& p, const MlpCache& cache, const Tensor& upstream,
                              MlpParams& param_grads, Tensor* input_grad) {
  const Tensor& out = cache.values.back();
  if (upstream.shape() != out.shape())
    throw DimensionError("upstream gradient shape " + shape_string(upstream.shape()) +
                         " does not match network output " + shape_string(out.shape()));
  RowMatrix grad = upstream.mat();
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& l = p.layers[li];
    detail::activation_backward(l.activation, cache.values[li + 1], grad);
    const auto x = cache.values[li].mat();
    param_grads.layers[li].weight.mat().noalias() += x.transpose() * grad;
    param_grads.layers[li].bias.mat() += grad.colwise().sum();
    if (li > 0 || input_grad != nullptr) {
      RowMatrix next = grad * l.weight.mat().transpose();
      grad = std::move(next);
    }
  }
  if (input_grad != nullptr) {
    *input_grad = Tensor::matrix(static_cast<std::size_t>(grad.rows()), static_cast<std::size_t>(grad.cols()));
    input_grad->mat() = grad;
  }
}

/// Gradient of sum(upstream ⊙ forward(input)) with respect to the input only.
inline Tensor mlp_input_gradient(const MlpParams& p, const MlpCache& cache, const Tensor& upstream) {
  if (upstream.shape() != cache.values.back().shape())
    throw DimensionError("upstream gradient shape " + shape_string(upstream.shape()) +
                         " does not match network output " + shape_string(cache.values.back().shape()));
  RowMatrix grad = upstream.mat();
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    detail::activation_backward(p.layers[li].activation, cache.values[li + 1], grad);
    RowMatrix next = grad * p.layers[li].weight.mat().transpose();
    grad = std::move(next);
  }
  Tensor out = Tensor::matrix(static_cast<std::size_t>(grad.rows()), static_cast<std::size_t>(grad.cols()));
  out.mat() = grad;
  return out;
}

struct MlpGrads {
  MlpParams params;
  Tensor input;
};

inline MlpGrads mlp_backward(const MlpParams& p, const MlpCache& cache, const Tensor& upstream) {
  MlpGrads g{zeros_like(p), {}};
  mlp_backward_into(p, cache, upstream, g.params, &g.input);
  return g;
}

inline MlpGrads mlp_backward(const MlpParams& p, const Tensor& input, const Tensor& upstream) {
  MlpCache cache;
  mlp_forward(p, input, cache);
  return mlp_backward(p, cache, upstream);
}

}  // namespace dmerl
