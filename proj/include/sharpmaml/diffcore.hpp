#pragma once

// Exact value / gradient / Hessian-vector product for the supported models:
// dense MLPs with smooth activations and analytic quadratics.

#include "sharpmaml/core.hpp"
#include "sharpmaml/dual.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace sharpmaml {

enum class ModelKind { mlp, quadratic };
enum class Activation { tanh, softplus, identity };
enum class LossKind { mse, cross_entropy, quadratic_analytic };

inline std::string to_string(ModelKind k) { return k == ModelKind::mlp ? "mlp" : "quadratic"; }

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::softplus: return "softplus";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "softplus") return Activation::softplus;
  if (s == "identity") return Activation::identity;
  // relu is rejected on purpose: its Hessian vanishes almost everywhere
  throw ConfigError("unsupported activation '" + s + "' (tanh, softplus, identity)");
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "mlp") return ModelKind::mlp;
  if (s == "quadratic") return ModelKind::quadratic;
  throw ConfigError("unknown model kind '" + s + "'");
}

/// A contiguous slice of the flat parameter vector.
struct ParamGroup {
  std::size_t offset;
  std::size_t size;
  int layer;
  bool bias;
};

/// Model architecture. MLP layout in the flat vector, layer by layer:
/// weights (out x in, row-major) followed by biases.
struct ModelSpec {
  ModelKind kind = ModelKind::mlp;
  std::vector<int> layer_widths;  // mlp: {d_in, hidden..., d_out}; quadratic: {d}
  Activation activation = Activation::tanh;
  std::size_t head_split = 0;     // [0, head_split) is the body, the rest is the head

  static ModelSpec mlp(std::vector<int> widths, Activation act = Activation::tanh) {
    ModelSpec m;
    m.kind = ModelKind::mlp;
    m.layer_widths = std::move(widths);
    m.activation = act;
    m.validate();
    return m;
  }

  static ModelSpec quadratic(int d) {
    ModelSpec m;
    m.kind = ModelKind::quadratic;
    m.layer_widths = {d};
    m.activation = Activation::identity;
    m.validate();
    return m;
  }

  std::size_t num_layers() const { return kind == ModelKind::mlp ? layer_widths.size() - 1 : 0; }

  std::size_t layer_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i)
      off += static_cast<std::size_t>(layer_widths[i] + 1) * static_cast<std::size_t>(layer_widths[i + 1]);
    return off;
  }

  std::size_t dim() const {
    if (kind == ModelKind::quadratic) return layer_widths.empty() ? 0 : static_cast<std::size_t>(layer_widths[0]);
    return layer_offset(num_layers());
  }

  int input_dim() const { return layer_widths.front(); }
  int output_dim() const { return layer_widths.back(); }

  /// Offset of the output layer; the natural ANIL split.
  std::size_t last_layer_offset() const {
    return kind == ModelKind::mlp ? layer_offset(num_layers() - 1) : 0;
  }

  /// Filter groups: each output unit's incoming weights, then one group per
  /// layer for the biases. A quadratic is a single group.
  std::vector<ParamGroup> groups() const {
    std::vector<ParamGroup> out;
    if (kind == ModelKind::quadratic) {
      out.push_back({0, dim(), 0, false});
      return out;
    }
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const auto in = static_cast<std::size_t>(layer_widths[l]);
      const auto units = static_cast<std::size_t>(layer_widths[l + 1]);
      const std::size_t off = layer_offset(l);
      for (std::size_t u = 0; u < units; ++u) out.push_back({off + u * in, in, static_cast<int>(l), false});
      out.push_back({off + units * in, units, static_cast<int>(l), true});
    }
    return out;
  }

  std::string layout_string() const {
    std::string s = to_string(kind) + " ";
    for (std::size_t i = 0; i < layer_widths.size(); ++i) s += (i ? "-" : "") + std::to_string(layer_widths[i]);
    s += " " + to_string(activation) + " " + std::to_string(head_split);
    return s;
  }

  void validate() const {
    if (kind == ModelKind::quadratic) {
      require(layer_widths.size() == 1 && layer_widths[0] >= 1, "quadratic model needs one positive dimension");
    } else {
      require(layer_widths.size() >= 2, "mlp needs at least input and output widths");
      for (int w : layer_widths) require(w >= 1, "layer widths must be positive");
    }
    require(head_split <= dim(), "head_split out of range");
  }

  bool operator==(const ModelSpec&) const = default;
};

/// Support or query set. For quadratic_analytic the "data" is the SPD matrix
/// A and center c, and the loss is 0.5 (theta-c)^T A (theta-c).
struct Dataset {
  LossKind loss_kind = LossKind::mse;
  Matrix inputs;            // n x d_in
  Matrix targets;           // n x d_out (mse)
  std::vector<int> labels;  // n (cross_entropy)
  Matrix A;                 // quadratic_analytic
  ParamVector center;

  static Dataset regression(Matrix x, Matrix y) {
    Dataset d;
    d.loss_kind = LossKind::mse;
    d.inputs = std::move(x);
    d.targets = std::move(y);
    return d;
  }

  static Dataset classification(Matrix x, std::vector<int> labels) {
    Dataset d;
    d.loss_kind = LossKind::cross_entropy;
    d.inputs = std::move(x);
    d.labels = std::move(labels);
    return d;
  }

  static Dataset quadratic(Matrix a, ParamVector c) {
    Dataset d;
    d.loss_kind = LossKind::quadratic_analytic;
    d.A = std::move(a);
    d.center = std::move(c);
    return d;
  }

  std::size_t size() const {
    return loss_kind == LossKind::quadratic_analytic ? 1 : static_cast<std::size_t>(inputs.rows());
  }

  /// Rows in the given order. The analytic quadratic has one "row".
  Dataset rows(const std::vector<std::size_t>& idx) const {
    if (loss_kind == LossKind::quadratic_analytic) return *this;
    Dataset d;
    d.loss_kind = loss_kind;
    d.inputs.resize(static_cast<Eigen::Index>(idx.size()), inputs.cols());
    if (loss_kind == LossKind::mse) d.targets.resize(static_cast<Eigen::Index>(idx.size()), targets.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto src = static_cast<Eigen::Index>(idx[r]);
      d.inputs.row(static_cast<Eigen::Index>(r)) = inputs.row(src);
      if (loss_kind == LossKind::mse)
        d.targets.row(static_cast<Eigen::Index>(r)) = targets.row(src);
      else
        d.labels.push_back(labels[idx[r]]);
    }
    return d;
  }

  bool operator==(const Dataset& o) const {
    return loss_kind == o.loss_kind && inputs == o.inputs && targets == o.targets && labels == o.labels &&
           A == o.A && center == o.center;
  }
};

namespace detail {

inline void check_compatible(const ModelSpec& model, const Dataset& data, Eigen::Index params_dim) {
  if (static_cast<std::size_t>(params_dim) != model.dim())
    throw ConfigError("parameter dimension " + std::to_string(params_dim) + " does not match model dimension " +
                      std::to_string(model.dim()));
  if (data.loss_kind == LossKind::quadratic_analytic) {
    require(model.kind == ModelKind::quadratic, "quadratic data requires a quadratic model");
    require(data.A.rows() == params_dim && data.A.cols() == params_dim && data.center.size() == params_dim,
            "quadratic data dimension mismatch");
    return;
  }
  require(model.kind == ModelKind::mlp, "sample data requires an mlp model");
  require(data.inputs.rows() >= 1, "dataset is empty");
  require(data.inputs.cols() == model.input_dim(), "input width does not match model");
  if (data.loss_kind == LossKind::mse) {
    require(data.targets.rows() == data.inputs.rows() && data.targets.cols() == model.output_dim(),
            "target shape does not match model");
  } else {
    require(data.labels.size() == static_cast<std::size_t>(data.inputs.rows()), "label count mismatch");
    for (int y : data.labels) require(y >= 0 && y < model.output_dim(), "label out of range");
  }
}

template <class T>
T activate(Activation act, const T& z) {
  using std::exp;
  using std::log1p;
  using std::tanh;
  switch (act) {
    case Activation::tanh: return tanh(z);
    case Activation::softplus: {
      // max(z,0) + log1p(exp(-|z|))
      const T neg_abs = value_of(z) < 0.0 ? z : -z;
      const T pos = value_of(z) > 0.0 ? z : T(0.0);
      return pos + log1p(exp(neg_abs));
    }
    case Activation::identity: return z;
  }
  return z;
}

/// d act / dz, given pre-activation z and activation a.
template <class T>
T activate_deriv(Activation act, const T& z, const T& a) {
  using std::exp;
  switch (act) {
    case Activation::tanh: return T(1.0) - a * a;
    case Activation::softplus: {
      if (value_of(z) >= 0.0) return T(1.0) / (T(1.0) + exp(-z));
      const T e = exp(z);
      return e / (T(1.0) + e);
    }
    case Activation::identity: return T(1.0);
  }
  return T(1.0);
}

/// Mean loss over the dataset and, optionally, its gradient and per-sample
/// losses. Written once over the scalar type T; T = Dual gives the
/// directional derivative of the gradient.
template <class T>
T mlp_objective(const ModelSpec& model, const T* params, const Dataset& data, T* grad,
                std::vector<double>* per_sample) {
  using std::exp;
  using std::log;
  const std::size_t L = model.num_layers();
  const auto& w = model.layer_widths;
  const auto n = static_cast<std::size_t>(data.inputs.rows());
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto dim = model.dim();

  std::vector<std::size_t> offsets(L + 1);
  for (std::size_t l = 0; l <= L; ++l) offsets[l] = model.layer_offset(l);

  if (grad)
    for (std::size_t i = 0; i < dim; ++i) grad[i] = T(0.0);
  if (per_sample) per_sample->assign(n, 0.0);

  std::vector<std::vector<T>> z(L + 1), a(L + 1);
  for (std::size_t l = 0; l <= L; ++l) {
    z[l].resize(static_cast<std::size_t>(w[l]));
    a[l].resize(static_cast<std::size_t>(w[l]));
  }
  std::vector<T> delta, delta_prev;

  T total(0.0);
  for (std::size_t s = 0; s < n; ++s) {
    for (int j = 0; j < w[0]; ++j) a[0][static_cast<std::size_t>(j)] = T(data.inputs(static_cast<Eigen::Index>(s), j));

    for (std::size_t l = 0; l < L; ++l) {
      const auto in = static_cast<std::size_t>(w[l]);
      const auto out = static_cast<std::size_t>(w[l + 1]);
      const T* W = params + offsets[l];
      const T* b = W + out * in;
      const bool last = (l + 1 == L);
      for (std::size_t u = 0; u < out; ++u) {
        T acc = b[u];
        const T* row = W + u * in;
        for (std::size_t i = 0; i < in; ++i) acc += row[i] * a[l][i];
        z[l + 1][u] = acc;
        a[l + 1][u] = last ? acc : activate(model.activation, acc);
      }
    }

    const auto d_out = static_cast<std::size_t>(w[L]);
    delta.assign(d_out, T(0.0));
    T sample_loss(0.0);
    if (data.loss_kind == LossKind::mse) {
      const double scale = 1.0 / static_cast<double>(d_out);
      for (std::size_t o = 0; o < d_out; ++o) {
        const T r = a[L][o] - T(data.targets(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(o)));
        sample_loss += r * r * T(scale);
        delta[o] = r * T(2.0 * scale * inv_n);
      }
    } else {
      // softmax cross-entropy with log-sum-exp shift
      std::size_t arg = 0;
      for (std::size_t o = 1; o < d_out; ++o)
        if (value_of(z[L][o]) > value_of(z[L][arg])) arg = o;
      const T shift = z[L][arg];
      T sum(0.0);
      for (std::size_t o = 0; o < d_out; ++o) sum += exp(z[L][o] - shift);
      const T lse = shift + log(sum);
      const auto y = static_cast<std::size_t>(data.labels[s]);
      sample_loss = lse - z[L][y];
      for (std::size_t o = 0; o < d_out; ++o) {
        T p = exp(z[L][o] - lse);
        if (o == y) p -= T(1.0);
        delta[o] = p * T(inv_n);
      }
    }
    total += sample_loss;
    if (per_sample) (*per_sample)[s] = value_of(sample_loss);
    if (!grad) continue;

    for (std::size_t l = L; l-- > 0;) {
      const auto in = static_cast<std::size_t>(w[l]);
      const auto out = static_cast<std::size_t>(w[l + 1]);
      T* gW = grad + offsets[l];
      T* gb = gW + out * in;
      const T* W = params + offsets[l];
      for (std::size_t u = 0; u < out; ++u) {
        T* grow = gW + u * in;
        for (std::size_t i = 0; i < in; ++i) grow[i] += delta[u] * a[l][i];
        gb[u] += delta[u];
      }
      if (l == 0) break;
      delta_prev.assign(in, T(0.0));
      for (std::size_t u = 0; u < out; ++u) {
        const T* row = W + u * in;
        for (std::size_t i = 0; i < in; ++i) delta_prev[i] += row[i] * delta[u];
      }
      for (std::size_t i = 0; i < in; ++i)
        delta_prev[i] *= activate_deriv(model.activation, z[l][i], a[l][i]);
      delta.swap(delta_prev);
    }
  }
  return total * T(inv_n);
}

}  // namespace detail

/// L(theta; D): mean per-datum loss, or 0.5 (theta-c)^T A (theta-c).
inline double loss(const ModelSpec& model, const ParamVector& params, const Dataset& data) {
  detail::check_compatible(model, data, params.size());
  if (data.loss_kind == LossKind::quadratic_analytic) {
    const ParamVector r = params - data.center;
    return 0.5 * r.dot(data.A * r);
  }
  return detail::mlp_objective<double>(model, params.data(), data, nullptr, nullptr);
}

/// Per-datum losses l(theta, x_i, y_i). One entry for a quadratic.
inline std::vector<double> per_sample_loss(const ModelSpec& model, const ParamVector& params, const Dataset& data) {
  detail::check_compatible(model, data, params.size());
  if (data.loss_kind == LossKind::quadratic_analytic) return {loss(model, params, data)};
  std::vector<double> out;
  detail::mlp_objective<double>(model, params.data(), data, nullptr, &out);
  return out;
}

/// Loss and exact gradient in one pass.
inline std::pair<double, ParamVector> value_and_grad(const ModelSpec& model, const ParamVector& params,
                                                     const Dataset& data) {
  detail::check_compatible(model, data, params.size());
  if (data.loss_kind == LossKind::quadratic_analytic) {
    const ParamVector r = params - data.center;
    ParamVector g = data.A * r;
    return {0.5 * r.dot(g), std::move(g)};
  }
  ParamVector g(params.size());
  const double v = detail::mlp_objective<double>(model, params.data(), data, g.data(), nullptr);
  return {v, std::move(g)};
}

inline ParamVector grad(const ModelSpec& model, const ParamVector& params, const Dataset& data) {
  return value_and_grad(model, params, data).second;
}

/// Exact Hessian-vector product: forward-mode derivative of the gradient
/// program along v.
inline ParamVector hvp(const ModelSpec& model, const ParamVector& params, const Dataset& data,
                       const ParamVector& v) {
  detail::check_compatible(model, data, params.size());
  require(v.size() == params.size(), "hvp direction dimension mismatch");
  if (data.loss_kind == LossKind::quadratic_analytic) return data.A * v;
  const auto k = static_cast<std::size_t>(params.size());
  std::vector<Dual> p(k), g(k);
  for (std::size_t i = 0; i < k; ++i) p[i] = Dual(params[static_cast<Eigen::Index>(i)], v[static_cast<Eigen::Index>(i)]);
  detail::mlp_objective<Dual>(model, p.data(), data, g.data(), nullptr);
  ParamVector out(params.size());
  for (std::size_t i = 0; i < k; ++i) out[static_cast<Eigen::Index>(i)] = g[i].d;
  return out;
}

/// Network outputs (logits for classification), one row per input row.
inline Matrix predict(const ModelSpec& model, const ParamVector& params, const Matrix& inputs) {
  require(model.kind == ModelKind::mlp, "predict needs an mlp");
  require(static_cast<std::size_t>(params.size()) == model.dim(), "parameter dimension mismatch");
  require(inputs.cols() == model.input_dim(), "input width does not match model");
  Matrix a = inputs.transpose();
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const int in = model.layer_widths[l];
    const int out = model.layer_widths[l + 1];
    const std::size_t off = model.layer_offset(l);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
        params.data() + off, out, in);
    const Eigen::Map<const ParamVector> b(params.data() + off + static_cast<std::size_t>(out * in), out);
    Matrix z = (W * a).colwise() + b;
    if (l + 1 < model.num_layers()) z = z.unaryExpr([&](double v) { return detail::activate(model.activation, v); });
    a = std::move(z);
  }
  return a.transpose();
}

/// Central-difference gradient. Test oracle only.
inline ParamVector fd_grad(const ModelSpec& model, const ParamVector& params, const Dataset& data, double h) {
  require(h > 0.0, "finite-difference step must be positive");
  ParamVector out(params.size());
  ParamVector probe = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + h;
    const double up = loss(model, probe, data);
    probe[i] = params[i] - h;
    const double down = loss(model, probe, data);
    probe[i] = params[i];
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

/// Seeded initial parameters. MLP: weights N(0, 1/fan_in), zero biases.
/// Quadratic: uniform on [-scale, scale]^d.
inline ParamVector init_params(const ModelSpec& model, std::uint64_t seed, double quadratic_scale = 1.0) {
  Rng rng(seed, 0, StreamTag::init);
  ParamVector theta = ParamVector::Zero(static_cast<Eigen::Index>(model.dim()));
  if (model.kind == ModelKind::quadratic) {
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = rng.uniform(-quadratic_scale, quadratic_scale);
    return theta;
  }
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto in = static_cast<std::size_t>(model.layer_widths[l]);
    const auto out = static_cast<std::size_t>(model.layer_widths[l + 1]);
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    const std::size_t off = model.layer_offset(l);
    for (std::size_t i = 0; i < in * out; ++i) theta[static_cast<Eigen::Index>(off + i)] = sd * rng.normal();
  }
  return theta;
}

}  // namespace sharpmaml
