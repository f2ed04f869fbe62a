#include "deformer/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

#include "deformer/errors.hpp"
#include "deformer/flop_counter.hpp"

namespace deformer {

namespace {

constexpr double kGeluSqrt2OverPi = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

std::vector<std::size_t> matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

// In-place accumulate `src` into `dst`.
void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct AxisLayout {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisLayout axis_layout(const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) {
    throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for shape " + x.shape_string());
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::push_leaf(Tensor value, bool needs_grad) {
  value.apply_precision(precision_);
  Node n;
  n.op = needs_grad ? "parameter" : "constant";
  n.value = std::move(value);
  n.is_leaf = true;
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) { return push_leaf(std::move(value), true); }

Var Tape::constant(Tensor value) { return push_leaf(std::move(value), false); }

Var Tape::apply(std::string_view op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  bool needs_grad = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw StateError(std::string(op) + ": input recorded on a different tape");
    ids.push_back(v.id());
    values.push_back(&nodes_[v.id()].value);
    needs_grad = needs_grad || nodes_[v.id()].needs_grad;
  }
  Tensor out = forward(values);
  out.apply_precision(precision_);
  Node n;
  n.op = std::string(op);
  n.inputs = std::move(ids);
  n.value = std::move(out);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var output, const Tensor& seed) const {
  if (&output.tape() != this) throw StateError("backward: output belongs to a different tape");
  const Tensor& out_value = nodes_.at(output.id()).value;
  if (!out_value.same_shape(seed)) {
    throw ShapeError("backward: seed shape " + seed.shape_string() + " does not match output " +
                     out_value.shape_string());
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[output.id()] = seed;
  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (node.is_leaf || !node.needs_grad || grads[id].size() == 0) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].needs_grad) {
        if (grads[in].size() == 0) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(grads[id], in_values, node.value, in_grads);
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (grads[id].size() == 0) grads[id] = Tensor(nodes_[id].value.shape(), 0.0);
  }
  return Gradients(std::move(grads));
}

Gradients Tape::backward(Var output) const {
  Tensor seed(output.value().shape(), 1.0);
  return backward(output, seed);
}

std::vector<Tensor> Tape::replay() const {
  std::vector<Tensor> values(nodes_.size());
  std::vector<const Tensor*> in_values;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (node.is_leaf) {
      values[id] = node.value;
      continue;
    }
    in_values.clear();
    for (std::size_t in : node.inputs) in_values.push_back(&values[in]);
    values[id] = node.forward(in_values);
    values[id].apply_precision(precision_);
  }
  return values;
}

// ---------------------------------------------------------------------------
// Tensor-level primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor out(matrix_shape(m, n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  record_flops(FlopKind::matmul, 2 * m * k * n);
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out(matrix_shape(c, r));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  accumulate(out, b);
  record_flops(FlopKind::elementwise, a.size() * flop_cost::kElementwise);
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t r = x.rows(), c = x.cols();
  if (bias.size() != c) {
    throw ShapeError("add_bias: bias " + bias.shape_string() + " vs input " + x.shape_string());
  }
  Tensor out = x;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(i, j) += bias[j];
  }
  record_flops(FlopKind::elementwise, x.size() * flop_cost::kElementwise);
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = x;
  for (double& v : out.data()) v *= factor;
  record_flops(FlopKind::elementwise, x.size() * flop_cost::kElementwise);
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis, const ElementMask* mask) {
  const AxisLayout l = axis_layout(x, axis);
  if (l.extent == 0) throw ShapeError("softmax: empty axis extent");
  if (mask != nullptr && mask->size() != x.size()) {
    throw ShapeError("softmax: mask length does not match input " + x.shape_string());
  }
  Tensor out(x.shape(), 0.0);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.extent * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < l.extent; ++j) {
        const std::size_t idx = base + j * l.inner;
        if (mask != nullptr && (*mask)[idx] == 0) continue;
        mx = std::max(mx, x[idx]);
        any = true;
      }
      if (!any) throw InputError("softmax: slice has no unmasked elements");
      double total = 0.0;
      for (std::size_t j = 0; j < l.extent; ++j) {
        const std::size_t idx = base + j * l.inner;
        if (mask != nullptr && (*mask)[idx] == 0) continue;
        const double e = std::exp(x[idx] - mx);
        out[idx] = e;
        total += e;
      }
      for (std::size_t j = 0; j < l.extent; ++j) {
        const std::size_t idx = base + j * l.inner;
        if (mask != nullptr && (*mask)[idx] == 0) continue;
        out[idx] /= total;
      }
    }
  }
  record_flops(FlopKind::softmax, x.size() * flop_cost::kSoftmaxPerElement);
  return out;
}

namespace {

struct RowStats {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

RowStats layer_norm_stats(const Tensor& x, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  RowStats s{std::vector<double>(r), std::vector<double>(r)};
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    s.mean[i] = mu;
    s.inv_std[i] = 1.0 / std::sqrt(var + eps);
  }
  return s;
}

void check_layer_norm_args(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias length must equal last-axis extent of " + x.shape_string());
  }
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_layer_norm_args(x, gain, bias, eps);
  const std::size_t r = x.rows(), c = x.cols();
  const RowStats s = layer_norm_stats(x, eps);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out(i, j) = (x(i, j) - s.mean[i]) * s.inv_std[i] * gain[j] + bias[j];
    }
  }
  record_flops(FlopKind::layer_norm, x.size() * flop_cost::kLayerNormPerElement);
  return out;
}

double gelu_scalar(double x) {
  const double u = kGeluSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
  record_flops(FlopKind::gelu, x.size() * flop_cost::kGeluPerElement);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  return a.tape().apply(
      "matmul", {a, b}, [](auto in) { return matmul(*in[0], *in[1]); },
      [](const Tensor& g, auto in, const Tensor&, auto grads) {
        const Tensor& A = *in[0];
        const Tensor& B = *in[1];
        const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
        const double* pg = g.data().data();
        const double* pa = A.data().data();
        if (grads[0] != nullptr) {
          // dA = g * B^T
          double* da = grads[0]->data().data();
          const Tensor bt = transpose(B);
          const double* pbt = bt.data().data();
          for (std::size_t i = 0; i < m; ++i) {
            double* drow = da + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double gv = pg[i * n + j];
              const double* btrow = pbt + j * k;
              for (std::size_t p = 0; p < k; ++p) drow[p] += gv * btrow[p];
            }
          }
        }
        if (grads[1] != nullptr) {
          // dB = A^T * g
          double* db = grads[1]->data().data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = pg + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double av = pa[i * k + p];
              double* drow = db + p * n;
              for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
          }
        }
      });
}

Var transpose(Var a) {
  return a.tape().apply(
      "transpose", {a}, [](auto in) { return transpose(*in[0]); },
      [](const Tensor& g, auto in, const Tensor&, auto grads) {
        const std::size_t r = in[0]->rows(), c = in[0]->cols();
        Tensor& d = *grads[0];
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
        }
      });
}

Var add(Var a, Var b) {
  return a.tape().apply(
      "add", {a, b}, [](auto in) { return add(*in[0], *in[1]); },
      [](const Tensor& g, auto, const Tensor&, auto grads) {
        if (grads[0] != nullptr) accumulate(*grads[0], g);
        if (grads[1] != nullptr) accumulate(*grads[1], g);
      });
}

Var add_bias(Var x, Var bias) {
  return x.tape().apply(
      "add_bias", {x, bias}, [](auto in) { return add_bias(*in[0], *in[1]); },
      [](const Tensor& g, auto in, const Tensor&, auto grads) {
        if (grads[0] != nullptr) accumulate(*grads[0], g);
        if (grads[1] != nullptr) {
          const std::size_t r = in[0]->rows(), c = in[0]->cols();
          Tensor& db = *grads[1];
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) db[j] += g[i * c + j];
          }
        }
      });
}

Var scale(Var x, double factor) {
  return x.tape().apply(
      "scale", {x}, [factor](auto in) { return scale(*in[0], factor); },
      [factor](const Tensor& g, auto, const Tensor&, auto grads) {
        Tensor& d = *grads[0];
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
      });
}

Var softmax(Var x, std::size_t axis, const ElementMask* mask) {
  // The mask is copied so the tape stays self-contained for replay.
  std::shared_ptr<const ElementMask> held = mask ? std::make_shared<const ElementMask>(*mask) : nullptr;
  return x.tape().apply(
      "softmax", {x}, [axis, held](auto in) { return softmax(*in[0], axis, held.get()); },
      [axis](const Tensor& g, auto in, const Tensor& p, auto grads) {
        const AxisLayout l = axis_layout(*in[0], axis);
        Tensor& d = *grads[0];
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t i = 0; i < l.inner; ++i) {
            const std::size_t base = o * l.extent * l.inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < l.extent; ++j) {
              const std::size_t idx = base + j * l.inner;
              dot += g[idx] * p[idx];
            }
            for (std::size_t j = 0; j < l.extent; ++j) {
              const std::size_t idx = base + j * l.inner;
              d[idx] += p[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  check_layer_norm_args(x.value(), gain.value(), bias.value(), eps);
  return x.tape().apply(
      "layer_norm", {x, gain, bias}, [eps](auto in) { return layer_norm(*in[0], *in[1], *in[2], eps); },
      [eps](const Tensor& g, auto in, const Tensor&, auto grads) {
        const Tensor& X = *in[0];
        const Tensor& gain_v = *in[1];
        const std::size_t r = X.rows(), c = X.cols();
        const RowStats s = layer_norm_stats(X, eps);
        std::vector<double> xhat(c), gh(c);
        for (std::size_t i = 0; i < r; ++i) {
          double mean_gh = 0.0, mean_gh_xhat = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (X(i, j) - s.mean[i]) * s.inv_std[i];
            gh[j] = g[i * c + j] * gain_v[j];
            mean_gh += gh[j];
            mean_gh_xhat += gh[j] * xhat[j];
            if (grads[1] != nullptr) (*grads[1])[j] += g[i * c + j] * xhat[j];
            if (grads[2] != nullptr) (*grads[2])[j] += g[i * c + j];
          }
          if (grads[0] == nullptr) continue;
          mean_gh /= static_cast<double>(c);
          mean_gh_xhat /= static_cast<double>(c);
          Tensor& dx = *grads[0];
          for (std::size_t j = 0; j < c; ++j) {
            dx[i * c + j] += s.inv_std[i] * (gh[j] - mean_gh - xhat[j] * mean_gh_xhat);
          }
        }
      });
}

Var gelu(Var x) {
  return x.tape().apply(
      "gelu", {x}, [](auto in) { return gelu(*in[0]); },
      [](const Tensor& g, auto in, const Tensor&, auto grads) {
        const Tensor& X = *in[0];
        Tensor& d = *grads[0];
        for (std::size_t i = 0; i < X.size(); ++i) {
          const double v = X[i];
          const double u = kGeluSqrt2OverPi * (v + kGeluCubic * v * v * v);
          const double t = std::tanh(u);
          const double du = kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
          d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
      });
}

Var mul(Var a, Var b) {
  return a.tape().apply(
      "mul", {a, b},
      [](auto in) {
        require_same_shape(*in[0], *in[1], "mul");
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
        record_flops(FlopKind::elementwise, out.size() * flop_cost::kElementwise);
        return out;
      },
      [](const Tensor& g, auto in, const Tensor&, auto grads) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (grads[0] != nullptr) (*grads[0])[i] += g[i] * (*in[1])[i];
          if (grads[1] != nullptr) (*grads[1])[i] += g[i] * (*in[0])[i];
        }
      });
}

Var log(Var x) {
  return x.tape().apply(
      "log", {x},
      [](auto in) {
        Tensor out = *in[0];
        for (double& v : out.data()) v = std::log(v);
        record_flops(FlopKind::elementwise, out.size() * flop_cost::kElementwise);
        return out;
      },
      [](const Tensor& g, auto in, const Tensor&, auto grads) {
        for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] / (*in[0])[i];
      });
}

Var sum(Var x) {
  return x.tape().apply(
      "sum", {x},
      [](auto in) {
        double s = 0.0;
        for (double v : in[0]->data()) s += v;
        record_flops(FlopKind::elementwise, in[0]->size() * flop_cost::kElementwise);
        return Tensor::scalar(s);
      },
      [](const Tensor& g, auto, const Tensor&, auto grads) {
        for (double& v : grads[0]->data()) v += g[0];
      });
}

Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const std::size_t vocab = table.value().rows();
  for (std::size_t id : ids) {
    if (id >= vocab) throw InputError("gather_rows: id " + std::to_string(id) + " outside table");
  }
  auto held = std::make_shared<const std::vector<std::size_t>>(std::move(ids));
  return table.tape().apply(
      "gather_rows", {table},
      [held](auto in) {
        const Tensor& T = *in[0];
        const std::size_t c = T.cols();
        Tensor out({held->size(), c});
        for (std::size_t r = 0; r < held->size(); ++r) {
          std::copy_n(T.data().begin() + static_cast<std::ptrdiff_t>((*held)[r] * c), c,
                      out.data().begin() + static_cast<std::ptrdiff_t>(r * c));
        }
        return out;
      },
      [held](const Tensor& g, auto in, const Tensor&, auto grads) {
        const std::size_t c = in[0]->cols();
        Tensor& d = *grads[0];
        for (std::size_t r = 0; r < held->size(); ++r) {
          for (std::size_t j = 0; j < c; ++j) d[(*held)[r] * c + j] += g[r * c + j];
        }
      });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  if (begin + count > x.value().cols()) throw ShapeError("slice_cols: range outside " + x.value().shape_string());
  return x.tape().apply(
      "slice_cols", {x},
      [begin, count](auto in) {
        const Tensor& X = *in[0];
        const std::size_t r = X.rows();
        Tensor out({r, count});
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < count; ++j) out(i, j) = X(i, begin + j);
        }
        return out;
      },
      [begin, count](const Tensor& g, auto in, const Tensor&, auto grads) {
        const std::size_t r = in[0]->rows(), c = in[0]->cols();
        Tensor& d = *grads[0];
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < count; ++j) d[i * c + begin + j] += g[i * count + j];
        }
      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  if (begin + count > x.value().rows()) throw ShapeError("slice_rows: range outside " + x.value().shape_string());
  return x.tape().apply(
      "slice_rows", {x},
      [begin, count](auto in) {
        const Tensor& X = *in[0];
        const std::size_t c = X.cols();
        std::vector<double> data(X.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                 X.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
        return Tensor({count, c}, std::move(data));
      },
      [begin, count](const Tensor& g, auto in, const Tensor&, auto grads) {
        const std::size_t c = in[0]->cols();
        Tensor& d = *grads[0];
        for (std::size_t i = 0; i < count * c; ++i) d[begin * c + i] += g[i];
      });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].value().rows();
  for (const Var& p : parts) {
    if (p.value().rows() != r) throw ShapeError("concat_cols: row counts differ");
  }
  return parts[0].tape().apply(
      "concat_cols", std::vector<Var>(parts.begin(), parts.end()),
      [r](auto in) {
        std::size_t total = 0;
        for (const Tensor* t : in) total += t->cols();
        Tensor out({r, total});
        std::size_t off = 0;
        for (const Tensor* t : in) {
          const std::size_t c = t->cols();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) out(i, off + j) = (*t)(i, j);
          }
          off += c;
        }
        return out;
      },
      [r](const Tensor& g, auto in, const Tensor&, auto grads) {
        const std::size_t total = g.cols();
        std::size_t off = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t c = in[k]->cols();
          if (grads[k] != nullptr) {
            for (std::size_t i = 0; i < r; ++i) {
              for (std::size_t j = 0; j < c; ++j) (*grads[k])[i * c + j] += g[i * total + off + j];
            }
          }
          off += c;
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  for (const Var& p : parts) {
    if (p.value().cols() != c) throw ShapeError("concat_rows: column counts differ");
  }
  return parts[0].tape().apply(
      "concat_rows", std::vector<Var>(parts.begin(), parts.end()),
      [c](auto in) {
        std::vector<double> data;
        std::size_t rows = 0;
        for (const Tensor* t : in) {
          data.insert(data.end(), t->data().begin(), t->data().end());
          rows += t->rows();
        }
        return Tensor({rows, c}, std::move(data));
      },
      [](const Tensor& g, auto in, const Tensor&, auto grads) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t n = in[k]->size();
          if (grads[k] != nullptr) {
            for (std::size_t i = 0; i < n; ++i) (*grads[k])[i] += g[off + i];
          }
          off += n;
        }
      });
}

Var pick(Var x, std::size_t index) {
  if (index >= x.value().size()) throw ShapeError("pick: index outside " + x.value().shape_string());
  return x.tape().apply(
      "pick", {x}, [index](auto in) { return Tensor::scalar((*in[0])[index]); },
      [index](const Tensor& g, auto, const Tensor&, auto grads) { (*grads[0])[index] += g[0]; });
}

Var kl_divergence(Var p, const Tensor& q, double floor) {
  if (!p.value().same_shape(q)) throw ShapeError("kl_divergence: shape mismatch");
  auto held = std::make_shared<const Tensor>(q);
  return p.tape().apply(
      "kl_divergence", {p},
      [held, floor](auto in) {
        const Tensor& P = *in[0];
        double s = 0.0;
        for (std::size_t i = 0; i < P.size(); ++i) {
          if (P[i] > 0.0) s += P[i] * std::log(P[i] / std::max((*held)[i], floor));
        }
        record_flops(FlopKind::elementwise, 3 * P.size());
        return Tensor::scalar(s);
      },
      [held, floor](const Tensor& g, auto in, const Tensor&, auto grads) {
        const Tensor& P = *in[0];
        Tensor& d = *grads[0];
        for (std::size_t i = 0; i < P.size(); ++i) {
          if (P[i] > 0.0) d[i] += g[0] * (std::log(P[i] / std::max((*held)[i], floor)) + 1.0);
        }
      });
}

Var squared_distance(Var x, const Tensor& target, const std::vector<std::uint8_t>& row_mask) {
  if (!x.value().same_shape(target)) {
    throw ShapeError("squared_distance: shape mismatch " + x.value().shape_string() + " vs " +
                     target.shape_string());
  }
  if (row_mask.size() != target.rows()) throw ShapeError("squared_distance: row mask length mismatch");
  auto held_target = std::make_shared<const Tensor>(target);
  auto held_mask = std::make_shared<const std::vector<std::uint8_t>>(row_mask);
  return x.tape().apply(
      "squared_distance", {x},
      [held_target, held_mask](auto in) {
        const Tensor& X = *in[0];
        const std::size_t r = X.rows(), c = X.cols();
        double s = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
          if ((*held_mask)[i] == 0) continue;
          for (std::size_t j = 0; j < c; ++j) {
            const double diff = X(i, j) - (*held_target)(i, j);
            s += diff * diff;
          }
        }
        record_flops(FlopKind::elementwise, 3 * X.size());
        return Tensor::scalar(s);
      },
      [held_target, held_mask](const Tensor& g, auto in, const Tensor&, auto grads) {
        const Tensor& X = *in[0];
        const std::size_t r = X.rows(), c = X.cols();
        Tensor& d = *grads[0];
        for (std::size_t i = 0; i < r; ++i) {
          if ((*held_mask)[i] == 0) continue;
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[0] * 2.0 * (X(i, j) - (*held_target)(i, j));
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const LossBuilder& loss, std::vector<Tensor> params, std::vector<std::string> names,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ParameterError("grad_check: eps must be positive");
  names.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i].empty()) names[i] = "param" + std::to_string(i);
  }

  auto evaluate = [&](const std::vector<Tensor>& ps) {
    Tape tape(Precision::f64);
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const Tensor& p : ps) vars.push_back(tape.parameter(p));
    return loss(tape, vars).value()[0];
  };

  std::vector<Tensor> analytic;
  {
    Tape tape(Precision::f64);
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.parameter(p));
    const Var out = loss(tape, vars);
    if (out.value().size() != 1) throw ShapeError("grad_check: loss must be a scalar");
    if (!out.value().all_finite()) throw NumericalError("grad_check: non-finite loss at the base point");
    const Gradients g = tape.backward(out);
    for (const Var& v : vars) analytic.push_back(g.of(v));
  }

  GradCheckReport report;
  report.eps = options.eps;
  report.threshold = options.threshold;
  std::mt19937_64 rng(options.sample_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ParamCheck check;
    check.name = names[pi];
    const std::size_t n = params[pi].size();
    std::vector<std::size_t> coords;
    if (n > options.full_check_limit) {
      check.sampled = true;
      std::uniform_int_distribution<std::size_t> pick_coord(0, n - 1);
      for (std::size_t s = 0; s < options.sample_count; ++s) coords.push_back(pick_coord(rng));
    } else {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), std::size_t{0});
    }
    for (std::size_t c : coords) {
      const double original = params[pi][c];
      params[pi][c] = original + options.eps;
      const double f_plus = evaluate(params);
      params[pi][c] = original - options.eps;
      const double f_minus = evaluate(params);
      params[pi][c] = original;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw NumericalError("grad_check: non-finite loss perturbing " + check.name + "[" + std::to_string(c) + "]");
      }
      const double numeric = (f_plus - f_minus) / (2.0 * options.eps);
      const double a = analytic[pi][c];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      check.max_rel_error = std::max(check.max_rel_error, rel);
    }
    check.coordinates_checked = coords.size();
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.params.push_back(std::move(check));
  }
  report.passed = report.max_rel_error < options.threshold;
  return report;
}

}  // namespace deformer
