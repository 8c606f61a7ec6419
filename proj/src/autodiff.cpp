#include "made/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace made::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMat<T>> as_mat(Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()),
          static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
Eigen::Map<const RowMat<T>> as_mat(const Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()),
          static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_matrix(const char* op, const Var<T>& a) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

// Applies f to every element; df(x, y) is the local derivative.
template <typename T, typename F, typename DF>
Var<T> unary(const char* op, const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Node<T>* xn = x.node();
  Graph<T>& g = x.graph();
  Var<T> result;
  result = g.record(op, std::move(out), {x}, nullptr);
  Node<T>* rn = result.node();
  if (rn->requires_grad) {
    rn->backward = [xn, rn, df](const Tensor<T>& grad) {
      Tensor<T>& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < grad.size(); ++i) {
        gx[i] += grad[i] * df(xn->value[i], rn->value[i]);
      }
    };
  }
  return result;
}

// Same-shape binary op; da/db return the partials w.r.t. a and b.
template <typename T, typename F, typename DA, typename DB>
Var<T> binary(const char* op, const Var<T>& a, const Var<T>& b, F f, DA da,
              DB db) {
  require_same_shape(op, a, b);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().record(op, std::move(out), {a, b},
                          [an, bn, da, db](const Tensor<T>& grad) {
                            if (an->requires_grad) {
                              Tensor<T>& ga = an->grad_buffer();
                              for (std::size_t i = 0; i < grad.size(); ++i) {
                                ga[i] += grad[i] * da(an->value[i], bn->value[i]);
                              }
                            }
                            if (bn->requires_grad) {
                              Tensor<T>& gb = bn->grad_buffer();
                              for (std::size_t i = 0; i < grad.size(); ++i) {
                                gb[i] += grad[i] * db(an->value[i], bn->value[i]);
                              }
                            }
                          });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---- Graph ------------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite leaf value");
  auto node = std::make_unique<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad && opts_.grad_enabled;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.back().get());
}

template <typename T>
Var<T> Graph<T>::param(Parameter<T>& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var<T>(this, it->second);
  Var<T> v = leaf(p.value, true);
  v.node()->op = "param";
  v.node()->param = &p;
  param_nodes_.emplace(&p, v.node());
  return v;
}

template <typename T>
Var<T> Graph<T>::record(const char* op, Tensor<T> value,
                        std::initializer_list<Var<T>> parents,
                        typename Node<T>::BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from op '") + op + "'");
  }
  auto node = std::make_unique<Node<T>>();
  node->op = op;
  node->value = std::move(value);
  bool needs = false;
  if (opts_.grad_enabled) {
    for (const Var<T>& p : parents) needs = needs || p.requires_grad();
  }
  node->requires_grad = needs;
  if (needs) node->backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.back().get());
}

template <typename T>
void Graph<T>::backward(const Var<T>& loss) {
  if (consumed_) {
    throw ContractError("backward() called twice on the same graph");
  }
  if (loss.size() != 1) {
    throw ContractError("backward() requires a scalar root, got " +
                        shape_str(loss.shape()));
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer().fill(T(1));
  std::size_t root = nodes_.size();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].get() == loss.node()) root = i;
  }
  if (root == nodes_.size()) throw ContractError("loss does not belong to graph");
  for (std::size_t i = root + 1; i-- > 0;) {
    Node<T>& n = *nodes_[i];
    if (!n.backward || n.grad.size() != n.value.size()) continue;
    n.backward(n.grad);
  }
  for (const auto& n : nodes_) {
    if (n->param != nullptr && n->grad.size() == n->value.size()) {
      n->param->zero_grad_if_empty();
      n->param->grad.add_(n->grad);
    }
  }
}

template <typename T>
std::mt19937_64& Graph<T>::rng() {
  if (opts_.rng == nullptr) throw ContractError("graph has no random stream");
  return *opts_.rng;
}

// ---- linear algebra ---------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{a.rows(), b.cols()});
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().record("matmul", std::move(out), {a, b},
                          [an, bn](const Tensor<T>& grad) {
                            auto g = as_mat(grad);
                            if (an->requires_grad) {
                              as_mat(an->grad_buffer()).noalias() +=
                                  g * as_mat(bn->value).transpose();
                            }
                            if (bn->requires_grad) {
                              as_mat(bn->grad_buffer()).noalias() +=
                                  as_mat(an->value).transpose() * g;
                            }
                          });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Tensor<T> out(Shape{a.cols(), a.rows()});
  as_mat(out) = as_mat(a.value()).transpose();
  Node<T>* an = a.node();
  return a.graph().record("transpose", std::move(out), {a},
                          [an](const Tensor<T>& grad) {
                            as_mat(an->grad_buffer()) += as_mat(grad).transpose();
                          });
}

// ---- element-wise -----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y) { return T(1) / y; }, [](T x, T y) { return -x / (y * y); });
}

// Ties route the gradient to the first operand.
template <typename T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "minimum", a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y) { return x <= y ? T(1) : T(0); },
      [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y) { return x >= y ? T(1) : T(0); },
      [](T x, T y) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
  const std::size_t n = x.rows();
  const std::size_t m = x.cols();
  if (row.size() != m) {
    throw DimensionError("add_row: row of size " + std::to_string(row.size()) +
                         " for matrix " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto& rv = row.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += rv[j];
  }
  Node<T>* xn = x.node();
  Node<T>* bn = row.node();
  return x.graph().record("add_row", std::move(out), {x, row},
                          [xn, bn, n, m](const Tensor<T>& grad) {
                            if (xn->requires_grad) xn->grad_buffer().add_(grad);
                            if (bn->requires_grad) {
                              Tensor<T>& gb = bn->grad_buffer();
                              for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t j = 0; j < m; ++j) {
                                  gb[j] += grad[i * m + j];
                                }
                              }
                            }
                          });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return unary<T>(
      "scale", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary<T>(
      "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& x, const Var<T>& s) {
  if (s.size() != 1) {
    throw DimensionError("mul_scalar: scale must hold one value, got " +
                         shape_str(s.shape()));
  }
  const T c = s.value()[0];
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  Node<T>* xn = x.node();
  Node<T>* sn = s.node();
  return x.graph().record("mul_scalar", std::move(out), {x, s},
                          [xn, sn](const Tensor<T>& grad) {
                            const T c = sn->value[0];
                            if (xn->requires_grad) {
                              Tensor<T>& gx = xn->grad_buffer();
                              for (std::size_t i = 0; i < grad.size(); ++i) {
                                gx[i] += grad[i] * c;
                              }
                            }
                            if (sn->requires_grad) {
                              T acc = 0;
                              for (std::size_t i = 0; i < grad.size(); ++i) {
                                acc += grad[i] * xn->value[i];
                              }
                              sn->grad_buffer()[0] += acc;
                            }
                          });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > 0 ? v : T(0); },
      [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return stable_sigmoid(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  Node<T>* xn = x.node();
  return x.graph().record("sum", Tensor<T>::scalar(acc), {x},
                          [xn](const Tensor<T>& grad) {
                            Tensor<T>& gx = xn->grad_buffer();
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += grad[0];
                          });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.size() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Var<T> reduce_mean(const Var<T>& x, int axis) {
  require_matrix("reduce_mean", x);
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (axis != 0 && axis != 1) throw ContractError("reduce_mean: axis must be 0 or 1");
  const std::size_t len = axis == 0 ? m : n;
  if (len == 0) throw ContractError("reduce_mean: empty reduction axis");
  const T inv = T(1) / static_cast<T>(len);
  const auto& xv = x.value();
  Tensor<T> out(axis == 0 ? Shape{1, n} : Shape{m, 1});
  if (axis == 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i] += xv[i * n + j];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  Node<T>* xn = x.node();
  return x.graph().record("reduce_mean", std::move(out), {x},
                          [xn, m, n, axis, inv](const Tensor<T>& grad) {
                            Tensor<T>& gx = xn->grad_buffer();
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                gx[i * n + j] += inv * (axis == 0 ? grad[j] : grad[i]);
                              }
                            }
                          });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  require_matrix("softmax", x);
  if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  // Lines of the reduction: `count` lines of `len` elements with `stride`.
  const std::size_t count = axis == 1 ? m : n;
  const std::size_t len = axis == 1 ? n : m;
  const std::size_t stride = axis == 1 ? 1 : n;
  const std::size_t step = axis == 1 ? n : 1;
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  for (std::size_t l = 0; l < count; ++l) {
    const std::size_t base = l * step;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, xv[base + t * stride]);
    T z = 0;
    for (std::size_t t = 0; t < len; ++t) {
      const T e = std::exp(xv[base + t * stride] - mx);
      out[base + t * stride] = e;
      z += e;
    }
    for (std::size_t t = 0; t < len; ++t) out[base + t * stride] /= z;
  }
  Node<T>* xn = x.node();
  Var<T> result = x.graph().record("softmax", std::move(out), {x}, nullptr);
  Node<T>* rn = result.node();
  if (rn->requires_grad) {
    rn->backward = [xn, rn, count, len, stride, step](const Tensor<T>& grad) {
      Tensor<T>& gx = xn->grad_buffer();
      const auto& y = rn->value;
      for (std::size_t l = 0; l < count; ++l) {
        const std::size_t base = l * step;
        T dot = 0;
        for (std::size_t t = 0; t < len; ++t) {
          dot += grad[base + t * stride] * y[base + t * stride];
        }
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = base + t * stride;
          gx[i] += y[i] * (grad[i] - dot);
        }
      }
    };
  }
  return result;
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (d == 0) throw ContractError("layer_norm: zero feature width");
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: affine size does not match width " +
                         std::to_string(d));
  }
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out(x.shape());
  std::vector<T> xhat(n * d);
  std::vector<T> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = &xv[i * d];
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = gv[j] * h + bv[j];
    }
  }
  Node<T>* xn = x.node();
  Node<T>* gn = gain.node();
  Node<T>* bn = bias.node();
  return x.graph().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [xn, gn, bn, n, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const Tensor<T>& grad) {
        if (gn->requires_grad || bn->requires_grad) {
          Tensor<T>* gg = gn->requires_grad ? &gn->grad_buffer() : nullptr;
          Tensor<T>* gb = bn->requires_grad ? &bn->grad_buffer() : nullptr;
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) (*gg)[j] += grad[i * d + j] * xhat[i * d + j];
              if (gb) (*gb)[j] += grad[i * d + j];
            }
          }
        }
        if (!xn->requires_grad) return;
        Tensor<T>& gx = xn->grad_buffer();
        const auto& gv = gn->value;
        const T inv_d = T(1) / static_cast<T>(d);
        for (std::size_t i = 0; i < n; ++i) {
          T mean_dh = 0;
          T mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = grad[i * d + j] * gv[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = grad[i * d + j] * gv[j];
            gx[i * d + j] +=
                inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
          }
        }
      });
}

// ---- shape ------------------------------------------------------------------

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  const std::size_t d = a.cols();
  if (b.cols() != d) {
    throw DimensionError("concat_rows: width mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const std::size_t fa = a.size();
  std::vector<T> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.value().storage().begin(), a.value().storage().end());
  data.insert(data.end(), b.value().storage().begin(), b.value().storage().end());
  Tensor<T> out(Shape{a.rows() + b.rows(), d}, std::move(data));
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().record("concat_rows", std::move(out), {a, b},
                          [an, bn, fa](const Tensor<T>& grad) {
                            if (an->requires_grad) {
                              Tensor<T>& ga = an->grad_buffer();
                              for (std::size_t i = 0; i < fa; ++i) ga[i] += grad[i];
                            }
                            if (bn->requires_grad) {
                              Tensor<T>& gb = bn->grad_buffer();
                              for (std::size_t i = 0; i < gb.size(); ++i) {
                                gb[i] += grad[fa + i];
                              }
                            }
                          });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> index) {
  const std::size_t d = x.cols();
  const std::size_t n = x.rows();
  Tensor<T> out(Shape{index.size(), d});
  const auto& xv = x.value();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) throw DimensionError("gather_rows: index out of range");
    std::copy_n(&xv[index[r] * d], d, &out[r * d]);
  }
  Node<T>* xn = x.node();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return x.graph().record("gather_rows", std::move(out), {x},
                          [xn, d, idx = std::move(idx)](const Tensor<T>& grad) {
                            Tensor<T>& gx = xn->grad_buffer();
                            for (std::size_t r = 0; r < idx.size(); ++r) {
                              for (std::size_t j = 0; j < d; ++j) {
                                gx[idx[r] * d + j] += grad[r * d + j];
                              }
                            }
                          });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.rows();
  const std::size_t m = x.cols();
  if (begin >= end || end > m) throw DimensionError("slice_cols: bad column range");
  const std::size_t w = end - begin;
  Tensor<T> out(Shape{n, w});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * m + begin + j];
  }
  Node<T>* xn = x.node();
  return x.graph().record("slice_cols", std::move(out), {x},
                          [xn, n, m, w, begin](const Tensor<T>& grad) {
                            Tensor<T>& gx = xn->grad_buffer();
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t j = 0; j < w; ++j) {
                                gx[i * m + begin + j] += grad[i * w + j];
                              }
                            }
                          });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value();
  out.reshape(std::move(shape));
  Node<T>* xn = x.node();
  return x.graph().record("reshape", std::move(out), {x},
                          [xn](const Tensor<T>& grad) {
                            Tensor<T>& gx = xn->grad_buffer();
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += grad[i];
                          });
}

template <typename T>
Var<T> normalize_rows(const Var<T>& x) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
    const T nrm = std::sqrt(s);
    if (!(nrm > 0)) {
      throw NumericError("degenerate similarity: zero-norm embedding in row " +
                         std::to_string(i));
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / nrm;
  }
  Node<T>* xn = x.node();
  Var<T> result = x.graph().record("normalize_rows", std::move(out), {x}, nullptr);
  Node<T>* rn = result.node();
  if (rn->requires_grad) {
    rn->backward = [xn, rn, n, d, norms = std::move(norms)](const Tensor<T>& grad) {
      Tensor<T>& gx = xn->grad_buffer();
      const auto& y = rn->value;
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * grad[i * d + j];
        for (std::size_t j = 0; j < d; ++j) {
          gx[i * d + j] += (grad[i * d + j] - y[i * d + j] * dot) / norms[i];
        }
      }
    };
  }
  return result;
}

template <typename T>
Var<T> row_dot(const Var<T>& a, const Var<T>& b) {
  require_same_shape("row_dot", a, b);
  const std::size_t n = a.rows();
  const std::size_t d = a.cols();
  Tensor<T> out(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += a.value()[i * d + j] * b.value()[i * d + j];
    out[i] = s;
  }
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().record("row_dot", std::move(out), {a, b},
                          [an, bn, n, d](const Tensor<T>& grad) {
                            if (an->requires_grad) {
                              Tensor<T>& ga = an->grad_buffer();
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < d; ++j)
                                  ga[i * d + j] += grad[i] * bn->value[i * d + j];
                            }
                            if (bn->requires_grad) {
                              Tensor<T>& gb = bn->grad_buffer();
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < d; ++j)
                                  gb[i * d + j] += grad[i] * an->value[i * d + j];
                            }
                          });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T rate) {
  Graph<T>& g = x.graph();
  if (!g.training() || rate <= T(0)) return x;
  if (rate >= T(1)) throw ContractError("dropout rate must be < 1");
  const T keep_scale = T(1) / (T(1) - rate);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<T> mask(x.size());
  auto& rng = g.rng();
  for (auto& m : mask) m = uniform(rng) < static_cast<double>(rate) ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  Node<T>* xn = x.node();
  return g.record("dropout", std::move(out), {x},
                  [xn, mask = std::move(mask)](const Tensor<T>& grad) {
                    Tensor<T>& gx = xn->grad_buffer();
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += grad[i] * mask[i];
                  });
}

template <typename T>
Var<T> masked_mean_rows(const Var<T>& x, std::size_t len,
                        std::span<const std::size_t> valid) {
  const std::size_t batch = valid.size();
  const std::size_t d = x.cols();
  if (x.rows() != batch * len) {
    throw DimensionError("masked_mean_rows: " + shape_str(x.shape()) +
                         " is not a batch of " + std::to_string(batch) + "x" +
                         std::to_string(len));
  }
  Tensor<T> out(Shape{batch, d});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b) {
    if (valid[b] == 0 || valid[b] > len) {
      throw ContractError("masked_mean_rows: empty or oversized sequence");
    }
    for (std::size_t t = 0; t < valid[b]; ++t) {
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += xv[(b * len + t) * d + j];
    }
    const T inv = T(1) / static_cast<T>(valid[b]);
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] *= inv;
  }
  Node<T>* xn = x.node();
  std::vector<std::size_t> v(valid.begin(), valid.end());
  return x.graph().record("masked_mean_rows", std::move(out), {x},
                          [xn, len, d, v = std::move(v)](const Tensor<T>& grad) {
                            Tensor<T>& gx = xn->grad_buffer();
                            for (std::size_t b = 0; b < v.size(); ++b) {
                              const T inv = T(1) / static_cast<T>(v[b]);
                              for (std::size_t t = 0; t < v[b]; ++t) {
                                for (std::size_t j = 0; j < d; ++j) {
                                  gx[(b * len + t) * d + j] += grad[b * d + j] * inv;
                                }
                              }
                            }
                          });
}

template <typename T>
Var<T> concat_packed(const Var<T>& a, std::size_t a_len,
                     std::span<const std::size_t> a_valid, const Var<T>& b,
                     std::size_t b_len, std::span<const std::size_t> b_valid) {
  const std::size_t batch = a_valid.size();
  const std::size_t d = a.cols();
  if (b.cols() != d) throw DimensionError("concat_packed: width mismatch");
  if (b_valid.size() != batch || a.rows() != batch * a_len ||
      b.rows() != batch * b_len) {
    throw DimensionError("concat_packed: batch layout mismatch");
  }
  const std::size_t len = a_len + b_len;
  Tensor<T> out(Shape{batch * len, d});
  // src_row[r] = (+1 + row in a) or -(1 + row in b); 0 for padding.
  std::vector<std::ptrdiff_t> src(batch * len, 0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    std::size_t r = bi * len;
    for (std::size_t t = 0; t < a_valid[bi]; ++t, ++r) {
      src[r] = static_cast<std::ptrdiff_t>(bi * a_len + t) + 1;
    }
    for (std::size_t t = 0; t < b_valid[bi]; ++t, ++r) {
      src[r] = -(static_cast<std::ptrdiff_t>(bi * b_len + t) + 1);
    }
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t r = 0; r < src.size(); ++r) {
    if (src[r] > 0) {
      std::copy_n(&av[(src[r] - 1) * d], d, &out[r * d]);
    } else if (src[r] < 0) {
      std::copy_n(&bv[(-src[r] - 1) * d], d, &out[r * d]);
    }
  }
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().record(
      "concat_packed", std::move(out), {a, b},
      [an, bn, d, src = std::move(src)](const Tensor<T>& grad) {
        for (std::size_t r = 0; r < src.size(); ++r) {
          if (src[r] > 0 && an->requires_grad) {
            Tensor<T>& ga = an->grad_buffer();
            for (std::size_t j = 0; j < d; ++j) ga[(src[r] - 1) * d + j] += grad[r * d + j];
          } else if (src[r] < 0 && bn->requires_grad) {
            Tensor<T>& gb = bn->grad_buffer();
            for (std::size_t j = 0; j < d; ++j) gb[(-src[r] - 1) * d + j] += grad[r * d + j];
          }
        }
      });
}

// ---- attention --------------------------------------------------------------

namespace {

void check_layout(const AttentionLayout& L, std::size_t q_rows, std::size_t k_rows,
                  std::size_t v_rows, std::size_t d, std::size_t dk, std::size_t dv) {
  if (L.heads == 0 || d % L.heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(L.heads));
  }
  if (dk != d || dv != d) throw DimensionError("attention: q/k/v widths differ");
  if (q_rows != L.batch * L.q_len || k_rows != L.batch * L.k_len ||
      v_rows != k_rows) {
    throw DimensionError("attention: rows do not match the batch layout");
  }
  if (L.k_len == 0) throw ContractError("attention: empty key set");
  if (!L.key_valid.empty()) {
    if (L.key_valid.size() != L.batch) {
      throw DimensionError("attention: key_valid size differs from batch");
    }
    for (std::size_t kv : L.key_valid) {
      if (kv == 0 || kv > L.k_len) throw ContractError("attention: empty key set");
    }
  }
}

// probs layout: ((b*heads + h)*q_len + i)*k_len + j
template <typename T>
void compute_probs(const Tensor<T>& q, const Tensor<T>& k, const AttentionLayout& L,
                   std::vector<T>& probs) {
  const std::size_t d = q.cols();
  const std::size_t dh = d / L.heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  probs.assign(L.batch * L.heads * L.q_len * L.k_len, T(0));
  std::vector<T> row(L.k_len);
  for (std::size_t b = 0; b < L.batch; ++b) {
    const std::size_t nk = L.key_valid.empty() ? L.k_len : L.key_valid[b];
    for (std::size_t h = 0; h < L.heads; ++h) {
      for (std::size_t i = 0; i < L.q_len; ++i) {
        const T* qi = &q[(b * L.q_len + i) * d + h * dh];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          const T* kj = &k[(b * L.k_len + j) * d + h * dh];
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < nk; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        T* p = &probs[((b * L.heads + h) * L.q_len + i) * L.k_len];
        for (std::size_t j = 0; j < nk; ++j) p[j] = row[j] / z;
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k,
                          const AttentionLayout& layout) {
  check_layout(layout, q.rows(), k.rows(), k.rows(), q.cols(), k.cols(), k.cols());
  std::vector<T> probs;
  compute_probs(q, k, layout, probs);
  return Tensor<T>(Shape{layout.batch * layout.heads * layout.q_len, layout.k_len},
                   std::move(probs));
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 const AttentionLayout& layout) {
  const std::size_t d = q.cols();
  check_layout(layout, q.rows(), k.rows(), v.rows(), d, k.cols(), v.cols());
  const AttentionLayout L = layout;
  const std::size_t dh = d / L.heads;
  std::vector<T> probs;
  compute_probs(q.value(), k.value(), L, probs);
  Tensor<T> out(Shape{L.batch * L.q_len, d});
  const auto& vv = v.value();
  for (std::size_t b = 0; b < L.batch; ++b) {
    const std::size_t nk = L.key_valid.empty() ? L.k_len : L.key_valid[b];
    for (std::size_t h = 0; h < L.heads; ++h) {
      for (std::size_t i = 0; i < L.q_len; ++i) {
        const T* p = &probs[((b * L.heads + h) * L.q_len + i) * L.k_len];
        T* o = &out[(b * L.q_len + i) * d + h * dh];
        for (std::size_t j = 0; j < nk; ++j) {
          const T* vj = &vv[(b * L.k_len + j) * d + h * dh];
          const T pj = p[j];
          for (std::size_t c = 0; c < dh; ++c) o[c] += pj * vj[c];
        }
      }
    }
  }
  Node<T>* qn = q.node();
  Node<T>* kn = k.node();
  Node<T>* vn = v.node();
  return q.graph().record(
      "attention", std::move(out), {q, k, v},
      [qn, kn, vn, L, dh, d, probs = std::move(probs)](const Tensor<T>& grad) {
        const T sc = T(1) / std::sqrt(static_cast<T>(dh));
        Tensor<T>* gq = qn->requires_grad ? &qn->grad_buffer() : nullptr;
        Tensor<T>* gk = kn->requires_grad ? &kn->grad_buffer() : nullptr;
        Tensor<T>* gv = vn->requires_grad ? &vn->grad_buffer() : nullptr;
        const auto& qv = qn->value;
        const auto& kv = kn->value;
        const auto& vv = vn->value;
        std::vector<T> dp(L.k_len);
        for (std::size_t b = 0; b < L.batch; ++b) {
          const std::size_t nk = L.key_valid.empty() ? L.k_len : L.key_valid[b];
          for (std::size_t h = 0; h < L.heads; ++h) {
            for (std::size_t i = 0; i < L.q_len; ++i) {
              const T* p = &probs[((b * L.heads + h) * L.q_len + i) * L.k_len];
              const T* go = &grad[(b * L.q_len + i) * d + h * dh];
              T dot = 0;
              for (std::size_t j = 0; j < nk; ++j) {
                const T* vj = &vv[(b * L.k_len + j) * d + h * dh];
                T s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += s * p[j];
                if (gv) {
                  T* gvj = &(*gv)[(b * L.k_len + j) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * go[c];
                }
              }
              if (!gq && !gk) continue;
              const T* qi = &qv[(b * L.q_len + i) * d + h * dh];
              for (std::size_t j = 0; j < nk; ++j) {
                const T ds = p[j] * (dp[j] - dot) * sc;
                if (ds == T(0)) continue;
                const T* kj = &kv[(b * L.k_len + j) * d + h * dh];
                if (gq) {
                  T* gqi = &(*gq)[(b * L.q_len + i) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = &(*gk)[(b * L.k_len + j) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> diag_cross_entropy(const Var<T>& logits, int axis,
                          std::span<const std::uint8_t> allowed) {
  const std::size_t n = logits.rows();
  if (n == 0) throw ContractError("diag_cross_entropy: empty batch");
  if (logits.cols() != n) {
    throw DimensionError("diag_cross_entropy: square matrix required, got " +
                         shape_str(logits.shape()));
  }
  if (axis != 0 && axis != 1) throw ContractError("diag_cross_entropy: bad axis");
  if (!allowed.empty() && allowed.size() != n * n) {
    throw DimensionError("diag_cross_entropy: mask size mismatch");
  }
  auto ok = [&allowed, n](std::size_t i, std::size_t j) {
    return i == j || allowed.empty() || allowed[i * n + j] != 0;
  };
  const auto& x = logits.value();
  // at(l, t): element t of line l (row l for axis 1, column l for axis 0).
  auto at = [n, axis](std::size_t l, std::size_t t) {
    return axis == 1 ? l * n + t : t * n + l;
  };
  std::vector<T> probs(n * n, T(0));
  T loss = 0;
  for (std::size_t l = 0; l < n; ++l) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t i = axis == 1 ? l : t;
      const std::size_t j = axis == 1 ? t : l;
      if (ok(i, j)) mx = std::max(mx, x[at(l, t)]);
    }
    T z = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t i = axis == 1 ? l : t;
      const std::size_t j = axis == 1 ? t : l;
      if (!ok(i, j)) continue;
      const T e = std::exp(x[at(l, t)] - mx);
      probs[at(l, t)] = e;
      z += e;
    }
    for (std::size_t t = 0; t < n; ++t) probs[at(l, t)] /= z;
    loss += -(x[at(l, l)] - mx - std::log(z));
  }
  loss /= static_cast<T>(n);
  Node<T>* xn = logits.node();
  return logits.graph().record(
      "diag_cross_entropy", Tensor<T>::scalar(loss), {logits},
      [xn, n, probs = std::move(probs)](const Tensor<T>& grad) {
        Tensor<T>& gx = xn->grad_buffer();
        const T s = grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            gx[i * n + j] += s * (probs[i * n + j] - (i == j ? T(1) : T(0)));
          }
        }
      });
}

// ---- instantiation ----------------------------------------------------------

#define MADE_INSTANTIATE(T)                                                       \
  template class Graph<T>;                                                        \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                           \
  template Var<T> transpose(const Var<T>&);                                       \
  template Var<T> add(const Var<T>&, const Var<T>&);                              \
  template Var<T> sub(const Var<T>&, const Var<T>&);                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                              \
  template Var<T> div(const Var<T>&, const Var<T>&);                              \
  template Var<T> minimum(const Var<T>&, const Var<T>&);                          \
  template Var<T> maximum(const Var<T>&, const Var<T>&);                          \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                          \
  template Var<T> scale(const Var<T>&, T);                                        \
  template Var<T> add_scalar(const Var<T>&, T);                                   \
  template Var<T> mul_scalar(const Var<T>&, const Var<T>&);                       \
  template Var<T> relu(const Var<T>&);                                            \
  template Var<T> sigmoid(const Var<T>&);                                         \
  template Var<T> exp(const Var<T>&);                                             \
  template Var<T> log(const Var<T>&);                                             \
  template Var<T> abs(const Var<T>&);                                             \
  template Var<T> sum(const Var<T>&);                                             \
  template Var<T> mean(const Var<T>&);                                            \
  template Var<T> reduce_mean(const Var<T>&, int);                                \
  template Var<T> softmax(const Var<T>&, int);                                    \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);     \
  template Var<T> concat_rows(const Var<T>&, const Var<T>&);                      \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);       \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);            \
  template Var<T> reshape(const Var<T>&, Shape);                                  \
  template Var<T> normalize_rows(const Var<T>&);                                  \
  template Var<T> row_dot(const Var<T>&, const Var<T>&);                          \
  template Var<T> dropout(const Var<T>&, T);                                      \
  template Var<T> masked_mean_rows(const Var<T>&, std::size_t,                    \
                                   std::span<const std::size_t>);                 \
  template Var<T> concat_packed(const Var<T>&, std::size_t,                       \
                                std::span<const std::size_t>, const Var<T>&,      \
                                std::size_t, std::span<const std::size_t>);       \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&,          \
                            const AttentionLayout&);                              \
  template Var<T> diag_cross_entropy(const Var<T>&, int,                          \
                                     std::span<const std::uint8_t>);              \
  template Tensor<T> attention_probs(const Tensor<T>&, const Tensor<T>&,          \
                                     const AttentionLayout&);

MADE_INSTANTIATE(float)
MADE_INSTANTIATE(double)

#undef MADE_INSTANTIATE

}  // namespace made::ad
