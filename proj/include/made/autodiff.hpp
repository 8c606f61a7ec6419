#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "made/tensor.hpp"

namespace made::ad {

// Role of a parameter; drives initialization.
enum class ParamKind { weight, bias, gain, token, scalar };

// A trainable tensor. Gradients are accumulated into `grad` by
// Graph::backward and cleared by the optimizer.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  ParamKind kind = ParamKind::weight;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, ParamKind k = ParamKind::weight)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), kind(k) {}

  void zero_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
  void zero_grad_if_empty() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
  }
};

template <typename T>
struct Node {
  using BackwardFn = std::function<void(const Tensor<T>&)>;

  const char* op = "leaf";
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  BackwardFn backward;
  Parameter<T>* param = nullptr;

  // Lazily sized gradient accumulator.
  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    }
    return grad;
  }
};

template <typename T>
class Graph;

// Non-owning handle to a node of a Graph. Valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, Node<T>* n) : graph_(g), node_(n) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool valid() const { return node_ != nullptr; }

  Graph<T>& graph() const { return *graph_; }
  Node<T>* node() const { return node_; }

 private:
  Graph<T>* graph_ = nullptr;
  Node<T>* node_ = nullptr;
};

struct GraphOptions {
  bool grad_enabled = true;
  bool training = false;
  // Random stream consumed by dropout; required when training is true.
  std::mt19937_64* rng = nullptr;
};

// Tape of operations in creation (= topological) order. Backward replays the
// tape in exact reverse order, so accumulation order is fixed.
template <typename T>
class Graph {
 public:
  explicit Graph(GraphOptions opts = {}) : opts_(opts) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }
  // One leaf per parameter per graph; its gradient is added into p.grad.
  Var<T> param(Parameter<T>& p);

  // Records the result of an op. `fn` receives dL/d(result) and must add
  // into the parents' grad buffers. Dropped when no parent needs gradients.
  Var<T> record(const char* op, Tensor<T> value,
                std::initializer_list<Var<T>> parents,
                typename Node<T>::BackwardFn fn);

  void backward(const Var<T>& loss);

  bool training() const { return opts_.training; }
  bool grad_enabled() const { return opts_.grad_enabled; }
  std::mt19937_64& rng();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  GraphOptions opts_;
  std::vector<std::unique_ptr<Node<T>>> nodes_;
  std::unordered_map<Parameter<T>*, Node<T>*> param_nodes_;
  bool consumed_ = false;
};

// Shape of a batched, padded attention call. Rows of q are laid out as
// batch-major blocks of q_len rows; likewise k/v with k_len rows. Keys at
// positions >= key_valid[b] are excluded from the softmax.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t q_len = 1;
  std::size_t k_len = 1;
  std::size_t heads = 1;
  std::vector<std::size_t> key_valid;  // empty: all keys valid
};

// ---- operations -----------------------------------------------------------

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> minimum(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> maximum(const Var<T>& a, const Var<T>& b);
// x[n x m] + row[1 x m] broadcast over rows.
template <typename T> Var<T> add_row(const Var<T>& x, const Var<T>& row);
template <typename T> Var<T> scale(const Var<T>& x, T c);
template <typename T> Var<T> add_scalar(const Var<T>& x, T c);
// x * s where s holds exactly one value.
template <typename T> Var<T> mul_scalar(const Var<T>& x, const Var<T>& s);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> abs(const Var<T>& x);
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
// 2-D mean along axis 0 (-> 1 x n) or axis 1 (-> m x 1).
template <typename T> Var<T> reduce_mean(const Var<T>& x, int axis);
template <typename T> Var<T> softmax(const Var<T>& x, int axis);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5));
// Row concatenation along time: a occupies rows [0, F), b rows [F, F+S).
template <typename T> Var<T> concat_rows(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> index);
template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
// Divides each row by its L2 norm; a zero row is a NumericError.
template <typename T> Var<T> normalize_rows(const Var<T>& x);
// Row-wise dot products of equally shaped matrices -> n x 1.
template <typename T> Var<T> row_dot(const Var<T>& a, const Var<T>& b);
// Inverted dropout. Identity unless the graph is in training mode.
template <typename T> Var<T> dropout(const Var<T>& x, T rate);
// Mean over the first valid[b] rows of each batch block of `len` rows.
template <typename T>
Var<T> masked_mean_rows(const Var<T>& x, std::size_t len,
                        std::span<const std::size_t> valid);
// Packs two padded batches row-wise: block b holds a's valid rows followed by
// b's valid rows, then zero padding up to a_len + b_len.
template <typename T>
Var<T> concat_packed(const Var<T>& a, std::size_t a_len,
                     std::span<const std::size_t> a_valid, const Var<T>& b,
                     std::size_t b_len, std::span<const std::size_t> b_valid);
// Multi-head scaled dot-product attention over pre-projected q, k, v.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 const AttentionLayout& layout);
// Mean of -log softmax(logits)[i,i] along `axis` (1: rows, 0: columns).
// allowed[i*n+j] == 0 removes an off-diagonal entry from the normalizer.
template <typename T>
Var<T> diag_cross_entropy(const Var<T>& logits, int axis,
                          std::span<const std::uint8_t> allowed = {});

// Attention probabilities for inspection: [batch*heads*q_len x k_len].
template <typename T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k,
                          const AttentionLayout& layout);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

}  // namespace made::ad
