#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "made/autodiff.hpp"

namespace made::nn {

using ad::AttentionLayout;
using ad::Graph;
using ad::Parameter;
using ad::Var;

enum class InitScheme { kaiming, xavier };

template <typename T>
using ParamVisitor = std::function<void(Parameter<T>&)>;

// Row layout of a padded batch of sequences living in one matrix.
struct SeqLayout {
  std::size_t len = 0;
  std::vector<std::size_t> valid;
  std::size_t batch() const { return valid.size(); }
};

inline constexpr double kDropoutRate = 0.1;
inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out);

  Var<T> operator()(Graph<T>& g, const Var<T>& x);
  void visit(const ParamVisitor<T>& fn);

  std::size_t in_features() const { return weight_.value.rows(); }
  std::size_t out_features() const { return weight_.value.cols(); }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  Parameter<T> weight_;  // in x out
  Parameter<T> bias_;    // out
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t d);
  Var<T> operator()(Graph<T>& g, const Var<T>& x);
  void visit(const ParamVisitor<T>& fn);

 private:
  Parameter<T> gain_;
  Parameter<T> bias_;
};

// Multi-head attention with learnable Q/K/V/O projections.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t d, std::size_t heads);

  // layout.heads is overridden by the block's own head count.
  Var<T> operator()(Graph<T>& g, const Var<T>& q, const Var<T>& k,
                    const Var<T>& v, AttentionLayout layout);
  void visit(const ParamVisitor<T>& fn);
  std::size_t heads() const { return heads_; }

 private:
  std::size_t heads_ = 1;
  Linear<T> wq_, wk_, wv_, wo_;
};

// Position-wise FFN: Linear(d, 4d) -> ReLU -> Linear(4d, d).
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& name, std::size_t d, std::size_t hidden);
  Var<T> operator()(Graph<T>& g, const Var<T>& x);
  void visit(const ParamVisitor<T>& fn);

 private:
  Linear<T> fc1_, fc2_;
};

// Post-norm self-attention block:
//   x <- LN(x + Drop(MHA(x, x, x)));  x <- LN(x + Drop(FFN(x)))
template <typename T>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(const std::string& name, std::size_t d, std::size_t heads);
  Var<T> operator()(Graph<T>& g, const Var<T>& x, const SeqLayout& layout);
  void visit(const ParamVisitor<T>& fn);

 private:
  MultiHeadAttention<T> attn_;
  LayerNorm<T> ln1_, ln2_;
  FeedForward<T> ffn_;
};

// Cross-attention block without a self-attention sublayer. The attention
// query is content + query_pos, keys are memory + memory_pos, values are the
// memory; residual connections run through the content stream.
template <typename T>
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(const std::string& name, std::size_t d, std::size_t heads);
  Var<T> operator()(Graph<T>& g, const Var<T>& content, const Var<T>& query_pos,
                    const Var<T>& memory, const Var<T>& memory_pos,
                    const AttentionLayout& layout);
  void visit(const ParamVisitor<T>& fn);

 private:
  MultiHeadAttention<T> attn_;
  LayerNorm<T> ln1_, ln2_;
  FeedForward<T> ffn_;
};

// FC(d,d) -> ReLU -> FC(d,d) -> ReLU -> FC(d,out) -> sigmoid.
template <typename T>
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(const std::string& name, std::size_t d, std::size_t out);
  Var<T> operator()(Graph<T>& g, const Var<T>& phi);
  void visit(const ParamVisitor<T>& fn);
  std::size_t out_features() const { return fc3_.out_features(); }

 private:
  Linear<T> fc1_, fc2_, fc3_;
};

// PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(p / 10000^(2i/d)).
template <typename T>
Tensor<T> sinusoidal_pe(std::size_t n, std::size_t d);

// PE rows for a padded batch: block b gets positions 0..valid[b)-1, padding
// rows stay zero.
template <typename T>
Tensor<T> batched_pe(const SeqLayout& layout, std::size_t d);

// Weight matrices: kaiming-normal (var 2/fan_in) or xavier-uniform
// (bound sqrt(6/(fan_in+fan_out))); biases zero; layer-norm gains one.
template <typename T>
void init_parameter(Parameter<T>& p, InitScheme scheme, std::mt19937_64& rng);

}  // namespace made::nn
