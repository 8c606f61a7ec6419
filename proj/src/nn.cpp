#include "made/nn.hpp"

#include <cmath>

namespace made::nn {

using ad::ParamKind;

// ---- Linear -----------------------------------------------------------------

template <typename T>
Linear<T>::Linear(const std::string& name, std::size_t in, std::size_t out)
    : weight_(name + ".weight", Tensor<T>(Shape{in, out}), ParamKind::weight),
      bias_(name + ".bias", Tensor<T>(Shape{out}), ParamKind::bias) {}

template <typename T>
Var<T> Linear<T>::operator()(Graph<T>& g, const Var<T>& x) {
  if (x.cols() != weight_.value.rows()) {
    throw DimensionError(weight_.name + ": input width " + std::to_string(x.cols()) +
                         " != " + std::to_string(weight_.value.rows()));
  }
  return ad::add_row(ad::matmul(x, g.param(weight_)), g.param(bias_));
}

template <typename T>
void Linear<T>::visit(const ParamVisitor<T>& fn) {
  fn(weight_);
  fn(bias_);
}

// ---- LayerNorm --------------------------------------------------------------

template <typename T>
LayerNorm<T>::LayerNorm(const std::string& name, std::size_t d)
    : gain_(name + ".gain", Tensor<T>(Shape{d}, T(1)), ParamKind::gain),
      bias_(name + ".bias", Tensor<T>(Shape{d}), ParamKind::bias) {}

template <typename T>
Var<T> LayerNorm<T>::operator()(Graph<T>& g, const Var<T>& x) {
  return ad::layer_norm(x, g.param(gain_), g.param(bias_), T(kLayerNormEps));
}

template <typename T>
void LayerNorm<T>::visit(const ParamVisitor<T>& fn) {
  fn(gain_);
  fn(bias_);
}

// ---- MultiHeadAttention -----------------------------------------------------

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(const std::string& name, std::size_t d,
                                          std::size_t heads)
    : heads_(heads),
      wq_(name + ".q", d, d),
      wk_(name + ".k", d, d),
      wv_(name + ".v", d, d),
      wo_(name + ".o", d, d) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError(name + ": width " + std::to_string(d) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(Graph<T>& g, const Var<T>& q,
                                         const Var<T>& k, const Var<T>& v,
                                         AttentionLayout layout) {
  layout.heads = heads_;
  Var<T> ctx = ad::attention(wq_(g, q), wk_(g, k), wv_(g, v), layout);
  return wo_(g, ctx);
}

template <typename T>
void MultiHeadAttention<T>::visit(const ParamVisitor<T>& fn) {
  wq_.visit(fn);
  wk_.visit(fn);
  wv_.visit(fn);
  wo_.visit(fn);
}

// ---- FeedForward ------------------------------------------------------------

template <typename T>
FeedForward<T>::FeedForward(const std::string& name, std::size_t d, std::size_t hidden)
    : fc1_(name + ".fc1", d, hidden), fc2_(name + ".fc2", hidden, d) {}

template <typename T>
Var<T> FeedForward<T>::operator()(Graph<T>& g, const Var<T>& x) {
  return fc2_(g, ad::relu(fc1_(g, x)));
}

template <typename T>
void FeedForward<T>::visit(const ParamVisitor<T>& fn) {
  fc1_.visit(fn);
  fc2_.visit(fn);
}

// ---- EncoderBlock -----------------------------------------------------------

template <typename T>
EncoderBlock<T>::EncoderBlock(const std::string& name, std::size_t d, std::size_t heads)
    : attn_(name + ".attn", d, heads),
      ln1_(name + ".ln1", d),
      ln2_(name + ".ln2", d),
      ffn_(name + ".ffn", d, 4 * d) {}

template <typename T>
Var<T> EncoderBlock<T>::operator()(Graph<T>& g, const Var<T>& x,
                                   const SeqLayout& layout) {
  if (layout.batch() == 0 || x.rows() != layout.batch() * layout.len) {
    throw DimensionError("encoder block: rows do not match the sequence layout");
  }
  AttentionLayout al;
  al.batch = layout.batch();
  al.q_len = layout.len;
  al.k_len = layout.len;
  al.key_valid = layout.valid;
  const T rate = T(kDropoutRate);
  Var<T> h = ln1_(g, ad::add(x, ad::dropout(attn_(g, x, x, x, al), rate)));
  return ln2_(g, ad::add(h, ad::dropout(ffn_(g, h), rate)));
}

template <typename T>
void EncoderBlock<T>::visit(const ParamVisitor<T>& fn) {
  attn_.visit(fn);
  ln1_.visit(fn);
  ffn_.visit(fn);
  ln2_.visit(fn);
}

// ---- DecoderBlock -----------------------------------------------------------

template <typename T>
DecoderBlock<T>::DecoderBlock(const std::string& name, std::size_t d, std::size_t heads)
    : attn_(name + ".cross_attn", d, heads),
      ln1_(name + ".ln1", d),
      ln2_(name + ".ln2", d),
      ffn_(name + ".ffn", d, 4 * d) {}

template <typename T>
Var<T> DecoderBlock<T>::operator()(Graph<T>& g, const Var<T>& content,
                                   const Var<T>& query_pos, const Var<T>& memory,
                                   const Var<T>& memory_pos,
                                   const AttentionLayout& layout) {
  const T rate = T(kDropoutRate);
  Var<T> q = ad::add(content, query_pos);
  Var<T> k = ad::add(memory, memory_pos);
  Var<T> h = ln1_(g, ad::add(content, ad::dropout(attn_(g, q, k, memory, layout), rate)));
  return ln2_(g, ad::add(h, ad::dropout(ffn_(g, h), rate)));
}

template <typename T>
void DecoderBlock<T>::visit(const ParamVisitor<T>& fn) {
  attn_.visit(fn);
  ln1_.visit(fn);
  ffn_.visit(fn);
  ln2_.visit(fn);
}

// ---- MlpHead ----------------------------------------------------------------

template <typename T>
MlpHead<T>::MlpHead(const std::string& name, std::size_t d, std::size_t out)
    : fc1_(name + ".fc1", d, d), fc2_(name + ".fc2", d, d), fc3_(name + ".fc3", d, out) {}

template <typename T>
Var<T> MlpHead<T>::operator()(Graph<T>& g, const Var<T>& phi) {
  Var<T> h = ad::relu(fc1_(g, phi));
  h = ad::relu(fc2_(g, h));
  return ad::sigmoid(fc3_(g, h));
}

template <typename T>
void MlpHead<T>::visit(const ParamVisitor<T>& fn) {
  fc1_.visit(fn);
  fc2_.visit(fn);
  fc3_.visit(fn);
}

// ---- positional encoding ----------------------------------------------------

template <typename T>
Tensor<T> sinusoidal_pe(std::size_t n, std::size_t d) {
  if (d % 2 != 0) {
    throw DimensionError("sinusoidal_pe: width must be even, got " + std::to_string(d));
  }
  Tensor<T> pe(Shape{n, d});
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq =
          std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      const double angle = static_cast<double>(p) / freq;
      pe(p, 2 * i) = static_cast<T>(std::sin(angle));
      pe(p, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
Tensor<T> batched_pe(const SeqLayout& layout, std::size_t d) {
  const Tensor<T> table = sinusoidal_pe<T>(layout.len, d);
  Tensor<T> out(Shape{layout.batch() * layout.len, d});
  for (std::size_t b = 0; b < layout.batch(); ++b) {
    for (std::size_t t = 0; t < layout.valid[b]; ++t) {
      for (std::size_t j = 0; j < d; ++j) out((b * layout.len) + t, j) = table(t, j);
    }
  }
  return out;
}

// ---- initialization ---------------------------------------------------------

template <typename T>
void init_parameter(Parameter<T>& p, InitScheme scheme, std::mt19937_64& rng) {
  switch (p.kind) {
    case ParamKind::bias:
      p.value.fill(T(0));
      return;
    case ParamKind::gain:
      p.value.fill(T(1));
      return;
    case ParamKind::scalar:
      return;  // owner sets the value
    case ParamKind::weight:
    case ParamKind::token:
      break;
  }
  const double fan_in = static_cast<double>(p.value.rows());
  const double fan_out = static_cast<double>(p.value.cols());
  if (scheme == InitScheme::kaiming) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : p.value.storage()) v = static_cast<T>(dist(rng));
  } else {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : p.value.storage()) v = static_cast<T>(dist(rng));
  }
}

#define MADE_NN_INSTANTIATE(T)                                          \
  template class Linear<T>;                                             \
  template class LayerNorm<T>;                                          \
  template class MultiHeadAttention<T>;                                 \
  template class FeedForward<T>;                                        \
  template class EncoderBlock<T>;                                       \
  template class DecoderBlock<T>;                                       \
  template class MlpHead<T>;                                            \
  template Tensor<T> sinusoidal_pe<T>(std::size_t, std::size_t);        \
  template Tensor<T> batched_pe<T>(const SeqLayout&, std::size_t);      \
  template void init_parameter<T>(Parameter<T>&, InitScheme, std::mt19937_64&);

MADE_NN_INSTANTIATE(float)
MADE_NN_INSTANTIATE(double)

#undef MADE_NN_INSTANTIATE

}  // namespace made::nn
