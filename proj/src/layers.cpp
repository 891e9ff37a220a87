#include "sgdiff/layers.hpp"

namespace sgdiff {

template <typename S>
Var<S> dense(BoundParams<S>& p, const std::string& name, const Var<S>& x, bool bias) {
  return linear(x, p(name + ".w"), bias ? p(name + ".b") : Var<S>());
}

template <typename S>
Var<S> layer_norm_layer(BoundParams<S>& p, const std::string& name, const Var<S>& x) {
  return layer_norm(x, p(name + ".g"), p(name + ".b"));
}

template <typename S>
Var<S> group_norm_layer(BoundParams<S>& p, const std::string& name, const Var<S>& x, int groups) {
  return group_norm(x, p(name + ".g"), p(name + ".b"), groups);
}

template <typename S>
Var<S> conv_layer(BoundParams<S>& p, const std::string& name, const Var<S>& x, int stride) {
  const Var<S> w = p(name + ".w");
  return conv2d(x, w, p(name + ".b"), stride, static_cast<int>(w.dim(2) / 2));
}

template <typename S>
Var<S> transformer_block(BoundParams<S>& p, const std::string& name, const Var<S>& x, int heads) {
  Var<S> h = layer_norm_layer(p, name + ".ln1", x);
  Var<S> y = add(x, projected_attention(p, name + ".attn", h, h, heads));
  Var<S> m = dense(p, name + ".mlp2", silu(dense(p, name + ".mlp1", layer_norm_layer(p, name + ".ln2", y))));
  return add(y, m);
}

void init_transformer_block(ParamStore<float>& store, const std::string& name, Index width, Index hidden,
                            CounterRng& rng) {
  init_norm(store, name + ".ln1", width);
  init_projected_attention(store, name + ".attn", width, width, rng);
  init_norm(store, name + ".ln2", width);
  init_linear(store, name + ".mlp1", width, hidden, rng);
  init_linear(store, name + ".mlp2", hidden, width, rng);
}

template <typename S>
Var<S> projected_attention(BoundParams<S>& p, const std::string& name, const Var<S>& queries, const Var<S>& context,
                           int heads) {
  Var<S> q = dense(p, name + ".q", queries, false);
  Var<S> k = dense(p, name + ".k", context, false);
  Var<S> v = dense(p, name + ".v", context, false);
  return dense(p, name + ".out", attention(q, k, v, heads));
}

void init_projected_attention(ParamStore<float>& store, const std::string& name, Index query_width,
                              Index context_width, CounterRng& rng) {
  init_linear(store, name + ".q", query_width, query_width, rng, false);
  init_linear(store, name + ".k", context_width, query_width, rng, false);
  init_linear(store, name + ".v", context_width, query_width, rng, false);
  init_linear(store, name + ".out", query_width, query_width, rng);
}

#define SGDIFF_INSTANTIATE_LAYERS(S)                                                                         \
  template Var<S> dense(BoundParams<S>&, const std::string&, const Var<S>&, bool);                           \
  template Var<S> layer_norm_layer(BoundParams<S>&, const std::string&, const Var<S>&);                      \
  template Var<S> group_norm_layer(BoundParams<S>&, const std::string&, const Var<S>&, int);                 \
  template Var<S> conv_layer(BoundParams<S>&, const std::string&, const Var<S>&, int);                       \
  template Var<S> transformer_block(BoundParams<S>&, const std::string&, const Var<S>&, int);                \
  template Var<S> projected_attention(BoundParams<S>&, const std::string&, const Var<S>&, const Var<S>&, int);

SGDIFF_INSTANTIATE_LAYERS(float)
SGDIFF_INSTANTIATE_LAYERS(double)

}  // namespace sgdiff
