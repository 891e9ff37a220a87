#pragma once

#include <string>

#include "sgdiff/ops.hpp"
#include "sgdiff/params.hpp"

namespace sgdiff {

// Parameterised building blocks. Each reads `<name>.w`, `<name>.b` (and for
// norms `<name>.g`) from the bound parameter set.

template <typename S> Var<S> dense(BoundParams<S>& p, const std::string& name, const Var<S>& x, bool bias = true);
template <typename S> Var<S> layer_norm_layer(BoundParams<S>& p, const std::string& name, const Var<S>& x);
template <typename S>
Var<S> group_norm_layer(BoundParams<S>& p, const std::string& name, const Var<S>& x, int groups);
template <typename S>
Var<S> conv_layer(BoundParams<S>& p, const std::string& name, const Var<S>& x, int stride = 1);

/// Pre-norm self-attention block over x [N x L x d]:
/// x + out(attn(ln1 x)), then + mlp(ln2 x).
template <typename S>
Var<S> transformer_block(BoundParams<S>& p, const std::string& name, const Var<S>& x, int heads);
void init_transformer_block(ParamStore<float>& store, const std::string& name, Index width, Index hidden,
                            CounterRng& rng);

/// Multi-head attention from `queries` [N x Lq x dq] to `context` [N x Lk x dc]
/// with q/k/v/out projections; output width dq.
template <typename S>
Var<S> projected_attention(BoundParams<S>& p, const std::string& name, const Var<S>& queries,
                           const Var<S>& context, int heads);
void init_projected_attention(ParamStore<float>& store, const std::string& name, Index query_width,
                              Index context_width, CounterRng& rng);

}  // namespace sgdiff
