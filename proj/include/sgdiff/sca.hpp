#pragma once

#include "sgdiff/layers.hpp"

namespace sgdiff {

/// Skip cross-attention fusion of text tokens f_T [N x L_T x d] with style
/// tokens f_S [N x L_S x d]. Text tokens form the queries; keys and values
/// are the style projections followed by the text projections along the
/// length axis. Output [N x L_T x d] = f_T + out(attn).
///
/// Parameters: sca.q, sca.k_text, sca.v_text, sca.k_style, sca.v_style
/// (weights only) and sca.out (weight and bias).
template <typename S>
Var<S> sca_fuse(BoundParams<S>& p, const Var<S>& f_text, const Var<S>& f_style, int heads);

void init_sca(ParamStore<float>& store, Index width, CounterRng& rng);
/// Zeroes the output projection so sca_fuse returns f_T unchanged.
void init_identity(ParamStore<float>& store);

}  // namespace sgdiff
