#include "sgdiff/sca.hpp"

namespace sgdiff {

template <typename S>
Var<S> sca_fuse(BoundParams<S>& p, const Var<S>& f_text, const Var<S>& f_style, int heads) {
  if (f_text.value().rank() != 3 || f_style.value().rank() != 3 || f_text.dim(2) != f_style.dim(2) ||
      f_text.dim(0) != f_style.dim(0)) {
    throw DimensionError("sca_fuse: width mismatch " + shape_string(f_text.shape()) + " vs " +
                         shape_string(f_style.shape()));
  }
  Var<S> q = dense(p, "sca.q", f_text, false);
  Var<S> k = concat(dense(p, "sca.k_style", f_style, false), dense(p, "sca.k_text", f_text, false), 1);
  Var<S> v = concat(dense(p, "sca.v_style", f_style, false), dense(p, "sca.v_text", f_text, false), 1);
  Var<S> fused = dense(p, "sca.out", attention(q, k, v, heads));
  return add(fused, f_text);
}

void init_sca(ParamStore<float>& store, Index width, CounterRng& rng) {
  for (const char* name : {"sca.q", "sca.k_text", "sca.v_text", "sca.k_style", "sca.v_style"}) {
    init_linear(store, name, width, width, rng, false);
  }
  init_linear(store, "sca.out", width, width, rng);
}

void init_identity(ParamStore<float>& store) {
  store.at("sca.out.w").vec().setZero();
  store.at("sca.out.b").vec().setZero();
}

template Var<float> sca_fuse(BoundParams<float>&, const Var<float>&, const Var<float>&, int);
template Var<double> sca_fuse(BoundParams<double>&, const Var<double>&, const Var<double>&, int);

}  // namespace sgdiff
