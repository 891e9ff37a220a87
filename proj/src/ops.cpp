#include "sgdiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sgdiff {
namespace {

template <typename S>
void require_same_shape(const char* op, const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Shape& shape, int rank) {
  if (static_cast<int>(shape.size()) != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(shape));
  }
}

int normalize_axis(const char* op, int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  }
  return a;
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename S>
void im2col(const S* x, Index channels, Index height, Index width, int k, int stride, int pad,
            Index out_h, Index out_w, S* col) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    const S* xc = x + c * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        S* row = col + ((c * k + ki) * k + kj) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          S* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, S(0));
            continue;
          }
          const S* src = xc + iy * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < width) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* col, Index channels, Index height, Index width, int k, int stride, int pad,
            Index out_h, Index out_w, S* x) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    S* xc = x + c * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const S* row = col + ((c * k + ki) * k + kj) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          S* dst = xc + iy * width;
          const S* src = row + oy * out_w;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape("add", a, b);
  Tensor<S> out(a.shape(), a.value().vec() + b.value().vec());
  return a.tape().record("add", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
    if (a.requires_grad()) a.grad().vec() += g.vec();
    if (b.requires_grad()) b.grad().vec() += g.vec();
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape("sub", a, b);
  Tensor<S> out(a.shape(), a.value().vec() - b.value().vec());
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
    if (a.requires_grad()) a.grad().vec() += g.vec();
    if (b.requires_grad()) b.grad().vec() -= g.vec();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape("mul", a, b);
  Tensor<S> out(a.shape(), a.value().vec().cwiseProduct(b.value().vec()));
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
    if (a.requires_grad()) a.grad().vec() += g.vec().cwiseProduct(b.value().vec());
    if (b.requires_grad()) b.grad().vec() += g.vec().cwiseProduct(a.value().vec());
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> out(a.shape(), a.value().vec() * factor);
  return a.tape().record("scale", std::move(out), {a}, [a, factor](const Tensor<S>& g) {
    a.grad().vec() += g.vec() * factor;
  });
}

template <typename S>
Var<S> scale_examples(const Var<S>& a, const std::vector<S>& factors) {
  if (a.value().rank() < 1 || a.dim(0) != static_cast<Index>(factors.size())) {
    throw DimensionError("scale_examples: " + std::to_string(factors.size()) + " factors for " +
                         shape_string(a.shape()));
  }
  const Index inner = a.size() / a.dim(0);
  Tensor<S> out = a.value();
  for (Index n = 0; n < a.dim(0); ++n) out.vec().segment(n * inner, inner) *= factors[static_cast<std::size_t>(n)];
  return a.tape().record("scale_examples", std::move(out), {a}, [a, factors, inner](const Tensor<S>& g) {
    auto& ga = a.grad().vec();
    for (std::size_t n = 0; n < factors.size(); ++n) {
      ga.segment(static_cast<Index>(n) * inner, inner) += g.vec().segment(static_cast<Index>(n) * inner, inner) * factors[n];
    }
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  const auto& x = a.value().vec();
  typename Tensor<S>::Vector sig = (S(1) + (-x.array()).exp()).inverse().matrix();
  Tensor<S> out(a.shape(), x.cwiseProduct(sig));
  return a.tape().record("silu", std::move(out), {a}, [a, sig = std::move(sig)](const Tensor<S>& g) {
    const auto& x = a.value().vec().array();
    a.grad().vec().array() += g.vec().array() * sig.array() * (S(1) + x * (S(1) - sig.array()));
  });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out(a.shape(), a.value().vec().cwiseMax(S(0)));
  return a.tape().record("relu", std::move(out), {a}, [a](const Tensor<S>& g) {
    a.grad().vec().array() += (a.value().vec().array() > S(0)).select(g.vec().array(), S(0));
  });
}

// ----------------------------------------------------------------- reductions

template <typename S>
Var<S> sum(const Var<S>& a) {
  return a.tape().record("sum", Tensor<S>::scalar(a.value().vec().sum()), {a}, [a](const Tensor<S>& g) {
    a.grad().vec().array() += g[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  const S n = static_cast<S>(a.size());
  return a.tape().record("mean", Tensor<S>::scalar(a.value().vec().sum() / n), {a}, [a, n](const Tensor<S>& g) {
    a.grad().vec().array() += g[0] / n;
  });
}

template <typename S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  require_same_shape("mse", a, b);
  const S n = static_cast<S>(a.size());
  typename Tensor<S>::Vector diff = a.value().vec() - b.value().vec();
  const S value = diff.squaredNorm() / n;
  return a.tape().record("mse", Tensor<S>::scalar(value), {a, b}, [a, b, n, diff = std::move(diff)](const Tensor<S>& g) {
    const S c = S(2) * g[0] / n;
    if (a.requires_grad()) a.grad().vec() += c * diff;
    if (b.requires_grad()) b.grad().vec() -= c * diff;
  });
}

template <typename S>
Var<S> row_norms(const Var<S>& a) {
  const auto m = a.value().rows_view();
  typename Tensor<S>::Vector norms = m.rowwise().norm();
  Tensor<S> out({m.rows()}, norms);
  return a.tape().record("row_norms", std::move(out), {a}, [a, norms](const Tensor<S>& g) {
    const auto x = a.value().rows_view();
    auto gx = a.grad().rows_view();
    for (Index r = 0; r < x.rows(); ++r) {
      if (norms[r] > S(0)) gx.row(r) += (g[r] / norms[r]) * x.row(r);
    }
  });
}

template <typename S>
Var<S> normalize_rows(const Var<S>& a, S eps) {
  const auto m = a.value().rows_view();
  typename Tensor<S>::Vector norms = (m.rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Tensor<S> out(a.shape());
  out.rows_view() = norms.cwiseInverse().asDiagonal() * m;
  Tensor<S> y = out;
  return a.tape().record("normalize_rows", std::move(out), {a}, [a, norms, y = std::move(y)](const Tensor<S>& g) {
    const auto gy = g.rows_view();
    const auto yy = y.rows_view();
    auto gx = a.grad().rows_view();
    for (Index r = 0; r < yy.rows(); ++r) {
      const S dot = gy.row(r).dot(yy.row(r));
      gx.row(r) += (gy.row(r) - dot * yy.row(r)) / norms[r];
    }
  });
}

// ------------------------------------------------------------ linear algebra

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out({m, n});
  out.matrix(m, n).noalias() = a.value().matrix(m, k) * b.value().matrix(k, n);
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](const Tensor<S>& g) {
    const auto gm = g.matrix(m, n);
    if (a.requires_grad()) a.grad().matrix(m, k).noalias() += gm * b.value().matrix(k, n).transpose();
    if (b.requires_grad()) b.grad().matrix(k, n).noalias() += a.value().matrix(m, k).transpose() * gm;
  });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  if (weight.value().rank() != 2 || x.value().rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(weight.shape()));
  }
  const Index in = weight.dim(0), outw = weight.dim(1), rows = x.size() / in;
  if (bias.valid() && bias.size() != outw) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " for weight " + shape_string(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = outw;
  Tensor<S> out(shape);
  auto om = out.matrix(rows, outw);
  om.noalias() = x.value().matrix(rows, in) * weight.value().matrix(in, outw);
  if (bias.valid()) om.rowwise() += bias.value().matrix(1, outw).row(0);
  auto backward = [x, weight, bias, rows, in, outw](const Tensor<S>& g) {
    const auto gm = g.matrix(rows, outw);
    if (x.requires_grad()) x.grad().matrix(rows, in).noalias() += gm * weight.value().matrix(in, outw).transpose();
    if (weight.requires_grad()) weight.grad().matrix(in, outw).noalias() += x.value().matrix(rows, in).transpose() * gm;
    if (bias.valid() && bias.requires_grad()) bias.grad().matrix(1, outw) += gm.colwise().sum();
  };
  if (bias.valid()) return x.tape().record("linear", std::move(out), {x, weight, bias}, backward);
  return x.tape().record("linear", std::move(out), {x, weight}, backward);
}

template <typename S>
Var<S> softmax(const Var<S>& x, int axis) {
  const int ax = normalize_axis("softmax", axis, x.value().rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  Tensor<S> out(x.shape());
  const S* in = x.value().data();
  S* o = out.data();
  for (Index a = 0; a < s.outer; ++a) {
    for (Index c = 0; c < s.inner; ++c) {
      const Index base = a * s.extent * s.inner + c;
      S mx = in[base];
      for (Index i = 1; i < s.extent; ++i) mx = std::max(mx, in[base + i * s.inner]);
      S total = 0;
      for (Index i = 0; i < s.extent; ++i) {
        const S e = std::exp(in[base + i * s.inner] - mx);
        o[base + i * s.inner] = e;
        total += e;
      }
      for (Index i = 0; i < s.extent; ++i) o[base + i * s.inner] /= total;
    }
  }
  Tensor<S> y = out;
  return x.tape().record("softmax", std::move(out), {x}, [x, s, y = std::move(y)](const Tensor<S>& g) {
    S* gx = x.grad().data();
    const S* yy = y.data();
    const S* gg = g.data();
    for (Index a = 0; a < s.outer; ++a) {
      for (Index c = 0; c < s.inner; ++c) {
        const Index base = a * s.extent * s.inner + c;
        S dot = 0;
        for (Index i = 0; i < s.extent; ++i) dot += gg[base + i * s.inner] * yy[base + i * s.inner];
        for (Index i = 0; i < s.extent; ++i) {
          const Index j = base + i * s.inner;
          gx[j] += yy[j] * (gg[j] - dot);
        }
      }
    }
  });
}

// ------------------------------------------------------------------ attention

namespace {

template <typename S>
void check_attention(const Shape& q, const Shape& k, const Shape& v, int heads) {
  require_rank("attention(q)", q, 3);
  require_rank("attention(k)", k, 3);
  require_rank("attention(v)", v, 3);
  if (q[0] != k[0] || k != v || q[2] != k[2]) {
    throw DimensionError("attention: incompatible q " + shape_string(q) + ", k " + shape_string(k) + ", v " +
                         shape_string(v));
  }
  if (heads <= 0 || q[2] % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(q[2]) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
}

template <typename S>
void softmax_rows(RowMatrix<S>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp().matrix();
    m.row(r) /= m.row(r).sum();
  }
}

}  // namespace

template <typename S>
Tensor<S> attention_weights(const Tensor<S>& q, const Tensor<S>& k, int heads) {
  check_attention<S>(q.shape(), k.shape(), k.shape(), heads);
  const Index n = q.dim(0), lq = q.dim(1), lk = k.dim(1), d = q.dim(2), dk = d / heads;
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(dk));
  Tensor<S> out({n, heads, lq, lk});
  for (Index b = 0; b < n; ++b) {
    ConstMatrixMap<S> qb(q.data() + b * lq * d, lq, d);
    ConstMatrixMap<S> kb(k.data() + b * lk * d, lk, d);
    for (int h = 0; h < heads; ++h) {
      RowMatrix<S> p = (qb.middleCols(h * dk, dk) * kb.middleCols(h * dk, dk).transpose()) * scale_factor;
      softmax_rows(p);
      MatrixMap<S>(out.data() + (b * heads + h) * lq * lk, lq, lk) = p;
    }
  }
  return out;
}

template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads) {
  check_attention<S>(q.shape(), k.shape(), v.shape(), heads);
  const Index n = q.dim(0), lq = q.dim(1), lk = k.dim(1), d = q.dim(2), dk = d / heads;
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(dk));
  Tensor<S> probs = attention_weights(q.value(), k.value(), heads);
  Tensor<S> out({n, lq, d});
  for (Index b = 0; b < n; ++b) {
    ConstMatrixMap<S> vb(v.value().data() + b * lk * d, lk, d);
    MatrixMap<S> ob(out.data() + b * lq * d, lq, d);
    for (int h = 0; h < heads; ++h) {
      ConstMatrixMap<S> p(probs.data() + (b * heads + h) * lq * lk, lq, lk);
      ob.middleCols(h * dk, dk).noalias() = p * vb.middleCols(h * dk, dk);
    }
  }
  auto backward = [q, k, v, heads, n, lq, lk, d, dk, scale_factor, probs = std::move(probs)](const Tensor<S>& g) {
    Tensor<S>* gq = q.requires_grad() ? &q.grad() : nullptr;
    Tensor<S>* gk = k.requires_grad() ? &k.grad() : nullptr;
    Tensor<S>* gv = v.requires_grad() ? &v.grad() : nullptr;
    for (Index b = 0; b < n; ++b) {
      ConstMatrixMap<S> qb(q.value().data() + b * lq * d, lq, d);
      ConstMatrixMap<S> kb(k.value().data() + b * lk * d, lk, d);
      ConstMatrixMap<S> vb(v.value().data() + b * lk * d, lk, d);
      ConstMatrixMap<S> gb(g.data() + b * lq * d, lq, d);
      for (int h = 0; h < heads; ++h) {
        ConstMatrixMap<S> p(probs.data() + (b * heads + h) * lq * lk, lq, lk);
        const auto go = gb.middleCols(h * dk, dk);
        if (gv) MatrixMap<S>(gv->data() + b * lk * d, lk, d).middleCols(h * dk, dk).noalias() += p.transpose() * go;
        if (!gq && !gk) continue;
        RowMatrix<S> dp = go * vb.middleCols(h * dk, dk).transpose();
        const auto rowdot = (dp.cwiseProduct(p)).rowwise().sum();
        RowMatrix<S> ds = p.cwiseProduct(dp.colwise() - rowdot) * scale_factor;
        if (gq) MatrixMap<S>(gq->data() + b * lq * d, lq, d).middleCols(h * dk, dk).noalias() += ds * kb.middleCols(h * dk, dk);
        if (gk) MatrixMap<S>(gk->data() + b * lk * d, lk, d).middleCols(h * dk, dk).noalias() += ds.transpose() * qb.middleCols(h * dk, dk);
      }
    }
  };
  return q.tape().record("attention", std::move(out), {q, k, v}, backward);
}

// -------------------------------------------------------------- convolutions

template <typename S>
Var<S> conv2d(const Var<S>& input, const Var<S>& kernels, const Var<S>& bias, int stride, int padding) {
  const bool unbatched = input.value().rank() == 3;
  if (!unbatched) require_rank("conv2d(input)", input.shape(), 4);
  require_rank("conv2d(kernels)", kernels.shape(), 4);
  const Index n = unbatched ? 1 : input.dim(0);
  const Index cin = input.dim(-3), h = input.dim(-2), w = input.dim(-1);
  const Index cout = kernels.dim(0);
  const int k = static_cast<int>(kernels.dim(2));
  if (kernels.dim(1) != cin) {
    throw DimensionError("conv2d: input channels " + std::to_string(cin) + " (input " + shape_string(input.shape()) +
                         ") do not match kernels " + shape_string(kernels.shape()));
  }
  if (kernels.dim(3) != k || k % 2 == 0) {
    throw DimensionError("conv2d: kernels must be square with odd size, got " + shape_string(kernels.shape()));
  }
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: invalid stride/padding");
  if (bias.valid() && bias.size() != cout) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  }
  const Index oh = (h + 2 * padding - k) / stride + 1;
  const Index ow = (w + 2 * padding - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw DimensionError("conv2d: empty output for input " + shape_string(input.shape()));
  const Index patch = cin * k * k, plane = oh * ow;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  Shape shape = unbatched ? Shape{cout, oh, ow} : Shape{n, cout, oh, ow};
  Tensor<S> out(shape);
  const auto wm = kernels.value().matrix(cout, patch);
  RowMatrix<S> col(pointwise ? 0 : patch, pointwise ? 0 : plane);
  for (Index b = 0; b < n; ++b) {
    const S* xb = input.value().data() + b * cin * h * w;
    MatrixMap<S> ob(out.data() + b * cout * plane, cout, plane);
    if (pointwise) {
      ob.noalias() = wm * ConstMatrixMap<S>(xb, cin, plane);
    } else {
      im2col(xb, cin, h, w, k, stride, padding, oh, ow, col.data());
      ob.noalias() = wm * col;
    }
    if (bias.valid()) ob.colwise() += bias.value().vec();
  }

  auto backward = [=](const Tensor<S>& g) {
    const auto wmat = kernels.value().matrix(cout, patch);
    Tensor<S>* gx = input.requires_grad() ? &input.grad() : nullptr;
    Tensor<S>* gw = kernels.requires_grad() ? &kernels.grad() : nullptr;
    Tensor<S>* gb = (bias.valid() && bias.requires_grad()) ? &bias.grad() : nullptr;
    RowMatrix<S> colb(pointwise ? 0 : patch, pointwise ? 0 : plane);
    RowMatrix<S> dcol(pointwise ? 0 : patch, pointwise ? 0 : plane);
    for (Index b = 0; b < n; ++b) {
      const S* xb = input.value().data() + b * cin * h * w;
      ConstMatrixMap<S> gob(g.data() + b * cout * plane, cout, plane);
      if (gb) gb->vec() += gob.rowwise().sum();
      if (gw) {
        if (pointwise) {
          gw->matrix(cout, patch).noalias() += gob * ConstMatrixMap<S>(xb, cin, plane).transpose();
        } else {
          im2col(xb, cin, h, w, k, stride, padding, oh, ow, colb.data());
          gw->matrix(cout, patch).noalias() += gob * colb.transpose();
        }
      }
      if (gx) {
        S* gxb = gx->data() + b * cin * h * w;
        if (pointwise) {
          MatrixMap<S>(gxb, cin, plane).noalias() += wmat.transpose() * gob;
        } else {
          dcol.noalias() = wmat.transpose() * gob;
          col2im(dcol.data(), cin, h, w, k, stride, padding, oh, ow, gxb);
        }
      }
    }
  };
  if (bias.valid()) return input.tape().record("conv2d", std::move(out), {input, kernels, bias}, backward);
  return input.tape().record("conv2d", std::move(out), {input, kernels}, backward);
}

// ------------------------------------------------------------- normalisation

template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S eps) {
  require_rank("group_norm", x.shape(), 4);
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups <= 0 || c % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
  }
  if (gamma.size() != c || beta.size() != c) throw DimensionError("group_norm: affine parameters must have " + std::to_string(c) + " entries");
  const Index cg = c / groups, m = cg * hw;
  Tensor<S> xhat(x.shape());
  std::vector<S> inv_std(static_cast<std::size_t>(n * groups));
  const S* xs = x.value().data();
  for (Index b = 0; b < n; ++b) {
    for (int gi = 0; gi < groups; ++gi) {
      const Index off = (b * c + gi * cg) * hw;
      Eigen::Map<const typename Tensor<S>::Vector> seg(xs + off, m);
      const S mu = seg.mean();
      const S var = (seg.array() - mu).square().mean();
      const S is = S(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(b * groups + gi)] = is;
      Eigen::Map<typename Tensor<S>::Vector>(xhat.data() + off, m) = (seg.array() - mu) * is;
    }
  }
  Tensor<S> out(x.shape());
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * hw;
      out.vec().segment(off, hw) = xhat.vec().segment(off, hw) * gamma.value()[ch];
      out.vec().segment(off, hw).array() += beta.value()[ch];
    }
  }
  auto backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor<S>& g) {
    if (gamma.requires_grad() || beta.requires_grad()) {
      for (Index b = 0; b < n; ++b) {
        for (Index ch = 0; ch < c; ++ch) {
          const Index off = (b * c + ch) * hw;
          if (gamma.requires_grad()) gamma.grad()[ch] += g.vec().segment(off, hw).dot(xhat.vec().segment(off, hw));
          if (beta.requires_grad()) beta.grad()[ch] += g.vec().segment(off, hw).sum();
        }
      }
    }
    if (!x.requires_grad()) return;
    auto& gx = x.grad().vec();
    typename Tensor<S>::Vector dxhat(m);
    for (Index b = 0; b < n; ++b) {
      for (int gi = 0; gi < groups; ++gi) {
        const Index off = (b * c + gi * cg) * hw;
        for (Index j = 0; j < cg; ++j) {
          dxhat.segment(j * hw, hw) = g.vec().segment(off + j * hw, hw) * gamma.value()[gi * cg + j];
        }
        const auto xh = xhat.vec().segment(off, m);
        const S mean_d = dxhat.mean();
        const S mean_dx = dxhat.dot(xh) / static_cast<S>(m);
        gx.segment(off, m).array() +=
            inv_std[static_cast<std::size_t>(b * groups + gi)] * (dxhat.array() - mean_d - xh.array() * mean_dx);
      }
    }
  };
  return x.tape().record("group_norm", std::move(out), {x, gamma, beta}, backward);
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
  const Index d = x.dim(-1), rows = x.size() / d;
  if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  const auto xm = x.value().matrix(rows, d);
  RowMatrix<S> xhat(rows, d);
  typename Tensor<S>::Vector inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const S mu = xm.row(r).mean();
    const S var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  Tensor<S> out(x.shape());
  const auto gm = gamma.value().matrix(1, d);
  const auto bm = beta.value().matrix(1, d);
  out.matrix(rows, d) = (xhat.array().rowwise() * gm.row(0).array()).rowwise() + bm.row(0).array();
  auto backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor<S>& g) {
    const auto gmat = g.matrix(rows, d);
    if (gamma.requires_grad()) gamma.grad().matrix(1, d) += (gmat.cwiseProduct(xhat)).colwise().sum();
    if (beta.requires_grad()) beta.grad().matrix(1, d) += gmat.colwise().sum();
    if (!x.requires_grad()) return;
    auto gx = x.grad().matrix(rows, d);
    const auto gam = gamma.value().matrix(1, d);
    for (Index r = 0; r < rows; ++r) {
      const auto dxhat = (gmat.row(r).array() * gam.row(0).array()).matrix();
      const S mean_d = dxhat.mean();
      const S mean_dx = dxhat.dot(xhat.row(r)) / static_cast<S>(d);
      gx.row(r).array() += inv_std[r] * (dxhat.array() - mean_d - xhat.row(r).array() * mean_dx);
    }
  };
  return x.tape().record("layer_norm", std::move(out), {x, gamma, beta}, backward);
}

// --------------------------------------------------------------- broadcasting

template <typename S>
Var<S> add_channel_bias(const Var<S>& x, const Var<S>& b) {
  require_rank("add_channel_bias", x.shape(), 4);
  if (b.shape() != Shape{x.dim(0), x.dim(1)}) {
    throw DimensionError("add_channel_bias: bias " + shape_string(b.shape()) + " for input " + shape_string(x.shape()));
  }
  const Index nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out = x.value();
  out.matrix(nc, hw).colwise() += b.value().vec();
  return x.tape().record("add_channel_bias", std::move(out), {x, b}, [x, b, nc, hw](const Tensor<S>& g) {
    if (x.requires_grad()) x.grad().vec() += g.vec();
    if (b.requires_grad()) b.grad().vec() += g.matrix(nc, hw).rowwise().sum();
  });
}

template <typename S>
Var<S> add_broadcast(const Var<S>& x, const Var<S>& b) {
  const Index inner = b.size();
  if (x.value().rank() != b.value().rank() + 1 ||
      !std::equal(b.shape().begin(), b.shape().end(), x.shape().begin() + 1)) {
    throw DimensionError("add_broadcast: " + shape_string(b.shape()) + " onto " + shape_string(x.shape()));
  }
  const Index n = x.dim(0);
  Tensor<S> out = x.value();
  out.matrix(n, inner).rowwise() += b.value().matrix(1, inner).row(0);
  return x.tape().record("add_broadcast", std::move(out), {x, b}, [x, b, n, inner](const Tensor<S>& g) {
    if (x.requires_grad()) x.grad().vec() += g.vec();
    if (b.requires_grad()) b.grad().matrix(1, inner) += g.matrix(n, inner).colwise().sum();
  });
}

template <typename S>
Var<S> embedding(const std::vector<int>& ids, const Shape& ids_shape, const Var<S>& table) {
  require_rank("embedding(table)", table.shape(), 2);
  if (shape_size(ids_shape) != static_cast<Index>(ids.size())) throw DimensionError("embedding: ids do not match shape " + shape_string(ids_shape));
  const Index vocab = table.dim(0), d = table.dim(1);
  Shape shape = ids_shape;
  shape.push_back(d);
  Tensor<S> out(shape);
  auto om = out.matrix(static_cast<Index>(ids.size()), d);
  const auto tm = table.value().matrix(vocab, d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    om.row(static_cast<Index>(i)) = tm.row(ids[i]);
  }
  return table.tape().record("embedding", std::move(out), {table}, [ids, table, vocab, d](const Tensor<S>& g) {
    auto gt = table.grad().matrix(vocab, d);
    const auto gm = g.matrix(static_cast<Index>(ids.size()), d);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += gm.row(static_cast<Index>(i));
  });
}

// ------------------------------------------------------------ restructuring

template <typename S>
Var<S> concat(const Var<S>& a, const Var<S>& b, int axis) {
  const int ax = normalize_axis("concat", axis, a.value().rank());
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size()) throw DimensionError("concat: rank mismatch " + shape_string(sa) + " vs " + shape_string(sb));
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (static_cast<int>(i) != ax && sa[i] != sb[i]) {
      throw DimensionError("concat: shapes " + shape_string(sa) + " and " + shape_string(sb) + " differ off axis " + std::to_string(ax));
    }
  }
  const AxisSplit pa = split_axis(sa, ax), pb = split_axis(sb, ax);
  Shape so = sa;
  so[static_cast<std::size_t>(ax)] += sb[static_cast<std::size_t>(ax)];
  Tensor<S> out(so);
  const Index ca = pa.extent * pa.inner, cb = pb.extent * pb.inner;
  for (Index o = 0; o < pa.outer; ++o) {
    out.vec().segment(o * (ca + cb), ca) = a.value().vec().segment(o * ca, ca);
    out.vec().segment(o * (ca + cb) + ca, cb) = b.value().vec().segment(o * cb, cb);
  }
  const Index outer = pa.outer;
  return a.tape().record("concat", std::move(out), {a, b}, [a, b, outer, ca, cb](const Tensor<S>& g) {
    for (Index o = 0; o < outer; ++o) {
      if (a.requires_grad()) a.grad().vec().segment(o * ca, ca) += g.vec().segment(o * (ca + cb), ca);
      if (b.requires_grad()) b.grad().vec().segment(o * cb, cb) += g.vec().segment(o * (ca + cb) + ca, cb);
    }
  });
}

template <typename S>
Var<S> slice(const Var<S>& x, int axis, Index start, Index length) {
  const int ax = normalize_axis("slice", axis, x.value().rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (start < 0 || length <= 0 || start + length > s.extent) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of extent " + std::to_string(s.extent));
  }
  Shape so = x.shape();
  so[static_cast<std::size_t>(ax)] = length;
  Tensor<S> out(so);
  const Index src = s.extent * s.inner, dst = length * s.inner, off = start * s.inner;
  for (Index o = 0; o < s.outer; ++o) out.vec().segment(o * dst, dst) = x.value().vec().segment(o * src + off, dst);
  const Index outer = s.outer;
  return x.tape().record("slice", std::move(out), {x}, [x, outer, src, dst, off](const Tensor<S>& g) {
    auto& gx = x.grad().vec();
    for (Index o = 0; o < outer; ++o) gx.segment(o * src + off, dst) += g.vec().segment(o * dst, dst);
  });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Tensor<S> out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [x](const Tensor<S>& g) { x.grad().vec() += g.vec(); });
}

template <typename S>
Var<S> transpose_last2(const Var<S>& x) {
  if (x.value().rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + shape_string(x.shape()));
  const Index a = x.dim(-2), b = x.dim(-1), batch = x.size() / (a * b);
  Shape so = x.shape();
  std::swap(so[so.size() - 1], so[so.size() - 2]);
  Tensor<S> out(so);
  for (Index n = 0; n < batch; ++n) {
    MatrixMap<S>(out.data() + n * a * b, b, a) = ConstMatrixMap<S>(x.value().data() + n * a * b, a, b).transpose();
  }
  return x.tape().record("transpose_last2", std::move(out), {x}, [x, a, b, batch](const Tensor<S>& g) {
    S* gx = x.grad().data();
    for (Index n = 0; n < batch; ++n) {
      MatrixMap<S>(gx + n * a * b, a, b) += ConstMatrixMap<S>(g.data() + n * a * b, b, a).transpose();
    }
  });
}

template <typename S>
Var<S> upsample_nearest2(const Var<S>& x) {
  require_rank("upsample_nearest2", x.shape(), 4);
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<S> out({x.dim(0), x.dim(1), 2 * h, 2 * w});
  const S* in = x.value().data();
  S* o = out.data();
  for (Index p = 0; p < nc; ++p) {
    for (Index y = 0; y < 2 * h; ++y) {
      for (Index xx = 0; xx < 2 * w; ++xx) o[(p * 2 * h + y) * 2 * w + xx] = in[(p * h + y / 2) * w + xx / 2];
    }
  }
  return x.tape().record("upsample_nearest2", std::move(out), {x}, [x, nc, h, w](const Tensor<S>& g) {
    S* gx = x.grad().data();
    const S* gg = g.data();
    for (Index p = 0; p < nc; ++p) {
      for (Index y = 0; y < 2 * h; ++y) {
        for (Index xx = 0; xx < 2 * w; ++xx) gx[(p * h + y / 2) * w + xx / 2] += gg[(p * 2 * h + y) * 2 * w + xx];
      }
    }
  });
}

template <typename S>
Var<S> avg_pool2(const Var<S>& x) {
  require_rank("avg_pool2", x.shape(), 4);
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw DimensionError("avg_pool2: odd spatial size " + shape_string(x.shape()));
  const Index oh = h / 2, ow = w / 2;
  Tensor<S> out({x.dim(0), x.dim(1), oh, ow});
  const S* in = x.value().data();
  S* o = out.data();
  for (Index p = 0; p < nc; ++p) {
    for (Index y = 0; y < oh; ++y) {
      for (Index xx = 0; xx < ow; ++xx) {
        const S* r0 = in + (p * h + 2 * y) * w + 2 * xx;
        o[(p * oh + y) * ow + xx] = S(0.25) * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
      }
    }
  }
  return x.tape().record("avg_pool2", std::move(out), {x}, [x, nc, h, w, oh, ow](const Tensor<S>& g) {
    S* gx = x.grad().data();
    const S* gg = g.data();
    for (Index p = 0; p < nc; ++p) {
      for (Index y = 0; y < oh; ++y) {
        for (Index xx = 0; xx < ow; ++xx) {
          const S v = S(0.25) * gg[(p * oh + y) * ow + xx];
          S* r0 = gx + (p * h + 2 * y) * w + 2 * xx;
          r0[0] += v;
          r0[1] += v;
          r0[w] += v;
          r0[w + 1] += v;
        }
      }
    }
  });
}

template <typename S>
Var<S> softmax_cross_entropy(const Var<S>& logits, const std::vector<int>& labels) {
  require_rank("softmax_cross_entropy", logits.shape(), 2);
  const Index b = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(labels.size()) != b) throw DimensionError("softmax_cross_entropy: label count mismatch");
  RowMatrix<S> p = logits.value().matrix(b, c);
  softmax_rows(p);
  S loss = 0;
  for (Index r = 0; r < b; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= c) throw std::out_of_range("softmax_cross_entropy: label out of range");
    const auto row = logits.value().matrix(b, c).row(r);
    const S mx = row.maxCoeff();
    loss -= row[y] - mx - std::log((row.array() - mx).exp().sum());
  }
  loss /= static_cast<S>(b);
  return logits.tape().record("softmax_cross_entropy", Tensor<S>::scalar(loss), {logits},
                              [logits, labels, b, c, p = std::move(p)](const Tensor<S>& g) {
                                RowMatrix<S> d = p;
                                for (Index r = 0; r < b; ++r) d(r, labels[static_cast<std::size_t>(r)]) -= S(1);
                                logits.grad().matrix(b, c) += d * (g[0] / static_cast<S>(b));
                              });
}

#define SGDIFF_INSTANTIATE_OPS(S)                                                                   \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                \
  template Var<S> scale(const Var<S>&, S);                                                          \
  template Var<S> scale_examples(const Var<S>&, const std::vector<S>&);                             \
  template Var<S> sum(const Var<S>&);                                                               \
  template Var<S> mean(const Var<S>&);                                                              \
  template Var<S> mse(const Var<S>&, const Var<S>&);                                                \
  template Var<S> row_norms(const Var<S>&);                                                         \
  template Var<S> normalize_rows(const Var<S>&, S);                                                 \
  template Var<S> silu(const Var<S>&);                                                              \
  template Var<S> relu(const Var<S>&);                                                              \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                              \
  template Var<S> softmax(const Var<S>&, int);                                                      \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&, int);                      \
  template Tensor<S> attention_weights(const Tensor<S>&, const Tensor<S>&, int);                    \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, int, int);                    \
  template Var<S> group_norm(const Var<S>&, const Var<S>&, const Var<S>&, int, S);                  \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                       \
  template Var<S> add_channel_bias(const Var<S>&, const Var<S>&);                                   \
  template Var<S> add_broadcast(const Var<S>&, const Var<S>&);                                      \
  template Var<S> embedding(const std::vector<int>&, const Shape&, const Var<S>&);                  \
  template Var<S> concat(const Var<S>&, const Var<S>&, int);                                        \
  template Var<S> slice(const Var<S>&, int, Index, Index);                                          \
  template Var<S> reshape(const Var<S>&, Shape);                                                    \
  template Var<S> transpose_last2(const Var<S>&);                                                   \
  template Var<S> upsample_nearest2(const Var<S>&);                                                 \
  template Var<S> avg_pool2(const Var<S>&);                                                         \
  template Var<S> softmax_cross_entropy(const Var<S>&, const std::vector<int>&);

SGDIFF_INSTANTIATE_OPS(float)
SGDIFF_INSTANTIATE_OPS(double)

}  // namespace sgdiff
