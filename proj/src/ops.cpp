// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/ops.hpp"

#include <algorithm>
#include <cmath>

namespace maskdiff {

using detail::record;
using detail::wants_grad;

namespace {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename Scalar>
void require_rank(const Var<Scalar>& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape());
  out.vec() = a.value().vec() + b.value().vec();
  return record<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (wants_grad(self, i)) self.parents[i]->grad_buffer().vec() += self.grad.vec();
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape());
  out.vec() = a.value().vec() - b.value().vec();
  return record<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (wants_grad(self, 0)) self.parents[0]->grad_buffer().vec() += self.grad.vec();
    if (wants_grad(self, 1)) self.parents[1]->grad_buffer().vec() -= self.grad.vec();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mul");
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() * b.value().array();
  return record<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.grad_buffer().array() += self.grad.array() * pb.value.array();
    if (pb.requires_grad) pb.grad_buffer().array() += self.grad.array() * pa.value.array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape());
  out.vec() = a.value().vec() * s;
  return record<Scalar>(std::move(out), {a}, [s](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().vec() += s * self.grad.vec();
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() + s;
  return record<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().vec() += self.grad.vec();
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out(Shape{1});
  out[0] = a.value().vec().sum();
  return record<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().array() += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(std::max<Index>(a.size(), 1));
  return scale(sum(a), Scalar(1) / n);
}

// ---------------------------------------------------------------------------
// Activations

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape());
  const auto& x = a.value();
  for (Index i = 0; i < x.size(); ++i) out[i] = x[i] * stable_sigmoid(x[i]);
  return record<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar s = stable_sigmoid(x[i]);
      g[i] += self.grad[i] * s * (Scalar(1) + x[i] * (Scalar(1) - s));
    }
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  constexpr Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar c = Scalar(0.044715);
  Tensor<Scalar> out(a.shape());
  const auto& x = a.value();
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar v = x[i];
    out[i] = Scalar(0.5) * v * (Scalar(1) + std::tanh(k * (v + c * v * v * v)));
  }
  return record<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar v = x[i];
      const Scalar th = std::tanh(k * (v + c * v * v * v));
      const Scalar d = Scalar(0.5) * (Scalar(1) + th) +
                       Scalar(0.5) * v * (Scalar(1) - th * th) * k * (Scalar(1) + Scalar(3) * c * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape());
  const auto& x = a.value();
  for (Index i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
  auto y = out;
  return record<Scalar>(std::move(out), {a}, [y = std::move(y)](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().array() += self.grad.array() * y.array() * (Scalar(1) - y.array());
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  Index n, cin, h, w, cout, kh, kw, ho, wo;
  Conv2dOptions opt;
  Index k() const { return cin * kh * kw; }
  Index out_pixels() const { return ho * wo; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && opt.stride == 1 && opt.pad_h == 0 && opt.pad_w == 0;
  }
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* cols) {
  const Index hw_out = g.out_pixels();
  for (Index c = 0; c < g.cin; ++c) {
    const Scalar* plane = x + c * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw_out;
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.opt.stride - g.opt.pad_h + ki * g.opt.dilation_h;
          Scalar* dst = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = plane + ih * g.w;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = ow * g.opt.stride - g.opt.pad_w + kj * g.opt.dilation_w;
            dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* dx) {
  const Index hw_out = g.out_pixels();
  for (Index c = 0; c < g.cin; ++c) {
    Scalar* plane = dx + c * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw_out;
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.opt.stride - g.opt.pad_h + ki * g.opt.dilation_h;
          if (ih < 0 || ih >= g.h) continue;
          const Scalar* src = row + oh * g.wo;
          Scalar* dst = plane + ih * g.w;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = ow * g.opt.stride - g.opt.pad_w + kj * g.opt.dilation_w;
            if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const Conv2dOptions& opt) {
  using MatrixRM = typename Tensor<Scalar>::MatrixRM;
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (opt.stride < 1 || opt.dilation_h < 1 || opt.dilation_w < 1 || opt.pad_h < 0 || opt.pad_w < 0) {
    throw std::invalid_argument("conv2d: invalid options");
  }
  ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.opt = opt;
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.value().rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  const Index span_h = opt.dilation_h * (g.kh - 1) + 1;
  const Index span_w = opt.dilation_w * (g.kw - 1) + 1;
  if (g.h + 2 * opt.pad_h < span_h || g.w + 2 * opt.pad_w < span_w) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  g.ho = (g.h + 2 * opt.pad_h - span_h) / opt.stride + 1;
  g.wo = (g.w + 2 * opt.pad_w - span_w) / opt.stride + 1;

  Tensor<Scalar> out(Shape{g.n, g.cout, g.ho, g.wo});
  const Index K = g.k();
  const Index P = g.out_pixels();
  Eigen::Map<const MatrixRM> wm(weight.value().data(), g.cout, K);
  MatrixRM cols;
  if (!g.pointwise()) cols.resize(K, P);
  for (Index n = 0; n < g.n; ++n) {
    const Scalar* xn = x.value().data() + n * g.cin * g.h * g.w;
    Eigen::Map<MatrixRM> yn(out.data() + n * g.cout * P, g.cout, P);
    if (g.pointwise()) {
      yn.noalias() = wm * Eigen::Map<const MatrixRM>(xn, g.cin, P);
    } else {
      im2col(xn, g, cols.data());
      yn.noalias() = wm * cols;
    }
    if (bias.defined()) yn.colwise() += bias.value().vec();
  }

  std::vector<Var<Scalar>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return record<Scalar>(std::move(out), std::move(parents), [g](Node<Scalar>& self) {
    const Index K = g.k();
    const Index P = g.out_pixels();
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    Node<Scalar>* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    Eigen::Map<const MatrixRM> wm(pw.value.data(), g.cout, K);
    MatrixRM cols;
    MatrixRM dcols;
    if (!g.pointwise()) cols.resize(K, P);
    Scalar* dw = pw.requires_grad ? pw.grad_buffer().data() : nullptr;
    Scalar* db = (pb && pb->requires_grad) ? pb->grad_buffer().data() : nullptr;
    Scalar* dx = px.requires_grad ? px.grad_buffer().data() : nullptr;
    for (Index n = 0; n < g.n; ++n) {
      Eigen::Map<const MatrixRM> dy(self.grad.data() + n * g.cout * P, g.cout, P);
      const Scalar* xn = px.value.data() + n * g.cin * g.h * g.w;
      if (db) Eigen::Map<typename Tensor<Scalar>::Vector>(db, g.cout) += dy.rowwise().sum();
      if (g.pointwise()) {
        Eigen::Map<const MatrixRM> xm(xn, g.cin, P);
        if (dw) Eigen::Map<MatrixRM>(dw, g.cout, K).noalias() += dy * xm.transpose();
        if (dx) Eigen::Map<MatrixRM>(dx + n * g.cin * P, g.cin, P).noalias() += wm.transpose() * dy;
        continue;
      }
      if (dw) {
        im2col(xn, g, cols.data());
        Eigen::Map<MatrixRM>(dw, g.cout, K).noalias() += dy * cols.transpose();
      }
      if (dx) {
        dcols.noalias() = wm.transpose() * dy;
        col2im_add(dcols.data(), g, dx + n * g.cin * g.h * g.w);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& x, int groups, Scalar eps) {
  require_rank(x, 4, "group_norm");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups < 1 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  const Index m = (c / groups) * hw;
  Tensor<Scalar> out(x.shape());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(n * groups));
  for (Index i = 0; i < n * groups; ++i) {
    auto seg = x.value().vec().segment(i * m, m).array();
    const Scalar mu = seg.mean();
    const Scalar var = (seg - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    out.vec().segment(i * m, m).array() = (seg - mu) * is;
  }
  auto xhat = out;
  return record<Scalar>(std::move(out), {x},
                        [m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Scalar>& self) {
                          auto& gx = self.parents[0]->grad_buffer();
                          const Index blocks = static_cast<Index>(inv_std.size());
                          const Scalar mm = static_cast<Scalar>(m);
                          for (Index i = 0; i < blocks; ++i) {
                            auto g = self.grad.vec().segment(i * m, m).array();
                            auto xh = xhat.vec().segment(i * m, m).array();
                            const Scalar sg = g.sum();
                            const Scalar sgx = (g * xh).sum();
                            gx.vec().segment(i * m, m).array() +=
                                (inv_std[static_cast<std::size_t>(i)] / mm) * (mm * g - sg - xh * sgx);
                          }
                        });
}

template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta) {
  require_rank(x, 4, "channel_affine");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.size() != c || beta.size() != c) throw ShapeError("channel_affine: parameter size mismatch");
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * hw;
      out.vec().segment(off, hw).array() =
          x.value().vec().segment(off, hw).array() * gamma.value()[ch] + beta.value()[ch];
    }
  }
  return record<Scalar>(std::move(out), {x, gamma, beta}, [n, c, hw](Node<Scalar>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    for (Index i = 0; i < n; ++i) {
      for (Index ch = 0; ch < c; ++ch) {
        const Index off = (i * c + ch) * hw;
        auto g = self.grad.vec().segment(off, hw);
        if (px.requires_grad) px.grad_buffer().vec().segment(off, hw) += g * pg.value[ch];
        if (pg.requires_grad) pg.grad_buffer()[ch] += g.dot(px.value.vec().segment(off, hw));
        if (pb.requires_grad) pb.grad_buffer()[ch] += g.sum();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> modulate(const Var<Scalar>& x, const Var<Scalar>& scale_v, const Var<Scalar>& shift) {
  require_rank(x, 4, "modulate");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (scale_v.shape() != Shape{n, c} || shift.shape() != Shape{n, c}) {
    throw ShapeError("modulate: scale/shift must be " + shape_str(Shape{n, c}) + ", got " +
                     shape_str(scale_v.shape()) + " and " + shape_str(shift.shape()));
  }
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < n * c; ++i) {
    out.vec().segment(i * hw, hw).array() =
        x.value().vec().segment(i * hw, hw).array() * (Scalar(1) + scale_v.value()[i]) + shift.value()[i];
  }
  return record<Scalar>(std::move(out), {x, scale_v, shift}, [n, c, hw](Node<Scalar>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    auto& pt = *self.parents[2];
    for (Index i = 0; i < n * c; ++i) {
      auto g = self.grad.vec().segment(i * hw, hw);
      if (px.requires_grad) px.grad_buffer().vec().segment(i * hw, hw) += g * (Scalar(1) + ps.value[i]);
      if (ps.requires_grad) ps.grad_buffer()[i] += g.dot(px.value.vec().segment(i * hw, hw));
      if (pt.requires_grad) pt.grad_buffer()[i] += g.sum();
    }
  });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  using MatrixRM = typename Tensor<Scalar>::MatrixRM;
  const Index c = x.dim(-1);
  const Index rows = x.size() / c;
  if (gamma.size() != c || beta.size() != c) throw ShapeError("layer_norm: parameter size mismatch");
  Tensor<Scalar> xhat(x.shape());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    auto seg = x.value().vec().segment(r * c, c).array();
    const Scalar mu = seg.mean();
    const Scalar var = (seg - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.vec().segment(r * c, c).array() = (seg - mu) * is;
  }
  Tensor<Scalar> out(x.shape());
  {
    auto xm = xhat.matrix(rows, c);
    auto om = out.matrix(rows, c);
    om = (xm.array().rowwise() * gamma.value().vec().transpose().array()).matrix();
    om.rowwise() += beta.value().vec().transpose();
  }
  return record<Scalar>(std::move(out), {x, gamma, beta},
                        [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Scalar>& self) {
                          auto& px = *self.parents[0];
                          auto& pg = *self.parents[1];
                          auto& pb = *self.parents[2];
                          Eigen::Map<const MatrixRM> g(self.grad.data(), rows, c);
                          auto xm = xhat.matrix(rows, c);
                          if (pg.requires_grad) {
                            pg.grad_buffer().vec() += (g.array() * xm.array()).colwise().sum().transpose().matrix();
                          }
                          if (pb.requires_grad) pb.grad_buffer().vec() += g.colwise().sum().transpose();
                          if (!px.requires_grad) return;
                          auto& gx = px.grad_buffer();
                          const Scalar cc = static_cast<Scalar>(c);
                          for (Index r = 0; r < rows; ++r) {
                            auto dxh = (g.row(r).array() * pg.value.vec().transpose().array()).eval();
                            auto xr = xm.row(r).array();
                            const Scalar s1 = dxh.sum();
                            const Scalar s2 = (dxh * xr).sum();
                            gx.vec().segment(r * c, c).array() +=
                                ((inv_std[static_cast<std::size_t>(r)] / cc) * (cc * dxh - s1 - xr * s2)).transpose();
                          }
                        });
}

// ---------------------------------------------------------------------------
// Dense / attention

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  using MatrixRM = typename Tensor<Scalar>::MatrixRM;
  require_rank(weight, 2, "linear weight");
  const Index cin = x.dim(-1);
  const Index cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("linear: input features " + std::to_string(cin) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.size() != cout) throw ShapeError("linear: bias size mismatch");
  const Index rows = x.size() / cin;
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor<Scalar> out(out_shape);
  auto om = out.matrix(rows, cout);
  om.noalias() = x.value().matrix(rows, cin) * weight.value().matrix(cout, cin).transpose();
  if (bias.defined()) om.rowwise() += bias.value().vec().transpose();

  std::vector<Var<Scalar>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return record<Scalar>(std::move(out), std::move(parents), [rows, cin, cout](Node<Scalar>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    Eigen::Map<const MatrixRM> g(self.grad.data(), rows, cout);
    if (px.requires_grad) px.grad_buffer().matrix(rows, cin).noalias() += g * pw.value.matrix(cout, cin);
    if (pw.requires_grad) pw.grad_buffer().matrix(cout, cin).noalias() += g.transpose() * px.value.matrix(rows, cin);
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      self.parents[2]->grad_buffer().vec() += g.colwise().sum().transpose();
    }
  });
}

template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads) {
  using MatrixRM = typename Tensor<Scalar>::MatrixRM;
  using Strided = Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<MatrixRM, 0, Eigen::OuterStride<>>;
  require_rank(q, 3, "attention q");
  require_rank(k, 3, "attention k");
  require_same_shape(k, v, "attention k/v");
  const Index n = q.dim(0), lq = q.dim(1), c = q.dim(2), lk = k.dim(1);
  if (k.dim(0) != n || k.dim(2) != c) throw ShapeError("attention: q/k shape mismatch");
  if (heads < 1 || c % heads != 0) throw ShapeError("attention: channels not divisible by heads");
  const Index d = c / heads;
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(d));

  Tensor<Scalar> out(q.shape());
  // Softmax probabilities per (n, head), kept for the backward pass.
  Tensor<Scalar> probs(Shape{n, heads, lq, lk});
  for (Index b = 0; b < n; ++b) {
    for (Index h = 0; h < heads; ++h) {
      Strided qh(q.value().data() + b * lq * c + h * d, lq, d, Eigen::OuterStride<>(c));
      Strided kh(k.value().data() + b * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
      Strided vh(v.value().data() + b * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
      auto p = probs.matrix(lq, lk, (b * heads + h) * lq * lk);
      p.noalias() = (qh * kh.transpose()) * sc;
      for (Index r = 0; r < lq; ++r) {
        const Scalar mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
      }
      StridedMut oh(out.data() + b * lq * c + h * d, lq, d, Eigen::OuterStride<>(c));
      oh.noalias() = p * vh;
    }
  }
  return record<Scalar>(
      std::move(out), {q, k, v}, [n, lq, lk, c, d, heads, sc, probs = std::move(probs)](Node<Scalar>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        Scalar* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
        Scalar* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        Scalar* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        MatrixRM dp, ds;
        for (Index b = 0; b < n; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Index qoff = b * lq * c + h * d;
            const Index koff = b * lk * c + h * d;
            Strided qh(pq.value.data() + qoff, lq, d, Eigen::OuterStride<>(c));
            Strided kh(pk.value.data() + koff, lk, d, Eigen::OuterStride<>(c));
            Strided vh(pv.value.data() + koff, lk, d, Eigen::OuterStride<>(c));
            Strided go(self.grad.data() + qoff, lq, d, Eigen::OuterStride<>(c));
            auto p = probs.matrix(lq, lk, (b * heads + h) * lq * lk);
            if (gv) StridedMut(gv + koff, lk, d, Eigen::OuterStride<>(c)).noalias() += p.transpose() * go;
            if (!gq && !gk) continue;
            dp.noalias() = go * vh.transpose();
            ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
            if (gq) StridedMut(gq + qoff, lq, d, Eigen::OuterStride<>(c)).noalias() += (ds * kh) * sc;
            if (gk) StridedMut(gk + koff, lk, d, Eigen::OuterStride<>(c)).noalias() += (ds.transpose() * qh) * sc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front().shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis");
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= first[static_cast<std::size_t>(i)];
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<Index> blocks;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && s[static_cast<std::size_t>(i)] != first[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    blocks.push_back(s[static_cast<std::size_t>(axis)] * inner);
  }
  const Index total = out_shape[static_cast<std::size_t>(axis)] * inner;
  Tensor<Scalar> out(out_shape);
  for (Index o = 0; o < outer; ++o) {
    Index off = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      out.vec().segment(o * total + off, blocks[i]) = xs[i].value().vec().segment(o * blocks[i], blocks[i]);
      off += blocks[i];
    }
  }
  return record<Scalar>(std::move(out), xs, [outer, total, blocks = std::move(blocks)](Node<Scalar>& self) {
    for (Index o = 0; o < outer; ++o) {
      Index off = 0;
      for (std::size_t i = 0; i < blocks.size(); ++i) {
        auto& p = *self.parents[i];
        if (p.requires_grad) {
          p.grad_buffer().vec().segment(o * blocks[i], blocks[i]) += self.grad.vec().segment(o * total + off, blocks[i]);
        }
        off += blocks[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& x, int axis, Index start, Index length) {
  const Shape& s = x.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("slice: bad axis");
  const Index extent = s[static_cast<std::size_t>(axis)];
  if (start < 0 || length < 0 || start + length > extent) throw ShapeError("slice: range out of bounds");
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= s[static_cast<std::size_t>(i)];
  Shape out_shape = s;
  out_shape[static_cast<std::size_t>(axis)] = length;
  Tensor<Scalar> out(out_shape);
  const Index src_block = extent * inner, dst_block = length * inner;
  for (Index o = 0; o < outer; ++o) {
    out.vec().segment(o * dst_block, dst_block) = x.value().vec().segment(o * src_block + start * inner, dst_block);
  }
  return record<Scalar>(std::move(out), {x}, [outer, src_block, dst_block, start, inner](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index o = 0; o < outer; ++o) {
      g.vec().segment(o * src_block + start * inner, dst_block) += self.grad.vec().segment(o * dst_block, dst_block);
    }
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return record<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().vec() += self.grad.vec();
  });
}

namespace {

struct LerpAxis {
  std::vector<Index> i0, i1;
  std::vector<double> frac;
};

LerpAxis lerp_axis(Index in, Index out) {
  LerpAxis a;
  a.i0.resize(static_cast<std::size_t>(out));
  a.i1.resize(static_cast<std::size_t>(out));
  a.frac.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    a.i0[static_cast<std::size_t>(o)] = lo;
    a.i1[static_cast<std::size_t>(o)] = hi;
    a.frac[static_cast<std::size_t>(o)] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace

template <typename Scalar>
void bilinear_resize_plane(const Scalar* src, Index in_h, Index in_w, Scalar* dst, Index out_h, Index out_w) {
  const LerpAxis ah = lerp_axis(in_h, out_h);
  const LerpAxis aw = lerp_axis(in_w, out_w);
  for (Index y = 0; y < out_h; ++y) {
    const auto yi = static_cast<std::size_t>(y);
    const Scalar fy = static_cast<Scalar>(ah.frac[yi]);
    const Scalar* r0 = src + ah.i0[yi] * in_w;
    const Scalar* r1 = src + ah.i1[yi] * in_w;
    for (Index x = 0; x < out_w; ++x) {
      const auto xi = static_cast<std::size_t>(x);
      const Scalar fx = static_cast<Scalar>(aw.frac[xi]);
      const Index c0 = aw.i0[xi], c1 = aw.i1[xi];
      const Scalar top = r0[c0] * (Scalar(1) - fx) + r0[c1] * fx;
      const Scalar bot = r1[c0] * (Scalar(1) - fx) + r1[c1] * fx;
      dst[y * out_w + x] = top * (Scalar(1) - fy) + bot * fy;
    }
  }
}

template <typename Scalar>
Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index out_h, Index out_w) {
  require_rank(x, 4, "resize_bilinear");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: empty output");
  if (out_h == h && out_w == w) return x;
  Tensor<Scalar> out(Shape{n, c, out_h, out_w});
  for (Index p = 0; p < n * c; ++p) {
    bilinear_resize_plane(x.value().data() + p * h * w, h, w, out.data() + p * out_h * out_w, out_h, out_w);
  }
  return record<Scalar>(std::move(out), {x}, [n, c, h, w, out_h, out_w](Node<Scalar>& self) {
    const LerpAxis ah = lerp_axis(h, out_h);
    const LerpAxis aw = lerp_axis(w, out_w);
    auto& gx = self.parents[0]->grad_buffer();
    for (Index p = 0; p < n * c; ++p) {
      const Scalar* g = self.grad.data() + p * out_h * out_w;
      Scalar* d = gx.data() + p * h * w;
      for (Index y = 0; y < out_h; ++y) {
        const auto yi = static_cast<std::size_t>(y);
        const Scalar fy = static_cast<Scalar>(ah.frac[yi]);
        Scalar* r0 = d + ah.i0[yi] * w;
        Scalar* r1 = d + ah.i1[yi] * w;
        for (Index xx = 0; xx < out_w; ++xx) {
          const auto xi = static_cast<std::size_t>(xx);
          const Scalar fx = static_cast<Scalar>(aw.frac[xi]);
          const Scalar gv = g[y * out_w + xx];
          r0[aw.i0[xi]] += gv * (Scalar(1) - fy) * (Scalar(1) - fx);
          r0[aw.i1[xi]] += gv * (Scalar(1) - fy) * fx;
          r1[aw.i0[xi]] += gv * fy * (Scalar(1) - fx);
          r1[aw.i1[xi]] += gv * fy * fx;
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> map_to_tokens(const Var<Scalar>& x) {
  require_rank(x, 4, "map_to_tokens");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out(Shape{n, hw, c});
  for (Index b = 0; b < n; ++b) out.matrix(hw, c, b * hw * c) = x.value().matrix(c, hw, b * hw * c).transpose();
  return record<Scalar>(std::move(out), {x}, [n, c, hw](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index b = 0; b < n; ++b) g.matrix(c, hw, b * hw * c) += self.grad.matrix(hw, c, b * hw * c).transpose();
  });
}

template <typename Scalar>
Var<Scalar> tokens_to_map(const Var<Scalar>& x, Index h, Index w) {
  require_rank(x, 3, "tokens_to_map");
  const Index n = x.dim(0), hw = x.dim(1), c = x.dim(2);
  if (hw != h * w) throw ShapeError("tokens_to_map: " + std::to_string(hw) + " tokens cannot form a " +
                                    std::to_string(h) + "x" + std::to_string(w) + " map");
  Tensor<Scalar> out(Shape{n, c, h, w});
  for (Index b = 0; b < n; ++b) out.matrix(c, hw, b * hw * c) = x.value().matrix(hw, c, b * hw * c).transpose();
  return record<Scalar>(std::move(out), {x}, [n, c, hw](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index b = 0; b < n; ++b) g.matrix(hw, c, b * hw * c) += self.grad.matrix(c, hw, b * hw * c).transpose();
  });
}

#define MASKDIFF_INSTANTIATE_OPS(S)                                                                  \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> scale(const Var<S>&, S);                                                           \
  template Var<S> add_scalar(const Var<S>&, S);                                                      \
  template Var<S> sum(const Var<S>&);                                                                \
  template Var<S> mean(const Var<S>&);                                                               \
  template Var<S> silu(const Var<S>&);                                                               \
  template Var<S> gelu(const Var<S>&);                                                               \
  template Var<S> sigmoid(const Var<S>&);                                                            \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, const Conv2dOptions&);         \
  template Var<S> group_norm(const Var<S>&, int, S);                                                 \
  template Var<S> channel_affine(const Var<S>&, const Var<S>&, const Var<S>&);                       \
  template Var<S> modulate(const Var<S>&, const Var<S>&, const Var<S>&);                             \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                               \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                        \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&, int);                       \
  template Var<S> concat(const std::vector<Var<S>>&, int);                                           \
  template Var<S> slice(const Var<S>&, int, Index, Index);                                           \
  template Var<S> reshape(const Var<S>&, Shape);                                                     \
  template Var<S> resize_bilinear(const Var<S>&, Index, Index);                                      \
  template Var<S> map_to_tokens(const Var<S>&);                                                      \
  template Var<S> tokens_to_map(const Var<S>&, Index, Index);                                        \
  template void bilinear_resize_plane(const S*, Index, Index, S*, Index, Index);

MASKDIFF_INSTANTIATE_OPS(float)
MASKDIFF_INSTANTIATE_OPS(double)

#undef MASKDIFF_INSTANTIATE_OPS

}  // namespace maskdiff
