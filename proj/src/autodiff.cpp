#include "icegen/autodiff.hpp"

#include <cmath>

namespace icegen::ad {

namespace {

constexpr Scalar kInvSqrt2 = 0.7071067811865475244;
constexpr Scalar kInvSqrt2Pi = 0.3989422804014326779;

int sgn(Scalar v) { return (v > 0.0) - (v < 0.0); }

void check_shape(bool ok, const char* op) {
  require(ok, ErrorCode::invalid_argument, std::string("shape mismatch in ") + op);
}

// Gathers k*k shifted copies of x into a [Ci*k*k, H*W] row-major matrix.
MatrixR im2col(const ArrayX& x, int ci, int h, int w, int k) {
  int rad = k / 2;
  MatrixR col = MatrixR::Zero(static_cast<Eigen::Index>(ci) * k * k,
                              static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < ci; ++c) {
    const Scalar* plane = x.data() + static_cast<std::size_t>(c) * h * w;
    for (int dy = 0; dy < k; ++dy) {
      for (int dx = 0; dx < k; ++dx) {
        Eigen::Index row = (static_cast<Eigen::Index>(c) * k + dy) * k + dx;
        Scalar* dst = col.data() + row * h * w;
        int sy_off = dy - rad, sx_off = dx - rad;
        for (int y = 0; y < h; ++y) {
          int sy = y + sy_off;
          if (sy < 0 || sy >= h) continue;
          int x0 = std::max(0, -sx_off);
          int x1 = std::min(w, w - sx_off);
          if (x0 >= x1) continue;
          const Scalar* src = plane + static_cast<std::size_t>(sy) * w + (x0 + sx_off);
          std::copy(src, src + (x1 - x0), dst + static_cast<std::size_t>(y) * w + x0);
        }
      }
    }
  }
  return col;
}

// Scatter-add of a [Ci*k*k, H*W] gradient back onto the [Ci, H, W] input.
void col2im_add(const MatrixR& colg, ArrayX& dx, int ci, int h, int w, int k) {
  int rad = k / 2;
  for (int c = 0; c < ci; ++c) {
    Scalar* plane = dx.data() + static_cast<std::size_t>(c) * h * w;
    for (int dy = 0; dy < k; ++dy) {
      for (int dx_ = 0; dx_ < k; ++dx_) {
        Eigen::Index row = (static_cast<Eigen::Index>(c) * k + dy) * k + dx_;
        const Scalar* src = colg.data() + row * h * w;
        int sy_off = dy - rad, sx_off = dx_ - rad;
        for (int y = 0; y < h; ++y) {
          int sy = y + sy_off;
          if (sy < 0 || sy >= h) continue;
          int x0 = std::max(0, -sx_off);
          int x1 = std::min(w, w - sx_off);
          for (int x = x0; x < x1; ++x)
            plane[static_cast<std::size_t>(sy) * w + (x + sx_off)] +=
                src[static_cast<std::size_t>(y) * w + x];
        }
      }
    }
  }
}

}  // namespace

const Shape& Tensor::shape() const { return node_->shape; }
const ArrayX& Tensor::value() const { return node_->value; }
bool Tensor::requires_grad() const { return node_->requires_grad; }

Scalar Tensor::scalar() const {
  require(size() == 1, ErrorCode::invalid_argument, "tensor is not scalar");
  return node_->value[0];
}

const ArrayX& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

Tensor Graph::leaf(ArrayX value, Shape shape, bool requires_grad) {
  require(value.size() == numel(shape), ErrorCode::invalid_argument,
          "leaf value does not match shape");
  auto n = std::make_shared<Node>();
  n->graph = this;
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  nodes_.push_back(n);
  return Tensor(n);
}

Tensor Graph::leaf(const Array2D& value, bool requires_grad) {
  ArrayX flat = Eigen::Map<const ArrayX>(value.data(), value.size());
  return leaf(std::move(flat), Shape{static_cast<int>(value.rows()), static_cast<int>(value.cols())},
              requires_grad);
}

void Graph::check_same_graph(const Tensor& t) const {
  require(t.defined() && t.node_->graph == this, ErrorCode::invalid_argument,
          "tensor belongs to a different graph");
}

Tensor Graph::make(Shape shape, ArrayX value, std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward, const char* op) {
  if (strict_finite_)
    require(value.isFinite().all(), ErrorCode::divergence,
            std::string("non-finite intermediate in ") + op);
  auto n = std::make_shared<Node>();
  n->graph = this;
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward_fn = std::move(backward);
  nodes_.push_back(n);
  return Tensor(n);
}

void Graph::backward(const Tensor& loss) {
  check_same_graph(loss);
  require(loss.size() == 1, ErrorCode::invalid_argument, "backward requires a scalar loss");
  require(!backward_done_, ErrorCode::invalid_argument, "graph already consumed by backward");
  backward_done_ = true;

  loss.node_->ensure_grad();
  loss.node_->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (!n.requires_grad || !n.backward_fn) continue;
    if (n.grad.size() == 0) continue;  // never reached from the loss
    n.backward_fn(n);
  }
}

// ---------------------------------------------------------------------------
// elementwise

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  check_same_graph(a);
  check_same_graph(b);
  check_shape(a.shape() == b.shape(), "add");
  return make(a.shape(), a.value() + b.value(), {a.node_, b.node_},
              [](Node& n) {
                for (int i = 0; i < 2; ++i) {
                  Node& p = *n.parents[i];
                  if (!p.requires_grad) continue;
                  p.ensure_grad();
                  p.grad += n.grad;
                }
              },
              "add");
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  check_same_graph(a);
  check_same_graph(b);
  check_shape(a.shape() == b.shape(), "sub");
  return make(a.shape(), a.value() - b.value(), {a.node_, b.node_},
              [](Node& n) {
                Node& pa = *n.parents[0];
                Node& pb = *n.parents[1];
                if (pa.requires_grad) {
                  pa.ensure_grad();
                  pa.grad += n.grad;
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  pb.grad -= n.grad;
                }
              },
              "sub");
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  check_same_graph(a);
  check_same_graph(b);
  check_shape(a.shape() == b.shape(), "mul");
  return make(a.shape(), a.value() * b.value(), {a.node_, b.node_},
              [](Node& n) {
                Node& pa = *n.parents[0];
                Node& pb = *n.parents[1];
                if (pa.requires_grad) {
                  pa.ensure_grad();
                  pa.grad += n.grad * pb.value;
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  pb.grad += n.grad * pa.value;
                }
              },
              "mul");
}

Tensor Graph::add_scalar(const Tensor& a, Scalar c) {
  check_same_graph(a);
  return make(a.shape(), a.value() + c, {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad += n.grad;
              },
              "add_scalar");
}

Tensor Graph::mul_scalar(const Tensor& a, Scalar c) {
  check_same_graph(a);
  return make(a.shape(), a.value() * c, {a.node_},
              [c](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad += n.grad * c;
              },
              "mul_scalar");
}

Tensor Graph::exp(const Tensor& a) {
  check_same_graph(a);
  return make(a.shape(), a.value().exp(), {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad += n.grad * n.value;
              },
              "exp");
}

Tensor Graph::log(const Tensor& a) {
  check_same_graph(a);
  return make(a.shape(), a.value().log(), {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad += n.grad / p.value;
              },
              "log");
}

Tensor Graph::abs(const Tensor& a) {
  check_same_graph(a);
  return make(a.shape(), a.value().abs(), {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (Eigen::Index i = 0; i < n.grad.size(); ++i)
                  p.grad[i] += n.grad[i] * sgn(p.value[i]);
              },
              "abs");
}

Tensor Graph::relu(const Tensor& a) {
  check_same_graph(a);
  return make(a.shape(), a.value().max(0.0), {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (Eigen::Index i = 0; i < n.grad.size(); ++i)
                  if (p.value[i] > 0.0) p.grad[i] += n.grad[i];
              },
              "relu");
}

Tensor Graph::gelu(const Tensor& a) {
  check_same_graph(a);
  const ArrayX& x = a.value();
  ArrayX v(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    v[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
  return make(a.shape(), std::move(v), {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (Eigen::Index i = 0; i < n.grad.size(); ++i) {
                  Scalar x = p.value[i];
                  Scalar cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                  Scalar pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                  p.grad[i] += n.grad[i] * (cdf + x * pdf);
                }
              },
              "gelu");
}

Tensor Graph::clamp(const Tensor& a, Scalar lo, Scalar hi) {
  check_same_graph(a);
  return make(a.shape(), a.value().max(lo).min(hi), {a.node_},
              [lo, hi](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (Eigen::Index i = 0; i < n.grad.size(); ++i)
                  if (p.value[i] >= lo && p.value[i] <= hi) p.grad[i] += n.grad[i];
              },
              "clamp");
}

Tensor Graph::sum(const Tensor& a) {
  check_same_graph(a);
  return make(Shape{}, ArrayX::Constant(1, a.value().sum()), {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad += n.grad[0];
              },
              "sum");
}

Tensor Graph::mean(const Tensor& a) {
  check_same_graph(a);
  Scalar inv = 1.0 / static_cast<Scalar>(a.size());
  return make(Shape{}, ArrayX::Constant(1, a.value().mean()), {a.node_},
              [inv](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad += n.grad[0] * inv;
              },
              "mean");
}

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  check_same_graph(a);
  check_shape(numel(shape) == a.size(), "reshape");
  return make(std::move(shape), a.value(), {a.node_},
              [](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad += n.grad;
              },
              "reshape");
}

Tensor Graph::slice(const Tensor& a, Eigen::Index begin, Eigen::Index len) {
  check_same_graph(a);
  check_shape(begin >= 0 && len >= 0 && begin + len <= a.size(), "slice");
  ArrayX v = a.value().segment(begin, len);
  return make(Shape{static_cast<int>(len)}, std::move(v), {a.node_},
              [begin, len](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                p.grad.segment(begin, len) += n.grad;
              },
              "slice");
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  check_same_graph(a);
  check_same_graph(b);
  check_shape(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), "matmul");
  int m = a.dim(0), k = a.dim(1), n2 = b.dim(1);
  ArrayX out(static_cast<Eigen::Index>(m) * n2);
  Eigen::Map<MatrixR>(out.data(), m, n2).noalias() =
      as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n2);
  return make(Shape{m, n2}, std::move(out), {a.node_, b.node_},
              [m, k, n2](Node& n) {
                Node& pa = *n.parents[0];
                Node& pb = *n.parents[1];
                auto dC = as_matrix(n.grad, m, n2);
                if (pa.requires_grad) {
                  pa.ensure_grad();
                  Eigen::Map<MatrixR>(pa.grad.data(), m, k).noalias() +=
                      dC * as_matrix(pb.value, k, n2).transpose();
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  Eigen::Map<MatrixR>(pb.grad.data(), k, n2).noalias() +=
                      as_matrix(pa.value, m, k).transpose() * dC;
                }
              },
              "matmul");
}

// ---------------------------------------------------------------------------
// spatial

Tensor Graph::conv2d(const Tensor& x, const Tensor& w) {
  check_same_graph(x);
  check_same_graph(w);
  check_shape(x.ndim() == 3 && w.ndim() == 4, "conv2d");
  int ci = x.dim(0), h = x.dim(1), wid = x.dim(2);
  int co = w.dim(0), k = w.dim(2);
  check_shape(w.dim(1) == ci && w.dim(3) == k && k % 2 == 1, "conv2d");

  MatrixR col = im2col(x.value(), ci, h, wid, k);
  ArrayX out(static_cast<Eigen::Index>(co) * h * wid);
  Eigen::Map<MatrixR>(out.data(), co, static_cast<Eigen::Index>(h) * wid).noalias() =
      as_matrix(w.value(), co, static_cast<Eigen::Index>(ci) * k * k) * col;

  return make(Shape{co, h, wid}, std::move(out), {x.node_, w.node_},
              [ci, h, wid, co, k](Node& n) {
                Node& px = *n.parents[0];
                Node& pw = *n.parents[1];
                auto dY = as_matrix(n.grad, co, static_cast<Eigen::Index>(h) * wid);
                if (pw.requires_grad) {
                  pw.ensure_grad();
                  MatrixR col = im2col(px.value, ci, h, wid, k);
                  Eigen::Map<MatrixR>(pw.grad.data(), co, static_cast<Eigen::Index>(ci) * k * k)
                      .noalias() += dY * col.transpose();
                }
                if (px.requires_grad) {
                  px.ensure_grad();
                  MatrixR colg =
                      as_matrix(pw.value, co, static_cast<Eigen::Index>(ci) * k * k).transpose() *
                      dY;
                  col2im_add(colg, px.grad, ci, h, wid, k);
                }
              },
              "conv2d");
}

Tensor Graph::maxpool2x2(const Tensor& x, const MaskArray* valid) {
  check_same_graph(x);
  check_shape(x.ndim() == 3, "maxpool2x2");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h % 2 == 0 && w % 2 == 0, ErrorCode::invalid_argument,
          "maxpool2x2 requires even spatial dims");
  int oh = h / 2, ow = w / 2;
  ArrayX out = ArrayX::Zero(static_cast<Eigen::Index>(c) * oh * ow);
  auto argmax = std::make_shared<std::vector<Eigen::Index>>(out.size(), -1);
  const Scalar* xv = x.value().data();
  for (int cc = 0; cc < c; ++cc) {
    for (int py = 0; py < oh; ++py) {
      for (int px = 0; px < ow; ++px) {
        Eigen::Index oi = (static_cast<Eigen::Index>(cc) * oh + py) * ow + px;
        Scalar best = 0.0;
        Eigen::Index besti = -1;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            int yy = 2 * py + dy, xx = 2 * px + dx;
            if (valid && !(*valid)(yy, xx)) continue;
            Eigen::Index ii = (static_cast<Eigen::Index>(cc) * h + yy) * w + xx;
            if (besti < 0 || xv[ii] > best) {
              best = xv[ii];
              besti = ii;
            }
          }
        if (besti >= 0) {
          out[oi] = best;
          (*argmax)[oi] = besti;
        }
      }
    }
  }
  return make(Shape{c, oh, ow}, std::move(out), {x.node_},
              [argmax](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (Eigen::Index i = 0; i < n.grad.size(); ++i)
                  if ((*argmax)[i] >= 0) p.grad[(*argmax)[i]] += n.grad[i];
              },
              "maxpool2x2");
}

Tensor Graph::upsample_bilinear2x(const Tensor& x) {
  check_same_graph(x);
  check_shape(x.ndim() == 3, "upsample_bilinear2x");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  int oh = 2 * h, ow = 2 * w;

  // Destination index 2i samples source i-0.25, index 2i+1 samples i+0.25,
  // clamped at borders (half-pixel-centers convention).
  auto taps = [](int dst, int n) {
    int base = dst / 2;
    Scalar frac = (dst % 2 == 0) ? -0.25 : 0.25;
    int i0 = base + (frac < 0 ? -1 : 0);
    Scalar w1 = (frac < 0) ? 0.25 : 0.75;  // weight of i0 is 1-w1... computed below
    int i1 = i0 + 1;
    Scalar t = (frac < 0) ? 0.75 : 0.25;   // weight of i1
    (void)w1;
    i0 = std::clamp(i0, 0, n - 1);
    i1 = std::clamp(i1, 0, n - 1);
    struct R { int i0, i1; Scalar w0, w1; };
    return R{i0, i1, 1.0 - t, t};
  };

  ArrayX out(static_cast<Eigen::Index>(c) * oh * ow);
  const Scalar* xv = x.value().data();
  for (int cc = 0; cc < c; ++cc) {
    const Scalar* plane = xv + static_cast<std::size_t>(cc) * h * w;
    Scalar* optr = out.data() + static_cast<std::size_t>(cc) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      auto ty = taps(y, h);
      for (int xx = 0; xx < ow; ++xx) {
        auto tx = taps(xx, w);
        optr[static_cast<std::size_t>(y) * ow + xx] =
            ty.w0 * (tx.w0 * plane[static_cast<std::size_t>(ty.i0) * w + tx.i0] +
                     tx.w1 * plane[static_cast<std::size_t>(ty.i0) * w + tx.i1]) +
            ty.w1 * (tx.w0 * plane[static_cast<std::size_t>(ty.i1) * w + tx.i0] +
                     tx.w1 * plane[static_cast<std::size_t>(ty.i1) * w + tx.i1]);
      }
    }
  }
  return make(Shape{c, oh, ow}, std::move(out), {x.node_},
              [c, h, w, oh, ow, taps](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (int cc = 0; cc < c; ++cc) {
                  Scalar* gplane = p.grad.data() + static_cast<std::size_t>(cc) * h * w;
                  const Scalar* og = n.grad.data() + static_cast<std::size_t>(cc) * oh * ow;
                  for (int y = 0; y < oh; ++y) {
                    auto ty = taps(y, h);
                    for (int xx = 0; xx < ow; ++xx) {
                      auto tx = taps(xx, w);
                      Scalar g = og[static_cast<std::size_t>(y) * ow + xx];
                      gplane[static_cast<std::size_t>(ty.i0) * w + tx.i0] += ty.w0 * tx.w0 * g;
                      gplane[static_cast<std::size_t>(ty.i0) * w + tx.i1] += ty.w0 * tx.w1 * g;
                      gplane[static_cast<std::size_t>(ty.i1) * w + tx.i0] += ty.w1 * tx.w0 * g;
                      gplane[static_cast<std::size_t>(ty.i1) * w + tx.i1] += ty.w1 * tx.w1 * g;
                    }
                  }
                }
              },
              "upsample_bilinear2x");
}

Tensor Graph::concat_channels(std::span<const Tensor> parts) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat of nothing");
  int h = parts[0].dim(1), w = parts[0].dim(2);
  int ctotal = 0;
  std::vector<std::shared_ptr<Node>> parents;
  for (const Tensor& t : parts) {
    check_same_graph(t);
    check_shape(t.ndim() == 3 && t.dim(1) == h && t.dim(2) == w, "concat_channels");
    ctotal += t.dim(0);
    parents.push_back(t.node_);
  }
  ArrayX out(static_cast<Eigen::Index>(ctotal) * h * w);
  Eigen::Index off = 0;
  for (const Tensor& t : parts) {
    out.segment(off, t.size()) = t.value();
    off += t.size();
  }
  return make(Shape{ctotal, h, w}, std::move(out), std::move(parents),
              [](Node& n) {
                Eigen::Index off = 0;
                for (auto& pp : n.parents) {
                  Node& p = *pp;
                  Eigen::Index sz = p.value.size();
                  if (p.requires_grad) {
                    p.ensure_grad();
                    p.grad += n.grad.segment(off, sz);
                  }
                  off += sz;
                }
              },
              "concat_channels");
}

Tensor Graph::layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                  Scalar eps) {
  check_same_graph(x);
  check_same_graph(gamma);
  check_same_graph(beta);
  check_shape(x.ndim() == 3, "layer_norm_channels");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  check_shape(gamma.size() == c && beta.size() == c, "layer_norm_channels");
  Eigen::Index cells = static_cast<Eigen::Index>(h) * w;

  auto xhat = std::make_shared<ArrayX>(x.size());
  auto inv_std = std::make_shared<ArrayX>(cells);
  ArrayX out(x.size());
  const Scalar* xv = x.value().data();
  const Scalar* gv = gamma.value().data();
  const Scalar* bv = beta.value().data();
  for (Eigen::Index cell = 0; cell < cells; ++cell) {
    Scalar mu = 0.0;
    for (int cc = 0; cc < c; ++cc) mu += xv[cc * cells + cell];
    mu /= c;
    Scalar var = 0.0;
    for (int cc = 0; cc < c; ++cc) {
      Scalar d = xv[cc * cells + cell] - mu;
      var += d * d;
    }
    var /= c;
    Scalar is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[cell] = is;
    for (int cc = 0; cc < c; ++cc) {
      Scalar xh = (xv[cc * cells + cell] - mu) * is;
      (*xhat)[cc * cells + cell] = xh;
      out[cc * cells + cell] = gv[cc] * xh + bv[cc];
    }
  }
  return make(Shape{c, h, w}, std::move(out), {x.node_, gamma.node_, beta.node_},
              [c, cells, xhat, inv_std](Node& n) {
                Node& px = *n.parents[0];
                Node& pg = *n.parents[1];
                Node& pb = *n.parents[2];
                if (pg.requires_grad) {
                  pg.ensure_grad();
                  for (int cc = 0; cc < c; ++cc) {
                    Scalar s = 0.0;
                    for (Eigen::Index cell = 0; cell < cells; ++cell)
                      s += n.grad[cc * cells + cell] * (*xhat)[cc * cells + cell];
                    pg.grad[cc] += s;
                  }
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  for (int cc = 0; cc < c; ++cc) {
                    Scalar s = 0.0;
                    for (Eigen::Index cell = 0; cell < cells; ++cell)
                      s += n.grad[cc * cells + cell];
                    pb.grad[cc] += s;
                  }
                }
                if (px.requires_grad) {
                  px.ensure_grad();
                  const Scalar* gv = pg.value.data();
                  for (Eigen::Index cell = 0; cell < cells; ++cell) {
                    Scalar sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int cc = 0; cc < c; ++cc) {
                      Scalar dxh = n.grad[cc * cells + cell] * gv[cc];
                      sum_dxhat += dxh;
                      sum_dxhat_xhat += dxh * (*xhat)[cc * cells + cell];
                    }
                    Scalar is = (*inv_std)[cell];
                    for (int cc = 0; cc < c; ++cc) {
                      Scalar dxh = n.grad[cc * cells + cell] * gv[cc];
                      Scalar xh = (*xhat)[cc * cells + cell];
                      px.grad[cc * cells + cell] +=
                          is * (dxh - (sum_dxhat + xh * sum_dxhat_xhat) / c);
                    }
                  }
                }
              },
              "layer_norm_channels");
}

Tensor Graph::scale_cells(const Tensor& x, const Array2D& factor) {
  check_same_graph(x);
  check_shape(x.ndim() == 3 && x.dim(1) == factor.rows() && x.dim(2) == factor.cols(),
              "scale_cells");
  int c = x.dim(0);
  Eigen::Index cells = factor.size();
  auto fac = std::make_shared<ArrayX>(Eigen::Map<const ArrayX>(factor.data(), cells));
  ArrayX out(x.size());
  for (int cc = 0; cc < c; ++cc)
    out.segment(cc * cells, cells) = x.value().segment(cc * cells, cells) * (*fac);
  return make(x.shape(), std::move(out), {x.node_},
              [c, cells, fac](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (int cc = 0; cc < c; ++cc)
                  p.grad.segment(cc * cells, cells) += n.grad.segment(cc * cells, cells) * (*fac);
              },
              "scale_cells");
}

Tensor Graph::add_channel_bias(const Tensor& x, const Tensor& bias, const Array2D& mask) {
  check_same_graph(x);
  check_same_graph(bias);
  check_shape(x.ndim() == 3 && bias.size() == x.dim(0), "add_channel_bias");
  int c = x.dim(0);
  Eigen::Index cells = static_cast<Eigen::Index>(x.dim(1)) * x.dim(2);
  check_shape(mask.size() == cells, "add_channel_bias");
  auto m = std::make_shared<ArrayX>(Eigen::Map<const ArrayX>(mask.data(), cells));
  ArrayX out(x.size());
  for (int cc = 0; cc < c; ++cc)
    out.segment(cc * cells, cells) = x.value().segment(cc * cells, cells) + bias.value()[cc] * (*m);
  return make(x.shape(), std::move(out), {x.node_, bias.node_},
              [c, cells, m](Node& n) {
                Node& px = *n.parents[0];
                Node& pb = *n.parents[1];
                if (px.requires_grad) {
                  px.ensure_grad();
                  px.grad += n.grad;
                }
                if (pb.requires_grad) {
                  pb.ensure_grad();
                  for (int cc = 0; cc < c; ++cc)
                    pb.grad[cc] += (n.grad.segment(cc * cells, cells) * (*m)).sum();
                }
              },
              "add_channel_bias");
}

Tensor Graph::global_mean_valid(const Tensor& x, const MaskArray& valid) {
  check_same_graph(x);
  check_shape(x.ndim() == 3 && valid.rows() == x.dim(1) && valid.cols() == x.dim(2),
              "global_mean_valid");
  int c = x.dim(0);
  Eigen::Index cells = valid.size();
  auto idx = std::make_shared<std::vector<Eigen::Index>>();
  for (Eigen::Index i = 0; i < cells; ++i)
    if (valid.data()[i]) idx->push_back(i);
  require(!idx->empty(), ErrorCode::invalid_argument, "global_mean_valid over empty mask");
  ArrayX out = ArrayX::Zero(c);
  for (int cc = 0; cc < c; ++cc) {
    Scalar s = 0.0;
    for (Eigen::Index i : *idx) s += x.value()[cc * cells + i];
    out[cc] = s / static_cast<Scalar>(idx->size());
  }
  return make(Shape{c}, std::move(out), {x.node_},
              [c, cells, idx](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                Scalar inv = 1.0 / static_cast<Scalar>(idx->size());
                for (int cc = 0; cc < c; ++cc) {
                  Scalar g = n.grad[cc] * inv;
                  for (Eigen::Index i : *idx) p.grad[cc * cells + i] += g;
                }
              },
              "global_mean_valid");
}

Tensor Graph::avgpool2x2_valid(const Tensor& x, const MaskArray& valid) {
  check_same_graph(x);
  check_shape(x.ndim() == 3, "avgpool2x2_valid");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h % 2 == 0 && w % 2 == 0, ErrorCode::invalid_argument,
          "avgpool2x2_valid requires even dims (replicate-pad beforehand)");
  check_shape(valid.rows() == h && valid.cols() == w, "avgpool2x2_valid");
  int oh = h / 2, ow = w / 2;
  Eigen::Index cells = static_cast<Eigen::Index>(h) * w;
  Eigen::Index ocells = static_cast<Eigen::Index>(oh) * ow;

  auto counts = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ocells), 0);
  for (int py = 0; py < oh; ++py)
    for (int px = 0; px < ow; ++px) {
      int cnt = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          if (valid(2 * py + dy, 2 * px + dx)) ++cnt;
      (*counts)[static_cast<std::size_t>(py) * ow + px] = cnt;
    }
  auto vmask = std::make_shared<MaskArray>(valid);

  ArrayX out = ArrayX::Zero(static_cast<Eigen::Index>(c) * ocells);
  const Scalar* xv = x.value().data();
  for (int cc = 0; cc < c; ++cc)
    for (int py = 0; py < oh; ++py)
      for (int px = 0; px < ow; ++px) {
        int cnt = (*counts)[static_cast<std::size_t>(py) * ow + px];
        if (cnt == 0) continue;
        Scalar s = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            int yy = 2 * py + dy, xx = 2 * px + dx;
            if ((*vmask)(yy, xx)) s += xv[cc * cells + static_cast<Eigen::Index>(yy) * w + xx];
          }
        out[cc * ocells + static_cast<Eigen::Index>(py) * ow + px] = s / cnt;
      }
  return make(Shape{c, oh, ow}, std::move(out), {x.node_},
              [c, h, w, oh, ow, cells, ocells, counts, vmask](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                for (int cc = 0; cc < c; ++cc)
                  for (int py = 0; py < oh; ++py)
                    for (int px = 0; px < ow; ++px) {
                      int cnt = (*counts)[static_cast<std::size_t>(py) * ow + px];
                      if (cnt == 0) continue;
                      Scalar g =
                          n.grad[cc * ocells + static_cast<Eigen::Index>(py) * ow + px] / cnt;
                      for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                          int yy = 2 * py + dy, xx = 2 * px + dx;
                          if ((*vmask)(yy, xx))
                            p.grad[cc * cells + static_cast<Eigen::Index>(yy) * w + xx] += g;
                        }
                    }
              },
              "avgpool2x2_valid");
}

Tensor Graph::crps_cells(const Tensor& members, const Array2D& obs, const MaskArray& valid) {
  check_same_graph(members);
  check_shape(members.ndim() == 3, "crps_cells");
  int m = members.dim(0), h = members.dim(1), w = members.dim(2);
  check_shape(obs.rows() == h && obs.cols() == w && valid.rows() == h && valid.cols() == w,
              "crps_cells");
  require(m >= 1, ErrorCode::invalid_argument, "crps_cells needs at least one member");
  Eigen::Index cells = static_cast<Eigen::Index>(h) * w;

  auto ob = std::make_shared<ArrayX>(Eigen::Map<const ArrayX>(obs.data(), cells));
  auto idx = std::make_shared<std::vector<Eigen::Index>>();
  for (Eigen::Index i = 0; i < cells; ++i)
    if (valid.data()[i]) idx->push_back(i);
  require(!idx->empty(), ErrorCode::invalid_argument, "crps_cells over empty mask");

  const Scalar* mv = members.value().data();
  Scalar total = 0.0;
  for (Eigen::Index i : *idx) {
    Scalar y = (*ob)[i];
    Scalar t1 = 0.0, t2 = 0.0;
    for (int a = 0; a < m; ++a) {
      Scalar ma = mv[a * cells + i];
      t1 += std::abs(ma - y);
      for (int b = 0; b < m; ++b) t2 += std::abs(ma - mv[b * cells + i]);
    }
    total += t1 / m - t2 / (2.0 * m * m);
  }
  total /= static_cast<Scalar>(idx->size());

  return make(Shape{}, ArrayX::Constant(1, total), {members.node_},
              [m, cells, ob, idx](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                Scalar g = n.grad[0] / static_cast<Scalar>(idx->size());
                const Scalar* mv = p.value.data();
                for (Eigen::Index i : *idx) {
                  Scalar y = (*ob)[i];
                  for (int a = 0; a < m; ++a) {
                    Scalar ma = mv[a * cells + i];
                    Scalar d = sgn(ma - y) / static_cast<Scalar>(m);
                    Scalar pair = 0.0;
                    for (int b = 0; b < m; ++b) pair += sgn(ma - mv[b * cells + i]);
                    d -= pair / (static_cast<Scalar>(m) * m);
                    p.grad[a * cells + i] += g * d;
                  }
                }
              },
              "crps_cells");
}

Tensor Graph::mse_cells(const Tensor& x, const Array2D& obs, const MaskArray& valid) {
  check_same_graph(x);
  check_shape(x.ndim() == 2 && x.dim(0) == obs.rows() && x.dim(1) == obs.cols(), "mse_cells");
  check_shape(valid.rows() == obs.rows() && valid.cols() == obs.cols(), "mse_cells");
  Eigen::Index cells = obs.size();
  auto ob = std::make_shared<ArrayX>(Eigen::Map<const ArrayX>(obs.data(), cells));
  auto idx = std::make_shared<std::vector<Eigen::Index>>();
  for (Eigen::Index i = 0; i < cells; ++i)
    if (valid.data()[i]) idx->push_back(i);
  require(!idx->empty(), ErrorCode::invalid_argument, "mse_cells over empty mask");

  Scalar total = 0.0;
  for (Eigen::Index i : *idx) {
    Scalar d = x.value()[i] - (*ob)[i];
    total += d * d;
  }
  total /= static_cast<Scalar>(idx->size());
  return make(Shape{}, ArrayX::Constant(1, total), {x.node_},
              [ob, idx](Node& n) {
                Node& p = *n.parents[0];
                p.ensure_grad();
                Scalar g = 2.0 * n.grad[0] / static_cast<Scalar>(idx->size());
                for (Eigen::Index i : *idx) p.grad[i] += g * (p.value[i] - (*ob)[i]);
              },
              "mse_cells");
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f,
                           const ArrayX& x, const Shape& shape, Scalar tol, Scalar step) {
  ArrayX analytic;
  {
    Graph g;
    Tensor xt = g.leaf(x, shape, true);
    Tensor loss = f(g, xt);
    require(loss.size() == 1, ErrorCode::invalid_argument, "grad_check needs scalar output");
    g.backward(loss);
    analytic = xt.grad();
  }

  GradCheckReport report;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    ArrayX xp = x, xm = x;
    xp[i] += step;
    xm[i] -= step;
    Graph gp, gm;
    Scalar fp = f(gp, gp.leaf(xp, shape, false)).scalar();
    Scalar fm = f(gm, gm.leaf(xm, shape, false)).scalar();
    Scalar numeric = (fp - fm) / (2.0 * step);
    Scalar denom = std::max({std::abs(analytic[i]), std::abs(numeric), Scalar(1e-6)});
    Scalar rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

}  // namespace icegen::ad
