#include "neurocodec/autodiff.hpp"

#include <cmath>

#include "neurocodec/rng.hpp"

namespace neurocodec::ad {

namespace {

constexpr double kSigmoidFloor = 1e-12;

std::int64_t conv_lo(std::int64_t pad, std::int64_t k, std::int64_t stride) {
  const std::int64_t a = pad - k;
  return a <= 0 ? 0 : (a + stride - 1) / stride;
}

std::int64_t conv_hi(std::int64_t in_size, std::int64_t pad, std::int64_t k,
                     std::int64_t stride, std::int64_t out_size) {
  const std::int64_t a = in_size - 1 - k + pad;
  if (a < 0) return -1;
  const std::int64_t x = a / stride;
  return x < out_size - 1 ? x : out_size - 1;
}

std::int64_t conv_out(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
  const std::int64_t o = (in + 2 * p - k) / s + 1;
  if (in + 2 * p < k || o < 1)
    throw DataError("convolution output collapses: in=" + std::to_string(in) +
                    " k=" + std::to_string(k) + " s=" + std::to_string(s) +
                    " p=" + std::to_string(p));
  return o;
}

}  // namespace

Value Tape::push(Tensor out, bool requires_grad, std::function<void()> back) {
  Node n;
  n.out = std::move(out);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Value{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::g(int idx) {
  Node& n = nodes_[static_cast<std::size_t>(idx)];
  if (!n.grad_live) {
    n.grad = Tensor(n.out.shape());
    n.grad_live = true;
  }
  return n.grad;
}

Value Tape::leaf(Tensor t, bool requires_grad) {
  return push(std::move(t), requires_grad, nullptr);
}

double Tape::scalar(Value v) const {
  const Tensor& t = val(v);
  if (t.size() != 1) throw DataError("scalar() on tensor of shape " + shape_str(t.shape()));
  return t[0];
}

const Tensor& Tape::grad(Value v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.idx)];
  if (!n.grad_live) throw DataError("gradient was not propagated to this value");
  return n.grad;
}

void Tape::backward(Value root) {
  if (val(root).size() != 1) throw DataError("backward() root must be scalar");
  g(root.idx)[0] += 1.0;
  for (int i = root.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.requires_grad && n.grad_live && n.back) n.back();
  }
}

// ---- elementwise ------------------------------------------------------------

Value Tape::add(Value a, Value b) {
  const Tensor &ta = val(a), &tb = val(b);
  if (!same_shape(ta, tb)) throw DataError("add: shape mismatch");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  const int ia = a.idx, ib = b.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, ib, io] {
      const Tensor& go = g(io);
      if (wants(ia)) {
        Tensor& ga = g(ia);
        for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (wants(ib)) {
        Tensor& gb = g(ib);
        for (std::int64_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    };
  return o;
}

Value Tape::sub(Value a, Value b) {
  const Tensor &ta = val(a), &tb = val(b);
  if (!same_shape(ta, tb)) throw DataError("sub: shape mismatch");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  const int ia = a.idx, ib = b.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, ib, io] {
      const Tensor& go = g(io);
      if (wants(ia)) {
        Tensor& ga = g(ia);
        for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (wants(ib)) {
        Tensor& gb = g(ib);
        for (std::int64_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    };
  return o;
}

Value Tape::mul(Value a, Value b) {
  const Tensor &ta = val(a), &tb = val(b);
  if (!same_shape(ta, tb)) throw DataError("mul: shape mismatch");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  const int ia = a.idx, ib = b.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, ib, io] {
      const Tensor& go = g(io);
      const Tensor &ta = v(ia), &tb = v(ib);
      if (wants(ia)) {
        Tensor& ga = g(ia);
        for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i] * tb[i];
      }
      if (wants(ib)) {
        Tensor& gb = g(ib);
        for (std::int64_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ta[i];
      }
    };
  return o;
}

Value Tape::div(Value a, Value b) {
  const Tensor &ta = val(a), &tb = val(b);
  if (!same_shape(ta, tb)) throw DataError("div: shape mismatch");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] / tb[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  const int ia = a.idx, ib = b.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, ib, io] {
      const Tensor& go = g(io);
      const Tensor &ta = v(ia), &tb = v(ib);
      if (wants(ia)) {
        Tensor& ga = g(ia);
        for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i] / tb[i];
      }
      if (wants(ib)) {
        Tensor& gb = g(ib);
        for (std::int64_t i = 0; i < go.size(); ++i)
          gb[i] -= go[i] * ta[i] / (tb[i] * tb[i]);
      }
    };
  return o;
}

Value Tape::add_scalar(Value a, double c) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + c;
  const bool rg = requires_grad(a);
  const int ia = a.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, io] {
      const Tensor& go = g(io);
      Tensor& ga = g(ia);
      for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    };
  return o;
}

Value Tape::mul_scalar(Value a, double c) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * c;
  const bool rg = requires_grad(a);
  const int ia = a.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, io, c] {
      const Tensor& go = g(io);
      Tensor& ga = g(ia);
      for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    };
  return o;
}

Value Tape::relu(Value a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
  const bool rg = requires_grad(a);
  const int ia = a.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, io] {
      const Tensor& go = g(io);
      const Tensor& ta = v(ia);
      Tensor& ga = g(ia);
      for (std::int64_t i = 0; i < go.size(); ++i)
        if (ta[i] > 0.0) ga[i] += go[i];
    };
  return o;
}

Value Tape::sigmoid(Value a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double x = ta[i];
    double s;
    if (x >= 0.0) {
      s = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      s = e / (1.0 + e);
    }
    // Keep the open-interval contract even for saturating inputs.
    if (s < kSigmoidFloor) s = kSigmoidFloor;
    if (s > 1.0 - kSigmoidFloor) s = 1.0 - kSigmoidFloor;
    out[i] = s;
  }
  const bool rg = requires_grad(a);
  const int ia = a.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, io] {
      const Tensor& go = g(io);
      const Tensor& so = v(io);
      Tensor& ga = g(ia);
      for (std::int64_t i = 0; i < go.size(); ++i) {
        const double s = so[i];
        if (s <= kSigmoidFloor || s >= 1.0 - kSigmoidFloor) continue;  // clamped
        ga[i] += go[i] * s * (1.0 - s);
      }
    };
  return o;
}

// ---- shape / reductions ------------------------------------------------------

Value Tape::reshape(Value a, Shape shape) {
  const Tensor& ta = val(a);
  if (shape_numel(shape) != ta.size())
    throw DataError("reshape: numel mismatch " + shape_str(ta.shape()) + " -> " +
                    shape_str(shape));
  Tensor out(shape);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i];
  const bool rg = requires_grad(a);
  const int ia = a.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, io] {
      const Tensor& go = g(io);
      Tensor& ga = g(ia);
      for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    };
  return o;
}

Value Tape::sum_all(Value a) {
  const Tensor& ta = val(a);
  Tensor out(Shape{1});
  double s = 0.0;
  for (std::int64_t i = 0; i < ta.size(); ++i) s += ta[i];
  out[0] = s;
  const bool rg = requires_grad(a);
  const int ia = a.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, io] {
      const double go = g(io)[0];
      Tensor& ga = g(ia);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += go;
    };
  return o;
}

Value Tape::mean_all(Value a) {
  const Tensor& ta = val(a);
  if (ta.size() == 0) throw DataError("mean_all of empty tensor");
  const double inv = 1.0 / static_cast<double>(ta.size());
  Tensor out(Shape{1});
  double s = 0.0;
  for (std::int64_t i = 0; i < ta.size(); ++i) s += ta[i];
  out[0] = s * inv;
  const bool rg = requires_grad(a);
  const int ia = a.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, io, inv] {
      const double go = g(io)[0] * inv;
      Tensor& ga = g(ia);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += go;
    };
  return o;
}

// ---- layers -------------------------------------------------------------------

Value Tape::linear(Value x, Value w, Value b) {
  const Tensor &tx = val(x), &tw = val(w), &tb = val(b);
  if (tx.ndim() != 2 || tw.ndim() != 2 || tb.ndim() != 1)
    throw DataError("linear: expected [B,K] x [M,K] + [M]");
  const std::int64_t B = tx.dim(0), K = tx.dim(1), M = tw.dim(0);
  if (tw.dim(1) != K || tb.dim(0) != M)
    throw DataError("linear: shape mismatch x" + shape_str(tx.shape()) + " w" +
                    shape_str(tw.shape()));
  Tensor out(Shape{B, M});
  for (std::int64_t i = 0; i < B; ++i) {
    const double* xr = tx.data() + i * K;
    double* orow = out.data() + i * M;
    for (std::int64_t m = 0; m < M; ++m) {
      const double* wr = tw.data() + m * K;
      double s = tb[m];
      for (std::int64_t k = 0; k < K; ++k) s += xr[k] * wr[k];
      orow[m] = s;
    }
  }
  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  const int ix = x.idx, iw = w.idx, ib = b.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, iw, ib, io, B, K, M] {
      const Tensor& go = g(io);
      const Tensor &tx = v(ix), &tw = v(iw);
      if (wants(ix)) {
        Tensor& gx = g(ix);
        for (std::int64_t i = 0; i < B; ++i) {
          const double* gr = go.data() + i * M;
          double* gxr = gx.data() + i * K;
          for (std::int64_t m = 0; m < M; ++m) {
            const double gv = gr[m];
            const double* wr = tw.data() + m * K;
            for (std::int64_t k = 0; k < K; ++k) gxr[k] += gv * wr[k];
          }
        }
      }
      if (wants(iw)) {
        Tensor& gw = g(iw);
        for (std::int64_t i = 0; i < B; ++i) {
          const double* gr = go.data() + i * M;
          const double* xr = tx.data() + i * K;
          for (std::int64_t m = 0; m < M; ++m) {
            const double gv = gr[m];
            double* gwr = gw.data() + m * K;
            for (std::int64_t k = 0; k < K; ++k) gwr[k] += gv * xr[k];
          }
        }
      }
      if (wants(ib)) {
        Tensor& gb = g(ib);
        for (std::int64_t i = 0; i < B; ++i) {
          const double* gr = go.data() + i * M;
          for (std::int64_t m = 0; m < M; ++m) gb[m] += gr[m];
        }
      }
    };
  return o;
}

Value Tape::conv2d(Value x, Value w, Value b, Conv2dGeom gm) {
  const Tensor &tx = val(x), &tw = val(w), &tb = val(b);
  if (tx.ndim() != 4 || tw.ndim() != 4) throw DataError("conv2d: expected 4-d x and w");
  const std::int64_t B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const std::int64_t O = tw.dim(0), KH = tw.dim(2), KW = tw.dim(3);
  if (tw.dim(1) != C || tb.dim(0) != O) throw DataError("conv2d: channel mismatch");
  const std::int64_t Ho = conv_out(H, KH, gm.stride_h, gm.pad_h);
  const std::int64_t Wo = conv_out(W, KW, gm.stride_w, gm.pad_w);

  Tensor out(Shape{B, O, Ho, Wo});
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t o = 0; o < O; ++o) {
      double* op = out.data() + ((i * O + o) * Ho) * Wo;
      const double bias = tb[o];
      for (std::int64_t p = 0; p < Ho * Wo; ++p) op[p] = bias;
      for (std::int64_t c = 0; c < C; ++c) {
        const double* xp = tx.data() + ((i * C + c) * H) * W;
        for (std::int64_t ky = 0; ky < KH; ++ky) {
          const std::int64_t ylo = conv_lo(gm.pad_h, ky, gm.stride_h);
          const std::int64_t yhi = conv_hi(H, gm.pad_h, ky, gm.stride_h, Ho);
          for (std::int64_t kx = 0; kx < KW; ++kx) {
            const double wv = tw[((o * C + c) * KH + ky) * KW + kx];
            const std::int64_t xlo = conv_lo(gm.pad_w, kx, gm.stride_w);
            const std::int64_t xhi = conv_hi(W, gm.pad_w, kx, gm.stride_w, Wo);
            for (std::int64_t y = ylo; y <= yhi; ++y) {
              const double* xr = xp + (y * gm.stride_h + ky - gm.pad_h) * W + kx - gm.pad_w;
              double* orow = op + y * Wo;
              for (std::int64_t xo = xlo; xo <= xhi; ++xo)
                orow[xo] += wv * xr[xo * gm.stride_w];
            }
          }
        }
      }
    }

  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  const int ix = x.idx, iw = w.idx, ibx = b.idx;
  Value ov = push(std::move(out), rg, nullptr);
  const int io = ov.idx;
  if (rg)
    node(io).back = [this, ix, iw, ibx, io, gm, B, C, H, W, O, KH, KW, Ho, Wo] {
      const Tensor& go = g(io);
      const Tensor &tx = v(ix), &tw = v(iw);
      const bool wx = wants(ix), ww = wants(iw), wb = wants(ibx);
      if (wx) {
        Tensor& gx = g(ix);
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t o = 0; o < O; ++o) {
            const double* gp = go.data() + ((i * O + o) * Ho) * Wo;
            for (std::int64_t c = 0; c < C; ++c) {
              double* gxp = gx.data() + ((i * C + c) * H) * W;
              for (std::int64_t ky = 0; ky < KH; ++ky) {
                const std::int64_t ylo = conv_lo(gm.pad_h, ky, gm.stride_h);
                const std::int64_t yhi = conv_hi(H, gm.pad_h, ky, gm.stride_h, Ho);
                for (std::int64_t kx = 0; kx < KW; ++kx) {
                  const double wv = tw[((o * C + c) * KH + ky) * KW + kx];
                  const std::int64_t xlo = conv_lo(gm.pad_w, kx, gm.stride_w);
                  const std::int64_t xhi = conv_hi(W, gm.pad_w, kx, gm.stride_w, Wo);
                  for (std::int64_t y = ylo; y <= yhi; ++y) {
                    double* gxr = gxp + (y * gm.stride_h + ky - gm.pad_h) * W + kx - gm.pad_w;
                    const double* grow = gp + y * Wo;
                    for (std::int64_t xo = xlo; xo <= xhi; ++xo)
                      gxr[xo * gm.stride_w] += wv * grow[xo];
                  }
                }
              }
            }
          }
      }
      if (ww) {
        Tensor& gw = g(iw);
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t o = 0; o < O; ++o) {
            const double* gp = go.data() + ((i * O + o) * Ho) * Wo;
            for (std::int64_t c = 0; c < C; ++c) {
              const double* xp = tx.data() + ((i * C + c) * H) * W;
              for (std::int64_t ky = 0; ky < KH; ++ky) {
                const std::int64_t ylo = conv_lo(gm.pad_h, ky, gm.stride_h);
                const std::int64_t yhi = conv_hi(H, gm.pad_h, ky, gm.stride_h, Ho);
                for (std::int64_t kx = 0; kx < KW; ++kx) {
                  const std::int64_t xlo = conv_lo(gm.pad_w, kx, gm.stride_w);
                  const std::int64_t xhi = conv_hi(W, gm.pad_w, kx, gm.stride_w, Wo);
                  double acc = 0.0;
                  for (std::int64_t y = ylo; y <= yhi; ++y) {
                    const double* xr = xp + (y * gm.stride_h + ky - gm.pad_h) * W + kx - gm.pad_w;
                    const double* grow = gp + y * Wo;
                    for (std::int64_t xo = xlo; xo <= xhi; ++xo)
                      acc += xr[xo * gm.stride_w] * grow[xo];
                  }
                  gw[((o * C + c) * KH + ky) * KW + kx] += acc;
                }
              }
            }
          }
      }
      if (wb) {
        Tensor& gb = g(ibx);
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t o = 0; o < O; ++o) {
            const double* gp = go.data() + ((i * O + o) * Ho) * Wo;
            double acc = 0.0;
            for (std::int64_t p = 0; p < Ho * Wo; ++p) acc += gp[p];
            gb[o] += acc;
          }
      }
    };
  return ov;
}

Value Tape::conv3d(Value x, Value w, Value b, Conv3dGeom gm) {
  const Tensor &tx = val(x), &tw = val(w), &tb = val(b);
  if (tx.ndim() != 5 || tw.ndim() != 5) throw DataError("conv3d: expected 5-d x and w");
  const std::int64_t B = tx.dim(0), C = tx.dim(1), T = tx.dim(2), H = tx.dim(3), W = tx.dim(4);
  const std::int64_t O = tw.dim(0), KT = tw.dim(2), KH = tw.dim(3), KW = tw.dim(4);
  if (tw.dim(1) != C || tb.dim(0) != O) throw DataError("conv3d: channel mismatch");
  const std::int64_t To = conv_out(T, KT, gm.stride_t, gm.pad_t);
  const std::int64_t Ho = conv_out(H, KH, gm.stride_h, gm.pad_h);
  const std::int64_t Wo = conv_out(W, KW, gm.stride_w, gm.pad_w);

  Tensor out(Shape{B, O, To, Ho, Wo});
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t o = 0; o < O; ++o) {
      double* op = out.data() + ((i * O + o) * To) * Ho * Wo;
      const double bias = tb[o];
      for (std::int64_t p = 0; p < To * Ho * Wo; ++p) op[p] = bias;
      for (std::int64_t c = 0; c < C; ++c) {
        const double* xp = tx.data() + ((i * C + c) * T) * H * W;
        for (std::int64_t kt = 0; kt < KT; ++kt) {
          const std::int64_t tlo = conv_lo(gm.pad_t, kt, gm.stride_t);
          const std::int64_t thi = conv_hi(T, gm.pad_t, kt, gm.stride_t, To);
          for (std::int64_t ky = 0; ky < KH; ++ky) {
            const std::int64_t ylo = conv_lo(gm.pad_h, ky, gm.stride_h);
            const std::int64_t yhi = conv_hi(H, gm.pad_h, ky, gm.stride_h, Ho);
            for (std::int64_t kx = 0; kx < KW; ++kx) {
              const double wv = tw[(((o * C + c) * KT + kt) * KH + ky) * KW + kx];
              const std::int64_t xlo = conv_lo(gm.pad_w, kx, gm.stride_w);
              const std::int64_t xhi = conv_hi(W, gm.pad_w, kx, gm.stride_w, Wo);
              for (std::int64_t t = tlo; t <= thi; ++t) {
                const double* xt = xp + (t * gm.stride_t + kt - gm.pad_t) * H * W;
                double* ot = op + t * Ho * Wo;
                for (std::int64_t y = ylo; y <= yhi; ++y) {
                  const double* xr = xt + (y * gm.stride_h + ky - gm.pad_h) * W + kx - gm.pad_w;
                  double* orow = ot + y * Wo;
                  for (std::int64_t xo = xlo; xo <= xhi; ++xo)
                    orow[xo] += wv * xr[xo * gm.stride_w];
                }
              }
            }
          }
        }
      }
    }

  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  const int ix = x.idx, iw = w.idx, ibx = b.idx;
  Value ov = push(std::move(out), rg, nullptr);
  const int io = ov.idx;
  if (rg)
    node(io).back = [this, ix, iw, ibx, io, gm, B, C, T, H, W, O, KT, KH, KW, To, Ho, Wo] {
      const Tensor& go = g(io);
      const Tensor &tx = v(ix), &tw = v(iw);
      if (wants(ix)) {
        Tensor& gx = g(ix);
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t o = 0; o < O; ++o) {
            const double* gp = go.data() + ((i * O + o) * To) * Ho * Wo;
            for (std::int64_t c = 0; c < C; ++c) {
              double* gxp = gx.data() + ((i * C + c) * T) * H * W;
              for (std::int64_t kt = 0; kt < KT; ++kt) {
                const std::int64_t tlo = conv_lo(gm.pad_t, kt, gm.stride_t);
                const std::int64_t thi = conv_hi(T, gm.pad_t, kt, gm.stride_t, To);
                for (std::int64_t ky = 0; ky < KH; ++ky) {
                  const std::int64_t ylo = conv_lo(gm.pad_h, ky, gm.stride_h);
                  const std::int64_t yhi = conv_hi(H, gm.pad_h, ky, gm.stride_h, Ho);
                  for (std::int64_t kx = 0; kx < KW; ++kx) {
                    const double wv = tw[(((o * C + c) * KT + kt) * KH + ky) * KW + kx];
                    const std::int64_t xlo = conv_lo(gm.pad_w, kx, gm.stride_w);
                    const std::int64_t xhi = conv_hi(W, gm.pad_w, kx, gm.stride_w, Wo);
                    for (std::int64_t t = tlo; t <= thi; ++t) {
                      double* gxt = gxp + (t * gm.stride_t + kt - gm.pad_t) * H * W;
                      const double* gt = gp + t * Ho * Wo;
                      for (std::int64_t y = ylo; y <= yhi; ++y) {
                        double* gxr = gxt + (y * gm.stride_h + ky - gm.pad_h) * W + kx - gm.pad_w;
                        const double* grow = gt + y * Wo;
                        for (std::int64_t xo = xlo; xo <= xhi; ++xo)
                          gxr[xo * gm.stride_w] += wv * grow[xo];
                      }
                    }
                  }
                }
              }
            }
          }
      }
      if (wants(iw)) {
        Tensor& gw = g(iw);
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t o = 0; o < O; ++o) {
            const double* gp = go.data() + ((i * O + o) * To) * Ho * Wo;
            for (std::int64_t c = 0; c < C; ++c) {
              const double* xp = tx.data() + ((i * C + c) * T) * H * W;
              for (std::int64_t kt = 0; kt < KT; ++kt) {
                const std::int64_t tlo = conv_lo(gm.pad_t, kt, gm.stride_t);
                const std::int64_t thi = conv_hi(T, gm.pad_t, kt, gm.stride_t, To);
                for (std::int64_t ky = 0; ky < KH; ++ky) {
                  const std::int64_t ylo = conv_lo(gm.pad_h, ky, gm.stride_h);
                  const std::int64_t yhi = conv_hi(H, gm.pad_h, ky, gm.stride_h, Ho);
                  for (std::int64_t kx = 0; kx < KW; ++kx) {
                    const std::int64_t xlo = conv_lo(gm.pad_w, kx, gm.stride_w);
                    const std::int64_t xhi = conv_hi(W, gm.pad_w, kx, gm.stride_w, Wo);
                    double acc = 0.0;
                    for (std::int64_t t = tlo; t <= thi; ++t) {
                      const double* xt = xp + (t * gm.stride_t + kt - gm.pad_t) * H * W;
                      const double* gt = gp + t * Ho * Wo;
                      for (std::int64_t y = ylo; y <= yhi; ++y) {
                        const double* xr = xt + (y * gm.stride_h + ky - gm.pad_h) * W + kx - gm.pad_w;
                        const double* grow = gt + y * Wo;
                        for (std::int64_t xo = xlo; xo <= xhi; ++xo)
                          acc += xr[xo * gm.stride_w] * grow[xo];
                      }
                    }
                    gw[(((o * C + c) * KT + kt) * KH + ky) * KW + kx] += acc;
                  }
                }
              }
            }
          }
      }
      if (wants(ibx)) {
        Tensor& gb = g(ibx);
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t o = 0; o < O; ++o) {
            const double* gp = go.data() + ((i * O + o) * To) * Ho * Wo;
            double acc = 0.0;
            for (std::int64_t p = 0; p < To * Ho * Wo; ++p) acc += gp[p];
            gb[o] += acc;
          }
      }
    };
  return ov;
}

Value Tape::maxpool2d(Value x, std::int64_t k, std::int64_t s) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 4) throw DataError("maxpool2d: expected [B,C,H,W]");
  const std::int64_t B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  if (H < k || W < k) throw DataError("maxpool2d: window larger than input");
  const std::int64_t Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  Tensor out(Shape{B, C, Ho, Wo});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(out.size()));
  std::int64_t oi = 0;
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* xp = tx.data() + bc * H * W;
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xo = 0; xo < Wo; ++xo, ++oi) {
        std::int64_t best = (y * s) * W + xo * s;
        double bv = xp[best];
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx) {
            const std::int64_t idx = (y * s + dy) * W + xo * s + dx;
            if (xp[idx] > bv) { bv = xp[idx]; best = idx; }
          }
        out[oi] = bv;
        arg[static_cast<std::size_t>(oi)] = bc * H * W + best;
      }
  }
  const bool rg = requires_grad(x);
  const int ix = x.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, io, arg = std::move(arg)] {
      const Tensor& go = g(io);
      Tensor& gx = g(ix);
      for (std::int64_t i = 0; i < go.size(); ++i)
        gx[arg[static_cast<std::size_t>(i)]] += go[i];
    };
  return o;
}

Value Tape::avgpool2d(Value x, std::int64_t k, std::int64_t s) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 4) throw DataError("avgpool2d: expected [B,C,H,W]");
  const std::int64_t B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  if (H < k || W < k) throw DataError("avgpool2d: window larger than input");
  const std::int64_t Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out(Shape{B, C, Ho, Wo});
  std::int64_t oi = 0;
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* xp = tx.data() + bc * H * W;
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xo = 0; xo < Wo; ++xo, ++oi) {
        double acc = 0.0;
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx)
            acc += xp[(y * s + dy) * W + xo * s + dx];
        out[oi] = acc * inv;
      }
  }
  const bool rg = requires_grad(x);
  const int ix = x.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, io, B, C, H, W, Ho, Wo, k, s, inv] {
      const Tensor& go = g(io);
      Tensor& gx = g(ix);
      std::int64_t oi = 0;
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        double* gxp = gx.data() + bc * H * W;
        for (std::int64_t y = 0; y < Ho; ++y)
          for (std::int64_t xo = 0; xo < Wo; ++xo, ++oi) {
            const double gv = go[oi] * inv;
            for (std::int64_t dy = 0; dy < k; ++dy)
              for (std::int64_t dx = 0; dx < k; ++dx)
                gxp[(y * s + dy) * W + xo * s + dx] += gv;
          }
      }
    };
  return o;
}

Value Tape::upsample2d_nearest(Value x, std::int64_t scale) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 4) throw DataError("upsample2d: expected [B,C,H,W]");
  if (scale < 1) throw DataError("upsample2d: scale must be >= 1");
  const std::int64_t B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const std::int64_t Ho = H * scale, Wo = W * scale;
  Tensor out(Shape{B, C, Ho, Wo});
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* xp = tx.data() + bc * H * W;
    double* op = out.data() + bc * Ho * Wo;
    for (std::int64_t y = 0; y < Ho; ++y) {
      const double* xr = xp + (y / scale) * W;
      double* orow = op + y * Wo;
      for (std::int64_t xo = 0; xo < Wo; ++xo) orow[xo] = xr[xo / scale];
    }
  }
  const bool rg = requires_grad(x);
  const int ix = x.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, io, B, C, H, W, Ho, Wo, scale] {
      const Tensor& go = g(io);
      Tensor& gx = g(ix);
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        double* gxp = gx.data() + bc * H * W;
        const double* gp = go.data() + bc * Ho * Wo;
        for (std::int64_t y = 0; y < Ho; ++y) {
          double* gxr = gxp + (y / scale) * W;
          const double* grow = gp + y * Wo;
          for (std::int64_t xo = 0; xo < Wo; ++xo) gxr[xo / scale] += grow[xo];
        }
      }
    };
  return o;
}

Value Tape::batchnorm(Value x, Value gamma, Value beta, Tensor* running_mean,
                      Tensor* running_var, BatchNormOpts opts) {
  const Tensor &tx = val(x), &tg = val(gamma), &tb = val(beta);
  if (tx.ndim() < 2) throw DataError("batchnorm: rank must be >= 2");
  const std::int64_t B = tx.dim(0), C = tx.dim(1);
  std::int64_t inner = 1;
  for (int d = 2; d < tx.ndim(); ++d) inner *= tx.dim(d);
  if (tg.size() != C || tb.size() != C) throw DataError("batchnorm: parameter size != C");
  if (!running_mean || !running_var || running_mean->size() != C || running_var->size() != C)
    throw DataError("batchnorm: running buffers missing or wrong size");
  const std::int64_t count = B * inner;

  std::vector<double> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
  if (opts.use_batch_stats) {
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t i = 0; i < B; ++i) {
        const double* xp = tx.data() + (i * C + c) * inner;
        for (std::int64_t j = 0; j < inner; ++j) s += xp[j];
      }
      const double m = s / static_cast<double>(count);
      double q = 0.0;
      for (std::int64_t i = 0; i < B; ++i) {
        const double* xp = tx.data() + (i * C + c) * inner;
        for (std::int64_t j = 0; j < inner; ++j) {
          const double d = xp[j] - m;
          q += d * d;
        }
      }
      mean[static_cast<std::size_t>(c)] = m;
      var[static_cast<std::size_t>(c)] = q / static_cast<double>(count);  // biased
    }
    if (opts.update_running)
      for (std::int64_t c = 0; c < C; ++c) {
        (*running_mean)[c] = (1.0 - opts.momentum) * (*running_mean)[c] +
                             opts.momentum * mean[static_cast<std::size_t>(c)];
        (*running_var)[c] = (1.0 - opts.momentum) * (*running_var)[c] +
                            opts.momentum * var[static_cast<std::size_t>(c)];
      }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = (*running_mean)[c];
      var[static_cast<std::size_t>(c)] = (*running_var)[c];
    }
  }

  std::vector<double> inv_std(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c)
    inv_std[static_cast<std::size_t>(c)] =
        1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + opts.eps);

  Tensor out(tx.shape());
  Tensor xhat(tx.shape());
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t c = 0; c < C; ++c) {
      const double m = mean[static_cast<std::size_t>(c)];
      const double is = inv_std[static_cast<std::size_t>(c)];
      const double gv = tg[c], bv = tb[c];
      const double* xp = tx.data() + (i * C + c) * inner;
      double* hp = xhat.data() + (i * C + c) * inner;
      double* op = out.data() + (i * C + c) * inner;
      for (std::int64_t j = 0; j < inner; ++j) {
        const double h = (xp[j] - m) * is;
        hp[j] = h;
        op[j] = gv * h + bv;
      }
    }

  const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  const int ix = x.idx, ig = gamma.idx, ib = beta.idx;
  const bool batch_stats = opts.use_batch_stats;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, ig, ib, io, B, C, inner, count, batch_stats,
                     xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const Tensor& go = g(io);
      const Tensor& tg = v(ig);
      // Per-channel reductions shared by all three gradients.
      std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0);
      std::vector<double> sum_gh(static_cast<std::size_t>(C), 0.0);
      for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t c = 0; c < C; ++c) {
          const double* gp = go.data() + (i * C + c) * inner;
          const double* hp = xhat.data() + (i * C + c) * inner;
          double sg = 0.0, sgh = 0.0;
          for (std::int64_t j = 0; j < inner; ++j) {
            sg += gp[j];
            sgh += gp[j] * hp[j];
          }
          sum_g[static_cast<std::size_t>(c)] += sg;
          sum_gh[static_cast<std::size_t>(c)] += sgh;
        }
      if (wants(ig)) {
        Tensor& gg = g(ig);
        for (std::int64_t c = 0; c < C; ++c) gg[c] += sum_gh[static_cast<std::size_t>(c)];
      }
      if (wants(ib)) {
        Tensor& gb = g(ib);
        for (std::int64_t c = 0; c < C; ++c) gb[c] += sum_g[static_cast<std::size_t>(c)];
      }
      if (wants(ix)) {
        Tensor& gx = g(ix);
        const double invn = 1.0 / static_cast<double>(count);
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t c = 0; c < C; ++c) {
            const double is = inv_std[static_cast<std::size_t>(c)];
            const double gv = tg[c];
            const double mg = sum_g[static_cast<std::size_t>(c)] * invn;
            const double mgh = sum_gh[static_cast<std::size_t>(c)] * invn;
            const double* gp = go.data() + (i * C + c) * inner;
            const double* hp = xhat.data() + (i * C + c) * inner;
            double* gxp = gx.data() + (i * C + c) * inner;
            if (batch_stats) {
              for (std::int64_t j = 0; j < inner; ++j)
                gxp[j] += gv * is * (gp[j] - mg - hp[j] * mgh);
            } else {
              for (std::int64_t j = 0; j < inner; ++j) gxp[j] += gv * is * gp[j];
            }
          }
      }
    };
  return o;
}

Value Tape::dropout(Value x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw DataError("dropout: rate must be in [0,1)");
  const Tensor& tx = val(x);
  if (rate == 0.0) return mul_scalar(x, 1.0);
  rng::Stream rs(seed);
  const double keep_inv = 1.0 / (1.0 - rate);
  std::vector<float> mask(static_cast<std::size_t>(tx.size()));
  Tensor out(tx.shape());
  for (std::int64_t i = 0; i < tx.size(); ++i) {
    const bool keep = rs.next_unit() >= rate;
    mask[static_cast<std::size_t>(i)] = keep ? 1.0f : 0.0f;
    out[i] = keep ? tx[i] * keep_inv : 0.0;
  }
  const bool rg = requires_grad(x);
  const int ix = x.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, io, keep_inv, mask = std::move(mask)] {
      const Tensor& go = g(io);
      Tensor& gx = g(ix);
      for (std::int64_t i = 0; i < go.size(); ++i)
        if (mask[static_cast<std::size_t>(i)] != 0.0f) gx[i] += go[i] * keep_inv;
    };
  return o;
}

// ---- structured ops -----------------------------------------------------------

Value Tape::blur2d_valid(Value x, const std::vector<double>& kernel) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 4) throw DataError("blur2d: expected [B,C,H,W]");
  const auto K = static_cast<std::int64_t>(kernel.size());
  const std::int64_t B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  if (K < 1 || K > H || K > W) throw DataError("blur2d: window larger than image");
  const std::int64_t Wv = W - K + 1, Hv = H - K + 1;

  // horizontal pass
  Tensor tmp(Shape{B, C, H, Wv});
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* xp = tx.data() + bc * H * W;
    double* tp = tmp.data() + bc * H * Wv;
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t u = 0; u < Wv; ++u) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < K; ++j) acc += kernel[static_cast<std::size_t>(j)] * xp[y * W + u + j];
        tp[y * Wv + u] = acc;
      }
  }
  // vertical pass
  Tensor out(Shape{B, C, Hv, Wv});
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* tp = tmp.data() + bc * H * Wv;
    double* op = out.data() + bc * Hv * Wv;
    for (std::int64_t vv = 0; vv < Hv; ++vv)
      for (std::int64_t u = 0; u < Wv; ++u) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < K; ++j) acc += kernel[static_cast<std::size_t>(j)] * tp[(vv + j) * Wv + u];
        op[vv * Wv + u] = acc;
      }
  }

  const bool rg = requires_grad(x);
  const int ix = x.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, io, kernel, B, C, H, W, Hv, Wv, K] {
      const Tensor& go = g(io);
      Tensor& gx = g(ix);
      Tensor gtmp(Shape{B, C, H, Wv});
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* gp = go.data() + bc * Hv * Wv;
        double* gt = gtmp.data() + bc * H * Wv;
        for (std::int64_t vv = 0; vv < Hv; ++vv)
          for (std::int64_t j = 0; j < K; ++j) {
            const double kv = kernel[static_cast<std::size_t>(j)];
            for (std::int64_t u = 0; u < Wv; ++u) gt[(vv + j) * Wv + u] += kv * gp[vv * Wv + u];
          }
        double* gxp = gx.data() + bc * H * W;
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t j = 0; j < K; ++j) {
            const double kv = kernel[static_cast<std::size_t>(j)];
            for (std::int64_t u = 0; u < Wv; ++u) gxp[y * W + u + j] += kv * gt[y * Wv + u];
          }
      }
    };
  return o;
}

Value Tape::l2_normalize_rows(Value x, double eps) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 2) throw DataError("l2_normalize_rows: expected [B,D]");
  const std::int64_t B = tx.dim(0), D = tx.dim(1);
  std::vector<double> norms(static_cast<std::size_t>(B));
  Tensor out(tx.shape());
  for (std::int64_t i = 0; i < B; ++i) {
    const double* xr = tx.data() + i * D;
    double q = 0.0;
    for (std::int64_t j = 0; j < D; ++j) q += xr[j] * xr[j];
    const double n = std::sqrt(q);
    const double denom = n > eps ? n : eps;
    norms[static_cast<std::size_t>(i)] = denom;
    double* orow = out.data() + i * D;
    for (std::int64_t j = 0; j < D; ++j) orow[j] = xr[j] / denom;
  }
  const bool rg = requires_grad(x);
  const int ix = x.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, io, B, D, eps, norms = std::move(norms)] {
      const Tensor& go = g(io);
      const Tensor& u = v(io);
      const Tensor& tx = v(ix);
      Tensor& gx = g(ix);
      for (std::int64_t i = 0; i < B; ++i) {
        const double n = norms[static_cast<std::size_t>(i)];
        const double* gr = go.data() + i * D;
        const double* ur = u.data() + i * D;
        const double* xr = tx.data() + i * D;
        double* gxr = gx.data() + i * D;
        double true_n = 0.0;
        for (std::int64_t j = 0; j < D; ++j) true_n += xr[j] * xr[j];
        true_n = std::sqrt(true_n);
        if (true_n > eps) {
          double ug = 0.0;
          for (std::int64_t j = 0; j < D; ++j) ug += ur[j] * gr[j];
          for (std::int64_t j = 0; j < D; ++j) gxr[j] += (gr[j] - ur[j] * ug) / n;
        } else {
          for (std::int64_t j = 0; j < D; ++j) gxr[j] += gr[j] / eps;
        }
      }
    };
  return o;
}

Value Tape::cosine_rows(Value a, Value b, double eps, int* zero_norm_rows) {
  const Tensor &ta = val(a), &tb = val(b);
  if (ta.ndim() != 2 || !same_shape(ta, tb))
    throw DataError("cosine_rows: expected matching [B,D] inputs");
  const std::int64_t B = ta.dim(0), D = ta.dim(1);
  Tensor out(Shape{B});
  std::vector<double> nas(static_cast<std::size_t>(B)), nbs(static_cast<std::size_t>(B));
  int zeros = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    const double* ar = ta.data() + i * D;
    const double* br = tb.data() + i * D;
    double qa = 0.0, qb = 0.0, dot = 0.0;
    for (std::int64_t j = 0; j < D; ++j) {
      qa += ar[j] * ar[j];
      qb += br[j] * br[j];
      dot += ar[j] * br[j];
    }
    const double na = std::sqrt(qa), nb = std::sqrt(qb);
    nas[static_cast<std::size_t>(i)] = na;
    nbs[static_cast<std::size_t>(i)] = nb;
    if (na < eps || nb < eps) {
      out[i] = 0.0;  // degenerate rows score zero similarity
      ++zeros;
    } else {
      out[i] = dot / (na * nb);
    }
  }
  if (zero_norm_rows) *zero_norm_rows = zeros;
  const bool rg = requires_grad(a) || requires_grad(b);
  const int ia = a.idx, ib = b.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ia, ib, io, B, D, eps, nas = std::move(nas), nbs = std::move(nbs)] {
      const Tensor& go = g(io);
      const Tensor& sim = v(io);
      const Tensor &ta = v(ia), &tb = v(ib);
      const bool wa = wants(ia), wb = wants(ib);
      for (std::int64_t i = 0; i < B; ++i) {
        const double na = nas[static_cast<std::size_t>(i)], nb = nbs[static_cast<std::size_t>(i)];
        if (na < eps || nb < eps) continue;
        const double gv = go[i];
        if (gv == 0.0) continue;
        const double s = sim[i];
        const double* ar = ta.data() + i * D;
        const double* br = tb.data() + i * D;
        if (wa) {
          double* gar = g(ia).data() + i * D;
          for (std::int64_t j = 0; j < D; ++j)
            gar[j] += gv * (br[j] / (na * nb) - s * ar[j] / (na * na));
        }
        if (wb) {
          double* gbr = g(ib).data() + i * D;
          for (std::int64_t j = 0; j < D; ++j)
            gbr[j] += gv * (ar[j] / (na * nb) - s * br[j] / (nb * nb));
        }
      }
    };
  return o;
}

Value Tape::tv2d(Value x) {
  const Tensor& tx = val(x);
  if (tx.ndim() != 4) throw DataError("tv2d: expected [B,C,H,W]");
  const std::int64_t B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  if (H < 2 || W < 2) throw DataError("tv2d: image must be at least 2x2");
  const double inv_h = 1.0 / static_cast<double>(B * C * H * (W - 1));
  const double inv_v = 1.0 / static_cast<double>(B * C * (H - 1) * W);
  double acc_h = 0.0, acc_v = 0.0;
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* xp = tx.data() + bc * H * W;
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t u = 0; u + 1 < W; ++u) acc_h += std::abs(xp[y * W + u + 1] - xp[y * W + u]);
    for (std::int64_t y = 0; y + 1 < H; ++y)
      for (std::int64_t u = 0; u < W; ++u) acc_v += std::abs(xp[(y + 1) * W + u] - xp[y * W + u]);
  }
  Tensor out(Shape{1});
  out[0] = acc_h * inv_h + acc_v * inv_v;
  const bool rg = requires_grad(x);
  const int ix = x.idx;
  Value o = push(std::move(out), rg, nullptr);
  const int io = o.idx;
  if (rg)
    node(io).back = [this, ix, io, B, C, H, W, inv_h, inv_v] {
      const double gv = g(io)[0];
      const Tensor& tx = v(ix);
      Tensor& gx = g(ix);
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* xp = tx.data() + bc * H * W;
        double* gp = gx.data() + bc * H * W;
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t u = 0; u + 1 < W; ++u) {
            const double d = xp[y * W + u + 1] - xp[y * W + u];
            const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            gp[y * W + u + 1] += gv * inv_h * sg;
            gp[y * W + u] -= gv * inv_h * sg;
          }
        for (std::int64_t y = 0; y + 1 < H; ++y)
          for (std::int64_t u = 0; u < W; ++u) {
            const double d = xp[(y + 1) * W + u] - xp[y * W + u];
            const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            gp[(y + 1) * W + u] += gv * inv_v * sg;
            gp[y * W + u] -= gv * inv_v * sg;
          }
      }
    };
  return o;
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  if (size < 1 || size % 2 == 0) throw DataError("gaussian_kernel: size must be odd");
  std::vector<double> k(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = (i - c) / sigma;
    k[static_cast<std::size_t>(i)] = std::exp(-0.5 * d * d);
    sum += k[static_cast<std::size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace neurocodec::ad
