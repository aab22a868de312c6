#include "tempo/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <type_traits>

#include "tempo/simd/gemm.hpp"

namespace tempo::nn {

namespace {

// Wider accumulator for reductions.
template <typename T>
using Acc = std::conditional_t<std::is_same_v<T, float>, double, long double>;

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite values produced by ") + op);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

struct ConvGeometry {
  std::int64_t cin, t, h, w, kt, kh, kw;
  std::int64_t positions() const { return t * h * w; }
  std::int64_t col_rows() const { return cin * kt * kh * kw; }
  bool pointwise() const { return kt == 1 && kh == 1 && kw == 1; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::int64_t pt = g.kt / 2, ph = g.kh / 2, pw = g.kw / 2;
  const std::int64_t plane = g.h * g.w;
  const std::int64_t positions = g.positions();
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t dt = 0; dt < g.kt; ++dt) {
      for (std::int64_t dh = 0; dh < g.kh; ++dh) {
        for (std::int64_t dw = 0; dw < g.kw; ++dw) {
          const std::int64_t row = ((ci * g.kt + dt) * g.kh + dh) * g.kw + dw;
          T* dst = col + row * positions;
          for (std::int64_t t = 0; t < g.t; ++t) {
            const std::int64_t ts = t + dt - pt;
            T* dplane = dst + t * plane;
            if (ts < 0 || ts >= g.t) {
              std::fill(dplane, dplane + plane, T(0));
              continue;
            }
            for (std::int64_t h = 0; h < g.h; ++h) {
              const std::int64_t hs = h + dh - ph;
              T* drow = dplane + h * g.w;
              if (hs < 0 || hs >= g.h) {
                std::fill(drow, drow + g.w, T(0));
                continue;
              }
              const T* src = x + ((ci * g.t + ts) * g.h + hs) * g.w;
              for (std::int64_t w = 0; w < g.w; ++w) {
                const std::int64_t ws = w + dw - pw;
                drow[w] = (ws >= 0 && ws < g.w) ? src[ws] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const std::int64_t pt = g.kt / 2, ph = g.kh / 2, pw = g.kw / 2;
  const std::int64_t plane = g.h * g.w;
  const std::int64_t positions = g.positions();
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t dt = 0; dt < g.kt; ++dt) {
      for (std::int64_t dh = 0; dh < g.kh; ++dh) {
        for (std::int64_t dw = 0; dw < g.kw; ++dw) {
          const std::int64_t row = ((ci * g.kt + dt) * g.kh + dh) * g.kw + dw;
          const T* src = col + row * positions;
          for (std::int64_t t = 0; t < g.t; ++t) {
            const std::int64_t ts = t + dt - pt;
            if (ts < 0 || ts >= g.t) continue;
            for (std::int64_t h = 0; h < g.h; ++h) {
              const std::int64_t hs = h + dh - ph;
              if (hs < 0 || hs >= g.h) continue;
              const T* srow = src + t * plane + h * g.w;
              T* drow = x + ((ci * g.t + ts) * g.h + hs) * g.w;
              for (std::int64_t w = 0; w < g.w; ++w) {
                const std::int64_t ws = w + dw - pw;
                if (ws >= 0 && ws < g.w) drow[ws] += srow[w];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require(xs.size() == 5, "conv3d input must be (N,Cin,T,H,W), got " + shape_str(xs));
  require(ws.size() == 5, "conv3d weight must be (Cout,Cin,kt,kh,kw), got " + shape_str(ws));
  require(ws[1] == xs[1], "conv3d channel mismatch: input " + shape_str(xs) + " weight " +
                              shape_str(ws));
  require(ws[2] % 2 == 1 && ws[3] % 2 == 1 && ws[4] % 2 == 1,
          "conv3d kernel dims must be odd, got " + shape_str(ws));
  require(bias.shape() == Shape{ws[0]}, "conv3d bias must be (Cout), got " +
                                            shape_str(bias.shape()));

  const std::int64_t n = xs[0], cout = ws[0];
  const ConvGeometry g{xs[1], xs[2], xs[3], xs[4], ws[2], ws[3], ws[4]};
  const std::int64_t positions = g.positions();
  const std::int64_t rows = g.col_rows();
  const std::int64_t in_stride = g.cin * positions;
  const std::int64_t out_stride = cout * positions;

  Tensor<T> out(Shape{n, cout, g.t, g.h, g.w});
  std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(rows * positions));
  const T* xv = x.value().raw();
  const T* wv = weight.value().raw();
  const T* bv = bias.value().raw();
  for (std::int64_t s = 0; s < n; ++s) {
    const T* cols = xv + s * in_stride;
    if (!g.pointwise()) {
      im2col(cols, g, col.data());
      cols = col.data();
    }
    T* y = out.raw() + s * out_stride;
    simd::gemm<T>(false, false, cout, positions, rows, T(1), wv, rows, cols, positions, T(0), y,
                  positions);
    for (std::int64_t co = 0; co < cout; ++co) {
      T* yrow = y + co * positions;
      const T bco = bv[co];
      for (std::int64_t p = 0; p < positions; ++p) yrow[p] += bco;
    }
  }
  check_finite(out, "conv3d");

  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.node();
  return make_op<T>(std::move(out), {x, weight, bias},
                    [xn, wn, bn, g, n, cout](const Tensor<T>& gy) {
    const std::int64_t positions = g.positions();
    const std::int64_t rows = g.col_rows();
    const std::int64_t in_stride = g.cin * positions;
    const std::int64_t out_stride = cout * positions;
    const T* gyv = gy.raw();
    std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(rows * positions));
    std::vector<T> dcol(static_cast<std::size_t>(rows * positions));
    const T* xv = xn->value.raw();
    const T* wv = wn->value.raw();
    if (bn->requires_grad) {
      T* db = bn->grad_buffer().raw();
      for (std::int64_t co = 0; co < cout; ++co) {
        Acc<T> acc = 0;
        for (std::int64_t s = 0; s < n; ++s) {
          const T* row = gyv + s * out_stride + co * positions;
          for (std::int64_t p = 0; p < positions; ++p) acc += row[p];
        }
        db[co] += static_cast<T>(acc);
      }
    }
    std::vector<T> dw;
    if (wn->requires_grad) dw.assign(static_cast<std::size_t>(cout * rows), T(0));
    for (std::int64_t s = 0; s < n; ++s) {
      const T* gys = gyv + s * out_stride;
      if (wn->requires_grad) {
        const T* cols = xv + s * in_stride;
        if (!g.pointwise()) {
          im2col(cols, g, col.data());
          cols = col.data();
        }
        simd::gemm<T>(false, true, cout, rows, positions, T(1), gys, positions, cols, positions,
                      T(1), dw.data(), rows);
      }
      if (xn->requires_grad) {
        T* gx = xn->grad_buffer().raw() + s * in_stride;
        if (g.pointwise()) {
          simd::gemm<T>(true, false, rows, positions, cout, T(1), wv, rows, gys, positions, T(1),
                        gx, positions);
        } else {
          simd::gemm<T>(true, false, rows, positions, cout, T(1), wv, rows, gys, positions, T(0),
                        dcol.data(), positions);
          col2im_add(dcol.data(), g, gx);
        }
      }
    }
    if (wn->requires_grad) {
      T* gw = wn->grad_buffer().raw();
      for (std::size_t i = 0; i < dw.size(); ++i) gw[i] += dw[i];
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  require(weight.shape().size() == 2, "linear weight must be (Dout,Din), got " +
                                          shape_str(weight.shape()));
  const std::int64_t dout = weight.shape()[0], din = weight.shape()[1];
  require(!xs.empty() && xs.back() == din, "linear input " + shape_str(xs) +
                                               " does not end in Din=" + std::to_string(din));
  require(bias.shape() == Shape{dout}, "linear bias must be (Dout), got " +
                                           shape_str(bias.shape()));
  const std::int64_t rows = x.value().numel() / din;
  Shape os = xs;
  os.back() = dout;
  Tensor<T> out(os);
  simd::gemm<T>(false, true, rows, dout, din, T(1), x.value().raw(), din, weight.value().raw(),
                din, T(0), out.raw(), dout);
  const T* bv = bias.value().raw();
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.raw() + r * dout;
    for (std::int64_t j = 0; j < dout; ++j) row[j] += bv[j];
  }
  check_finite(out, "linear");

  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.node();
  return make_op<T>(std::move(out), {x, weight, bias},
                    [xn, wn, bn, rows, din, dout](const Tensor<T>& gy) {
    if (xn->requires_grad) {
      simd::gemm<T>(false, false, rows, din, dout, T(1), gy.raw(), dout, wn->value.raw(), din,
                    T(1), xn->grad_buffer().raw(), din);
    }
    if (wn->requires_grad) {
      simd::gemm<T>(true, false, dout, din, rows, T(1), gy.raw(), dout, xn->value.raw(), din,
                    T(1), wn->grad_buffer().raw(), din);
    }
    if (bn->requires_grad) {
      T* db = bn->grad_buffer().raw();
      for (std::int64_t j = 0; j < dout; ++j) {
        Acc<T> acc = 0;
        for (std::int64_t r = 0; r < rows; ++r) acc += gy[r * dout + j];
        db[j] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  Node<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn](const Tensor<T>& gy) {
    T* gx = xn->grad_buffer().raw();
    const T* xv = xn->value.raw();
    for (std::int64_t i = 0; i < gy.numel(); ++i) {
      if (xv[i] > T(0)) gx[i] += gy[i];
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "add shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](const Tensor<T>& gy) {
    for (Node<T>* p : {an, bn}) {
      if (!p->requires_grad) continue;
      T* g = p->grad_buffer().raw();
      for (std::int64_t i = 0; i < gy.numel(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](const Tensor<T>& gy) {
    if (an->requires_grad) {
      T* g = an->grad_buffer().raw();
      for (std::int64_t i = 0; i < gy.numel(); ++i) g[i] += gy[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_buffer().raw();
      for (std::int64_t i = 0; i < gy.numel(); ++i) g[i] += gy[i] * an->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  Node<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, factor](const Tensor<T>& gy) {
    T* g = xn->grad_buffer().raw();
    for (std::int64_t i = 0; i < gy.numel(); ++i) g[i] += factor * gy[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  Acc<T> acc = 0;
  for (T v : x.value().data()) acc += v;
  Node<T>* xn = x.node();
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(acc)), {x}, [xn](const Tensor<T>& gy) {
    T* g = xn->grad_buffer().raw();
    const T gv = gy[0];
    for (std::int64_t i = 0; i < xn->value.numel(); ++i) g[i] += gv;
  });
}

template <typename T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& weights) {
  require(x.shape() == weights.shape(), "dot_const shape mismatch " + shape_str(x.shape()) +
                                            " vs " + shape_str(weights.shape()));
  Acc<T> acc = 0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) {
    acc += static_cast<Acc<T>>(x.value()[i]) * weights[i];
  }
  Node<T>* xn = x.node();
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(acc)), {x},
                    [xn, weights](const Tensor<T>& gy) {
    T* g = xn->grad_buffer().raw();
    for (std::int64_t i = 0; i < weights.numel(); ++i) g[i] += gy[0] * weights[i];
  });
}

template <typename T>
Var<T> mean_axes(const Var<T>& x, std::vector<int> axes) {
  const Shape& xs = x.shape();
  const int nd = static_cast<int>(xs.size());
  std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
  for (int a : axes) {
    require(a >= 0 && a < nd, "mean_axes axis " + std::to_string(a) + " out of range for " +
                                  shape_str(xs));
    reduced[static_cast<std::size_t>(a)] = true;
  }
  Shape os;
  std::int64_t count = 1;
  for (int a = 0; a < nd; ++a) {
    if (reduced[static_cast<std::size_t>(a)]) {
      count *= xs[static_cast<std::size_t>(a)];
    } else {
      os.push_back(xs[static_cast<std::size_t>(a)]);
    }
  }
  // Output stride of each input axis (0 on reduced axes).
  std::vector<std::int64_t> ostride(static_cast<std::size_t>(nd), 0);
  std::int64_t stride = 1;
  for (int a = nd - 1; a >= 0; --a) {
    if (!reduced[static_cast<std::size_t>(a)]) {
      ostride[static_cast<std::size_t>(a)] = stride;
      stride *= xs[static_cast<std::size_t>(a)];
    }
  }
  const std::int64_t onumel = shape_numel(os);
  // Flat input index -> flat output index.
  auto for_each_index = [xs = Shape(xs), ostride, nd](auto&& fn) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
    const std::int64_t total = shape_numel(xs);
    std::int64_t out = 0;
    for (std::int64_t i = 0; i < total; ++i) {
      fn(i, out);
      for (int a = nd - 1; a >= 0; --a) {
        auto ua = static_cast<std::size_t>(a);
        ++idx[ua];
        out += ostride[ua];
        if (idx[ua] < xs[ua]) break;
        out -= ostride[ua] * xs[ua];
        idx[ua] = 0;
      }
    }
  };
  std::vector<Acc<T>> acc(static_cast<std::size_t>(onumel), Acc<T>(0));
  const T* xv = x.value().raw();
  for_each_index([&](std::int64_t i, std::int64_t o) { acc[static_cast<std::size_t>(o)] += xv[i]; });
  Tensor<T> out(os);
  for (std::int64_t o = 0; o < onumel; ++o) {
    out[o] = static_cast<T>(acc[static_cast<std::size_t>(o)] / static_cast<Acc<T>>(count));
  }
  Node<T>* xn = x.node();
  return make_op<T>(std::move(out), {x},
                    [xn, for_each_index, count](const Tensor<T>& gy) {
    T* g = xn->grad_buffer().raw();
    const T inv = T(1) / static_cast<T>(count);
    for_each_index([&](std::int64_t i, std::int64_t o) { g[i] += gy[o] * inv; });
  });
}

template <typename T>
Var<T> mean_over_time(const Var<T>& x) {
  require(x.shape().size() == 5, "mean_over_time expects (N,C,T,H,W), got " +
                                     shape_str(x.shape()));
  return mean_axes(x, {2});
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require(x.shape().size() >= 2, "global_avg_pool expects (N,C,...), got " +
                                     shape_str(x.shape()));
  if (x.shape().size() == 2) return x;
  std::vector<int> axes;
  for (int a = 2; a < static_cast<int>(x.shape().size()); ++a) axes.push_back(a);
  return mean_axes(x, axes);
}

template <typename T>
Var<T> adaptive_avg_pool2d(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
  const Shape& xs = x.shape();
  require(xs.size() >= 2, "adaptive_avg_pool2d needs at least 2 axes, got " + shape_str(xs));
  const std::int64_t h = xs[xs.size() - 2], w = xs[xs.size() - 1];
  require(out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w,
          "adaptive_avg_pool2d target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
              " exceeds grid " + std::to_string(h) + "x" + std::to_string(w));
  const std::int64_t outer = x.value().numel() / (h * w);
  Shape os = xs;
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  auto lo = [](std::int64_t i, std::int64_t in, std::int64_t out) { return (i * in) / out; };
  auto hi = [](std::int64_t i, std::int64_t in, std::int64_t out) {
    return ((i + 1) * in + out - 1) / out;
  };
  Tensor<T> out(os);
  const T* xv = x.value().raw();
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* plane = xv + o * h * w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const std::int64_t h0 = lo(i, h, out_h), h1 = hi(i, h, out_h);
      for (std::int64_t j = 0; j < out_w; ++j) {
        const std::int64_t w0 = lo(j, w, out_w), w1 = hi(j, w, out_w);
        Acc<T> acc = 0;
        for (std::int64_t a = h0; a < h1; ++a) {
          for (std::int64_t b = w0; b < w1; ++b) acc += plane[a * w + b];
        }
        out[(o * out_h + i) * out_w + j] =
            static_cast<T>(acc / static_cast<Acc<T>>((h1 - h0) * (w1 - w0)));
      }
    }
  }
  Node<T>* xn = x.node();
  return make_op<T>(std::move(out), {x},
                    [xn, outer, h, w, out_h, out_w, lo, hi](const Tensor<T>& gy) {
    T* g = xn->grad_buffer().raw();
    for (std::int64_t o = 0; o < outer; ++o) {
      T* plane = g + o * h * w;
      for (std::int64_t i = 0; i < out_h; ++i) {
        const std::int64_t h0 = lo(i, h, out_h), h1 = hi(i, h, out_h);
        for (std::int64_t j = 0; j < out_w; ++j) {
          const std::int64_t w0 = lo(j, w, out_w), w1 = hi(j, w, out_w);
          const T share = gy[(o * out_h + i) * out_w + j] / static_cast<T>((h1 - h0) * (w1 - w0));
          for (std::int64_t a = h0; a < h1; ++a) {
            for (std::int64_t b = w0; b < w1; ++b) plane[a * w + b] += share;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> channel_group_mean(const Var<T>& x, int axis, std::int64_t groups) {
  const Shape& xs = x.shape();
  require(axis >= 0 && axis < static_cast<int>(xs.size()), "channel axis out of range");
  const std::int64_t c = xs[static_cast<std::size_t>(axis)];
  require(groups >= 1 && c % groups == 0, "channel count " + std::to_string(c) +
                                              " not divisible by target " +
                                              std::to_string(groups));
  const std::int64_t group = c / groups;
  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= xs[static_cast<std::size_t>(a)];
  for (std::size_t a = static_cast<std::size_t>(axis) + 1; a < xs.size(); ++a) inner *= xs[a];
  Shape os = xs;
  os[static_cast<std::size_t>(axis)] = groups;
  Tensor<T> out(os);
  std::vector<Acc<T>> acc(static_cast<std::size_t>(inner));
  const T* xv = x.value().raw();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t j = 0; j < groups; ++j) {
      std::fill(acc.begin(), acc.end(), Acc<T>(0));
      for (std::int64_t k = 0; k < group; ++k) {
        const T* src = xv + (o * c + j * group + k) * inner;
        for (std::int64_t i = 0; i < inner; ++i) acc[static_cast<std::size_t>(i)] += src[i];
      }
      T* dst = out.raw() + (o * groups + j) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        dst[i] = static_cast<T>(acc[static_cast<std::size_t>(i)] / static_cast<Acc<T>>(group));
      }
    }
  }
  Node<T>* xn = x.node();
  return make_op<T>(std::move(out), {x},
                    [xn, outer, groups, group, c, inner](const Tensor<T>& gy) {
    T* g = xn->grad_buffer().raw();
    const T inv = T(1) / static_cast<T>(group);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t j = 0; j < groups; ++j) {
        const T* src = gy.raw() + (o * groups + j) * inner;
        for (std::int64_t k = 0; k < group; ++k) {
          T* dst = g + (o * c + j * group + k) * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
        }
      }
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int64_t> labels) {
  const Shape& ls = logits.shape();
  require(ls.size() == 2, "softmax_cross_entropy expects logits (N,K), got " + shape_str(ls));
  const std::int64_t n = ls[0], k = ls[1];
  require(static_cast<std::int64_t>(labels.size()) == n,
          "label count " + std::to_string(labels.size()) + " != batch " + std::to_string(n));
  for (auto y : labels) {
    if (y < 0 || y >= k) {
      throw InputError("label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
  }
  Tensor<T> probs(ls);
  Acc<T> total = 0;
  const T* lv = logits.value().raw();
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = lv + r * k;
    const T mx = *std::max_element(row, row + k);
    Acc<T> z = 0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<Acc<T>>(row[j] - mx));
    const Acc<T> log_z = std::log(z) + mx;
    for (std::int64_t j = 0; j < k; ++j) {
      probs[r * k + j] = static_cast<T>(std::exp(static_cast<Acc<T>>(row[j]) - log_z));
    }
    total += log_z - row[labels[static_cast<std::size_t>(r)]];
  }
  Tensor<T> loss = Tensor<T>::scalar(static_cast<T>(total / static_cast<Acc<T>>(n)));
  check_finite(loss, "softmax_cross_entropy");
  Node<T>* ln = logits.node();
  std::vector<std::int64_t> labels_copy(labels.begin(), labels.end());
  return make_op<T>(std::move(loss), {logits},
                    [ln, probs = std::move(probs), labels_copy, n, k](const Tensor<T>& gy) {
    T* g = ln->grad_buffer().raw();
    const T s = gy[0] / static_cast<T>(n);
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t j = 0; j < k; ++j) {
        T d = probs[r * k + j];
        if (j == labels_copy[static_cast<std::size_t>(r)]) d -= T(1);
        g[r * k + j] += s * d;
      }
    }
  });
}

template <typename T>
Var<T> batchnorm3d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   BatchNormState<T>& state, bool train) {
  const Shape& xs = x.shape();
  require(xs.size() == 5, "batchnorm3d expects (N,C,T,H,W), got " + shape_str(xs));
  const std::int64_t n = xs[0], c = xs[1], p = xs[2] * xs[3] * xs[4];
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
          "batchnorm3d affine params must be (C)=" + std::to_string(c));
  require(state.running_mean.shape() == Shape{c}, "batchnorm3d running stats size mismatch");
  const std::int64_t count = n * p;
  if (train && count < 2) {
    throw ConfigError("batchnorm3d train mode needs N*T*H*W >= 2, got " +
                      std::to_string(count));
  }
  const T* xv = x.value().raw();
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();
  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mean, var;
    if (train) {
      Acc<T> s = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* row = xv + (b * c + ch) * p;
        for (std::int64_t i = 0; i < p; ++i) s += row[i];
      }
      const Acc<T> m = s / static_cast<Acc<T>>(count);
      Acc<T> ss = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* row = xv + (b * c + ch) * p;
        for (std::int64_t i = 0; i < p; ++i) {
          const Acc<T> d = row[i] - m;
          ss += d * d;
        }
      }
      mean = static_cast<T>(m);
      var = static_cast<T>(ss / static_cast<Acc<T>>(count));
      const T unbiased = static_cast<T>(ss / static_cast<Acc<T>>(count - 1));
      T& rm = state.running_mean[ch];
      T& rv = state.running_var[ch];
      rm = (T(1) - state.momentum) * rm + state.momentum * mean;
      rv = (T(1) - state.momentum) * rv + state.momentum * unbiased;
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T is = T(1) / std::sqrt(var + state.eps);
    inv_std[static_cast<std::size_t>(ch)] = is;
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t off = (b * c + ch) * p;
      for (std::int64_t i = 0; i < p; ++i) {
        const T h = (xv[off + i] - mean) * is;
        xhat[off + i] = h;
        out[off + i] = gv[ch] * h + bv[ch];
      }
    }
  }
  check_finite(out, "batchnorm3d");
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, p,
                     train](const Tensor<T>& gy) {
    const std::int64_t count = n * p;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      Acc<T> sum_dy = 0, sum_dy_xhat = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const std::int64_t off = (b * c + ch) * p;
        for (std::int64_t i = 0; i < p; ++i) {
          sum_dy += gy[off + i];
          sum_dy_xhat += static_cast<Acc<T>>(gy[off + i]) * xhat[off + i];
        }
      }
      if (gn->requires_grad) gn->grad_buffer()[ch] += static_cast<T>(sum_dy_xhat);
      if (bn->requires_grad) bn->grad_buffer()[ch] += static_cast<T>(sum_dy);
      if (!xn->requires_grad) continue;
      T* gx = xn->grad_buffer().raw();
      const T gamma_c = gn->value[ch];
      const T is = inv_std[static_cast<std::size_t>(ch)];
      if (train) {
        const T mean_dy = static_cast<T>(sum_dy / static_cast<Acc<T>>(count));
        const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<Acc<T>>(count));
        for (std::int64_t b = 0; b < n; ++b) {
          const std::int64_t off = (b * c + ch) * p;
          for (std::int64_t i = 0; i < p; ++i) {
            gx[off + i] += gamma_c * is * (gy[off + i] - mean_dy - xhat[off + i] * mean_dy_xhat);
          }
        }
      } else {
        for (std::int64_t b = 0; b < n; ++b) {
          const std::int64_t off = (b * c + ch) * p;
          for (std::int64_t i = 0; i < p; ++i) gx[off + i] += gamma_c * is * gy[off + i];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require(logits.ndim() == 2, "softmax_rows expects (N,K)");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = logits.raw() + r * k;
    const T mx = *std::max_element(row, row + k);
    Acc<T> z = 0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<Acc<T>>(row[j] - mx));
    for (std::int64_t j = 0; j < k; ++j) {
      out[r * k + j] = static_cast<T>(std::exp(static_cast<Acc<T>>(row[j] - mx)) / z);
    }
  }
  return out;
}

#define TEMPO_INSTANTIATE_OPS(T)                                                          \
  template Var<T> conv3d<T>(const Var<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> relu<T>(const Var<T>&);                                                 \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> scale<T>(const Var<T>&, T);                                             \
  template Var<T> sum<T>(const Var<T>&);                                                  \
  template Var<T> dot_const<T>(const Var<T>&, const Tensor<T>&);                          \
  template Var<T> mean_axes<T>(const Var<T>&, std::vector<int>);                          \
  template Var<T> mean_over_time<T>(const Var<T>&);                                       \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                      \
  template Var<T> adaptive_avg_pool2d<T>(const Var<T>&, std::int64_t, std::int64_t);      \
  template Var<T> channel_group_mean<T>(const Var<T>&, int, std::int64_t);                \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const std::int64_t>); \
  template Var<T> batchnorm3d<T>(const Var<T>&, const Var<T>&, const Var<T>&,             \
                                 BatchNormState<T>&, bool);                               \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);

TEMPO_INSTANTIATE_OPS(float)
TEMPO_INSTANTIATE_OPS(double)

}  // namespace tempo::nn
