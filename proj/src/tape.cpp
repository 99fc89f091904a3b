#include "opc/tape.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace opc {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}
}  // namespace

VarId Tape::emit(Tensor value, bool needs_grad, std::function<void(Tape&)> backprop) {
  nodes_.push_back(Node{std::move(value), needs_grad, std::move(backprop)});
  return nodes_.size() - 1;
}

VarId Tape::constant(Tensor value) { return emit(std::move(value), false, {}); }

VarId Tape::param(const std::string& name, const Tensor& value) {
  auto it = params_.find(name);
  if (it != params_.end()) return it->second;
  VarId id = emit(value, true, {});
  params_[name] = id;
  return id;
}

VarId Tape::add(VarId a, VarId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "add shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  out.add_scaled(tb, 1.0);
  VarId id = emit(std::move(out), needs(a) || needs(b), {});
  nodes_[id].backprop = [a, b, id](Tape& t) {
    if (t.needs(a)) t.g(a).add_scaled(t.g(id), 1.0);
    if (t.needs(b)) t.g(b).add_scaled(t.g(id), 1.0);
  };
  return id;
}

VarId Tape::sub(VarId a, VarId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "sub shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  out.add_scaled(tb, -1.0);
  VarId id = emit(std::move(out), needs(a) || needs(b), {});
  nodes_[id].backprop = [a, b, id](Tape& t) {
    if (t.needs(a)) t.g(a).add_scaled(t.g(id), 1.0);
    if (t.needs(b)) t.g(b).add_scaled(t.g(id), -1.0);
  };
  return id;
}

VarId Tape::mul(VarId a, VarId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.same_shape(tb), "mul shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
  VarId id = emit(std::move(out), needs(a) || needs(b), {});
  nodes_[id].backprop = [a, b, id](Tape& t) {
    const Tensor& go = t.g(id);
    if (t.needs(a)) {
      Tensor& ga = t.g(a);
      const Tensor& vb = t.value(b);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb[i];
    }
    if (t.needs(b)) {
      Tensor& gb = t.g(b);
      const Tensor& va = t.value(a);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
    }
  };
  return id;
}

VarId Tape::scale(VarId a, double s) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  VarId id = emit(std::move(out), needs(a), {});
  nodes_[id].backprop = [a, s, id](Tape& t) {
    if (t.needs(a)) t.g(a).add_scaled(t.g(id), s);
  };
  return id;
}

VarId Tape::exp(VarId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  VarId id = emit(std::move(out), needs(a), {});
  nodes_[id].backprop = [a, id](Tape& t) {
    if (!t.needs(a)) return;
    Tensor& ga = t.g(a);
    const Tensor& y = t.value(id);
    const Tensor& go = t.g(id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
  };
  return id;
}

VarId Tape::sigmoid(VarId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  VarId id = emit(std::move(out), needs(a), {});
  nodes_[id].backprop = [a, id](Tape& t) {
    if (!t.needs(a)) return;
    Tensor& ga = t.g(a);
    const Tensor& y = t.value(id);
    const Tensor& go = t.g(id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
  };
  return id;
}

VarId Tape::relu(VarId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  VarId id = emit(std::move(out), needs(a), {});
  nodes_[id].backprop = [a, id](Tape& t) {
    if (!t.needs(a)) return;
    Tensor& ga = t.g(a);
    const Tensor& x = t.value(a);
    const Tensor& go = t.g(id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += x[i] > 0.0 ? go[i] : 0.0;
  };
  return id;
}

VarId Tape::elu(VarId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : std::expm1(out[i]);
  VarId id = emit(std::move(out), needs(a), {});
  nodes_[id].backprop = [a, id](Tape& t) {
    if (!t.needs(a)) return;
    Tensor& ga = t.g(a);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(id);
    const Tensor& go = t.g(id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (x[i] > 0.0 ? 1.0 : y[i] + 1.0);
  };
  return id;
}

VarId Tape::reshape(VarId a, std::vector<std::size_t> shape) {
  Tensor out = value(a);
  out.reshape(std::move(shape));
  VarId id = emit(std::move(out), needs(a), {});
  nodes_[id].backprop = [a, id](Tape& t) {
    if (!t.needs(a)) return;
    Tensor& ga = t.g(a);
    const Tensor& go = t.g(id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  };
  return id;
}

VarId Tape::sum(VarId a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < value(a).size(); ++i) acc += value(a)[i];
  VarId id = emit(Tensor::scalar(acc), needs(a), {});
  nodes_[id].backprop = [a, id](Tape& t) {
    if (!t.needs(a)) return;
    Tensor& ga = t.g(a);
    const double go = t.g(id)[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
  };
  return id;
}

VarId Tape::pick(VarId a, std::size_t flat_index) {
  require(flat_index < value(a).size(), "pick index out of range");
  VarId id = emit(Tensor::scalar(value(a)[flat_index]), needs(a), {});
  nodes_[id].backprop = [a, flat_index, id](Tape& t) {
    if (t.needs(a)) t.g(a)[flat_index] += t.g(id)[0];
  };
  return id;
}

VarId Tape::linear(VarId x, VarId w, VarId b) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  const Tensor& tb = value(b);
  require(tx.rank() == 2 && tw.rank() == 2 && tb.rank() == 1, "linear expects x[B,I], w[I,O], b[O]");
  const std::size_t B = tx.extent(0), I = tx.extent(1), O = tw.extent(1);
  require(tw.extent(0) == I && tb.extent(0) == O,
          "linear shape mismatch x" + tx.shape_str() + " w" + tw.shape_str() + " b" + tb.shape_str());
  Tensor out({B, O});
  for (std::size_t r = 0; r < B; ++r) {
    const double* xr = tx.data() + r * I;
    double* orow = out.data() + r * O;
    for (std::size_t o = 0; o < O; ++o) orow[o] = tb[o];
    for (std::size_t i = 0; i < I; ++i) {
      const double xv = xr[i];
      const double* wr = tw.data() + i * O;
      for (std::size_t o = 0; o < O; ++o) orow[o] += xv * wr[o];
    }
  }
  VarId id = emit(std::move(out), needs(x) || needs(w) || needs(b), {});
  nodes_[id].backprop = [x, w, b, B, I, O, id](Tape& t) {
    const Tensor& go = t.g(id);
    if (t.needs(x)) {
      Tensor& gx = t.g(x);
      const Tensor& vw = t.value(w);
      for (std::size_t r = 0; r < B; ++r) {
        const double* gr = go.data() + r * O;
        double* gxr = gx.data() + r * I;
        for (std::size_t i = 0; i < I; ++i) {
          const double* wr = vw.data() + i * O;
          double acc = 0.0;
          for (std::size_t o = 0; o < O; ++o) acc += gr[o] * wr[o];
          gxr[i] += acc;
        }
      }
    }
    if (t.needs(w)) {
      Tensor& gw = t.g(w);
      const Tensor& vx = t.value(x);
      for (std::size_t r = 0; r < B; ++r) {
        const double* gr = go.data() + r * O;
        const double* xr = vx.data() + r * I;
        for (std::size_t i = 0; i < I; ++i) {
          double* gwr = gw.data() + i * O;
          const double xv = xr[i];
          for (std::size_t o = 0; o < O; ++o) gwr[o] += xv * gr[o];
        }
      }
    }
    if (t.needs(b)) {
      Tensor& gb = t.g(b);
      for (std::size_t r = 0; r < B; ++r) {
        const double* gr = go.data() + r * O;
        for (std::size_t o = 0; o < O; ++o) gb[o] += gr[o];
      }
    }
  };
  return id;
}

VarId Tape::conv2d(VarId x, VarId w, VarId b, const Conv2dSpec& spec) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  const Tensor& tb = value(b);
  require(tx.rank() == 4, "conv2d input must be [B,C,H,W], got " + tx.shape_str());
  require(tx.extent(1) == spec.in_ch, "conv2d: input channels " + std::to_string(tx.extent(1)) +
                                          " != spec " + std::to_string(spec.in_ch));
  require(tw.shape() == std::vector<std::size_t>{spec.out_ch, spec.in_ch, spec.kh, spec.kw},
          "conv2d weight shape mismatch " + tw.shape_str());
  require(tb.shape() == std::vector<std::size_t>{spec.out_ch}, "conv2d bias shape mismatch");
  const std::size_t B = tx.extent(0), H = tx.extent(2), W = tx.extent(3);
  const std::size_t OH = spec.out_h(H), OW = spec.out_w(W);
  Tensor out({B, spec.out_ch, OH, OW});
  const std::ptrdiff_t sH = H, sW = W;
  if (spec.stride == 1) {
    // Row-sweep path: the kw loop becomes long contiguous axpy updates.
    const std::ptrdiff_t pt = spec.pad_top, pl = spec.pad_left;
    for (std::size_t n = 0; n < B; ++n) {
      for (std::size_t oc = 0; oc < spec.out_ch; ++oc) {
        double* oplane = out.data() + (n * spec.out_ch + oc) * OH * OW;
        for (std::size_t j = 0; j < OH * OW; ++j) oplane[j] = tb[oc];
        for (std::size_t ic = 0; ic < spec.in_ch; ++ic) {
          const double* xp = tx.data() + (n * spec.in_ch + ic) * H * W;
          const double* wp = tw.data() + (oc * spec.in_ch + ic) * spec.kh * spec.kw;
          for (std::size_t kh = 0; kh < spec.kh; ++kh) {
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - pt;
              if (ih < 0 || ih >= sH) continue;
              const double* xrow = xp + ih * sW;
              double* orow = oplane + oh * OW;
              for (std::size_t kw = 0; kw < spec.kw; ++kw) {
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kw) - pl;
                const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                const std::size_t hi =
                    std::min<std::ptrdiff_t>(OW, sW - shift);
                const double wv = wp[kh * spec.kw + kw];
                const double* __restrict xr = xrow + shift;
                double* __restrict od = orow;
                for (std::size_t ow = lo; ow < hi; ++ow) od[ow] += wv * xr[ow];
              }
            }
          }
        }
      }
    }
    VarId id = emit(std::move(out), needs(x) || needs(w) || needs(b), {});
    Conv2dSpec sp = spec;
    nodes_[id].backprop = [x, w, b, sp, B, H, W, OH, OW, id](Tape& t) {
      const Tensor& go = t.g(id);
      const bool nx = t.needs(x), nw = t.needs(w), nb = t.needs(b);
      const double* vx = t.value(x).data();
      const double* vw = t.value(w).data();
      double* gx = nx ? t.g(x).data() : nullptr;
      double* gw = nw ? t.g(w).data() : nullptr;
      double* gb = nb ? t.g(b).data() : nullptr;
      const std::ptrdiff_t sH = H, sW = W, pt = sp.pad_top, pl = sp.pad_left;
      for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t oc = 0; oc < sp.out_ch; ++oc) {
          const double* goplane = go.data() + (n * sp.out_ch + oc) * OH * OW;
          if (gb) {
            double s = 0.0;
            for (std::size_t j = 0; j < OH * OW; ++j) s += goplane[j];
            gb[oc] += s;
          }
          for (std::size_t ic = 0; ic < sp.in_ch; ++ic) {
            const double* xp = vx + (n * sp.in_ch + ic) * H * W;
            double* gxp = gx ? gx + (n * sp.in_ch + ic) * H * W : nullptr;
            const std::size_t woff = (oc * sp.in_ch + ic) * sp.kh * sp.kw;
            for (std::size_t kh = 0; kh < sp.kh; ++kh) {
              for (std::size_t oh = 0; oh < OH; ++oh) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - pt;
                if (ih < 0 || ih >= sH) continue;
                const double* gorow = goplane + oh * OW;
                for (std::size_t kw = 0; kw < sp.kw; ++kw) {
                  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kw) - pl;
                  const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                  const std::size_t hi = std::min<std::ptrdiff_t>(OW, sW - shift);
                  const double wv = vw[woff + kh * sp.kw + kw];
                  const std::ptrdiff_t xbase = ih * sW + shift;
                  if (gxp) {
                    double* __restrict gxr = gxp + xbase;
                    const double* __restrict gor = gorow;
                    for (std::size_t ow = lo; ow < hi; ++ow) gxr[ow] += gor[ow] * wv;
                  }
                  if (gw) {
                    const double* __restrict xr = xp + xbase;
                    const double* __restrict gor = gorow;
                    double s = 0.0;
                    for (std::size_t ow = lo; ow < hi; ++ow) s += gor[ow] * xr[ow];
                    gw[woff + kh * sp.kw + kw] += s;
                  }
                }
              }
            }
          }
        }
      }
    };
    return id;
  }
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t oc = 0; oc < spec.out_ch; ++oc) {
      double* orow_base = out.data() + (n * spec.out_ch + oc) * OH * OW;
      for (std::size_t oh = 0; oh < OH; ++oh) {
        const std::ptrdiff_t ih0 =
            static_cast<std::ptrdiff_t>(oh * spec.stride) - static_cast<std::ptrdiff_t>(spec.pad_top);
        const std::size_t kh_lo = ih0 < 0 ? static_cast<std::size_t>(-ih0) : 0;
        const std::size_t kh_hi = std::min<std::ptrdiff_t>(spec.kh, sH - ih0);
        double* orow = orow_base + oh * OW;
        for (std::size_t ow = 0; ow < OW; ++ow) {
          const std::ptrdiff_t iw0 =
              static_cast<std::ptrdiff_t>(ow * spec.stride) - static_cast<std::ptrdiff_t>(spec.pad_left);
          const std::size_t kw_lo = iw0 < 0 ? static_cast<std::size_t>(-iw0) : 0;
          const std::size_t kw_hi = std::min<std::ptrdiff_t>(spec.kw, sW - iw0);
          double acc = tb[oc];
          for (std::size_t ic = 0; ic < spec.in_ch; ++ic) {
            const double* xp = tx.data() + (n * spec.in_ch + ic) * H * W;
            const double* wp = tw.data() + (oc * spec.in_ch + ic) * spec.kh * spec.kw;
            for (std::size_t kh = kh_lo; kh < kh_hi; ++kh) {
              const double* xrow = xp + (ih0 + static_cast<std::ptrdiff_t>(kh)) * sW + iw0;
              const double* wrow = wp + kh * spec.kw;
              for (std::size_t kw = kw_lo; kw < kw_hi; ++kw) acc += xrow[kw] * wrow[kw];
            }
          }
          orow[ow] = acc;
        }
      }
    }
  }
  VarId id = emit(std::move(out), needs(x) || needs(w) || needs(b), {});
  Conv2dSpec sp = spec;
  nodes_[id].backprop = [x, w, b, sp, B, H, W, OH, OW, id](Tape& t) {
    const Tensor& go = t.g(id);
    const bool nx = t.needs(x), nw = t.needs(w), nb = t.needs(b);
    const double* vx = t.value(x).data();
    const double* vw = t.value(w).data();
    double* gx = nx ? t.g(x).data() : nullptr;
    double* gw = nw ? t.g(w).data() : nullptr;
    double* gb = nb ? t.g(b).data() : nullptr;
    const std::ptrdiff_t sH = H, sW = W;
    for (std::size_t n = 0; n < B; ++n) {
      for (std::size_t oc = 0; oc < sp.out_ch; ++oc) {
        const double* gorow_base = go.data() + (n * sp.out_ch + oc) * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const std::ptrdiff_t ih0 =
              static_cast<std::ptrdiff_t>(oh * sp.stride) - static_cast<std::ptrdiff_t>(sp.pad_top);
          const std::size_t kh_lo = ih0 < 0 ? static_cast<std::size_t>(-ih0) : 0;
          const std::size_t kh_hi = std::min<std::ptrdiff_t>(sp.kh, sH - ih0);
          const double* gorow = gorow_base + oh * OW;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const double gv = gorow[ow];
            if (gv == 0.0) continue;
            const std::ptrdiff_t iw0 =
                static_cast<std::ptrdiff_t>(ow * sp.stride) - static_cast<std::ptrdiff_t>(sp.pad_left);
            const std::size_t kw_lo = iw0 < 0 ? static_cast<std::size_t>(-iw0) : 0;
            const std::size_t kw_hi = std::min<std::ptrdiff_t>(sp.kw, sW - iw0);
            if (gb) gb[oc] += gv;
            for (std::size_t ic = 0; ic < sp.in_ch; ++ic) {
              const std::size_t xoff = (n * sp.in_ch + ic) * H * W;
              const std::size_t woff = (oc * sp.in_ch + ic) * sp.kh * sp.kw;
              for (std::size_t kh = kh_lo; kh < kh_hi; ++kh) {
                const std::ptrdiff_t xrow = xoff + (ih0 + static_cast<std::ptrdiff_t>(kh)) * sW + iw0;
                const std::size_t wrow = woff + kh * sp.kw;
                if (gx && gw) {
                  for (std::size_t kw = kw_lo; kw < kw_hi; ++kw) {
                    gx[xrow + kw] += gv * vw[wrow + kw];
                    gw[wrow + kw] += gv * vx[xrow + kw];
                  }
                } else if (gx) {
                  for (std::size_t kw = kw_lo; kw < kw_hi; ++kw) gx[xrow + kw] += gv * vw[wrow + kw];
                } else if (gw) {
                  for (std::size_t kw = kw_lo; kw < kw_hi; ++kw) gw[wrow + kw] += gv * vx[xrow + kw];
                }
              }
            }
          }
        }
      }
    }
  };
  return id;
}

VarId Tape::layer_norm(VarId x, VarId gain, VarId bias, double eps) {
  const Tensor& tx = value(x);
  require(tx.rank() >= 2, "layer_norm input must have a batch dim");
  const std::size_t B = tx.extent(0);
  const std::size_t F = tx.size() / B;
  require(value(gain).size() == F && value(bias).size() == F,
          "layer_norm gain/bias must have " + std::to_string(F) + " elements");
  Tensor out(tx.shape());
  const Tensor& tg = value(gain);
  const Tensor& tb = value(bias);
  // Cache xhat and inv_std per row for backward.
  auto xhat = std::make_shared<std::vector<double>>(tx.size());
  auto inv_std = std::make_shared<std::vector<double>>(B);
  for (std::size_t r = 0; r < B; ++r) {
    const double* xr = tx.data() + r * F;
    double* o = out.data() + r * F;
    double* xh = xhat->data() + r * F;
    double mu = 0.0;
    for (std::size_t i = 0; i < F; ++i) mu += xr[i];
    mu /= static_cast<double>(F);
    double var = 0.0;
    for (std::size_t i = 0; i < F; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(F);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < F; ++i) {
      xh[i] = (xr[i] - mu) * is;
      o[i] = tg[i] * xh[i] + tb[i];
    }
  }
  VarId id = emit(std::move(out), needs(x) || needs(gain) || needs(bias), {});
  nodes_[id].backprop = [x, gain, bias, B, F, xhat, inv_std, id](Tape& t) {
    const Tensor& go = t.g(id);
    const Tensor& vg = t.value(gain);
    for (std::size_t r = 0; r < B; ++r) {
      const double* gr = go.data() + r * F;
      const double* xh = xhat->data() + r * F;
      if (t.needs(gain)) {
        Tensor& gg = t.g(gain);
        for (std::size_t i = 0; i < F; ++i) gg[i] += gr[i] * xh[i];
      }
      if (t.needs(bias)) {
        Tensor& gb = t.g(bias);
        for (std::size_t i = 0; i < F; ++i) gb[i] += gr[i];
      }
      if (t.needs(x)) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t i = 0; i < F; ++i) {
          const double dxh = gr[i] * vg[i];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh /= static_cast<double>(F);
        mean_dxh_xh /= static_cast<double>(F);
        Tensor& gx = t.g(x);
        double* gxr = gx.data() + r * F;
        const double is = (*inv_std)[r];
        for (std::size_t i = 0; i < F; ++i) {
          const double dxh = gr[i] * vg[i];
          gxr[i] += is * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
      }
    }
  };
  return id;
}

VarId Tape::upsample_nearest(VarId x, std::size_t factor) {
  const Tensor& tx = value(x);
  require(tx.rank() == 4, "upsample_nearest input must be [B,C,H,W]");
  require(factor >= 1, "upsample factor must be >= 1");
  const std::size_t B = tx.extent(0), C = tx.extent(1), H = tx.extent(2), W = tx.extent(3);
  Tensor out({B, C, H * factor, W * factor});
  for (std::size_t n = 0; n < B * C; ++n) {
    const double* xp = tx.data() + n * H * W;
    double* op = out.data() + n * H * factor * W * factor;
    for (std::size_t oh = 0; oh < H * factor; ++oh) {
      const std::size_t ih = oh / factor;
      for (std::size_t ow = 0; ow < W * factor; ++ow) {
        op[oh * W * factor + ow] = xp[ih * W + ow / factor];
      }
    }
  }
  VarId id = emit(std::move(out), needs(x), {});
  nodes_[id].backprop = [x, B, C, H, W, factor, id](Tape& t) {
    if (!t.needs(x)) return;
    Tensor& gx = t.g(x);
    const Tensor& go = t.g(id);
    for (std::size_t n = 0; n < B * C; ++n) {
      double* gxp = gx.data() + n * H * W;
      const double* gop = go.data() + n * H * factor * W * factor;
      for (std::size_t oh = 0; oh < H * factor; ++oh) {
        const std::size_t ih = oh / factor;
        for (std::size_t ow = 0; ow < W * factor; ++ow) {
          gxp[ih * W + ow / factor] += gop[oh * W * factor + ow];
        }
      }
    }
  };
  return id;
}

VarId Tape::log_softmax(VarId a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 1, "log_softmax expects a rank-1 tensor");
  double mx = ta[0];
  for (std::size_t i = 1; i < ta.size(); ++i) mx = std::max(mx, ta[i]);
  double lse = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) lse += std::exp(ta[i] - mx);
  lse = mx + std::log(lse);
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] - lse;
  VarId id = emit(std::move(out), needs(a), {});
  nodes_[id].backprop = [a, id](Tape& t) {
    if (!t.needs(a)) return;
    const Tensor& go = t.g(id);
    const Tensor& y = t.value(id);
    double gsum = 0.0;
    for (std::size_t i = 0; i < go.size(); ++i) gsum += go[i];
    Tensor& ga = t.g(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] - std::exp(y[i]) * gsum;
  };
  return id;
}

VarId Tape::weighted_gaussian_nll(VarId psi, const Tensor& x, const Tensor& eta, double sigma2) {
  const Tensor& tp = value(psi);
  require(tp.rank() == 2, "weighted_gaussian_nll psi must be [K,D]");
  const std::size_t K = tp.extent(0), D = tp.extent(1);
  require(x.size() == D, "weighted_gaussian_nll x size mismatch");
  require(eta.shape() == std::vector<std::size_t>{D, K}, "weighted_gaussian_nll eta must be [D,K]");
  require(sigma2 > 0.0, "sigma2 must be positive");
  const double log_norm = 0.5 * (kLog2Pi + std::log(sigma2));
  double acc = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double* pk = tp.data() + k * D;
    for (std::size_t i = 0; i < D; ++i) {
      const double r = x[i] - pk[i];
      acc += eta[i * K + k] * (log_norm + r * r / (2.0 * sigma2));
    }
  }
  VarId id = emit(Tensor::scalar(acc), needs(psi), {});
  auto xc = std::make_shared<Tensor>(x);
  auto etac = std::make_shared<Tensor>(eta);
  nodes_[id].backprop = [psi, xc, etac, sigma2, K, D, id](Tape& t) {
    if (!t.needs(psi)) return;
    const double gv = t.g(id)[0];
    Tensor& gp = t.g(psi);
    const Tensor& vp = t.value(psi);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < D; ++i) {
        // d/dpsi of eta*(x-psi)^2/(2s2) = eta*(psi-x)/s2
        gp[k * D + i] += gv * (*etac)[i * K + k] * (vp[k * D + i] - (*xc)[i]) / sigma2;
      }
    }
  };
  return id;
}

GradMap Tape::backward(VarId root) {
  require(value(root).size() == 1, "backward root must be a scalar");
  grads_.assign(nodes_.size(), Tensor());
  for (std::size_t i = 0; i <= root; ++i) {
    if (nodes_[i].needs_grad) grads_[i] = Tensor::zeros_like(nodes_[i].value);
  }
  if (nodes_[root].needs_grad) {
    grads_[root][0] = 1.0;
    for (std::size_t i = root + 1; i-- > 0;) {
      if (!nodes_[i].needs_grad || !nodes_[i].backprop) continue;
      // A node whose accumulated output gradient is exactly zero contributes
      // nothing downstream; skipping it makes backward() of a late root cheap.
      const Tensor& g = grads_[i];
      bool zero = true;
      for (std::size_t j = 0; j < g.size() && zero; ++j) zero = g[j] == 0.0;
      if (!zero) nodes_[i].backprop(*this);
    }
  }
  GradMap out;
  for (const auto& [name, id] : params_) {
    out.emplace(name, grads_[id].size() ? grads_[id] : Tensor::zeros_like(nodes_[id].value));
  }
  return out;
}

}  // namespace opc
