#include "hmnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "hmnas/error.hpp"

namespace hmnas::ops {
namespace {

using Inputs = std::span<const Tensor* const>;

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw RankError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

struct Dims4 {
  int n, c, h, w;
  explicit Dims4(const Tensor& t) : n(t.dim(0)), c(t.dim(1)), h(t.dim(2)), w(t.dim(3)) {}
};

class AddOp final : public Primitive {
 public:
  std::string_view kind() const override { return "add"; }
  Tensor forward(Inputs in) override {
    Tensor out = *in[0];
    for (std::size_t k = 1; k < in.size(); ++k) out += *in[k];
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    return std::vector<Tensor>(in.size(), g);
  }
};

class MulOp final : public Primitive {
 public:
  std::string_view kind() const override { return "mul"; }
  Tensor forward(Inputs in) override {
    Tensor out = *in[0];
    const Tensor& b = *in[1];
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] *= (*in[1])[i];
      gb[i] *= (*in[0])[i];
    }
    return {std::move(ga), std::move(gb)};
  }
};

class ScaleOp final : public Primitive {
 public:
  std::string_view kind() const override { return "scale"; }
  Tensor forward(Inputs in) override {
    Tensor out = *in[0];
    out *= (*in[1])[0];
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    Tensor gx = g;
    gx *= (*in[1])[0];
    double gs = 0.0;
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < g.numel(); ++i) gs += g[i] * x[i];
    return {std::move(gx), Tensor(in[1]->shape(), gs)};
  }
};

class MulConstOp final : public Primitive {
 public:
  explicit MulConstOp(double c) : c_(c) {}
  std::string_view kind() const override { return "mul_const"; }
  Tensor forward(Inputs in) override {
    Tensor out = *in[0];
    out *= c_;
    return out;
  }
  std::vector<Tensor> backward(Inputs, const Tensor&, const Tensor& g) const override {
    Tensor gx = g;
    gx *= c_;
    return {std::move(gx)};
  }

 private:
  double c_;
};

class SumOp final : public Primitive {
 public:
  std::string_view kind() const override { return "sum"; }
  Tensor forward(Inputs in) override { return Tensor::scalar(in[0]->sum()); }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    return {Tensor(in[0]->shape(), g[0])};
  }
};

class ReluOp final : public Primitive {
 public:
  std::string_view kind() const override { return "relu"; }
  Tensor forward(Inputs in) override {
    Tensor out = *in[0];
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    Tensor gx = g;
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      if (!(x[i] > 0.0)) gx[i] = 0.0;
    }
    return {std::move(gx)};
  }
};

// Valid output range [lo, hi) along one axis for a given kernel tap offset.
struct TapRange {
  int lo, hi;
};

TapRange tap_range(int out_size, int in_size, int stride, int offset) {
  // input index = o * stride + offset must lie in [0, in_size)
  int lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  int hi_incl = (in_size - 1 - offset);
  int hi = hi_incl < 0 ? 0 : hi_incl / stride + 1;
  hi = std::min(hi, out_size);
  return {lo, std::max(lo, hi)};
}

class Conv2dOp final : public Primitive {
 public:
  explicit Conv2dOp(Conv2dOptions opt) : opt_(opt) {}
  std::string_view kind() const override { return "conv2d"; }

  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    Dims4 xd(x);
    const int cout = w.dim(0), cin_g = w.dim(1), k = w.dim(2);
    const int ho = conv_out_size(xd.h, k, opt_), wo = conv_out_size(xd.w, k, opt_);
    const int cout_g = cout / opt_.groups;
    Tensor out({xd.n, cout, ho, wo}, 0.0);
    for (int n = 0; n < xd.n; ++n) {
      for (int oc = 0; oc < cout; ++oc) {
        const int g = oc / cout_g;
        double* o = &out.at4(n, oc, 0, 0);
        for (int icg = 0; icg < cin_g; ++icg) {
          const int ic = g * cin_g + icg;
          const double* xp = &x.at4(n, ic, 0, 0);
          for (int kh = 0; kh < k; ++kh) {
            const int offh = kh * opt_.dilation - opt_.padding;
            const TapRange rh = tap_range(ho, xd.h, opt_.stride, offh);
            for (int kw = 0; kw < k; ++kw) {
              const int offw = kw * opt_.dilation - opt_.padding;
              const TapRange rw = tap_range(wo, xd.w, opt_.stride, offw);
              const double wv = w.at4(oc, icg, kh, kw);
              for (int oh = rh.lo; oh < rh.hi; ++oh) {
                const double* xr = xp + static_cast<std::size_t>(oh * opt_.stride + offh) * xd.w;
                double* orow = o + static_cast<std::size_t>(oh) * wo;
                for (int ow = rw.lo; ow < rw.hi; ++ow) orow[ow] += wv * xr[ow * opt_.stride + offw];
              }
            }
          }
        }
      }
    }
    return out;
  }

  std::vector<Tensor> backward(Inputs in, const Tensor& out, const Tensor& g) const override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    Dims4 xd(x);
    const int cout = w.dim(0), cin_g = w.dim(1), k = w.dim(2);
    const int ho = out.dim(2), wo = out.dim(3);
    const int cout_g = cout / opt_.groups;
    Tensor gx(x.shape(), 0.0);
    Tensor gw(w.shape(), 0.0);
    for (int n = 0; n < xd.n; ++n) {
      for (int oc = 0; oc < cout; ++oc) {
        const int grp = oc / cout_g;
        const double* go = &g.at4(n, oc, 0, 0);
        for (int icg = 0; icg < cin_g; ++icg) {
          const int ic = grp * cin_g + icg;
          const double* xp = &x.at4(n, ic, 0, 0);
          double* gxp = &gx.at4(n, ic, 0, 0);
          for (int kh = 0; kh < k; ++kh) {
            const int offh = kh * opt_.dilation - opt_.padding;
            const TapRange rh = tap_range(ho, xd.h, opt_.stride, offh);
            for (int kw = 0; kw < k; ++kw) {
              const int offw = kw * opt_.dilation - opt_.padding;
              const TapRange rw = tap_range(wo, xd.w, opt_.stride, offw);
              const double wv = w.at4(oc, icg, kh, kw);
              double acc = 0.0;
              for (int oh = rh.lo; oh < rh.hi; ++oh) {
                const std::size_t xrow = static_cast<std::size_t>(oh * opt_.stride + offh) * xd.w;
                const double* grow = go + static_cast<std::size_t>(oh) * wo;
                for (int ow = rw.lo; ow < rw.hi; ++ow) {
                  const std::size_t xi = xrow + ow * opt_.stride + offw;
                  acc += grow[ow] * xp[xi];
                  gxp[xi] += grow[ow] * wv;
                }
              }
              gw.at4(oc, icg, kh, kw) += acc;
            }
          }
        }
      }
    }
    return {std::move(gx), std::move(gw)};
  }

 private:
  Conv2dOptions opt_;
};

class BatchNormOp final : public Primitive {
 public:
  BatchNormOp(bool training, bool affine, const Tensor* rm, const Tensor* rv)
      : training_(training), affine_(affine) {
    if (!training_) {
      running_mean_ = *rm;
      running_var_ = *rv;
    }
  }
  std::string_view kind() const override { return "batch_norm"; }

  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    Dims4 d(x);
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    const double count = static_cast<double>(d.n) * plane;
    mean_ = Tensor({d.c}, 0.0);
    var_ = Tensor({d.c}, 0.0);
    if (training_) {
      for (int c = 0; c < d.c; ++c) {
        double s = 0.0;
        for (int n = 0; n < d.n; ++n) {
          const double* p = &x.at4(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        const double m = s / count;
        double v = 0.0;
        for (int n = 0; n < d.n; ++n) {
          const double* p = &x.at4(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
        }
        mean_[c] = m;
        var_[c] = v / count;
      }
    } else {
      mean_ = running_mean_;
      var_ = running_var_;
    }
    xhat_ = Tensor(x.shape(), 0.0);
    Tensor out(x.shape(), 0.0);
    for (int c = 0; c < d.c; ++c) {
      const double inv = 1.0 / std::sqrt(var_[c] + kBatchNormEps);
      const double ga = affine_ ? (*in[1])[c] : 1.0;
      const double be = affine_ ? (*in[2])[c] : 0.0;
      for (int n = 0; n < d.n; ++n) {
        const double* p = &x.at4(n, c, 0, 0);
        double* xh = &xhat_.at4(n, c, 0, 0);
        double* o = &out.at4(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          xh[i] = (p[i] - mean_[c]) * inv;
          o[i] = xh[i] * ga + be;
        }
      }
    }
    return out;
  }

  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    const Tensor& x = *in[0];
    Dims4 d(x);
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    const double count = static_cast<double>(d.n) * plane;
    Tensor gx(x.shape(), 0.0);
    Tensor ggamma({d.c}, 0.0), gbeta({d.c}, 0.0);
    for (int c = 0; c < d.c; ++c) {
      const double inv = 1.0 / std::sqrt(var_[c] + kBatchNormEps);
      const double ga = affine_ ? (*in[1])[c] : 1.0;
      double sg = 0.0, sgx = 0.0;
      for (int n = 0; n < d.n; ++n) {
        const double* gp = &g.at4(n, c, 0, 0);
        const double* xh = &xhat_.at4(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sg += gp[i];
          sgx += gp[i] * xh[i];
        }
      }
      ggamma[c] = sgx;
      gbeta[c] = sg;
      for (int n = 0; n < d.n; ++n) {
        const double* gp = &g.at4(n, c, 0, 0);
        const double* xh = &xhat_.at4(n, c, 0, 0);
        double* gxp = &gx.at4(n, c, 0, 0);
        if (training_) {
          for (std::size_t i = 0; i < plane; ++i) {
            gxp[i] = ga * inv * (gp[i] - sg / count - xh[i] * sgx / count);
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) gxp[i] = ga * inv * gp[i];
        }
      }
    }
    if (!affine_) return {std::move(gx)};
    return {std::move(gx), std::move(ggamma), std::move(gbeta)};
  }

  const Tensor& mean() const { return mean_; }
  const Tensor& var() const { return var_; }

 private:
  bool training_;
  bool affine_;
  Tensor running_mean_, running_var_;
  Tensor mean_, var_, xhat_;
};

class MaxPoolOp final : public Primitive {
 public:
  explicit MaxPoolOp(int stride) : stride_(stride) {}
  std::string_view kind() const override { return "max_pool3x3"; }
  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    Dims4 d(x);
    Conv2dOptions o{stride_, 1, 1, 1};
    const int ho = conv_out_size(d.h, 3, o), wo = conv_out_size(d.w, 3, o);
    Tensor out({d.n, d.c, ho, wo}, 0.0);
    argmax_.assign(out.numel(), 0);
    std::size_t idx = 0;
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < d.c; ++c) {
        for (int oh = 0; oh < ho; ++oh) {
          for (int ow = 0; ow < wo; ++ow, ++idx) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (int kh = 0; kh < 3; ++kh) {
              const int ih = oh * stride_ - 1 + kh;
              if (ih < 0 || ih >= d.h) continue;
              for (int kw = 0; kw < 3; ++kw) {
                const int iw = ow * stride_ - 1 + kw;
                if (iw < 0 || iw >= d.w) continue;
                const std::size_t xi = ((static_cast<std::size_t>(n) * d.c + c) * d.h + ih) * d.w + iw;
                if (x[xi] > best) {
                  best = x[xi];
                  arg = xi;
                }
              }
            }
            out[idx] = best;
            argmax_[idx] = arg;
          }
        }
      }
    }
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    Tensor gx(in[0]->shape(), 0.0);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[argmax_[i]] += g[i];
    return {std::move(gx)};
  }

 private:
  int stride_;
  std::vector<std::size_t> argmax_;
};

class AvgPoolOp final : public Primitive {
 public:
  explicit AvgPoolOp(int stride) : stride_(stride) {}
  std::string_view kind() const override { return "avg_pool3x3"; }
  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    Dims4 d(x);
    Conv2dOptions o{stride_, 1, 1, 1};
    const int ho = conv_out_size(d.h, 3, o), wo = conv_out_size(d.w, 3, o);
    Tensor out({d.n, d.c, ho, wo}, 0.0);
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < d.c; ++c) {
        for (int oh = 0; oh < ho; ++oh) {
          for (int ow = 0; ow < wo; ++ow) {
            double s = 0.0;
            int cnt = 0;
            for (int kh = 0; kh < 3; ++kh) {
              const int ih = oh * stride_ - 1 + kh;
              if (ih < 0 || ih >= d.h) continue;
              for (int kw = 0; kw < 3; ++kw) {
                const int iw = ow * stride_ - 1 + kw;
                if (iw < 0 || iw >= d.w) continue;
                s += x.at4(n, c, ih, iw);
                ++cnt;
              }
            }
            out.at4(n, c, oh, ow) = s / cnt;
          }
        }
      }
    }
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor& out, const Tensor& g) const override {
    Dims4 d(*in[0]);
    Tensor gx(in[0]->shape(), 0.0);
    const int ho = out.dim(2), wo = out.dim(3);
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < d.c; ++c) {
        for (int oh = 0; oh < ho; ++oh) {
          for (int ow = 0; ow < wo; ++ow) {
            const int h0 = std::max(0, oh * stride_ - 1), h1 = std::min(d.h, oh * stride_ + 2);
            const int w0 = std::max(0, ow * stride_ - 1), w1 = std::min(d.w, ow * stride_ + 2);
            const double share = g.at4(n, c, oh, ow) / ((h1 - h0) * (w1 - w0));
            for (int ih = h0; ih < h1; ++ih) {
              for (int iw = w0; iw < w1; ++iw) gx.at4(n, c, ih, iw) += share;
            }
          }
        }
      }
    }
    return {std::move(gx)};
  }

 private:
  int stride_;
};

class SubsampleOp final : public Primitive {
 public:
  explicit SubsampleOp(int stride) : stride_(stride) {}
  std::string_view kind() const override { return "subsample"; }
  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    Dims4 d(x);
    const int ho = (d.h + stride_ - 1) / stride_, wo = (d.w + stride_ - 1) / stride_;
    Tensor out({d.n, d.c, ho, wo}, 0.0);
    for (int n = 0; n < d.n; ++n)
      for (int c = 0; c < d.c; ++c)
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) out.at4(n, c, oh, ow) = x.at4(n, c, oh * stride_, ow * stride_);
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor& out, const Tensor& g) const override {
    Tensor gx(in[0]->shape(), 0.0);
    Dims4 od(out);
    for (int n = 0; n < od.n; ++n)
      for (int c = 0; c < od.c; ++c)
        for (int oh = 0; oh < od.h; ++oh)
          for (int ow = 0; ow < od.w; ++ow) gx.at4(n, c, oh * stride_, ow * stride_) = g.at4(n, c, oh, ow);
    return {std::move(gx)};
  }

 private:
  int stride_;
};

class GlobalAvgPoolOp final : public Primitive {
 public:
  std::string_view kind() const override { return "global_avg_pool"; }
  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    Dims4 d(x);
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    Tensor out({d.n, d.c}, 0.0);
    for (int n = 0; n < d.n; ++n)
      for (int c = 0; c < d.c; ++c) {
        const double* p = &x.at4(n, c, 0, 0);
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        out[static_cast<std::size_t>(n) * d.c + c] = s / static_cast<double>(plane);
      }
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    Dims4 d(*in[0]);
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    Tensor gx(in[0]->shape(), 0.0);
    for (int n = 0; n < d.n; ++n)
      for (int c = 0; c < d.c; ++c) {
        const double v = g[static_cast<std::size_t>(n) * d.c + c] / static_cast<double>(plane);
        double* p = &gx.at4(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) p[i] = v;
      }
    return {std::move(gx)};
  }
};

class LinearOp final : public Primitive {
 public:
  std::string_view kind() const override { return "linear"; }
  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const Tensor& b = *in[2];
    const int bsz = x.dim(0), f = x.dim(1), o = w.dim(0);
    Tensor out({bsz, o}, 0.0);
    for (int i = 0; i < bsz; ++i)
      for (int j = 0; j < o; ++j) {
        double s = b[j];
        for (int k = 0; k < f; ++k) s += x[static_cast<std::size_t>(i) * f + k] * w[static_cast<std::size_t>(j) * f + k];
        out[static_cast<std::size_t>(i) * o + j] = s;
      }
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const int bsz = x.dim(0), f = x.dim(1), o = w.dim(0);
    Tensor gx(x.shape(), 0.0), gw(w.shape(), 0.0), gb(in[2]->shape(), 0.0);
    for (int i = 0; i < bsz; ++i)
      for (int j = 0; j < o; ++j) {
        const double gij = g[static_cast<std::size_t>(i) * o + j];
        gb[j] += gij;
        for (int k = 0; k < f; ++k) {
          gx[static_cast<std::size_t>(i) * f + k] += gij * w[static_cast<std::size_t>(j) * f + k];
          gw[static_cast<std::size_t>(j) * f + k] += gij * x[static_cast<std::size_t>(i) * f + k];
        }
      }
    return {std::move(gx), std::move(gw), std::move(gb)};
  }
};

class ConcatChannelsOp final : public Primitive {
 public:
  std::string_view kind() const override { return "concat_channels"; }
  Tensor forward(Inputs in) override {
    Dims4 d0(*in[0]);
    int ctotal = 0;
    for (const Tensor* t : in) ctotal += t->dim(1);
    Tensor out({d0.n, ctotal, d0.h, d0.w}, 0.0);
    const std::size_t plane = static_cast<std::size_t>(d0.h) * d0.w;
    for (int n = 0; n < d0.n; ++n) {
      int coff = 0;
      for (const Tensor* t : in) {
        const int c = t->dim(1);
        std::copy_n(&t->at4(n, 0, 0, 0), plane * c, &out.at4(n, coff, 0, 0));
        coff += c;
      }
    }
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    Dims4 d0(*in[0]);
    const std::size_t plane = static_cast<std::size_t>(d0.h) * d0.w;
    std::vector<Tensor> grads;
    for (const Tensor* t : in) grads.emplace_back(t->shape(), 0.0);
    for (int n = 0; n < d0.n; ++n) {
      int coff = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const int c = in[k]->dim(1);
        std::copy_n(&g.at4(n, coff, 0, 0), plane * c, &grads[k].at4(n, 0, 0, 0));
        coff += c;
      }
    }
    return grads;
  }
};

class SoftmaxOp final : public Primitive {
 public:
  std::string_view kind() const override { return "softmax"; }
  Tensor forward(Inputs in) override {
    const Tensor& x = *in[0];
    const int cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    Tensor out = x;
    for (std::size_t r = 0; r < rows; ++r) {
      double* p = out.data().data() + r * cols;
      double m = p[0];
      for (int j = 1; j < cols; ++j) m = std::max(m, p[j]);
      double s = 0.0;
      for (int j = 0; j < cols; ++j) {
        p[j] = std::exp(p[j] - m);
        s += p[j];
      }
      for (int j = 0; j < cols; ++j) p[j] /= s;
    }
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor& y, const Tensor& g) const override {
    const int cols = in[0]->shape().back();
    const std::size_t rows = y.numel() / cols;
    Tensor gx(y.shape(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += g[base + j] * y[base + j];
      for (int j = 0; j < cols; ++j) gx[base + j] = y[base + j] * (g[base + j] - dot);
    }
    return {std::move(gx)};
  }
};

class CrossEntropyOp final : public Primitive {
 public:
  explicit CrossEntropyOp(std::vector<int> labels) : labels_(std::move(labels)) {}
  std::string_view kind() const override { return "cross_entropy"; }
  Tensor forward(Inputs in) override {
    const Tensor& z = *in[0];
    const int b = z.dim(0), k = z.dim(1);
    probs_ = Tensor(z.shape(), 0.0);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
      const double* zi = z.data().data() + static_cast<std::size_t>(i) * k;
      double m = zi[0];
      for (int j = 1; j < k; ++j) m = std::max(m, zi[j]);
      double s = 0.0;
      for (int j = 0; j < k; ++j) s += std::exp(zi[j] - m);
      const double lse = m + std::log(s);
      for (int j = 0; j < k; ++j) probs_[static_cast<std::size_t>(i) * k + j] = std::exp(zi[j] - lse);
      total += lse - zi[labels_[i]];
    }
    return Tensor::scalar(total / b);
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    const int b = in[0]->dim(0), k = in[0]->dim(1);
    Tensor gz = probs_;
    for (int i = 0; i < b; ++i) gz[static_cast<std::size_t>(i) * k + labels_[i]] -= 1.0;
    gz *= g[0] / b;
    return {std::move(gz)};
  }

 private:
  std::vector<int> labels_;
  Tensor probs_;
};

class SliceOp final : public Primitive {
 public:
  SliceOp(std::size_t offset, Shape out_shape) : offset_(offset), out_shape_(std::move(out_shape)) {}
  std::string_view kind() const override { return "slice"; }
  Tensor forward(Inputs in) override {
    const std::size_t n = shape_numel(out_shape_);
    std::vector<double> v(in[0]->data().begin() + offset_, in[0]->data().begin() + offset_ + n);
    return Tensor(out_shape_, std::move(v));
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    Tensor gx(in[0]->shape(), 0.0);
    std::copy(g.data().begin(), g.data().end(), gx.data().begin() + offset_);
    return {std::move(gx)};
  }

 private:
  std::size_t offset_;
  Shape out_shape_;
};

class NormalizeOp final : public Primitive {
 public:
  std::string_view kind() const override { return "normalize"; }
  Tensor forward(Inputs in) override {
    const double s = in[0]->sum();
    if (s == 0.0) throw NumericError("normalize: zero sum");
    Tensor out = *in[0];
    for (double& v : out.data()) v /= s;
    return out;
  }
  std::vector<Tensor> backward(Inputs in, const Tensor&, const Tensor& g) const override {
    const Tensor& v = *in[0];
    const double s = v.sum();
    double gv = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) gv += g[i] * v[i];
    Tensor gx(v.shape(), 0.0);
    for (std::size_t i = 0; i < v.numel(); ++i) gx[i] = g[i] / s - gv / (s * s);
    return {std::move(gx)};
  }
};

Tape& tape_of(const Var& v, std::string_view op) {
  if (!v.valid()) throw ProvenanceError(std::string(op) + ": unbound input");
  return *v.tape();
}

}  // namespace

int conv_out_size(int in, int kernel, const Conv2dOptions& opt) {
  return (in + 2 * opt.padding - opt.dilation * (kernel - 1) - 1) / opt.stride + 1;
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a.value(), b.value());
  return tape_of(a, "add").apply(std::make_shared<AddOp>(), {a, b});
}

Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("add_n: no inputs");
  for (const Var& v : xs) require_same_shape("add_n", xs[0].value(), v.value());
  if (xs.size() == 1) return xs[0];
  return tape_of(xs[0], "add_n").apply(std::make_shared<AddOp>(), xs);
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a.value(), b.value());
  return tape_of(a, "mul").apply(std::make_shared<MulOp>(), {a, b});
}

Var scale(const Var& x, const Var& s) {
  if (s.value().numel() != 1) throw RankError("scale: factor must hold one element, got " + shape_str(s.shape()));
  return tape_of(x, "scale").apply(std::make_shared<ScaleOp>(), {x, s});
}

Var mul_const(const Var& x, double c) { return tape_of(x, "mul_const").apply(std::make_shared<MulConstOp>(c), {x}); }

Var sum(const Var& x) { return tape_of(x, "sum").apply(std::make_shared<SumOp>(), {x}); }

Var relu(const Var& x) { return tape_of(x, "relu").apply(std::make_shared<ReluOp>(), {x}); }

Var conv2d(const Var& x, const Var& w, const Conv2dOptions& opt) {
  require_rank("conv2d input", x.value(), 4);
  require_rank("conv2d weight", w.value(), 4);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (opt.groups <= 0 || opt.stride <= 0 || opt.dilation <= 0 || opt.padding < 0) {
    throw ShapeError("conv2d: invalid options");
  }
  if (wv.dim(2) != wv.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(wv.shape()));
  if (xv.dim(1) % opt.groups != 0 || wv.dim(0) % opt.groups != 0 || wv.dim(1) * opt.groups != xv.dim(1)) {
    throw ShapeError("conv2d: weight " + shape_str(wv.shape()) + " incompatible with input " +
                     shape_str(xv.shape()) + " for groups=" + std::to_string(opt.groups));
  }
  if (conv_out_size(xv.dim(2), wv.dim(2), opt) <= 0 || conv_out_size(xv.dim(3), wv.dim(2), opt) <= 0) {
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " too small for kernel");
  }
  return tape_of(x, "conv2d").apply(std::make_shared<Conv2dOp>(opt), {x, w});
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, bool training, const Tensor* running_mean,
               const Tensor* running_var, BatchStats* batch_stats) {
  require_rank("batch_norm", x.value(), 4);
  const int c = x.value().dim(1);
  const bool affine = gamma.valid();
  if (affine != beta.valid()) throw ShapeError("batch_norm: gamma and beta must be given together");
  if (affine && (gamma.shape() != Shape{c} || beta.shape() != Shape{c})) {
    throw ShapeError("batch_norm: affine parameters must have shape (" + std::to_string(c) + ")");
  }
  if (!training) {
    if (!running_mean || !running_var) throw ShapeError("batch_norm: eval mode requires running statistics");
    if (running_mean->shape() != Shape{c} || running_var->shape() != Shape{c}) {
      throw ShapeError("batch_norm: running statistics must have shape (" + std::to_string(c) + ")");
    }
  }
  auto prim = std::make_shared<BatchNormOp>(training, affine, running_mean, running_var);
  Tape& t = tape_of(x, "batch_norm");
  Var out = affine ? t.apply(prim, {x, gamma, beta}) : t.apply(prim, {x});
  if (batch_stats) *batch_stats = BatchStats{prim->mean(), prim->var()};
  return out;
}

Var max_pool3x3(const Var& x, int stride) {
  require_rank("max_pool3x3", x.value(), 4);
  return tape_of(x, "max_pool3x3").apply(std::make_shared<MaxPoolOp>(stride), {x});
}

Var avg_pool3x3(const Var& x, int stride) {
  require_rank("avg_pool3x3", x.value(), 4);
  return tape_of(x, "avg_pool3x3").apply(std::make_shared<AvgPoolOp>(stride), {x});
}

Var subsample(const Var& x, int stride) {
  require_rank("subsample", x.value(), 4);
  if (stride == 1) return x;
  return tape_of(x, "subsample").apply(std::make_shared<SubsampleOp>(stride), {x});
}

Var global_avg_pool(const Var& x) {
  require_rank("global_avg_pool", x.value(), 4);
  return tape_of(x, "global_avg_pool").apply(std::make_shared<GlobalAvgPoolOp>(), {x});
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank("linear input", x.value(), 2);
  require_rank("linear weight", w.value(), 2);
  require_rank("linear bias", b.value(), 1);
  if (w.value().dim(1) != x.value().dim(1) || b.value().dim(0) != w.value().dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) + ", bias " +
                     shape_str(b.shape()) + " are incompatible");
  }
  return tape_of(x, "linear").apply(std::make_shared<LinearOp>(), {x, w, b});
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const Var& v : xs) {
    require_rank("concat_channels", v.value(), 4);
    const Shape& a = xs[0].shape();
    const Shape& b = v.shape();
    if (a[0] != b[0] || a[2] != b[2] || a[3] != b[3]) {
      throw ShapeError("concat_channels: " + shape_str(a) + " vs " + shape_str(b));
    }
  }
  return tape_of(xs[0], "concat_channels").apply(std::make_shared<ConcatChannelsOp>(), xs);
}

Var softmax(const Var& x) {
  if (x.value().rank() != 1 && x.value().rank() != 2) {
    throw RankError("softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
  }
  return tape_of(x, "softmax").apply(std::make_shared<SoftmaxOp>(), {x});
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits.value(), 2);
  const int b = logits.value().dim(0), k = logits.value().dim(1);
  if (static_cast<int>(labels.size()) != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(b));
  }
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw RangeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  return tape_of(logits, "cross_entropy")
      .apply(std::make_shared<CrossEntropyOp>(std::vector<int>(labels.begin(), labels.end())), {logits});
}

Var select(const Var& v, int index) {
  require_rank("select", v.value(), 1);
  if (index < 0 || index >= v.value().dim(0)) throw RangeError("select: index out of range");
  return tape_of(v, "select").apply(std::make_shared<SliceOp>(index, Shape{1}), {v});
}

Var row(const Var& m, int r) {
  require_rank("row", m.value(), 2);
  if (r < 0 || r >= m.value().dim(0)) throw RangeError("row: index out of range");
  const int cols = m.value().dim(1);
  return tape_of(m, "row").apply(std::make_shared<SliceOp>(static_cast<std::size_t>(r) * cols, Shape{cols}), {m});
}

Var slice(const Var& v, int begin, int end) {
  require_rank("slice", v.value(), 1);
  if (begin < 0 || end > v.value().dim(0) || begin >= end) throw RangeError("slice: bad range");
  return tape_of(v, "slice").apply(std::make_shared<SliceOp>(begin, Shape{end - begin}), {v});
}

Var normalize(const Var& v) {
  require_rank("normalize", v.value(), 1);
  return tape_of(v, "normalize").apply(std::make_shared<NormalizeOp>(), {v});
}

Var aux_forward(AuxOp op, std::span<const Var> inputs, std::span<const int> labels) {
  auto need = [&](std::size_t n, const char* name) {
    if (inputs.size() != n) {
      throw ShapeError(std::string("aux_forward(") + name + "): expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (op) {
    case AuxOp::relu: need(1, "relu"); return relu(inputs[0]);
    case AuxOp::batch_norm:
      need(3, "batch_norm");
      return batch_norm(inputs[0], inputs[1], inputs[2], true, nullptr, nullptr);
    case AuxOp::linear: need(3, "linear"); return linear(inputs[0], inputs[1], inputs[2]);
    case AuxOp::concat_channels: return concat_channels(inputs);
    case AuxOp::softmax: need(1, "softmax"); return softmax(inputs[0]);
    case AuxOp::cross_entropy: need(1, "cross_entropy"); return cross_entropy(inputs[0], labels);
  }
  throw ShapeError("aux_forward: unknown op");
}

}  // namespace hmnas::ops
