#include "dce/nn/tensor.hpp"

#include <cmath>

namespace dce::nn {

namespace {

void require_rank(const Tensor& t, size_t rank, const char* op) {
    if (t.shape().size() != rank)
        throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) +
                            ", got " + shape_str(t.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad,
              int dilation) {
    require_rank(x, 4, "conv2d");
    require_rank(weight, 4, "conv2d weight");
    require_rank(bias, 1, "conv2d bias");
    const int n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const int cout = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
    if (weight.shape()[1] != cin)
        throw ShapeMismatch("conv2d: weight in-channels " + std::to_string(weight.shape()[1]) +
                            " != input channels " + std::to_string(cin));
    if (bias.shape()[0] != cout) throw ShapeMismatch("conv2d: bias size != out channels");
    if (stride < 1 || dilation < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad/dilation");
    const int oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    const int ow = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw ShapeMismatch("conv2d: input " + shape_str(x.shape()) + " too small for kernel");

    const int s = stride, d = dilation, p = pad;
    auto backward = [=](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& go = self.grad;
        const auto& xv = px.value;
        const auto& wv = pw.value;
        if (px.requires_grad) {
            px.ensure_grad();
            // gather form: each input element is owned by exactly one iteration
#pragma omp parallel for collapse(2) schedule(static)
            for (int b = 0; b < n; ++b)
                for (int ic = 0; ic < cin; ++ic)
                    for (int iy = 0; iy < h; ++iy)
                        for (int ix = 0; ix < w; ++ix) {
                            double acc = 0;
                            for (int oc = 0; oc < cout; ++oc)
                                for (int ky = 0; ky < kh; ++ky) {
                                    const int ny = iy + p - ky * d;
                                    if (ny < 0 || ny % s || ny / s >= oh) continue;
                                    const int oy = ny / s;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        const int nx = ix + p - kx * d;
                                        if (nx < 0 || nx % s || nx / s >= ow) continue;
                                        const int ox = nx / s;
                                        acc += go[((static_cast<size_t>(b) * cout + oc) * oh + oy) * ow + ox] *
                                               wv[((static_cast<size_t>(oc) * cin + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            px.grad[((static_cast<size_t>(b) * cin + ic) * h + iy) * w + ix] += acc;
                        }
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
            for (int oc = 0; oc < cout; ++oc)
                for (int ic = 0; ic < cin; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            double acc = 0;
                            for (int b = 0; b < n; ++b)
                                for (int oy = 0; oy < oh; ++oy) {
                                    const int iy = oy * s - p + ky * d;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int ox = 0; ox < ow; ++ox) {
                                        const int ix = ox * s - p + kx * d;
                                        if (ix < 0 || ix >= w) continue;
                                        acc += go[((static_cast<size_t>(b) * cout + oc) * oh + oy) * ow + ox] *
                                               xv[((static_cast<size_t>(b) * cin + ic) * h + iy) * w + ix];
                                    }
                                }
                            pw.grad[((static_cast<size_t>(oc) * cin + ic) * kh + ky) * kw + kx] += acc;
                        }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int oc = 0; oc < cout; ++oc) {
                double acc = 0;
                for (int b = 0; b < n; ++b)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox)
                            acc += go[((static_cast<size_t>(b) * cout + oc) * oh + oy) * ow + ox];
                pb.grad[oc] += acc;
            }
        }
    };

    Tensor out = make_op({n, cout, oh, ow}, {x, weight, bias}, backward);
    const auto& xv = x.data();
    const auto& wv = weight.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < n; ++b)
        for (int oc = 0; oc < cout; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bv[oc];
                    for (int ic = 0; ic < cin; ++ic)
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = oy * s - p + ky * d;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ox * s - p + kx * d;
                                if (ix < 0 || ix >= w) continue;
                                acc += xv[((static_cast<size_t>(b) * cin + ic) * h + iy) * w + ix] *
                                       wv[((static_cast<size_t>(oc) * cin + ic) * kh + ky) * kw + kx];
                            }
                        }
                    ov[((static_cast<size_t>(b) * cout + oc) * oh + oy) * ow + ox] = acc;
                }
    return out;
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank(x, 4, "instance_norm");
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
        throw ShapeMismatch("instance_norm: affine parameter size != channels");
    const size_t hw = static_cast<size_t>(h) * w;

    // per-(instance, channel) statistics, shared with the backward pass
    auto stats = std::make_shared<std::vector<double>>(2 * n * c);  // mean, inv_std
    auto backward = [=](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& go = self.grad;
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch) {
                const size_t base = (static_cast<size_t>(b) * c + ch) * hw;
                const double mu = (*stats)[2 * (b * c + ch)];
                const double inv_std = (*stats)[2 * (b * c + ch) + 1];
                double sum_g = 0, sum_gx = 0;
                for (size_t i = 0; i < hw; ++i) {
                    const double xh = (px.value[base + i] - mu) * inv_std;
                    sum_g += go[base + i];
                    sum_gx += go[base + i] * xh;
                }
                if (pg.requires_grad) {
                    pg.ensure_grad();
                    pg.grad[ch] += sum_gx;
                }
                if (pb.requires_grad) {
                    pb.ensure_grad();
                    pb.grad[ch] += sum_g;
                }
                if (px.requires_grad) {
                    px.ensure_grad();
                    const double g = pg.value[ch];
                    const double mg = sum_g / hw, mgx = sum_gx / hw;
                    for (size_t i = 0; i < hw; ++i) {
                        const double xh = (px.value[base + i] - mu) * inv_std;
                        px.grad[base + i] += g * inv_std * (go[base + i] - mg - xh * mgx);
                    }
                }
            }
    };

    Tensor out = make_op(x.shape(), {x, gamma, beta}, backward);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const size_t base = (static_cast<size_t>(b) * c + ch) * hw;
            double mu = 0;
            for (size_t i = 0; i < hw; ++i) mu += xv[base + i];
            mu /= hw;
            double var = 0;
            for (size_t i = 0; i < hw; ++i) {
                const double d = xv[base + i] - mu;
                var += d * d;
            }
            var /= hw;
            const double inv_std = 1.0 / std::sqrt(var + eps);
            (*stats)[2 * (b * c + ch)] = mu;
            (*stats)[2 * (b * c + ch) + 1] = inv_std;
            const double g = gamma.data()[ch], bta = beta.data()[ch];
            for (size_t i = 0; i < hw; ++i)
                ov[base + i] = g * (xv[base + i] - mu) * inv_std + bta;
        }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool");
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const size_t hw = static_cast<size_t>(h) * w;
    Tensor out = make_op({n, c}, {x}, [=](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch) {
                const double g = self.grad[static_cast<size_t>(b) * c + ch] / hw;
                const size_t base = (static_cast<size_t>(b) * c + ch) * hw;
                for (size_t i = 0; i < hw; ++i) p.grad[base + i] += g;
            }
    });
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const size_t base = (static_cast<size_t>(b) * c + ch) * hw;
            double s = 0;
            for (size_t i = 0; i < hw; ++i) s += x.data()[base + i];
            out.data()[static_cast<size_t>(b) * c + ch] = s / hw;
        }
    return out;
}

Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(x, 2, "fully_connected");
    require_rank(w, 2, "fully_connected weight");
    require_rank(b, 1, "fully_connected bias");
    const int n = x.shape()[0], f = x.shape()[1], o = w.shape()[0];
    if (w.shape()[1] != f) throw ShapeMismatch("fully_connected: weight/input feature mismatch");
    if (b.shape()[0] != o) throw ShapeMismatch("fully_connected: bias size mismatch");

    Tensor out = make_op({n, o}, {x, w, b}, [=](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& go = self.grad;
        if (px.requires_grad) {
            px.ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < f; ++j) {
                    double acc = 0;
                    for (int k = 0; k < o; ++k)
                        acc += go[static_cast<size_t>(i) * o + k] * pw.value[static_cast<size_t>(k) * f + j];
                    px.grad[static_cast<size_t>(i) * f + j] += acc;
                }
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (int k = 0; k < o; ++k)
                for (int j = 0; j < f; ++j) {
                    double acc = 0;
                    for (int i = 0; i < n; ++i)
                        acc += go[static_cast<size_t>(i) * o + k] * px.value[static_cast<size_t>(i) * f + j];
                    pw.grad[static_cast<size_t>(k) * f + j] += acc;
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int k = 0; k < o; ++k) {
                double acc = 0;
                for (int i = 0; i < n; ++i) acc += go[static_cast<size_t>(i) * o + k];
                pb.grad[k] += acc;
            }
        }
    });
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < o; ++k) {
            double acc = b.data()[k];
            for (int j = 0; j < f; ++j)
                acc += x.data()[static_cast<size_t>(i) * f + j] * w.data()[static_cast<size_t>(k) * f + j];
            out.data()[static_cast<size_t>(i) * o + k] = acc;
        }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    if (a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2] ||
        a.shape()[3] != b.shape()[3])
        throw ShapeMismatch("concat_channels: non-channel dims differ");
    const int n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
    const size_t hw = static_cast<size_t>(a.shape()[2]) * a.shape()[3];
    Tensor out = make_op({n, ca + cb, a.shape()[2], a.shape()[3]}, {a, b},
                         [=](detail::Node& self) {
                             auto& pa = *self.parents[0];
                             auto& pb = *self.parents[1];
                             for (int i = 0; i < n; ++i) {
                                 const size_t src = static_cast<size_t>(i) * (ca + cb) * hw;
                                 if (pa.requires_grad) {
                                     pa.ensure_grad();
                                     for (size_t k = 0; k < ca * hw; ++k)
                                         pa.grad[static_cast<size_t>(i) * ca * hw + k] +=
                                             self.grad[src + k];
                                 }
                                 if (pb.requires_grad) {
                                     pb.ensure_grad();
                                     for (size_t k = 0; k < cb * hw; ++k)
                                         pb.grad[static_cast<size_t>(i) * cb * hw + k] +=
                                             self.grad[src + ca * hw + k];
                                 }
                             }
                         });
    for (int i = 0; i < n; ++i) {
        const size_t dst = static_cast<size_t>(i) * (ca + cb) * hw;
        for (size_t k = 0; k < ca * hw; ++k)
            out.data()[dst + k] = a.data()[static_cast<size_t>(i) * ca * hw + k];
        for (size_t k = 0; k < cb * hw; ++k)
            out.data()[dst + ca * hw + k] = b.data()[static_cast<size_t>(i) * cb * hw + k];
    }
    return out;
}

}  // namespace dce::nn
