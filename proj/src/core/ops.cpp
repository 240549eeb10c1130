#include "mrdrive/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace mrdrive::core {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

bool wants_grad(const Node& n) { return n.requires_grad || n.recorded(); }

NodePtr alloc_node(std::vector<int> shape) {
  auto n = std::make_shared<Node>();
  std::int64_t numel = 1;
  for (int d : shape) numel *= d;
  n->shape = std::move(shape);
  n->data.assign(static_cast<std::size_t>(numel), 0.0f);
  return n;
}

void record(const NodePtr& out, std::vector<NodePtr> parents,
            std::function<void(Node&)> fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& p : parents) {
    if (p && wants_grad(*p)) any = true;
  }
  if (!any) return;
  out->parents = std::move(parents);
  out->backward_fn = std::move(fn);
}

void require_rank(const Tensor& t, int rank, const char* what) {
  if (!t.defined() || t.rank() != rank) {
    shape_error(std::string(what) + ": expected rank " + std::to_string(rank) +
                " tensor, got " +
                (t.defined() ? shape_string(t.shape()) : std::string("<none>")));
  }
}

inline int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : a / b; }
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace

BnParams BnParams::identity(int channels) {
  BnParams p;
  p.gamma = Tensor::full({channels}, 1.0f, true);
  p.beta = Tensor::zeros({channels}, true);
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::full({channels}, 1.0f);
  return p;
}

BnParams BnParams::deep_copy() const {
  BnParams p;
  p.gamma = gamma.clone();
  p.gamma.set_requires_grad(gamma.requires_grad());
  p.beta = beta.clone();
  p.beta.set_requires_grad(beta.requires_grad());
  p.running_mean = running_mean.clone();
  p.running_var = running_var.clone();
  p.momentum = momentum;
  p.epsilon = epsilon;
  return p;
}

Tensor conv2d(const Tensor& input, const ConvParams& params) {
  require_rank(input, 4, "conv2d input");
  require_rank(params.weights, 4, "conv2d weights");
  const int batch = input.dim(0), in_c = input.dim(1);
  const int in_h = input.dim(2), in_w = input.dim(3);
  const int out_c = params.weights.dim(0), w_in_c = params.weights.dim(1);
  const int k_h = params.weights.dim(2), k_w = params.weights.dim(3);
  const int stride = params.stride, pad = params.padding;
  if (in_c != w_in_c) {
    shape_error("conv2d: input channels " + std::to_string(in_c) +
                " do not match kernel in-channels " + std::to_string(w_in_c));
  }
  if (stride < 1 || pad < 0 || k_h < 1 || k_w < 1 || out_c < 1) {
    shape_error("conv2d: invalid stride/padding/kernel");
  }
  const int out_h = (in_h + 2 * pad - k_h) / stride + 1;
  const int out_w = (in_w + 2 * pad - k_w) / stride + 1;
  if (in_h + 2 * pad < k_h || in_w + 2 * pad < k_w) {
    shape_error("conv2d: input " + std::to_string(in_h) + "x" +
                std::to_string(in_w) + " too small for kernel " +
                std::to_string(k_h) + "x" + std::to_string(k_w) +
                " with padding " + std::to_string(pad));
  }
  const bool has_bias = params.bias.defined();
  if (has_bias &&
      (params.bias.rank() != 1 || params.bias.dim(0) != out_c)) {
    shape_error("conv2d: bias shape must be [" + std::to_string(out_c) + "]");
  }

  auto out = alloc_node({batch, out_c, out_h, out_w});
  const float* in_p = input.data();
  const float* w_p = params.weights.data();
  float* out_p = out->data.data();

  for (int b = 0; b < batch; ++b) {
    float* out_img = out_p + static_cast<std::int64_t>(b) * out_c * out_h * out_w;
    if (has_bias) {
      const float* bias_p = params.bias.data();
      for (int co = 0; co < out_c; ++co) {
        std::fill(out_img + static_cast<std::int64_t>(co) * out_h * out_w,
                  out_img + static_cast<std::int64_t>(co + 1) * out_h * out_w,
                  bias_p[co]);
      }
    }
    for (int ci = 0; ci < in_c; ++ci) {
      const float* in_plane =
          in_p + (static_cast<std::int64_t>(b) * in_c + ci) * in_h * in_w;
      for (int co = 0; co < out_c; ++co) {
        const float* w_base =
            w_p + (static_cast<std::int64_t>(co) * in_c + ci) * k_h * k_w;
        float* out_plane = out_img + static_cast<std::int64_t>(co) * out_h * out_w;
        for (int i = 0; i < k_h; ++i) {
          for (int j = 0; j < k_w; ++j) {
            const float wv = w_base[i * k_w + j];
            if (wv == 0.0f) continue;
            const int ow_lo = std::max(0, ceil_div(pad - j, stride));
            const int ow_hi = std::min(out_w - 1, floor_div(in_w - 1 + pad - j, stride));
            for (int oh = 0; oh < out_h; ++oh) {
              const int ih = oh * stride - pad + i;
              if (ih < 0 || ih >= in_h) continue;
              const float* in_row = in_plane + static_cast<std::int64_t>(ih) * in_w;
              float* out_row = out_plane + static_cast<std::int64_t>(oh) * out_w;
              if (stride == 1) {
                const float* src = in_row + (j - pad);
                for (int ow = ow_lo; ow <= ow_hi; ++ow) out_row[ow] += wv * src[ow];
              } else {
                for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                  out_row[ow] += wv * in_row[ow * stride - pad + j];
                }
              }
            }
          }
        }
      }
    }
  }
  check_finite("conv2d output", out_p, out->numel());

  NodePtr in_node = input.node();
  NodePtr w_node = params.weights.node();
  NodePtr b_node = has_bias ? params.bias.node() : nullptr;
  std::vector<NodePtr> parents{in_node, w_node};
  if (b_node) parents.push_back(b_node);
  record(out, parents, [in_node, w_node, b_node, batch, in_c, in_h, in_w, out_c,
                        out_h, out_w, k_h, k_w, stride, pad](Node& self) {
    const float* d_out = self.grad.data();
    const float* in_p = in_node->data.data();
    const float* w_p = w_node->data.data();
    const bool need_din = wants_grad(*in_node);
    const bool need_dw = wants_grad(*w_node);
    if (need_din) in_node->ensure_grad();
    if (need_dw) w_node->ensure_grad();

    for (int b = 0; b < batch; ++b) {
      const float* dout_img =
          d_out + static_cast<std::int64_t>(b) * out_c * out_h * out_w;
      for (int ci = 0; ci < in_c; ++ci) {
        const std::int64_t plane_off =
            (static_cast<std::int64_t>(b) * in_c + ci) * in_h * in_w;
        const float* in_plane = in_p + plane_off;
        float* din_plane = need_din ? in_node->grad.data() + plane_off : nullptr;
        for (int co = 0; co < out_c; ++co) {
          const std::int64_t w_off =
              (static_cast<std::int64_t>(co) * in_c + ci) * k_h * k_w;
          const float* w_base = w_p + w_off;
          float* dw_base = need_dw ? w_node->grad.data() + w_off : nullptr;
          const float* dout_plane =
              dout_img + static_cast<std::int64_t>(co) * out_h * out_w;
          for (int i = 0; i < k_h; ++i) {
            for (int j = 0; j < k_w; ++j) {
              const float wv = w_base[i * k_w + j];
              const int ow_lo = std::max(0, ceil_div(pad - j, stride));
              const int ow_hi =
                  std::min(out_w - 1, floor_div(in_w - 1 + pad - j, stride));
              float acc = 0.0f;
              for (int oh = 0; oh < out_h; ++oh) {
                const int ih = oh * stride - pad + i;
                if (ih < 0 || ih >= in_h) continue;
                const float* dout_row =
                    dout_plane + static_cast<std::int64_t>(oh) * out_w;
                const float* in_row =
                    in_plane + static_cast<std::int64_t>(ih) * in_w;
                if (need_din) {
                  float* din_row = din_plane + static_cast<std::int64_t>(ih) * in_w;
                  if (stride == 1) {
                    float* dst = din_row + (j - pad);
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) dst[ow] += wv * dout_row[ow];
                  } else {
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                      din_row[ow * stride - pad + j] += wv * dout_row[ow];
                    }
                  }
                }
                if (need_dw) {
                  if (stride == 1) {
                    const float* src = in_row + (j - pad);
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += src[ow] * dout_row[ow];
                  } else {
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                      acc += in_row[ow * stride - pad + j] * dout_row[ow];
                    }
                  }
                }
              }
              if (need_dw) dw_base[i * k_w + j] += acc;
            }
          }
        }
      }
      if (b_node && wants_grad(*b_node)) {
        b_node->ensure_grad();
        for (int co = 0; co < out_c; ++co) {
          const float* dout_plane =
              dout_img + static_cast<std::int64_t>(co) * out_h * out_w;
          float acc = 0.0f;
          for (int k = 0; k < out_h * out_w; ++k) acc += dout_plane[k];
          b_node->grad[static_cast<std::size_t>(co)] += acc;
        }
      }
    }
  });
  return Tensor::wrap(out);
}

Tensor batch_norm(const Tensor& input, BnParams& params, BnMode mode) {
  require_rank(input, 4, "batch_norm input");
  const int batch = input.dim(0), channels = input.dim(1);
  const int height = input.dim(2), width = input.dim(3);
  if (params.gamma.dim(0) != channels) {
    shape_error("batch_norm: input has " + std::to_string(channels) +
                " channels, params have " + std::to_string(params.gamma.dim(0)));
  }
  const std::int64_t spatial = static_cast<std::int64_t>(height) * width;
  const std::int64_t count = static_cast<std::int64_t>(batch) * spatial;
  if (mode == BnMode::kTrain && count < 2) {
    shape_error("batch_norm: train mode needs B*H*W >= 2");
  }

  auto out = alloc_node(input.shape());
  const float* in_p = input.data();
  float* out_p = out->data.data();
  const float* gamma_p = params.gamma.data();
  const float* beta_p = params.beta.data();
  const float eps = params.epsilon;

  std::vector<float> mean_c(static_cast<std::size_t>(channels));
  std::vector<float> invstd_c(static_cast<std::size_t>(channels));

  if (mode == BnMode::kTrain) {
    for (int c = 0; c < channels; ++c) {
      double m = 0.0;
      for (int b = 0; b < batch; ++b) {
        const float* plane =
            in_p + (static_cast<std::int64_t>(b) * channels + c) * spatial;
        for (std::int64_t k = 0; k < spatial; ++k) m += plane[k];
      }
      m /= static_cast<double>(count);
      double v = 0.0;
      for (int b = 0; b < batch; ++b) {
        const float* plane =
            in_p + (static_cast<std::int64_t>(b) * channels + c) * spatial;
        for (std::int64_t k = 0; k < spatial; ++k) {
          const double d = plane[k] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(count);  // biased batch variance
      mean_c[c] = static_cast<float>(m);
      invstd_c[c] = static_cast<float>(1.0 / std::sqrt(v + eps));
      float* rm = params.running_mean.data();
      float* rv = params.running_var.data();
      rm[c] = (1.0f - params.momentum) * rm[c] +
              params.momentum * static_cast<float>(m);
      rv[c] = (1.0f - params.momentum) * rv[c] +
              params.momentum * static_cast<float>(v);
    }
  } else {
    const float* rm = params.running_mean.data();
    const float* rv = params.running_var.data();
    for (int c = 0; c < channels; ++c) {
      mean_c[c] = rm[c];
      invstd_c[c] = 1.0f / std::sqrt(rv[c] + eps);
    }
  }

  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(b) * channels + c) * spatial;
      const float* in_plane = in_p + off;
      float* out_plane = out_p + off;
      const float m = mean_c[c], is = invstd_c[c];
      const float g = gamma_p[c], bb = beta_p[c];
      for (std::int64_t k = 0; k < spatial; ++k) {
        out_plane[k] = (in_plane[k] - m) * is * g + bb;
      }
    }
  }
  check_finite("batch_norm output", out_p, out->numel());

  NodePtr in_node = input.node();
  NodePtr gamma_node = params.gamma.node();
  NodePtr beta_node = params.beta.node();
  const bool train = mode == BnMode::kTrain;
  record(out, {in_node, gamma_node, beta_node},
         [in_node, gamma_node, beta_node, mean_c, invstd_c, batch, channels,
          spatial, count, train](Node& self) {
           const float* d_out = self.grad.data();
           const float* in_p = in_node->data.data();
           const float* gamma_p = gamma_node->data.data();
           const bool need_din = wants_grad(*in_node);
           const bool need_dg = wants_grad(*gamma_node);
           const bool need_db = wants_grad(*beta_node);
           if (need_din) in_node->ensure_grad();
           if (need_dg) gamma_node->ensure_grad();
           if (need_db) beta_node->ensure_grad();

           for (int c = 0; c < channels; ++c) {
             const float m = mean_c[c], is = invstd_c[c], g = gamma_p[c];
             double sum_dy = 0.0, sum_dy_xhat = 0.0;
             for (int b = 0; b < batch; ++b) {
               const std::int64_t off =
                   (static_cast<std::int64_t>(b) * channels + c) * spatial;
               const float* dy = d_out + off;
               const float* x = in_p + off;
               for (std::int64_t k = 0; k < spatial; ++k) {
                 sum_dy += dy[k];
                 sum_dy_xhat += dy[k] * (x[k] - m) * is;
               }
             }
             if (need_dg) gamma_node->grad[c] += static_cast<float>(sum_dy_xhat);
             if (need_db) beta_node->grad[c] += static_cast<float>(sum_dy);
             if (!need_din) continue;
             if (train) {
               const float inv_n = 1.0f / static_cast<float>(count);
               for (int b = 0; b < batch; ++b) {
                 const std::int64_t off =
                     (static_cast<std::int64_t>(b) * channels + c) * spatial;
                 const float* dy = d_out + off;
                 const float* x = in_p + off;
                 float* dx = in_node->grad.data() + off;
                 for (std::int64_t k = 0; k < spatial; ++k) {
                   const float xhat = (x[k] - m) * is;
                   dx[k] += g * is * inv_n *
                            (static_cast<float>(count) * dy[k] -
                             static_cast<float>(sum_dy) -
                             xhat * static_cast<float>(sum_dy_xhat));
                 }
               }
             } else {
               for (int b = 0; b < batch; ++b) {
                 const std::int64_t off =
                     (static_cast<std::int64_t>(b) * channels + c) * spatial;
                 const float* dy = d_out + off;
                 float* dx = in_node->grad.data() + off;
                 for (std::int64_t k = 0; k < spatial; ++k) dx[k] += dy[k] * g * is;
               }
             }
           }
         });
  return Tensor::wrap(out);
}

Tensor resize(const Tensor& input, int out_h, int out_w, ResizeMethod method) {
  require_rank(input, 4, "resize input");
  if (out_h < 1 || out_w < 1) shape_error("resize: target dims must be >= 1");
  const int batch = input.dim(0), channels = input.dim(1);
  const int in_h = input.dim(2), in_w = input.dim(3);

  auto out = alloc_node({batch, channels, out_h, out_w});
  const float* in_p = input.data();
  float* out_p = out->data.data();
  const std::int64_t planes = static_cast<std::int64_t>(batch) * channels;

  if (method == ResizeMethod::kNearest) {
    std::vector<int> src_y(static_cast<std::size_t>(out_h));
    std::vector<int> src_x(static_cast<std::size_t>(out_w));
    for (int y = 0; y < out_h; ++y) {
      src_y[y] = std::min(in_h - 1, static_cast<int>(
          static_cast<std::int64_t>(y) * in_h / out_h));
    }
    for (int x = 0; x < out_w; ++x) {
      src_x[x] = std::min(in_w - 1, static_cast<int>(
          static_cast<std::int64_t>(x) * in_w / out_w));
    }
    for (std::int64_t p = 0; p < planes; ++p) {
      const float* in_plane = in_p + p * in_h * in_w;
      float* out_plane = out_p + p * out_h * out_w;
      for (int y = 0; y < out_h; ++y) {
        const float* in_row = in_plane + static_cast<std::int64_t>(src_y[y]) * in_w;
        float* out_row = out_plane + static_cast<std::int64_t>(y) * out_w;
        for (int x = 0; x < out_w; ++x) out_row[x] = in_row[src_x[x]];
      }
    }
    NodePtr in_node = input.node();
    record(out, {in_node},
           [in_node, src_y, src_x, out_h, out_w, in_h, in_w, planes](Node& self) {
             if (!wants_grad(*in_node)) return;
             in_node->ensure_grad();
             const float* d_out = self.grad.data();
             for (std::int64_t p = 0; p < planes; ++p) {
               float* din_plane = in_node->grad.data() + p * in_h * in_w;
               const float* dout_plane = d_out + p * out_h * out_w;
               for (int y = 0; y < out_h; ++y) {
                 for (int x = 0; x < out_w; ++x) {
                   din_plane[static_cast<std::int64_t>(src_y[y]) * in_w + src_x[x]] +=
                       dout_plane[static_cast<std::int64_t>(y) * out_w + x];
                 }
               }
             }
           });
    return Tensor::wrap(out);
  }

  // bilinear, half-pixel centers, clamped to the border
  struct Tap {
    int lo;
    float frac;
  };
  auto make_taps = [](int out_n, int in_n) {
    std::vector<Tap> taps(static_cast<std::size_t>(out_n));
    const double scale = static_cast<double>(in_n) / out_n;
    for (int i = 0; i < out_n; ++i) {
      double src = (i + 0.5) * scale - 0.5;
      src = std::max(0.0, std::min(src, static_cast<double>(in_n - 1)));
      const int lo = std::min(in_n - 1, static_cast<int>(src));
      taps[i] = {lo, static_cast<float>(src - lo)};
    }
    return taps;
  };
  const auto taps_y = make_taps(out_h, in_h);
  const auto taps_x = make_taps(out_w, in_w);

  for (std::int64_t p = 0; p < planes; ++p) {
    const float* in_plane = in_p + p * in_h * in_w;
    float* out_plane = out_p + p * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const int y0 = taps_y[y].lo;
      const int y1 = std::min(in_h - 1, y0 + 1);
      const float fy = taps_y[y].frac;
      const float* row0 = in_plane + static_cast<std::int64_t>(y0) * in_w;
      const float* row1 = in_plane + static_cast<std::int64_t>(y1) * in_w;
      float* out_row = out_plane + static_cast<std::int64_t>(y) * out_w;
      for (int x = 0; x < out_w; ++x) {
        const int x0 = taps_x[x].lo;
        const int x1 = std::min(in_w - 1, x0 + 1);
        const float fx = taps_x[x].frac;
        const float top = row0[x0] * (1.0f - fx) + row0[x1] * fx;
        const float bot = row1[x0] * (1.0f - fx) + row1[x1] * fx;
        out_row[x] = top * (1.0f - fy) + bot * fy;
      }
    }
  }
  check_finite("resize output", out_p, out->numel());

  NodePtr in_node = input.node();
  record(out, {in_node},
         [in_node, taps_y, taps_x, out_h, out_w, in_h, in_w, planes](Node& self) {
           if (!wants_grad(*in_node)) return;
           in_node->ensure_grad();
           const float* d_out = self.grad.data();
           for (std::int64_t p = 0; p < planes; ++p) {
             float* din_plane = in_node->grad.data() + p * in_h * in_w;
             const float* dout_plane = d_out + p * out_h * out_w;
             for (int y = 0; y < out_h; ++y) {
               const int y0 = taps_y[y].lo;
               const int y1 = std::min(in_h - 1, y0 + 1);
               const float fy = taps_y[y].frac;
               for (int x = 0; x < out_w; ++x) {
                 const int x0 = taps_x[x].lo;
                 const int x1 = std::min(in_w - 1, x0 + 1);
                 const float fx = taps_x[x].frac;
                 const float g = dout_plane[static_cast<std::int64_t>(y) * out_w + x];
                 din_plane[static_cast<std::int64_t>(y0) * in_w + x0] +=
                     g * (1.0f - fy) * (1.0f - fx);
                 din_plane[static_cast<std::int64_t>(y0) * in_w + x1] += g * (1.0f - fy) * fx;
                 din_plane[static_cast<std::int64_t>(y1) * in_w + x0] += g * fy * (1.0f - fx);
                 din_plane[static_cast<std::int64_t>(y1) * in_w + x1] += g * fy * fx;
               }
             }
           }
         });
  return Tensor::wrap(out);
}

Tensor relu(const Tensor& input) {
  auto out = alloc_node(input.shape());
  const float* in_p = input.data();
  float* out_p = out->data.data();
  const std::int64_t n = out->numel();
  for (std::int64_t i = 0; i < n; ++i) out_p[i] = in_p[i] > 0.0f ? in_p[i] : 0.0f;

  NodePtr in_node = input.node();
  record(out, {in_node}, [in_node, n](Node& self) {
    if (!wants_grad(*in_node)) return;
    in_node->ensure_grad();
    const float* d_out = self.grad.data();
    const float* in_p = in_node->data.data();
    float* din = in_node->grad.data();
    for (std::int64_t i = 0; i < n; ++i) {
      if (in_p[i] > 0.0f) din[i] += d_out[i];
    }
  });
  return Tensor::wrap(out);
}

Tensor avg_pool2d(const Tensor& input, int k_h, int k_w, int stride) {
  require_rank(input, 4, "avg_pool2d input");
  if (k_h < 1 || k_w < 1 || stride < 1) shape_error("avg_pool2d: invalid window");
  const int batch = input.dim(0), channels = input.dim(1);
  const int in_h = input.dim(2), in_w = input.dim(3);
  if (in_h < k_h || in_w < k_w) {
    shape_error("avg_pool2d: input " + std::to_string(in_h) + "x" +
                std::to_string(in_w) + " smaller than window");
  }
  const int out_h = (in_h - k_h) / stride + 1;
  const int out_w = (in_w - k_w) / stride + 1;
  auto out = alloc_node({batch, channels, out_h, out_w});
  const float* in_p = input.data();
  float* out_p = out->data.data();
  const float inv = 1.0f / static_cast<float>(k_h * k_w);
  const std::int64_t planes = static_cast<std::int64_t>(batch) * channels;
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* in_plane = in_p + p * in_h * in_w;
    float* out_plane = out_p + p * out_h * out_w;
    for (int oh = 0; oh < out_h; ++oh) {
      for (int ow = 0; ow < out_w; ++ow) {
        float acc = 0.0f;
        for (int i = 0; i < k_h; ++i) {
          const float* row = in_plane + static_cast<std::int64_t>(oh * stride + i) * in_w +
                             ow * stride;
          for (int j = 0; j < k_w; ++j) acc += row[j];
        }
        out_plane[static_cast<std::int64_t>(oh) * out_w + ow] = acc * inv;
      }
    }
  }

  NodePtr in_node = input.node();
  record(out, {in_node},
         [in_node, planes, in_h, in_w, out_h, out_w, k_h, k_w, stride, inv](Node& self) {
           if (!wants_grad(*in_node)) return;
           in_node->ensure_grad();
           const float* d_out = self.grad.data();
           for (std::int64_t p = 0; p < planes; ++p) {
             float* din_plane = in_node->grad.data() + p * in_h * in_w;
             const float* dout_plane = d_out + p * out_h * out_w;
             for (int oh = 0; oh < out_h; ++oh) {
               for (int ow = 0; ow < out_w; ++ow) {
                 const float g = dout_plane[static_cast<std::int64_t>(oh) * out_w + ow] * inv;
                 for (int i = 0; i < k_h; ++i) {
                   float* row = din_plane +
                                static_cast<std::int64_t>(oh * stride + i) * in_w +
                                ow * stride;
                   for (int j = 0; j < k_w; ++j) row[j] += g;
                 }
               }
             }
           }
         });
  return Tensor::wrap(out);
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool input");
  Tensor pooled = avg_pool2d(input, input.dim(2), input.dim(3), 1);
  return reshape(pooled, {input.dim(0), input.dim(1)});
}

Tensor affine(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  require_rank(input, 2, "affine input");
  require_rank(weights, 2, "affine weights");
  require_rank(bias, 1, "affine bias");
  const int batch = input.dim(0), in_dim = input.dim(1);
  const int out_dim = weights.dim(0);
  if (weights.dim(1) != in_dim || bias.dim(0) != out_dim) {
    shape_error("affine: input " + shape_string(input.shape()) +
                " incompatible with weights " + shape_string(weights.shape()));
  }
  auto out = alloc_node({batch, out_dim});
  const float* in_p = input.data();
  const float* w_p = weights.data();
  const float* b_p = bias.data();
  float* out_p = out->data.data();
  for (int b = 0; b < batch; ++b) {
    const float* in_row = in_p + static_cast<std::int64_t>(b) * in_dim;
    float* out_row = out_p + static_cast<std::int64_t>(b) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const float* w_row = w_p + static_cast<std::int64_t>(o) * in_dim;
      float acc = b_p[o];
      for (int i = 0; i < in_dim; ++i) acc += in_row[i] * w_row[i];
      out_row[o] = acc;
    }
  }
  check_finite("affine output", out_p, out->numel());

  NodePtr in_node = input.node();
  NodePtr w_node = weights.node();
  NodePtr b_node = bias.node();
  record(out, {in_node, w_node, b_node},
         [in_node, w_node, b_node, batch, in_dim, out_dim](Node& self) {
           const float* d_out = self.grad.data();
           const float* in_p = in_node->data.data();
           const float* w_p = w_node->data.data();
           if (wants_grad(*in_node)) {
             in_node->ensure_grad();
             for (int b = 0; b < batch; ++b) {
               const float* dout_row = d_out + static_cast<std::int64_t>(b) * out_dim;
               float* din_row = in_node->grad.data() + static_cast<std::int64_t>(b) * in_dim;
               for (int o = 0; o < out_dim; ++o) {
                 const float g = dout_row[o];
                 const float* w_row = w_p + static_cast<std::int64_t>(o) * in_dim;
                 for (int i = 0; i < in_dim; ++i) din_row[i] += g * w_row[i];
               }
             }
           }
           if (wants_grad(*w_node)) {
             w_node->ensure_grad();
             for (int b = 0; b < batch; ++b) {
               const float* dout_row = d_out + static_cast<std::int64_t>(b) * out_dim;
               const float* in_row = in_p + static_cast<std::int64_t>(b) * in_dim;
               for (int o = 0; o < out_dim; ++o) {
                 const float g = dout_row[o];
                 float* dw_row = w_node->grad.data() + static_cast<std::int64_t>(o) * in_dim;
                 for (int i = 0; i < in_dim; ++i) dw_row[i] += g * in_row[i];
               }
             }
           }
           if (wants_grad(*b_node)) {
             b_node->ensure_grad();
             for (int b = 0; b < batch; ++b) {
               const float* dout_row = d_out + static_cast<std::int64_t>(b) * out_dim;
               for (int o = 0; o < out_dim; ++o) b_node->grad[o] += dout_row[o];
             }
           }
         });
  return Tensor::wrap(out);
}

namespace {

// rows x cols view of the last dimension
void last_dim_view(const Tensor& t, std::int64_t& rows, int& cols) {
  if (t.rank() < 1) shape_error("softmax: rank >= 1 required");
  cols = t.dim(t.rank() - 1);
  rows = t.numel() / cols;
}

}  // namespace

Tensor softmax(const Tensor& input) {
  std::int64_t rows;
  int cols;
  last_dim_view(input, rows, cols);
  auto out = alloc_node(input.shape());
  const float* in_p = input.data();
  float* out_p = out->data.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* x = in_p + r * cols;
    float* y = out_p + r * cols;
    float mx = x[0];
    for (int i = 1; i < cols; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < cols; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    const float inv_z = static_cast<float>(1.0 / z);
    for (int i = 0; i < cols; ++i) y[i] *= inv_z;
  }
  check_finite("softmax output", out_p, out->numel());

  NodePtr in_node = input.node();
  record(out, {in_node}, [in_node, rows, cols](Node& self) {
    if (!wants_grad(*in_node)) return;
    in_node->ensure_grad();
    const float* d_out = self.grad.data();
    const float* s = self.data.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* sr = s + r * cols;
      const float* dr = d_out + r * cols;
      float* dx = in_node->grad.data() + r * cols;
      double dot = 0.0;
      for (int i = 0; i < cols; ++i) dot += dr[i] * sr[i];
      for (int i = 0; i < cols; ++i) {
        dx[i] += sr[i] * (dr[i] - static_cast<float>(dot));
      }
    }
  });
  return Tensor::wrap(out);
}

Tensor log_softmax(const Tensor& input) {
  std::int64_t rows;
  int cols;
  last_dim_view(input, rows, cols);
  auto out = alloc_node(input.shape());
  const float* in_p = input.data();
  float* out_p = out->data.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* x = in_p + r * cols;
    float* y = out_p + r * cols;
    float mx = x[0];
    for (int i = 1; i < cols; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < cols; ++i) z += std::exp(x[i] - mx);
    const float lz = static_cast<float>(std::log(z)) + mx;
    for (int i = 0; i < cols; ++i) y[i] = x[i] - lz;
  }
  check_finite("log_softmax output", out_p, out->numel());

  NodePtr in_node = input.node();
  record(out, {in_node}, [in_node, rows, cols](Node& self) {
    if (!wants_grad(*in_node)) return;
    in_node->ensure_grad();
    const float* d_out = self.grad.data();
    const float* ls = self.data.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* lr = ls + r * cols;
      const float* dr = d_out + r * cols;
      float* dx = in_node->grad.data() + r * cols;
      double sum_d = 0.0;
      for (int i = 0; i < cols; ++i) sum_d += dr[i];
      for (int i = 0; i < cols; ++i) {
        dx[i] += dr[i] - static_cast<float>(sum_d) * std::exp(lr[i]);
      }
    }
  });
  return Tensor::wrap(out);
}

Tensor log_elem(const Tensor& input) {
  auto out = alloc_node(input.shape());
  const float* in_p = input.data();
  float* out_p = out->data.data();
  const std::int64_t n = out->numel();
  for (std::int64_t i = 0; i < n; ++i) out_p[i] = std::log(in_p[i]);
  check_finite("log output", out_p, n);

  NodePtr in_node = input.node();
  record(out, {in_node}, [in_node, n](Node& self) {
    if (!wants_grad(*in_node)) return;
    in_node->ensure_grad();
    const float* d_out = self.grad.data();
    const float* x = in_node->data.data();
    float* dx = in_node->grad.data();
    for (std::int64_t i = 0; i < n; ++i) dx[i] += d_out[i] / x[i];
  });
  return Tensor::wrap(out);
}

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* what,
                          float (*fwd)(float, float),
                          void (*bwd)(float, float, float, float&, float&)) {
  if (a.shape() != b.shape()) {
    shape_error(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                " vs " + shape_string(b.shape()));
  }
  auto out = alloc_node(a.shape());
  const float* ap = a.data();
  const float* bp = b.data();
  float* op = out->data.data();
  const std::int64_t n = out->numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = fwd(ap[i], bp[i]);
  check_finite(what, op, n);

  NodePtr an = a.node();
  NodePtr bn = b.node();
  record(out, {an, bn}, [an, bn, n, bwd](Node& self) {
    const bool need_a = wants_grad(*an);
    const bool need_b = wants_grad(*bn);
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    const float* d_out = self.grad.data();
    const float* ap = an->data.data();
    const float* bp = bn->data.data();
    for (std::int64_t i = 0; i < n; ++i) {
      float da = 0.0f, db = 0.0f;
      bwd(ap[i], bp[i], d_out[i], da, db);
      if (need_a) an->grad[i] += da;
      if (need_b) bn->grad[i] += db;
    }
  });
  return Tensor::wrap(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float, float, float g, float& da, float& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float, float, float g, float& da, float& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float x, float y, float g, float& da, float& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor scale(const Tensor& a, float s) {
  auto out = alloc_node(a.shape());
  const float* ap = a.data();
  float* op = out->data.data();
  const std::int64_t n = out->numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * s;
  check_finite("scale output", op, n);

  NodePtr an = a.node();
  record(out, {an}, [an, n, s](Node& self) {
    if (!wants_grad(*an)) return;
    an->ensure_grad();
    const float* d_out = self.grad.data();
    float* da = an->grad.data();
    for (std::int64_t i = 0; i < n; ++i) da[i] += d_out[i] * s;
  });
  return Tensor::wrap(out);
}

Tensor sum(const Tensor& a) {
  auto out = alloc_node({1});
  const float* ap = a.data();
  const std::int64_t n = a.numel();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += ap[i];
  out->data[0] = static_cast<float>(acc);
  check_finite("sum output", out->data.data(), 1);

  NodePtr an = a.node();
  record(out, {an}, [an, n](Node& self) {
    if (!wants_grad(*an)) return;
    an->ensure_grad();
    const float g = self.grad[0];
    float* da = an->grad.data();
    for (std::int64_t i = 0; i < n; ++i) da[i] += g;
  });
  return Tensor::wrap(out);
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat_cols: no inputs");
  const int batch = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols part");
    if (p.dim(0) != batch) shape_error("concat_cols: batch mismatch");
    total += p.dim(1);
  }
  auto out = alloc_node({batch, total});
  float* out_p = out->data.data();
  int col = 0;
  for (const auto& p : parts) {
    const int c = p.dim(1);
    const float* src = p.data();
    for (int b = 0; b < batch; ++b) {
      std::memcpy(out_p + static_cast<std::int64_t>(b) * total + col,
                  src + static_cast<std::int64_t>(b) * c,
                  static_cast<std::size_t>(c) * sizeof(float));
    }
    col += c;
  }

  std::vector<NodePtr> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) parents.push_back(p.node());
  std::vector<int> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  record(out, parents, [parents, widths, batch, total](Node& self) {
    const float* d_out = self.grad.data();
    int col = 0;
    for (std::size_t k = 0; k < parents.size(); ++k) {
      const int c = widths[k];
      if (wants_grad(*parents[k])) {
        parents[k]->ensure_grad();
        float* dst = parents[k]->grad.data();
        for (int b = 0; b < batch; ++b) {
          const float* src = d_out + static_cast<std::int64_t>(b) * total + col;
          float* row = dst + static_cast<std::int64_t>(b) * c;
          for (int i = 0; i < c; ++i) row[i] += src[i];
        }
      }
      col += c;
    }
  });
  return Tensor::wrap(out);
}

Tensor reshape(const Tensor& input, std::vector<int> shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  if (n != input.numel()) {
    shape_error("reshape: cannot view " + shape_string(input.shape()) + " as " +
                shape_string(shape));
  }
  auto out = alloc_node(std::move(shape));
  out->data = input.data_vec();

  NodePtr in_node = input.node();
  record(out, {in_node}, [in_node](Node& self) {
    if (!wants_grad(*in_node)) return;
    in_node->ensure_grad();
    const float* d_out = self.grad.data();
    float* din = in_node->grad.data();
    const std::int64_t n = self.numel();
    for (std::int64_t i = 0; i < n; ++i) din[i] += d_out[i];
  });
  return Tensor::wrap(out);
}

Tensor kl_div_with_logits(const Tensor& target_probs, const Tensor& logits) {
  require_rank(target_probs, 2, "kl_div target");
  require_rank(logits, 2, "kl_div logits");
  if (target_probs.shape() != logits.shape()) {
    shape_error("kl_div: target " + shape_string(target_probs.shape()) +
                " vs logits " + shape_string(logits.shape()));
  }
  const int batch = logits.dim(0), cols = logits.dim(1);
  const float* t_p = target_probs.data();
  check_finite("kl_div target", t_p, target_probs.numel());
  for (int b = 0; b < batch; ++b) {
    double s = 0.0;
    for (int i = 0; i < cols; ++i) s += t_p[static_cast<std::int64_t>(b) * cols + i];
    if (std::abs(s - 1.0) > 1e-4) {
      throw std::invalid_argument("kl_div: target row " + std::to_string(b) +
                                  " sums to " + std::to_string(s));
    }
  }

  // softmax of logits, reused by the backward closure
  std::vector<float> probs(static_cast<std::size_t>(logits.numel()));
  const float* z_p = logits.data();
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    const float* z = z_p + static_cast<std::int64_t>(b) * cols;
    const float* t = t_p + static_cast<std::int64_t>(b) * cols;
    float* p = probs.data() + static_cast<std::int64_t>(b) * cols;
    float mx = z[0];
    for (int i = 1; i < cols; ++i) mx = std::max(mx, z[i]);
    double zsum = 0.0;
    for (int i = 0; i < cols; ++i) {
      p[i] = std::exp(z[i] - mx);
      zsum += p[i];
    }
    const double log_z = std::log(zsum) + mx;
    for (int i = 0; i < cols; ++i) p[i] = static_cast<float>(p[i] / zsum);
    for (int i = 0; i < cols; ++i) {
      if (t[i] > 0.0f) {
        total += t[i] * (std::log(static_cast<double>(t[i])) - (z[i] - log_z));
      }
    }
  }
  auto out = alloc_node({1});
  out->data[0] = static_cast<float>(total / batch);
  check_finite("kl_div output", out->data.data(), 1);

  NodePtr z_node = logits.node();
  NodePtr t_node = target_probs.node();
  record(out, {z_node, t_node},
         [z_node, t_node, probs = std::move(probs), batch, cols](Node& self) {
           if (!wants_grad(*z_node)) return;
           z_node->ensure_grad();
           const float g = self.grad[0] / static_cast<float>(batch);
           const float* t_p = t_node->data.data();
           float* dz = z_node->grad.data();
           const std::int64_t n = static_cast<std::int64_t>(batch) * cols;
           for (std::int64_t i = 0; i < n; ++i) dz[i] += g * (probs[i] - t_p[i]);
         });
  return Tensor::wrap(out);
}

Tensor softmax_cross_entropy2d(const Tensor& logits, const Tensor& mask) {
  require_rank(logits, 4, "cross_entropy logits");
  require_rank(mask, 3, "cross_entropy mask");
  const int batch = logits.dim(0), classes = logits.dim(1);
  const int height = logits.dim(2), width = logits.dim(3);
  if (mask.dim(0) != batch || mask.dim(1) != height || mask.dim(2) != width) {
    shape_error("cross_entropy: logits " + shape_string(logits.shape()) +
                " vs mask " + shape_string(mask.shape()));
  }
  const std::int64_t spatial = static_cast<std::int64_t>(height) * width;
  const std::int64_t count = static_cast<std::int64_t>(batch) * spatial;
  const float* z_p = logits.data();
  const float* m_p = mask.data();

  // per-pixel class probabilities are recomputed in backward from saved
  // log-sum-exp values; only lse (one float per pixel) is retained
  std::vector<float> lse(static_cast<std::size_t>(count));
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    for (std::int64_t k = 0; k < spatial; ++k) {
      const std::int64_t pix = b * spatial + k;
      const int cls = static_cast<int>(m_p[pix]);
      if (cls < 0 || cls >= classes) {
        throw std::invalid_argument("cross_entropy: class id " +
                                    std::to_string(cls) + " outside [0," +
                                    std::to_string(classes) + ")");
      }
      float mx = z_p[(static_cast<std::int64_t>(b) * classes) * spatial + k];
      for (int c = 1; c < classes; ++c) {
        mx = std::max(mx, z_p[(static_cast<std::int64_t>(b) * classes + c) * spatial + k]);
      }
      double zsum = 0.0;
      for (int c = 0; c < classes; ++c) {
        zsum += std::exp(
            z_p[(static_cast<std::int64_t>(b) * classes + c) * spatial + k] - mx);
      }
      const float l = static_cast<float>(std::log(zsum)) + mx;
      lse[pix] = l;
      total += l - z_p[(static_cast<std::int64_t>(b) * classes + cls) * spatial + k];
    }
  }
  auto out = alloc_node({1});
  out->data[0] = static_cast<float>(total / static_cast<double>(count));
  check_finite("cross_entropy output", out->data.data(), 1);

  NodePtr z_node = logits.node();
  NodePtr m_node = mask.node();
  record(out, {z_node, m_node},
         [z_node, m_node, lse = std::move(lse), batch, classes, spatial,
          count](Node& self) {
           if (!wants_grad(*z_node)) return;
           z_node->ensure_grad();
           const float g = self.grad[0] / static_cast<float>(count);
           const float* z_p = z_node->data.data();
           const float* m_p = m_node->data.data();
           float* dz = z_node->grad.data();
           for (int b = 0; b < batch; ++b) {
             for (std::int64_t k = 0; k < spatial; ++k) {
               const std::int64_t pix = b * spatial + k;
               const int cls = static_cast<int>(m_p[pix]);
               const float l = lse[pix];
               for (int c = 0; c < classes; ++c) {
                 const std::int64_t idx =
                     (static_cast<std::int64_t>(b) * classes + c) * spatial + k;
                 const float p = std::exp(z_p[idx] - l);
                 dz[idx] += g * (p - (c == cls ? 1.0f : 0.0f));
               }
             }
           }
         });
  return Tensor::wrap(out);
}

int argmax_row(const float* values, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace mrdrive::core
