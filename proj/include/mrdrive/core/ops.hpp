#pragma once

#include <vector>

#include "mrdrive/core/tensor.hpp"

namespace mrdrive::core {

struct ConvParams {
  Tensor weights;  // [out_channels, in_channels, kh, kw]
  Tensor bias;     // optional [out_channels]; leave undefined for none
  int stride = 1;
  int padding = 0;
};

struct BnParams {
  Tensor gamma;         // [C], trainable
  Tensor beta;          // [C], trainable
  Tensor running_mean;  // [C], statistics (not trainable)
  Tensor running_var;   // [C], statistics (not trainable)
  float momentum = 0.1f;
  float epsilon = 1e-5f;

  static BnParams identity(int channels);
  BnParams deep_copy() const;
};

enum class BnMode { kTrain, kEval };
enum class ResizeMethod { kBilinear, kNearest };

// Cross-correlation over [B,C,H,W]. Output spatial size
// floor((H + 2*padding - kh)/stride) + 1 and the analogous width.
Tensor conv2d(const Tensor& input, const ConvParams& params);

// Train mode normalizes by batch moments taken over (b,h,w) per channel and
// updates running stats as running <- (1-momentum)*running + momentum*batch,
// using the biased batch variance. Eval mode normalizes by running stats and
// mutates nothing.
Tensor batch_norm(const Tensor& input, BnParams& params, BnMode mode);

// Bilinear uses half-pixel-center sampling (pixel centers at (i+0.5)/N) and
// is differentiable; nearest uses floor(i*src/dst) source indexing.
Tensor resize(const Tensor& input, int out_h, int out_w, ResizeMethod method);

Tensor relu(const Tensor& input);

// Non-padded average pooling with square-window semantics.
Tensor avg_pool2d(const Tensor& input, int kh, int kw, int stride);

// [B,C,H,W] -> [B,C] mean over the spatial field.
Tensor global_avg_pool(const Tensor& input);

// input [B,in] x weights [out,in] + bias [out] -> [B,out].
Tensor affine(const Tensor& input, const Tensor& weights, const Tensor& bias);

// Last-dimension softmax / log-softmax with max-subtraction.
Tensor softmax(const Tensor& input);
Tensor log_softmax(const Tensor& input);

// Elementwise natural log (non-finite results are a hard error).
Tensor log_elem(const Tensor& input);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Concatenate [B,*] tensors along dim 1.
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor reshape(const Tensor& input, std::vector<int> shape);

// Batch-mean KL(target || softmax(logits)) over rows, with 0*log 0 := 0.
// target rows must sum to 1 within 1e-4 and carry no gradient.
Tensor kl_div_with_logits(const Tensor& target_probs, const Tensor& logits);

// Per-pixel softmax cross-entropy over the channel dim of [B,K,H,W] against
// integer class ids stored as floats in mask [B,H,W]; mean over pixels and
// batch. Class id outside [0,K) is an error.
Tensor softmax_cross_entropy2d(const Tensor& logits, const Tensor& mask);

// Plain argmax over a contiguous row of n values.
int argmax_row(const float* values, int n);

}  // namespace mrdrive::core
