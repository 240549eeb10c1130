#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mrdrive/core/ops.hpp"
#include "mrdrive/core/rng.hpp"
#include "mrdrive/core/serialize.hpp"
#include "mrdrive/core/sgd.hpp"
#include "mrdrive/core/tensor.hpp"
#include "test_util.hpp"

using namespace mrdrive::core;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                     bool requires_grad = false) {
  return Tensor::randn(std::move(shape), rng, stddev, requires_grad);
}

}  // namespace

TEST_CASE("conv2d all-ones 3x3 gives 9") {
  Tensor in = Tensor::full({1, 1, 3, 3}, 1.0f);
  ConvParams p;
  p.weights = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor out = conv2d(in, p);
  CHECK(out.shape() == std::vector<int>{1, 1, 1, 1});
  CHECK(out.data()[0] == doctest::Approx(9.0f));
}

TEST_CASE("conv2d identity kernel with padding 1 reproduces input") {
  Rng rng(7);
  Tensor in = random_tensor({2, 1, 5, 6}, rng);
  ConvParams p;
  p.weights = Tensor::zeros({1, 1, 3, 3});
  p.weights.data()[4] = 1.0f;  // center tap
  p.padding = 1;
  Tensor out = conv2d(in, p);
  REQUIRE(out.shape() == in.shape());
  CHECK(testutil::bitwise_equal(out, in));
}

TEST_CASE("conv2d weight gradient matches finite differences") {
  Rng rng(11);
  Tensor in = random_tensor({2, 3, 8, 8}, rng);
  ConvParams p;
  p.weights = random_tensor({4, 3, 3, 3}, rng, 0.5f, true);
  p.bias = random_tensor({4}, rng, 0.5f, true);
  p.stride = 1;
  p.padding = 1;

  Tensor loss = sum(conv2d(in, p));
  loss.backward();

  auto loss_fn = [&]() {
    NoGradGuard ng;
    return static_cast<double>(sum(conv2d(in, p)).item());
  };
  Rng probe(3);
  CHECK(testutil::fd_probe(loss_fn, p.weights, p.weights.grad_vec(), 8, probe) < 1e-3);
  CHECK(testutil::fd_probe(loss_fn, p.bias, p.bias.grad_vec(), 4, probe) < 1e-3);
}

TEST_CASE("conv2d input gradient matches finite differences") {
  Rng rng(13);
  Tensor in = random_tensor({1, 2, 6, 7}, rng, 1.0f, true);
  ConvParams p;
  p.weights = random_tensor({3, 2, 3, 3}, rng, 0.5f, true);
  p.stride = 2;
  p.padding = 1;

  // fixed projection makes the scalar sensitive to every output entry
  Rng proj_rng(5);
  Tensor out0 = conv2d(in, p);
  Tensor proj = random_tensor(out0.shape(), proj_rng);
  Tensor loss = sum(mul(out0, proj));
  loss.backward();

  auto loss_fn = [&]() {
    NoGradGuard ng;
    return static_cast<double>(sum(mul(conv2d(in, p), proj)).item());
  };
  Rng probe(17);
  CHECK(testutil::fd_probe(loss_fn, in, in.grad_vec(), 8, probe) < 1e-3);
}

TEST_CASE("conv2d shape mismatch names offending dims") {
  Tensor in = Tensor::zeros({1, 2, 4, 4});
  ConvParams p;
  p.weights = Tensor::zeros({1, 3, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(in, p),
                       doctest::Contains("input channels 2"),
                       std::invalid_argument);

  ConvParams q;
  q.weights = Tensor::zeros({1, 2, 5, 5});
  Tensor tiny = Tensor::zeros({1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(tiny, q), std::invalid_argument);
}

TEST_CASE("batch_norm train normalizes to zero mean unit variance") {
  Rng rng(23);
  Tensor in = random_tensor({4, 3, 5, 6}, rng, 2.5f);
  BnParams p = BnParams::identity(3);
  Tensor out = batch_norm(in, p, BnMode::kTrain);

  const int spatial = 5 * 6;
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (int b = 0; b < 4; ++b) {
      const float* plane = out.data() + (b * 3 + c) * spatial;
      for (int k = 0; k < spatial; ++k) m += plane[k];
    }
    m /= 4.0 * spatial;
    for (int b = 0; b < 4; ++b) {
      const float* plane = out.data() + (b * 3 + c) * spatial;
      for (int k = 0; k < spatial; ++k) v += (plane[k] - m) * (plane[k] - m);
    }
    v /= 4.0 * spatial;
    CHECK(std::abs(m) < 1e-5);
    // output variance is var/(var+eps); correct for epsilon before comparing
    CHECK(std::abs(v * (1.0 + 1e-5 / v) - 1.0) < 1e-3);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("batch_norm eval with identity stats divides by sqrt(1+eps)") {
  Rng rng(29);
  Tensor in = random_tensor({2, 2, 4, 4}, rng);
  BnParams p = BnParams::identity(2);
  Tensor out = batch_norm(in, p, BnMode::kEval);
  const float k = 1.0f / std::sqrt(1.0f + p.epsilon);
  for (std::int64_t i = 0; i < in.numel(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(in.data()[i] * k).epsilon(1e-6));
  }
}

TEST_CASE("batch moments differ between spatial sizes of the same content") {
  // downscaling a batch changes the per-channel moments BN sees; computed
  // directly on both sizes with an independent accumulation
  Rng rng(31);
  Tensor base = random_tensor({2, 1, 16, 16}, rng);
  // make the content spatially structured so resampling shifts moments
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      base.data()[i * 16 + j] += (i < 4 && j < 4) ? 3.0f : 0.0f;
    }
  }
  Tensor small = resize(base, 12, 12, ResizeMethod::kBilinear);

  auto moments = [](const Tensor& t) {
    double m = 0.0, v = 0.0;
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) m += t.data()[i];
    m /= static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      v += (t.data()[i] - m) * (t.data()[i] - m);
    }
    return std::pair{m, v / static_cast<double>(n)};
  };
  auto [m1, v1] = moments(base);
  auto [m2, v2] = moments(small);
  CHECK(std::abs(v1 - v2) > 1e-4);
}

TEST_CASE("batch_norm train then eval with momentum 1 reproduces the batch") {
  Rng rng(37);
  Tensor in = random_tensor({3, 2, 4, 5}, rng, 1.7f);
  BnParams p = BnParams::identity(2);
  p.momentum = 1.0f;
  p.gamma.data()[0] = 1.3f;
  p.beta.data()[1] = -0.4f;
  Tensor train_out = batch_norm(in, p, BnMode::kTrain);
  Tensor eval_out = batch_norm(in, p, BnMode::kEval);
  for (std::int64_t i = 0; i < in.numel(); ++i) {
    CHECK(train_out.data()[i] ==
          doctest::Approx(eval_out.data()[i]).epsilon(1e-5));
  }
}

TEST_CASE("batch_norm gradients match finite differences") {
  Rng rng(41);
  Tensor in = random_tensor({2, 3, 4, 4}, rng, 1.0f, true);
  BnParams p = BnParams::identity(3);
  for (int c = 0; c < 3; ++c) {
    p.gamma.data()[c] = 0.8f + 0.2f * c;
    p.beta.data()[c] = 0.1f * c;
  }
  Rng proj_rng(43);
  Tensor proj = random_tensor({2, 3, 4, 4}, proj_rng);

  Tensor loss = sum(mul(batch_norm(in, p, BnMode::kTrain), proj));
  loss.backward();

  auto loss_fn = [&]() {
    NoGradGuard ng;
    return static_cast<double>(
        sum(mul(batch_norm(in, p, BnMode::kTrain), proj)).item());
  };
  Rng probe(47);
  CHECK(testutil::fd_probe(loss_fn, in, in.grad_vec(), 10, probe) < 1e-3);
  CHECK(testutil::fd_probe(loss_fn, p.gamma, p.gamma.grad_vec(), 3, probe) < 1e-3);
  CHECK(testutil::fd_probe(loss_fn, p.beta, p.beta.grad_vec(), 3, probe) < 1e-3);
}

TEST_CASE("batch_norm zero-variance channel is not an error in train mode") {
  Tensor in = Tensor::full({2, 1, 3, 3}, 4.2f);
  BnParams p = BnParams::identity(1);
  Tensor out = batch_norm(in, p, BnMode::kTrain);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(0.0f));
  }
}

TEST_CASE("batch_norm channel mismatch errors") {
  Tensor in = Tensor::zeros({1, 4, 2, 2});
  BnParams p = BnParams::identity(3);
  CHECK_THROWS_AS(batch_norm(in, p, BnMode::kEval), std::invalid_argument);
}

TEST_CASE("resize keeps constants exactly") {
  Tensor in = Tensor::full({1, 2, 9, 13}, 0.37f);
  for (auto method : {ResizeMethod::kBilinear, ResizeMethod::kNearest}) {
    Tensor out = resize(in, 5, 7, method);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      CHECK(out.data()[i] == doctest::Approx(0.37f));
    }
    Tensor up = resize(in, 17, 21, method);
    for (std::int64_t i = 0; i < up.numel(); ++i) {
      CHECK(up.data()[i] == doctest::Approx(0.37f));
    }
  }
}

TEST_CASE("nearest upsample replicates 2x2 into blocks") {
  Tensor in = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor out = resize(in, 4, 4, ResizeMethod::kNearest);
  const float expected[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) CHECK(out.data()[i] == doctest::Approx(expected[i]));
}

namespace {

// independent bilinear sampler: explicit half-pixel-center interpolation in
// double precision, used as the oracle for the small-blob attenuation check
double oracle_bilinear(const Tensor& img, int h2, int w2, int y, int x) {
  const int h1 = img.dim(2), w1 = img.dim(3);
  auto sample = [&](double src, int n) {
    src = std::max(0.0, std::min(src, static_cast<double>(n - 1)));
    return src;
  };
  const double sy = sample((y + 0.5) * h1 / static_cast<double>(h2) - 0.5, h1);
  const double sx = sample((x + 0.5) * w1 / static_cast<double>(w2) - 0.5, w1);
  const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
  const int y1 = std::min(h1 - 1, y0 + 1), x1 = std::min(w1 - 1, x0 + 1);
  const double fy = sy - y0, fx = sx - x0;
  auto at = [&](int yy, int xx) {
    return static_cast<double>(img.data()[yy * w1 + xx]);
  };
  return at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x1) * (1 - fy) * fx +
         at(y1, x0) * fy * (1 - fx) + at(y1, x1) * fy * fx;
}

}  // namespace

TEST_CASE("bilinear downscale attenuates a 2x2 blob peak") {
  // 2x2 bright blob in a 96x192 image downscaled to 72x144; the blob is
  // placed on the sampling phase whose unit cell receives no interior sample,
  // so the peak must strictly decrease
  Tensor img = Tensor::zeros({1, 1, 96, 192});
  const int by = 11, bx = 11;  // rows/cols {11,12}: 11 % 4 == 3
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      img.data()[(by + dy) * 192 + (bx + dx)] = 1.0f;
    }
  }
  Tensor small = resize(img, 72, 144, ResizeMethod::kBilinear);

  float peak = 0.0f;
  double oracle_peak = 0.0;
  for (int y = 0; y < 72; ++y) {
    for (int x = 0; x < 144; ++x) {
      peak = std::max(peak, small.data()[y * 144 + x]);
      oracle_peak = std::max(oracle_peak, oracle_bilinear(img, 72, 144, y, x));
      CHECK(small.data()[y * 144 + x] ==
            doctest::Approx(oracle_bilinear(img, 72, 144, y, x)).epsilon(1e-5));
    }
  }
  CHECK(peak < 1.0f);
  CHECK(oracle_peak < 1.0);
  CHECK(peak == doctest::Approx(oracle_peak).epsilon(1e-5));
}

TEST_CASE("bilinear resize gradient matches finite differences") {
  Rng rng(53);
  Tensor in = random_tensor({1, 2, 8, 10}, rng, 1.0f, true);
  Rng proj_rng(59);
  Tensor proj = random_tensor({1, 2, 6, 7}, proj_rng);
  Tensor loss = sum(mul(resize(in, 6, 7, ResizeMethod::kBilinear), proj));
  loss.backward();
  auto loss_fn = [&]() {
    NoGradGuard ng;
    return static_cast<double>(
        sum(mul(resize(in, 6, 7, ResizeMethod::kBilinear), proj)).item());
  };
  Rng probe(61);
  CHECK(testutil::fd_probe(loss_fn, in, in.grad_vec(), 10, probe) < 1e-3);
}

TEST_CASE("backward of sum gives ones and of sum of squares gives 2x") {
  Rng rng(67);
  Tensor x = random_tensor({3, 4}, rng, 1.0f, true);
  sum(x).backward();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    CHECK(x.grad_vec()[i] == doctest::Approx(1.0f));
  }

  Tensor y = random_tensor({5}, rng, 1.0f, true);
  sum(mul(y, y)).backward();
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.grad_vec()[i] == doctest::Approx(2.0f * y.data()[i]));
  }
}

TEST_CASE("repeated backward accumulates") {
  Tensor x = Tensor::full({3}, 2.0f, true);
  Tensor loss = sum(x);
  loss.backward();
  loss.backward();
  for (int i = 0; i < 3; ++i) CHECK(x.grad_vec()[i] == doctest::Approx(2.0f));
}

TEST_CASE("backward on an unrecorded tensor errors") {
  Tensor x = Tensor::full({1}, 1.0f);
  CHECK_THROWS_AS(x.backward(), std::runtime_error);
}

TEST_CASE("small policy-shaped stack gradients match finite differences") {
  // conv -> BN -> relu -> pool -> affine -> KL loss, the full op chain used
  // by the policy network, finite-difference checked per parameter
  Rng rng(71);
  Tensor img = random_tensor({2, 2, 8, 8}, rng, 0.7f);
  ConvParams conv;
  conv.weights = random_tensor({4, 2, 3, 3}, rng, 0.4f, true);
  conv.stride = 2;
  conv.padding = 1;
  BnParams bn = BnParams::identity(4);
  Tensor w_fc = random_tensor({5, 4}, rng, 0.4f, true);
  Tensor b_fc = random_tensor({5}, rng, 0.1f, true);
  Tensor target = Tensor::from_data({2, 5}, {0.1f, 0.2f, 0.3f, 0.3f, 0.1f,
                                             0.5f, 0.1f, 0.1f, 0.2f, 0.1f});

  auto forward = [&]() {
    Tensor h = conv2d(img, conv);
    h = batch_norm(h, bn, BnMode::kTrain);
    h = relu(h);
    Tensor pooled = global_avg_pool(h);
    Tensor logits = affine(pooled, w_fc, b_fc);
    return kl_div_with_logits(target, logits);
  };

  Tensor loss = forward();
  loss.backward();

  auto loss_fn = [&]() {
    NoGradGuard ng;
    return static_cast<double>(forward().item());
  };
  Rng probe(73);
  CHECK(testutil::fd_probe(loss_fn, conv.weights, conv.weights.grad_vec(), 5, probe) < 1e-3);
  CHECK(testutil::fd_probe(loss_fn, bn.gamma, bn.gamma.grad_vec(), 4, probe) < 1e-3);
  CHECK(testutil::fd_probe(loss_fn, bn.beta, bn.beta.grad_vec(), 4, probe) < 1e-3);
  CHECK(testutil::fd_probe(loss_fn, w_fc, w_fc.grad_vec(), 5, probe) < 1e-3);
  CHECK(testutil::fd_probe(loss_fn, b_fc, b_fc.grad_vec(), 5, probe) < 1e-3);
}

TEST_CASE("relu avgpool softmax log gradients match finite differences") {
  Rng rng(79);
  Tensor x = random_tensor({2, 3, 6, 6}, rng, 1.0f, true);
  Rng proj_rng(83);
  Tensor proj = random_tensor({2, 3, 2, 2}, proj_rng);
  auto fwd_pool = [&]() {
    return sum(mul(avg_pool2d(relu(x), 3, 3, 2), proj));
  };
  Tensor l1 = fwd_pool();
  l1.backward();
  auto fn1 = [&]() {
    NoGradGuard ng;
    return static_cast<double>(fwd_pool().item());
  };
  Rng probe(89);
  CHECK(testutil::fd_probe(fn1, x, x.grad_vec(), 10, probe) < 1e-3);

  Tensor z = random_tensor({3, 4}, rng, 1.0f, true);
  Tensor proj2 = random_tensor({3, 4}, proj_rng);
  auto fwd_sm = [&]() { return sum(mul(softmax(z), proj2)); };
  Tensor l2 = fwd_sm();
  l2.backward();
  auto fn2 = [&]() {
    NoGradGuard ng;
    return static_cast<double>(fwd_sm().item());
  };
  CHECK(testutil::fd_probe(fn2, z, z.grad_vec(), 8, probe) < 1e-3);

  Tensor w = random_tensor({3, 4}, rng, 1.0f, true);
  auto fwd_ls = [&]() { return sum(mul(log_softmax(w), proj2)); };
  fwd_ls().backward();
  auto fn3 = [&]() {
    NoGradGuard ng;
    return static_cast<double>(fwd_ls().item());
  };
  CHECK(testutil::fd_probe(fn3, w, w.grad_vec(), 8, probe) < 1e-3);

  Tensor pos = Tensor::from_data({4}, {0.5f, 1.5f, 2.5f, 0.25f}, true);
  auto fwd_log = [&]() { return sum(log_elem(pos)); };
  fwd_log().backward();
  auto fn4 = [&]() {
    NoGradGuard ng;
    return static_cast<double>(fwd_log().item());
  };
  CHECK(testutil::fd_probe(fn4, pos, pos.grad_vec(), 4, probe) < 1e-3);
}

TEST_CASE("softmax_cross_entropy2d matches uniform and saturated cases") {
  // uniform logits over 5 classes -> ln 5
  Tensor logits = Tensor::zeros({1, 5, 2, 2});
  Tensor mask = Tensor::zeros({1, 2, 2});
  Tensor loss = softmax_cross_entropy2d(logits, mask);
  CHECK(loss.item() == doctest::Approx(std::log(5.0)).epsilon(1e-6));

  // strongly correct logits -> ~0
  Tensor good = Tensor::zeros({1, 5, 2, 2});
  for (int k = 0; k < 4; ++k) good.data()[0 * 4 + k] = 25.0f;
  Tensor loss2 = softmax_cross_entropy2d(good, mask);
  CHECK(loss2.item() < 1e-6);

  // out-of-range class errors
  Tensor bad_mask = Tensor::full({1, 2, 2}, 7.0f);
  CHECK_THROWS_AS(softmax_cross_entropy2d(logits, bad_mask), std::invalid_argument);
}

TEST_CASE("softmax_cross_entropy2d gradient matches finite differences") {
  Rng rng(97);
  Tensor logits = random_tensor({2, 4, 3, 3}, rng, 1.0f, true);
  Tensor mask = Tensor::zeros({2, 3, 3});
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    mask.data()[i] = static_cast<float>(rng.uniform_int(4));
  }
  Tensor loss = softmax_cross_entropy2d(logits, mask);
  loss.backward();
  auto loss_fn = [&]() {
    NoGradGuard ng;
    return static_cast<double>(softmax_cross_entropy2d(logits, mask).item());
  };
  Rng probe(101);
  CHECK(testutil::fd_probe(loss_fn, logits, logits.grad_vec(), 10, probe) < 1e-3);
}

TEST_CASE("non-finite forward values are a hard error") {
  Tensor x = Tensor::full({2}, 1e30f);
  CHECK_THROWS_AS(mul(x, x), std::runtime_error);  // overflows to inf
  Tensor zero = Tensor::zeros({2});
  CHECK_THROWS_AS(log_elem(zero), std::runtime_error);
}

TEST_CASE("tensor serialization round-trips bitwise") {
  Rng rng(103);
  Tensor t = random_tensor({2, 3, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  Tensor back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  CHECK(testutil::bitwise_equal(back, t));
}

TEST_CASE("tensor read rejects corrupt magic") {
  std::stringstream ss;
  ss << "JUNKxxxxxxxxxxxxxxx";
  CHECK_THROWS_AS(read_tensor(ss), std::runtime_error);
}

TEST_CASE("identical seeds give bit-identical op outputs") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor in = Tensor::randn({2, 3, 10, 12}, rng, 1.0f);
    ConvParams p;
    p.weights = Tensor::randn({4, 3, 3, 3}, rng, 0.3f);
    p.stride = 2;
    p.padding = 1;
    BnParams bn = BnParams::identity(4);
    return batch_norm(conv2d(in, p), bn, BnMode::kTrain);
  };
  Tensor a = run(12345);
  Tensor b = run(12345);
  CHECK(testutil::bitwise_equal(a, b));
}

TEST_CASE("sgd momentum step leaves frozen params untouched") {
  Tensor w = Tensor::full({2}, 1.0f, true);
  Tensor frozen = Tensor::full({2}, 1.0f, false);
  Tensor joined = add(scale(w, 2.0f), frozen);
  sum(joined).backward();
  std::vector<Tensor> params{w, frozen};
  SgdOptimizer opt(0.1f, 0.9f);
  opt.step(params);
  CHECK(w.data()[0] == doctest::Approx(1.0f - 0.1f * 2.0f));
  CHECK(frozen.data()[0] == doctest::Approx(1.0f));
  opt.zero_grad(params);
  CHECK(!w.has_grad());
}
