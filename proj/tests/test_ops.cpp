#include <functional>

#include <gtest/gtest.h>

#include "cdhvae/core/ops.hpp"
#include "cdhvae/core/random.hpp"

namespace ad = cdhvae::ad;
using cdhvae::Rng;
using cdhvae::Shape;
using cdhvae::Tensor;

namespace {

// Builds a scalar from the given leaves; used for both the analytic and the
// finite-difference evaluation.
using Builder = std::function<ad::Var<double>(std::vector<ad::Var<double>>&)>;

// Central differences against the tape gradient for every leaf element.
double max_rel_error(std::vector<Tensor<double>> leaves, const Builder& build) {
  std::vector<ad::Parameter<double>> params(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    params[i].value = leaves[i];
    params[i].grad = Tensor<double>(leaves[i].shape());
  }
  auto eval = [&](bool record) {
    ad::Tape<double> tape(record);
    std::vector<ad::Var<double>> vars;
    for (auto& p : params) vars.push_back(tape.parameter(p));
    auto out = ad::sum(build(vars));
    if (record) tape.backward(out);
    return out.value()[0];
  };
  eval(true);
  double worst = 0;
  const double h = 1e-6;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + h;
      const double fp = eval(false);
      p.value[i] = keep - h;
      const double fm = eval(false);
      p.value[i] = keep;
      const double fd = (fp - fm) / (2 * h);
      const double an = p.grad[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

Tensor<double> randn(Shape s, std::uint64_t seed) { return Rng(seed).normal_tensor<double>(s); }

}  // namespace

TEST(Ops, ElementwiseGradients) {
  auto a = randn({2, 3, 2, 2}, 1);
  auto b = randn({2, 3, 2, 2}, 2);
  EXPECT_LT(max_rel_error({a, b}, [](auto& v) { return ad::mul(ad::swish(v[0]), ad::sub(v[1], v[0])); }), 1e-6);
  EXPECT_LT(max_rel_error({a, b}, [](auto& v) { return ad::scale(ad::add(v[0], v[1]), 0.3); }), 1e-6);
  EXPECT_LT(max_rel_error({a}, [](auto& v) { return ad::mul(ad::clamp(v[0], -0.5, 0.5), v[0]); }), 1e-5);
}

TEST(Ops, ShapeGradients) {
  auto a = randn({2, 3, 2, 2}, 3);
  auto b = randn({2, 2, 2, 2}, 4);
  auto c = randn({1, 3, 2, 2}, 5);
  auto w = randn({2, 5, 4, 4}, 6);
  EXPECT_LT(max_rel_error({a, b, w}, [](auto& v) {
              auto cat = ad::concat_channels(v[0], v[1]);
              return ad::mul(ad::upsample2(cat), v[2]);
            }),
            1e-6);
  EXPECT_LT(max_rel_error({a, c}, [](auto& v) {
              auto s = ad::slice_channels(v[0], 1, 3);
              return ad::mul(s, ad::slice_channels(ad::broadcast_batch(v[1], 2), 0, 2));
            }),
            1e-6);
}

TEST(Ops, LinearGradient) {
  auto x = randn({3, 4, 1, 1}, 7);
  auto w = randn({1, 1, 5, 4}, 8);
  auto b = randn({1, 5, 1, 1}, 9);
  auto t = randn({3, 5, 1, 1}, 10);
  EXPECT_LT(max_rel_error({x, w, b, t}, [](auto& v) { return ad::mul(ad::linear(v[0], v[1], v[2]), v[3]); }),
            1e-6);
}

TEST(Ops, ConvGradients) {
  auto x = randn({2, 3, 6, 4}, 11);
  for (ad::ConvSpec spec : {ad::ConvSpec{3, 1, 1, false}, ad::ConvSpec{3, 2, 1, false}, ad::ConvSpec{1, 1, 0, false},
                            ad::ConvSpec{3, 1, 1, true}, ad::ConvSpec{5, 1, 2, true}}) {
    const int cout = spec.depthwise ? 3 : 2;
    auto w = randn({cout, spec.depthwise ? 1 : 3, spec.kernel, spec.kernel}, 12);
    auto b = randn({1, cout, 1, 1}, 13);
    const int ho = (6 + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    const int wo = (4 + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    auto t = randn({2, cout, ho, wo}, 14);
    const double err = max_rel_error({x, w, b, t}, [spec](auto& v) {
      return ad::mul(ad::conv2d(v[0], v[1], v[2], spec), v[3]);
    });
    EXPECT_LT(err, 1e-5) << "kernel " << spec.kernel << " stride " << spec.stride << " dw " << spec.depthwise;
  }
}

TEST(Ops, ConvMatchesDirectSum) {
  // Dense 3x3 conv against an explicit loop.
  auto x = randn({1, 2, 5, 5}, 15);
  auto w = randn({3, 2, 3, 3}, 16);
  ad::Tape<double> tape(false);
  auto y = ad::conv2d(tape.constant(x), tape.constant(w), ad::Var<double>(), ad::ConvSpec{3, 2, 1, false});
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (int co = 0; co < 3; ++co)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky;
              const int ix = ox * 2 - 1 + kx;
              if (iy >= 0 && iy < 5 && ix >= 0 && ix < 5) acc += w.at(co, ci, ky, kx) * x.at(0, ci, iy, ix);
            }
        EXPECT_NEAR(y.value().at(0, co, oy, ox), acc, 1e-12);
      }
}

TEST(Ops, InstanceNormGradient) {
  auto x = randn({2, 3, 4, 3}, 17);
  auto g = randn({2, 3, 1, 1}, 18);
  auto b = randn({2, 3, 1, 1}, 19);
  auto t = randn({2, 3, 4, 3}, 20);
  EXPECT_LT(max_rel_error({x, g, b, t},
                          [](auto& v) { return ad::mul(ad::instance_norm_affine(v[0], v[1], v[2], 1e-5), v[3]); }),
            1e-5);
  auto g1 = randn({1, 3, 1, 1}, 21);
  auto b1 = randn({1, 3, 1, 1}, 22);
  EXPECT_LT(max_rel_error({x, g1, b1, t},
                          [](auto& v) { return ad::mul(ad::instance_norm_affine(v[0], v[1], v[2], 1e-5), v[3]); }),
            1e-5);
}

TEST(Ops, GaussianTermsGradient) {
  auto qm = randn({2, 2, 3, 1}, 23);
  auto ql = randn({2, 2, 3, 1}, 24);
  auto pm = randn({2, 2, 3, 1}, 25);
  auto pl = randn({2, 2, 3, 1}, 26);
  EXPECT_LT(max_rel_error({qm, ql, pm, pl}, [](auto& v) { return ad::gaussian_kl(v[0], v[1], v[2], v[3]); }),
            1e-6);
  auto noise = randn({2, 2, 3, 1}, 27);
  auto target = randn({2, 2, 3, 1}, 28);
  EXPECT_LT(max_rel_error({qm, ql}, [&](auto& v) {
              return ad::gaussian_nll_unit(target, ad::reparameterize(v[0], v[1], noise));
            }),
            1e-6);
}

TEST(Ops, KlClosedFormValues) {
  ad::Tape<double> tape(false);
  auto c = [&](double v) { return tape.constant(Tensor<double>(Shape{}, v)); };
  EXPECT_NEAR(ad::gaussian_kl(c(2.0), c(0.0), c(0.0), c(0.0)).value()[0], 2.0, 1e-12);
  EXPECT_NEAR(ad::gaussian_kl(c(0.0), c(std::log(4.0)), c(0.0), c(0.0)).value()[0], 0.5 * (3.0 - std::log(4.0)), 1e-12);
  EXPECT_EQ(ad::gaussian_kl(c(0.7), c(-1.3), c(0.7), c(-1.3)).value()[0], 0.0);
}

TEST(Ops, NonRecordingTapeKeepsNoClosures) {
  ad::Parameter<float> p{"w", Tensor<float>(Shape{1, 2, 1, 1}, 1.0f), Tensor<float>(Shape{1, 2, 1, 1})};
  ad::Tape<float> tape(false);
  auto v = ad::swish(tape.parameter(p));
  EXPECT_FALSE(v.requires_grad());
  EXPECT_THROW(tape.backward(ad::sum(v)), cdhvae::InputError);
}
