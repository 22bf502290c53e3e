#include <gtest/gtest.h>

#include "deepsteer/grad_check.hpp"
#include "deepsteer/layers.hpp"
#include "test_util.hpp"

namespace ds = deepsteer;
using ds::Dims4;
using ds::Dims5;
using ds::Kernel5;
using ds::Stride2;
using ds::Tensor4;
using namespace deepsteer::testing;

namespace {

ds::ConvLstmParams<double> random_convlstm(std::size_t cin, std::size_t hid, std::mt19937_64& rng,
                                           double scale = 0.5) {
  ds::ConvLstmParams<double> p(cin, hid);
  for (std::size_t g = 0; g < 4; ++g) {
    p.wx[g] = random_kernel(p.wx[g].dims(), rng, scale);
    p.wh[g] = random_kernel(p.wh[g].dims(), rng, scale);
    p.b[g] = random_vector(hid, rng, -0.5, 0.5);
  }
  return p;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Gate equations written out with scalar loops: 3x3 valid convolution of x_t
/// and of H_{t-1} zero-padded by one on every border.
ds::ConvLstmState<double> convlstm_oracle_step(const Tensor4<double>& x,
                                               const ds::ConvLstmState<double>& s,
                                               const ds::ConvLstmParams<double>& p,
                                               bool standard) {
  const std::size_t W = x.dims().w, H = x.dims().h, C = x.dims().c;
  const std::size_t hw = W - 2, hh = H - 2, hid = p.hidden();
  auto hpad = [&](long px, long py, std::size_t ch) {
    const long ux = px - 1, uy = py - 1;
    if (ux < 0 || uy < 0 || ux >= static_cast<long>(hw) || uy >= static_cast<long>(hh)) return 0.0;
    return s.h(static_cast<std::size_t>(ux), static_cast<std::size_t>(uy), ch, 0);
  };
  ds::ConvLstmState<double> out{Tensor4<double>(hw, hh, hid, 1), Tensor4<double>(hw, hh, hid, 1)};
  for (std::size_t co = 0; co < hid; ++co)
    for (std::size_t y = 0; y < hh; ++y)
      for (std::size_t xx = 0; xx < hw; ++xx) {
        double a[4];
        for (std::size_t g = 0; g < 4; ++g) {
          double v = p.b[g][co];
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              for (std::size_t ci = 0; ci < C; ++ci) v += p.wx[g](kx, ky, ci, co, 0) * x(xx + kx, y + ky, ci, 0);
              for (std::size_t ci = 0; ci < hid; ++ci)
                v += p.wh[g](kx, ky, ci, co, 0) * hpad(static_cast<long>(xx + kx), static_cast<long>(y + ky), ci);
            }
          a[g] = v;
        }
        const double i = sigm(a[0]), o = sigm(a[1]), f = sigm(a[2]), cand = std::tanh(a[3]);
        const double c_prev = s.c(xx, y, co, 0);
        const double c = f * c_prev + i * cand;
        out.c(xx, y, co, 0) = c;
        out.h(xx, y, co, 0) = o * std::tanh(standard ? c : c_prev);
      }
  return out;
}

}  // namespace

TEST(StconvLayer, ReluKillAndIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor(Dims4{4, 4, 1, 2}, rng, 0.0, 1.0);
  Kernel5<double> neg(Dims5{1, 1, 1, 1, 1}, -1.0);
  auto y = ds::stconv_layer_forward(x, neg, Stride2{1, 1}, 1.0, true, rng);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);

  Kernel5<double> id(Dims5{1, 1, 1, 1, 1}, 1.0);
  EXPECT_EQ(ds::stconv_layer_forward(x, id, Stride2{1, 1}, 1.0, true, rng), x);
}

TEST(StconvLayer, CompositeBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    auto x = random_tensor(Dims4{7, 6, 2, 4}, rng);
    auto k = random_kernel(Dims5{3, 2, 2, 3, 2}, rng);
    const double keep = trial % 2 == 0 ? 1.0 : 0.5;
    const std::uint64_t seed = 100 + trial;
    ds::StconvLayerCache<double> cache;
    std::mt19937_64 r0(seed);
    auto y = ds::stconv_layer_forward(x, k, Stride2{2, 1}, keep, true, r0, &cache);
    auto probe = random_tensor(y.dims(), rng);
    auto g = ds::stconv_layer_backward(x, k, Stride2{2, 1}, cache, probe);
    auto loss = [&] {
      std::mt19937_64 r(seed);
      return dot(probe.values(), ds::stconv_layer_forward(x, k, Stride2{2, 1}, keep, true, r).values());
    };
    std::vector<ds::GradCheckParam<double>> params{{x.values(), g.input.values(), "x"},
                                                   {k.values(), g.kernel.values(), "k"}};
    ASSERT_LT(ds::grad_check<double>(loss, params).max_rel_error, 1e-4);
  }
}

TEST(ConvLstm, ZeroCaseGatesAreHalf) {
  ds::ConvLstmParams<double> p(2, 3);
  Tensor4<double> x(5, 4, 2, 1);
  auto s0 = ds::ConvLstmState<double>::zeros(Dims4{3, 2, 3, 1});
  ds::ConvLstmStepCache<double> cache;
  auto s1 = ds::convlstm_step(x, s0, p, {}, &cache);
  for (std::size_t g : {ds::gate_i, ds::gate_o, ds::gate_f}) {
    for (double v : cache.gate[g].values()) EXPECT_EQ(v, 0.5);
  }
  for (double v : cache.gate[ds::gate_c].values()) EXPECT_EQ(v, 0.0);
  for (double v : s1.c.values()) EXPECT_EQ(v, 0.0);
  for (double v : s1.h.values()) EXPECT_EQ(v, 0.0);
}

TEST(ConvLstm, PaperShapes) {
  std::mt19937_64 rng(3);
  auto p = random_convlstm(64, 64, rng, 0.05);
  auto x = random_tensor(Dims4{16, 10, 64, 1}, rng);
  EXPECT_EQ(ds::convlstm_state_dims(x.dims(), p), (Dims4{14, 8, 64, 1}));
  auto s = ds::convlstm_step(x, ds::ConvLstmState<double>::zeros(Dims4{14, 8, 64, 1}), p);
  EXPECT_EQ(s.h.dims(), (Dims4{14, 8, 64, 1}));
  EXPECT_EQ(s.c.dims(), s.h.dims());
  EXPECT_THROW(ds::convlstm_step(x, ds::ConvLstmState<double>::zeros(Dims4{16, 10, 64, 1}), p),
               ds::DimensionError);
}

TEST(ConvLstm, RolloutMatchesScalarOracle) {
  std::mt19937_64 rng(4);
  for (auto rule : {ds::HiddenUpdate::standard, ds::HiddenUpdate::as_printed}) {
    auto p = random_convlstm(3, 4, rng);
    auto s = ds::ConvLstmState<double>::zeros(Dims4{4, 3, 4, 1});
    auto ref = s;
    ds::ConvLstmOptions opts{rule, true, ds::PadMode::symmetric};
    for (int t = 0; t < 10; ++t) {
      auto x = random_tensor(Dims4{6, 5, 3, 1}, rng);
      s = ds::convlstm_step(x, s, p, opts);
      ref = convlstm_oracle_step(x, ref, p, rule == ds::HiddenUpdate::standard);
    }
    for (std::size_t k = 0; k < s.h.size(); ++k) {
      EXPECT_NEAR(s.h[k], ref.h[k], 1e-10);
      EXPECT_NEAR(s.c[k], ref.c[k], 1e-10);
    }
  }
}

TEST(ConvLstm, GateRangeAndCellBound) {
  std::mt19937_64 rng(5);
  auto p = random_convlstm(2, 3, rng, 1.0);
  auto s = ds::ConvLstmState<double>::zeros(Dims4{3, 3, 3, 1});
  for (int t = 0; t < 20; ++t) {
    ds::ConvLstmStepCache<double> cache;
    auto x = random_tensor(Dims4{5, 5, 2, 1}, rng, -2.0, 2.0);
    auto next = ds::convlstm_step(x, s, p, {}, &cache);
    for (std::size_t g : {ds::gate_i, ds::gate_o, ds::gate_f}) {
      for (double v : cache.gate[g].values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
    for (std::size_t k = 0; k < next.c.size(); ++k) {
      const double bound = std::abs(cache.gate[ds::gate_f][k]) * std::abs(s.c[k]) +
                           std::abs(cache.gate[ds::gate_i][k]) * std::abs(cache.gate[ds::gate_c][k]);
      EXPECT_LE(std::abs(next.c[k]), bound + 1e-15);
    }
    s = next;
  }
}

TEST(ConvLstm, ZeroParamsFixedPoint) {
  ds::ConvLstmParams<double> p(2, 3);
  std::mt19937_64 rng(6);
  auto s = ds::ConvLstmState<double>::zeros(Dims4{2, 2, 3, 1});
  for (int t = 0; t < 5; ++t) {
    s = ds::convlstm_step(random_tensor(Dims4{4, 4, 2, 1}, rng), s, p);
    for (double v : s.c.values()) EXPECT_EQ(v, 0.0);
    for (double v : s.h.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(ConvLstm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (auto rule : {ds::HiddenUpdate::standard, ds::HiddenUpdate::as_printed}) {
    for (bool bias : {true, false}) {
      for (auto pad : {ds::PadMode::symmetric, ds::PadMode::trailing}) {
        ds::ConvLstmOptions opts{rule, bias, pad};
        auto p = random_convlstm(2, 3, rng);
        const Dims4 sd{3, 2, 3, 1};
        auto s0 = ds::ConvLstmState<double>{random_tensor(sd, rng), random_tensor(sd, rng)};
        std::vector<Tensor4<double>> xs;
        for (int t = 0; t < 3; ++t) xs.push_back(random_tensor(Dims4{5, 4, 2, 1}, rng));
        auto ph = random_tensor(sd, rng);
        auto pc = random_tensor(sd, rng);

        auto run = [&](std::vector<ds::ConvLstmStepCache<double>>* caches) {
          auto s = s0;
          for (std::size_t t = 0; t < xs.size(); ++t) {
            s = ds::convlstm_step(xs[t], s, p, opts, caches ? &(*caches)[t] : nullptr);
          }
          return s;
        };
        std::vector<ds::ConvLstmStepCache<double>> caches(xs.size());
        run(&caches);
        ds::ConvLstmParams<double> grads(2, 3);
        Tensor4<double> dh = ph, dc = pc;
        std::vector<Tensor4<double>> dxs(xs.size());
        for (std::size_t t = xs.size(); t-- > 0;) {
          auto g = ds::convlstm_step_backward(p, opts, caches[t], dh, dc, grads);
          dxs[t] = g.x;
          dh = g.h_prev;
          dc = g.c_prev;
        }
        auto loss = [&] {
          auto s = run(nullptr);
          return dot(ph.values(), s.h.values()) + dot(pc.values(), s.c.values());
        };
        std::vector<ds::GradCheckParam<double>> params;
        for (std::size_t g = 0; g < 4; ++g) {
          params.push_back({p.wx[g].values(), grads.wx[g].values(), "wx"});
          params.push_back({p.wh[g].values(), grads.wh[g].values(), "wh"});
          if (bias) params.push_back({p.b[g], grads.b[g], "b"});
        }
        for (std::size_t t = 0; t < xs.size(); ++t) params.push_back({xs[t].values(), dxs[t].values(), "x"});
        params.push_back({s0.h.values(), dh.values(), "h0"});
        params.push_back({s0.c.values(), dc.values(), "c0"});
        auto rep = ds::grad_check<double>(loss, params);
        EXPECT_LT(rep.max_rel_error, 1e-4) << "param " << params[rep.worst_param].name;
      }
    }
  }
}

TEST(VectorLstm, ZeroWeightsGiveZeroOutput) {
  ds::VectorLstmParams<double> p(131, 64);
  auto s = ds::VectorLstmState<double>::zeros(64);
  std::mt19937_64 rng(8);
  auto x = random_vector(131, rng);
  auto h = ds::vector_lstm_step<double>(x, s, p);
  ASSERT_EQ(h.size(), 64u);
  for (double v : h) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(ds::vector_lstm_step<double>(std::vector<double>(130), s, p), ds::DimensionError);
}

TEST(VectorLstm, SaturatedGatesFreezeCell) {
  const std::size_t n = 4, in = 5;
  ds::VectorLstmParams<double> p(in, n);
  std::mt19937_64 rng(9);
  p.input.weights = random_vector(4 * n * in, rng, -0.1, 0.1);
  for (std::size_t k = 0; k < n; ++k) {
    p.input.bias[k] = -800.0;     // input gate -> 0
    p.input.bias[n + k] = 800.0;  // forget gate -> 1
  }
  auto s = ds::VectorLstmState<double>{random_vector(n, rng), random_vector(n, rng)};
  const auto c0 = s.c;
  for (int t = 0; t < 5; ++t) {
    ds::vector_lstm_step<double>(random_vector(in, rng), s, p);
    EXPECT_EQ(s.c, c0);
  }
}

TEST(VectorLstm, ThreeStepBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  const std::size_t in = 7, n = 5;
  ds::VectorLstmParams<double> p(in, n);
  p.input.weights = random_vector(4 * n * in, rng);
  p.input.bias = random_vector(4 * n, rng);
  p.recurrent = random_vector(4 * n * n, rng);
  std::vector<std::vector<double>> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(random_vector(in, rng));
  auto probe = random_vector(n, rng);
  auto init = ds::VectorLstmState<double>{random_vector(n, rng), random_vector(n, rng)};

  std::vector<ds::VectorLstmCache<double>> caches(3);
  auto s = init;
  for (int t = 0; t < 3; ++t) ds::vector_lstm_step<double>(xs[t], s, p, &caches[t]);
  ds::VectorLstmParams<double> grads(in, n);
  std::vector<double> dh = probe, dc(n, 0.0);
  std::vector<std::vector<double>> dxs(3);
  for (int t = 2; t >= 0; --t) {
    auto g = ds::vector_lstm_step_backward<double>(p, caches[t], dh, dc, grads);
    dxs[t] = g.x;
    dh = g.h_prev;
    dc = g.c_prev;
  }
  auto loss = [&] {
    auto st = init;
    std::vector<double> h;
    for (int t = 0; t < 3; ++t) h = ds::vector_lstm_step<double>(xs[t], st, p);
    return dot(probe, h);
  };
  std::vector<ds::GradCheckParam<double>> params{{p.input.weights, grads.input.weights, "W"},
                                                 {p.input.bias, grads.input.bias, "b"},
                                                 {p.recurrent, grads.recurrent, "U"},
                                                 {init.h, dh, "h0"},
                                                 {init.c, dc, "c0"}};
  for (int t = 0; t < 3; ++t) params.push_back({xs[t], dxs[t], "x"});
  EXPECT_LT(ds::grad_check<double>(loss, params).max_rel_error, 1e-4);
}

TEST(ResidualAggregate, IdentityProjection) {
  std::mt19937_64 rng(11);
  auto layer = random_tensor(Dims4{4, 4, 8, 3}, rng);  // final slice has 128 entries
  ds::DenseWeights<double> proj(128, 128);
  for (std::size_t i = 0; i < 128; ++i) proj.at(i, i) = 1.0;
  std::vector<const Tensor4<double>*> layers{&layer};
  std::vector<const ds::DenseWeights<double>*> projs{&proj};
  auto out = ds::residual_aggregate<double>(layers, projs);
  auto slice = ds::final_slice(layer);
  ASSERT_EQ(out.size(), 128u);
  for (std::size_t i = 0; i < 128; ++i) EXPECT_EQ(out[i], slice[i]);
}

TEST(ResidualAggregate, AdditivityZeroAndSuperposition) {
  std::mt19937_64 rng(12);
  auto l1 = random_tensor(Dims4{3, 2, 2, 2}, rng);
  auto l2 = random_tensor(Dims4{2, 2, 1, 1}, rng);
  ds::DenseWeights<double> p1(128, 12), p2(128, 4);
  p1.weights = random_vector(128 * 12, rng);
  p1.bias = random_vector(128, rng);
  p2.weights = random_vector(128 * 4, rng);
  p2.bias = random_vector(128, rng);
  std::vector<const ds::DenseWeights<double>*> projs{&p1, &p2};
  std::vector<const Tensor4<double>*> layers{&l1, &l2};
  auto both = ds::residual_aggregate<double>(layers, projs);
  auto t1 = ds::dense_forward<double>(p1, ds::final_slice(l1));
  auto t2 = ds::dense_forward<double>(p2, ds::final_slice(l2));
  for (std::size_t i = 0; i < 128; ++i) EXPECT_NEAR(both[i], t1[i] + t2[i], 1e-12);

  Tensor4<double> z1(l1.dims()), z2(l2.dims());
  std::vector<const Tensor4<double>*> zeros{&z1, &z2};
  auto zb = ds::residual_aggregate<double>(zeros, projs);
  for (std::size_t i = 0; i < 128; ++i) EXPECT_NEAR(zb[i], p1.bias[i] + p2.bias[i], 1e-15);

  // Linear in each layer's activation once biases are removed.
  auto m1 = random_tensor(l1.dims(), rng);
  Tensor4<double> sum(l1.dims());
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = 2.0 * l1[i] + m1[i];
  std::vector<const Tensor4<double>*> a{&sum, &l2}, b{&l1, &l2}, c{&m1, &l2}, d{&z1, &l2};
  auto fa = ds::residual_aggregate<double>(a, projs);
  auto fb = ds::residual_aggregate<double>(b, projs);
  auto fc = ds::residual_aggregate<double>(c, projs);
  auto fd = ds::residual_aggregate<double>(d, projs);
  for (std::size_t i = 0; i < 128; ++i) {
    EXPECT_NEAR(fa[i] - fd[i], 2.0 * (fb[i] - fd[i]) + (fc[i] - fd[i]), 1e-10);
  }

  ds::DenseWeights<double> wrong(128, 5);
  std::vector<const ds::DenseWeights<double>*> bad{&wrong, &p2};
  EXPECT_THROW(ds::residual_aggregate<double>(layers, bad), ds::DimensionError);
}

TEST(ResidualAggregate, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto l1 = random_tensor(Dims4{3, 2, 2, 2}, rng);
  auto l2 = random_tensor(Dims4{2, 2, 1, 1}, rng);
  ds::DenseWeights<double> p1(6, 12), p2(6, 4), g1(6, 12), g2(6, 4);
  p1.weights = random_vector(72, rng);
  p2.weights = random_vector(24, rng);
  std::vector<const ds::DenseWeights<double>*> projs{&p1, &p2};
  std::vector<ds::DenseWeights<double>*> pgrads{&g1, &g2};
  std::vector<const Tensor4<double>*> layers{&l1, &l2};
  auto probe = random_vector(6, rng);
  auto lg = ds::residual_aggregate_backward<double>(layers, projs, probe, pgrads);
  auto loss = [&] { return dot(probe, ds::residual_aggregate<double>(layers, projs)); };
  std::vector<ds::GradCheckParam<double>> params{{l1.values(), lg[0].values(), "l1"},
                                                 {l2.values(), lg[1].values(), "l2"},
                                                 {p1.weights, g1.weights, "p1"},
                                                 {p2.bias, g2.bias, "b2"}};
  EXPECT_LT(ds::grad_check<double>(loss, params).max_rel_error, 1e-6);
}
