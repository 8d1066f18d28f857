#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <numeric>

#include "demist/checkpoint.hpp"
#include "demist/ops.hpp"
#include "gradcheck.hpp"

using namespace demist;
using testing::check_gradients;
using testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

// Weighted sum with fixed random weights so that every output entry matters.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 5) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, -1.0, 1.0, false)));
}

std::vector<double> conv_oracle(const std::vector<double>& x, const Shape& xs, const std::vector<double>& w,
                                const Shape& ws, const std::vector<double>& b, const ConvSpec& s, Shape& out_shape) {
  const std::size_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3], o = ws[0], kh = ws[2], kw = ws[3];
  const std::size_t oh = (h + 2 * s.padding - (s.dilation * (kh - 1) + 1)) / s.stride + 1;
  const std::size_t ow = (wd + 2 * s.padding - (s.dilation * (kw - 1) + 1)) / s.stride + 1;
  out_shape = {n, o, oh, ow};
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = b.empty() ? 0.0 : b[oc];
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * s.stride + i * s.dilation) - static_cast<long>(s.padding);
                const long ix = static_cast<long>(xx * s.stride + j * s.dilation) - static_cast<long>(s.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x[((bn * c + ic) * h + iy) * wd + ix] * w[((oc * c + ic) * kh + i) * kw + j];
              }
          out[((bn * o + oc) * oh + y) * ow + xx] = acc;
        }
  return out;
}

// Scatter form: every input pixel deposits a weighted kernel footprint.
std::vector<double> transpose_oracle(const std::vector<double>& x, const Shape& xs, const std::vector<double>& w,
                                     const Shape& ws, std::size_t stride, std::size_t pad, Shape& out_shape) {
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], wd = xs[3], co = ws[1], k = ws[2];
  const std::size_t oh = (h - 1) * stride + k - 2 * pad, ow = (wd - 1) * stride + k - 2 * pad;
  out_shape = {n, co, oh, ow};
  std::vector<double> out(n * co * oh * ow, 0.0);
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t ic = 0; ic < ci; ++ic)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx)
          for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j) {
                const long oy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ox = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                if (oy < 0 || ox < 0 || oy >= static_cast<long>(oh) || ox >= static_cast<long>(ow)) continue;
                out[((bn * co + oc) * oh + oy) * ow + ox] +=
                    x[((bn * ci + ic) * h + y) * wd + xx] * w[((ic * co + oc) * k + i) * k + j];
              }
  return out;
}

std::vector<double> to_vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction rejects bad shapes") {
    CHECK_THROWS_AS(Tensor<float>({2, 0}, {}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>({2, 2}, {1, 2, 3}), ShapeError);
    const Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6.0f);
  }

  TEST_CASE("backward of sum gives ones") {
    Rng rng(1);
    auto x = random_tensor({3, 4}, rng);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
  }

  TEST_CASE("backward of half squared norm gives x") {
    Rng rng(2);
    auto x = random_tensor({5}, rng);
    mul_scalar(sum(square(x)), 0.5).backward();
    for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
  }

  TEST_CASE("backward errors") {
    Rng rng(3);
    auto x = random_tensor({3}, rng);
    CHECK_THROWS(square(x).backward());
    auto loss = sum(square(x));
    loss.backward();
    CHECK_THROWS(loss.backward());
  }

  TEST_CASE("tensors without requires_grad never accumulate") {
    Rng rng(4);
    auto x = random_tensor({4}, rng);
    auto c = random_tensor({4}, rng, -1, 1, false);
    sum(mul(x, c)).backward();
    CHECK_FALSE(c.has_grad());
    CHECK(x.has_grad());
  }

  TEST_CASE("no-grad mode records nothing") {
    Rng rng(5);
    auto x = random_tensor({4}, rng);
    Tensor<double> y;
    {
      NoGradGuard guard;
      y = sum(square(x));
    }
    CHECK_THROWS(y.backward());
  }

  TEST_CASE("conv2d identity kernel") {
    const Tensor<float> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    ConvSpec s;
    s.kernel_h = s.kernel_w = 1;
    const auto y = conv2d(x, Tensor<float>({1, 1, 1, 1}, {1}), Tensor<float>({1}, {0}), s);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.data()[i] == x.data()[i]);
  }

  TEST_CASE("conv2d constant field") {
    ConvSpec s;
    const auto y = conv2d(Tensor<float>::full({1, 1, 5, 5}, 1.0f), Tensor<float>::full({1, 1, 3, 3}, 1.0f),
                          Tensor<float>({1}, {0}), s);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (float v : y.data()) CHECK(v == 9.0f);
  }

  TEST_CASE("conv2d same-padded centered delta is exact identity") {
    Rng rng(6);
    const auto x = random_tensor({2, 3, 6, 5}, rng, -1, 1, false);
    ConvSpec s = ConvSpec::same(3, 3, 3);
    std::vector<double> w(3 * 3 * 9, 0.0);
    for (std::size_t c = 0; c < 3; ++c) w[(c * 3 + c) * 9 + 4] = 1.0;
    const auto y = conv2d(x, Tensor<double>({3, 3, 3, 3}, w), Tensor<double>(), s);
    CHECK(to_vec(y) == to_vec(x));
  }

  TEST_CASE("conv2d matches the direct sliding-window oracle") {
    Rng rng(7);
    const auto x = random_tensor({1, 2, 7, 7}, rng, -1, 1, false);
    const auto w = random_tensor({3, 2, 3, 3}, rng, -1, 1, false);
    const auto b = random_tensor({3}, rng, -1, 1, false);
    for (std::size_t stride : {1u, 2u}) {
      ConvSpec s;
      s.in_channels = 2;
      s.out_channels = 3;
      s.dilation = 2;
      s.padding = 2;
      s.stride = stride;
      Shape os;
      const auto expect = conv_oracle(to_vec(x), x.shape(), to_vec(w), w.shape(), to_vec(b), s, os);
      const auto y = conv2d(x, w, b, s);
      REQUIRE(y.shape() == os);
      for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-9));
    }
  }

  TEST_CASE("conv2d error reporting") {
    ConvSpec s;
    s.in_channels = 2;
    CHECK_THROWS_AS(conv2d(Tensor<float>::zeros({1, 1, 5, 5}), Tensor<float>::zeros({1, 2, 3, 3}), Tensor<float>(), s),
                    ShapeError);
    s.in_channels = 1;
    s.kernel_h = s.kernel_w = 7;
    CHECK_THROWS_AS(conv2d(Tensor<float>::zeros({1, 1, 5, 5}), Tensor<float>::zeros({1, 1, 7, 7}), Tensor<float>(), s),
                    ShapeError);
  }

  TEST_CASE("transpose conv examples") {
    const Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
    const auto id = transpose_conv2d(x, Tensor<float>({1, 1, 1, 1}, {1}), Tensor<float>(), 1, 0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(id.data()[i] == x.data()[i]);

    const auto up = transpose_conv2d(x, Tensor<float>::full({1, 1, 2, 2}, 1.0f), Tensor<float>(), 2, 0);
    REQUIRE(up.shape() == Shape{1, 1, 4, 4});
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t xx = 0; xx < 4; ++xx) CHECK(up.at({0, 0, y, xx}) == x.at({0, 0, y / 2, xx / 2}));
  }

  TEST_CASE("transpose conv matches the scatter oracle and is the conv adjoint") {
    Rng rng(8);
    const auto x = random_tensor({2, 3, 4, 5}, rng, -1, 1, false);
    const auto w = random_tensor({3, 2, 4, 4}, rng, -1, 1, false);
    Shape os;
    const auto expect = transpose_oracle(to_vec(x), x.shape(), to_vec(w), w.shape(), 2, 1, os);
    const auto y = transpose_conv2d(x, w, Tensor<double>(), 2, 1);
    REQUIRE(y.shape() == os);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-9));

    // <conv(z), x> == <z, conv^T(x)> with the same weight viewed as [O=Ci, C=Co].
    const auto z = random_tensor(y.shape(), rng, -1, 1, false);
    ConvSpec s;
    s.kernel_h = s.kernel_w = 4;
    s.stride = 2;
    s.padding = 1;
    s.in_channels = 2;
    s.out_channels = 3;
    Shape cs;
    const auto cz = conv_oracle(to_vec(z), z.shape(), to_vec(w), w.shape(), {}, s, cs);
    REQUIRE(cs == x.shape());
    const auto xv = to_vec(x);
    const auto zv = to_vec(z);
    const double lhs = std::inner_product(cz.begin(), cz.end(), xv.begin(), 0.0);
    const double rhs = std::inner_product(zv.begin(), zv.end(), y.data().begin(), 0.0);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
  }

  TEST_CASE("instance norm examples") {
    const auto gamma = Tensor<double>::full({1}, 1.0);
    const auto beta = Tensor<double>::zeros({1});
    const auto c = instance_norm(Tensor<double>::full({1, 1, 2, 2}, 3.0), gamma, beta);
    for (double v : c.data()) CHECK(v == 0.0);

    const auto y = instance_norm(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), gamma, beta);
    double mean = 0, var = 0;
    for (double v : y.data()) mean += v / 4;
    for (double v : y.data()) var += (v - mean) * (v - mean) / 4;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));

    Rng rng(9);
    const auto z = instance_norm(random_tensor({2, 3, 4, 4}, rng, -1, 1, false), Tensor<double>::zeros({3}),
                                 Tensor<double>::full({3}, 5.0));
    for (double v : z.data()) CHECK(v == 5.0);
  }

  TEST_CASE("instance norm standardizes every instance channel") {
    Rng rng(10);
    const auto y = instance_norm(random_tensor({2, 3, 5, 4}, rng, -3, 7, false), Tensor<double>::full({3}, 1.0),
                                 Tensor<double>::zeros({3}));
    for (std::size_t i = 0; i < 6; ++i) {
      double mean = 0;
      for (std::size_t j = 0; j < 20; ++j) mean += y.data()[i * 20 + j] / 20;
      CHECK(std::abs(mean) < 1e-5);
    }
  }

  TEST_CASE("pool_reduce examples and loop oracle") {
    const auto c3 = Tensor<double>::full({2, 3, 4, 5}, 3.0);
    for (auto kind : {PoolKind::global_avg, PoolKind::global_max, PoolKind::channel_avg, PoolKind::channel_max}) {
      const auto pooled = pool_reduce(c3, kind);
      for (double v : pooled.data()) CHECK(v == doctest::Approx(3.0).epsilon(1e-15));
    }
    const Tensor<double> two({1, 2, 1, 1}, {-1, 4});
    CHECK(pool_reduce(two, PoolKind::channel_max).item() == 4.0);
    CHECK(pool_reduce(two, PoolKind::channel_avg).item() == 1.5);

    Rng rng(11);
    const auto x = random_tensor({2, 3, 4, 5}, rng, -1, 1, false);
    const auto ga = pool_reduce(x, PoolKind::global_avg);
    const auto gm = pool_reduce(x, PoolKind::global_max);
    const auto ca = pool_reduce(x, PoolKind::channel_avg);
    const auto cm = pool_reduce(x, PoolKind::channel_max);
    CHECK(ga.shape() == Shape{2, 3});
    CHECK(cm.shape() == Shape{2, 1, 4, 5});
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0, m = -1e9;
        for (std::size_t i = 0; i < 20; ++i) {
          s += x.data()[(n * 3 + c) * 20 + i];
          m = std::max(m, x.data()[(n * 3 + c) * 20 + i]);
        }
        CHECK(ga.data()[n * 3 + c] == doctest::Approx(s / 20).epsilon(1e-12));
        CHECK(gm.data()[n * 3 + c] == m);
      }
      for (std::size_t i = 0; i < 20; ++i) {
        double s = 0, m = -1e9;
        for (std::size_t c = 0; c < 3; ++c) {
          s += x.data()[(n * 3 + c) * 20 + i];
          m = std::max(m, x.data()[(n * 3 + c) * 20 + i]);
        }
        CHECK(ca.data()[n * 20 + i] == doctest::Approx(s / 3).epsilon(1e-12));
        CHECK(cm.data()[n * 20 + i] == m);
      }
    }
  }

  TEST_CASE("softmax rows lie on the simplex") {
    Rng rng(12);
    const auto p = softmax(random_tensor({6, 3}, rng, -20, 20, false));
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(p.data()[r * 3 + c] > 0.0);
        s += p.data()[r * 3 + c];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }

  TEST_CASE("forward results are deterministic") {
    auto run = [] {
      Rng rng(13);
      const auto x = random_tensor({2, 3, 9, 9}, rng, -1, 1, false);
      const auto w = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
      return to_vec(relu(conv2d(x, w, Tensor<double>(), ConvSpec::same(3, 4, 3, 2))));
    };
    CHECK(run() == run());
  }
}

TEST_SUITE("finite differences") {
  TEST_CASE("elementwise and scalar ops") {
    Rng rng(20);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    const auto r = check_gradients({a, b}, {"a", "b"}, [&] {
      return probe(add(mul(sigmoid(a), sub(b, square(a))), mul_scalar(add_scalar(b, 0.3), -1.7)));
    });
    CHECK_MESSAGE(r.worst < kGradTol, r.worst_leaf << " " << r.worst);
  }

  TEST_CASE("relu away from the kink") {
    Rng rng(21);
    std::vector<double> v(12);
    for (auto& x : v) x = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.05, 1.0);
    Tensor<double> a({12}, v, true);
    const auto r = check_gradients({a}, {"a"}, [&] { return probe(relu(a)); });
    CHECK(r.worst < kGradTol);
  }

  TEST_CASE("reductions, softmax and cross entropy") {
    Rng rng(22);
    auto a = random_tensor({4, 3}, rng, -2, 2);
    const std::vector<int> labels = {0, 2, 1, 2};
    auto r = check_gradients({a}, {"a"}, [&] { return add(mean(square(a)), probe(softmax(a))); });
    CHECK(r.worst < kGradTol);
    r = check_gradients({a}, {"a"}, [&] { return cross_entropy(a, std::span<const int>(labels)); });
    CHECK(r.worst < kGradTol);
  }

  TEST_CASE("dense") {
    Rng rng(23);
    auto x = random_tensor({3, 5}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto b = random_tensor({4}, rng);
    const auto r = check_gradients({x, w, b}, {"x", "w", "b"}, [&] { return probe(dense(x, w, b)); });
    CHECK(r.worst < kGradTol);
  }

  TEST_CASE("conv2d over stride, dilation and padding") {
    struct Case {
      std::size_t k, stride, dilation, pad;
    };
    for (const Case c : {Case{3, 1, 1, 1}, Case{3, 2, 1, 1}, Case{3, 1, 2, 2}, Case{5, 1, 1, 2}, Case{3, 2, 2, 0}}) {
      Rng rng(24 + c.k + c.stride + c.dilation);
      auto x = random_tensor({2, 2, 7, 6}, rng);
      auto w = random_tensor({3, 2, c.k, c.k}, rng);
      auto b = random_tensor({3}, rng);
      ConvSpec s;
      s.kernel_h = s.kernel_w = c.k;
      s.stride = c.stride;
      s.dilation = c.dilation;
      s.padding = c.pad;
      s.in_channels = 2;
      s.out_channels = 3;
      const auto r = check_gradients({x, w, b}, {"x", "w", "b"}, [&] { return probe(conv2d(x, w, b, s)); });
      CHECK_MESSAGE(r.worst < kGradTol, "k" << c.k << " s" << c.stride << " d" << c.dilation << " " << r.worst_leaf);
    }
  }

  TEST_CASE("transpose conv2d") {
    Rng rng(30);
    auto x = random_tensor({2, 3, 3, 4}, rng);
    auto w = random_tensor({3, 2, 4, 4}, rng);
    auto b = random_tensor({2}, rng);
    const auto r =
        check_gradients({x, w, b}, {"x", "w", "b"}, [&] { return probe(transpose_conv2d(x, w, b, 2, 1)); });
    CHECK_MESSAGE(r.worst < kGradTol, r.worst_leaf);
  }

  TEST_CASE("instance norm") {
    Rng rng(31);
    auto x = random_tensor({2, 3, 4, 3}, rng);
    auto g = random_tensor({3}, rng, 0.5, 1.5);
    auto b = random_tensor({3}, rng);
    const auto r = check_gradients({x, g, b}, {"x", "gamma", "beta"}, [&] { return probe(instance_norm(x, g, b)); });
    CHECK_MESSAGE(r.worst < kGradTol, r.worst_leaf);
  }

  TEST_CASE("pooling of all four kinds") {
    Rng rng(32);
    auto x = random_tensor({2, 3, 4, 5}, rng);
    for (auto kind : {PoolKind::global_avg, PoolKind::global_max, PoolKind::channel_avg, PoolKind::channel_max}) {
      const auto r = check_gradients({x}, {"x"}, [&] { return probe(pool_reduce(x, kind)); });
      CHECK(r.worst < kGradTol);
    }
  }

  TEST_CASE("concat, resize, broadcast multiply and reshape") {
    Rng rng(33);
    auto a = random_tensor({2, 2, 3, 4}, rng);
    auto b = random_tensor({2, 1, 3, 4}, rng);
    auto v = random_tensor({2, 3}, rng);
    auto s = random_tensor({2, 1, 3, 4}, rng);
    auto r = check_gradients({a, b}, {"a", "b"}, [&] { return probe(concat_channels<double>({a, b})); });
    CHECK(r.worst < kGradTol);
    r = check_gradients({a}, {"a"}, [&] { return probe(resize_bilinear(a, 7, 5)); });
    CHECK(r.worst < kGradTol);
    r = check_gradients({a}, {"a"}, [&] { return probe(resize_bilinear(a, 2, 2)); });
    CHECK(r.worst < kGradTol);
    r = check_gradients({a, b, v}, {"a", "b", "v"},
                        [&] { return probe(broadcast_mul(concat_channels<double>({a, b}), v)); });
    CHECK_MESSAGE(r.worst < kGradTol, r.worst_leaf);
    r = check_gradients({a, s}, {"a", "s"}, [&] { return probe(broadcast_mul(a, s)); });
    CHECK_MESSAGE(r.worst < kGradTol, r.worst_leaf);
    r = check_gradients({a}, {"a"}, [&] { return probe(reshape(a, {4, 12})); });
    CHECK(r.worst < kGradTol);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bit exact and mismatches are refused with a diff") {
    const auto dir = std::filesystem::temp_directory_path() / "demist_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "p.ckpt";
    Rng rng(40);
    std::vector<float> v1(24), v2(5);
    for (auto& x : v1) x = static_cast<float>(rng.uniform(-1, 1));
    for (auto& x : v2) x = static_cast<float>(rng.uniform(-1e6, 1e6));
    ParamList<float> params = {{"a.weight", Tensor<float>({2, 3, 4}, v1)}, {"b", Tensor<float>({5}, v2)}};
    save_params(path, params);

    ParamList<float> loaded = {{"a.weight", Tensor<float>::zeros({2, 3, 4})}, {"b", Tensor<float>::zeros({5})}};
    load_params(path, loaded);
    CHECK(std::equal(v1.begin(), v1.end(), loaded[0].value.data().begin()));
    CHECK(std::equal(v2.begin(), v2.end(), loaded[1].value.data().begin()));

    ParamList<float> wrong = {{"a.weight", Tensor<float>::zeros({2, 3, 5})}, {"b", Tensor<float>::zeros({5})},
                              {"c", Tensor<float>::zeros({1})}};
    try {
      load_params(path, wrong);
      FAIL("expected a mismatch error");
    } catch (const CheckpointError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("a.weight") != std::string::npos);
      CHECK(msg.find("[2,3,5]") != std::string::npos);
      CHECK(msg.find("[2,3,4]") != std::string::npos);
      CHECK(msg.find("c") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
  }
}
