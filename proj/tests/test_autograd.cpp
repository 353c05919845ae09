#include <doctest.h>

#include <cmath>
#include <random>

#include "cosy/autograd.hpp"
#include "gradcheck.hpp"

using namespace cosy;
using cosy::testing::check_gradients;

namespace {

ad::Var leaf(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  return ad::Var(init_normal(std::move(shape), sd, rng), true);
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  std::mt19937_64 rng(1);
  auto x = leaf({3, 4}, rng);
  auto w = leaf({4, 5}, rng);
  auto b = leaf({5}, rng);
  auto g = leaf({5}, rng);
  auto be = leaf({5}, rng);
  auto r = check_gradients({{"x", x}, {"w", w}, {"b", b}, {"g", g}, {"be", be}}, [&] {
    auto h = ad::linear(x, w, b);
    h = ad::layer_norm(h, g, be);
    h = ad::add(ad::gelu(h), ad::mul(ad::silu(h), h));
    h = ad::add_row(h, ad::scale(b, 0.3));
    return ad::mean(ad::mul(h, h));
  });
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
}

TEST_CASE("attention gradient with a partial mask") {
  std::mt19937_64 rng(2);
  auto q = leaf({4, 8}, rng);
  auto k = leaf({5, 8}, rng);
  auto v = leaf({5, 8}, rng);
  auto mask = ad::AttentionMask::full(4, 5);
  mask.set(0, 4, false);
  mask.set(2, 0, false);
  mask.set(2, 1, false);
  auto target = leaf({4, 8}, rng);
  auto r = check_gradients({{"q", q}, {"k", k}, {"v", v}}, [&] {
    return ad::mse(ad::attention(q, k, v, 2, &mask), target);
  });
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
}

TEST_CASE("masked attention ignores masked columns bitwise") {
  std::mt19937_64 rng(3);
  auto q = ad::constant(init_normal({3, 8}, 1.0, rng));
  auto k = ad::constant(init_normal({6, 8}, 1.0, rng));
  auto v = ad::constant(init_normal({6, 8}, 1.0, rng));
  auto mask = ad::AttentionMask::full(3, 6);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) mask.set(i, j, false);
  auto full = ad::attention(q, k, v, 4, &mask);
  auto trimmed = ad::attention(q, ad::slice0(k, 2, 6), ad::slice0(v, 2, 6), 4, nullptr);
  CHECK(full.value() == trimmed.value());
}

TEST_CASE("losses and reductions match finite differences") {
  std::mt19937_64 rng(4);
  auto logits = leaf({4, 7}, rng);
  auto y = leaf({3, 2}, rng);
  auto mu = leaf({6}, rng, 0.5);
  auto lv = leaf({6}, rng, 0.5);
  Tensor bce_t({3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1});
  const std::vector<int> targets{1, -1, 6, 0};
  auto r = check_gradients({{"logits", logits}, {"y", y}, {"mu", mu}, {"lv", lv}}, [&] {
    auto a = ad::sum(ad::token_nll(logits, targets));
    auto b = ad::mean(ad::bce_with_logits(y, bce_t));
    auto c = ad::kl_standard_normal(mu, lv);
    auto d = ad::max_all(ad::mul(mu, lv));
    auto e = ad::sum(ad::log_sigmoid(ad::scale(y, 2.0)));
    auto f = ad::sum(ad::l2_normalize_rows(ad::reshape(mu, {2, 3})));
    auto g = ad::sum(ad::exp(ad::scale(lv, 0.5)));
    auto h = ad::sum(ad::mean_rows(ad::transpose(ad::reshape(ad::mul(lv, mu), {3, 2}))));
    return ad::add(ad::add(ad::add(a, b), ad::add(c, d)), ad::add(ad::add(e, f), ad::add(g, h)));
  });
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
}

TEST_CASE("conv2d and upsampling match finite differences") {
  std::mt19937_64 rng(5);
  auto x = leaf({2, 5, 6}, rng);
  auto w = leaf({3, 2, 3, 3}, rng);
  auto b = leaf({3}, rng);
  auto w2 = leaf({2, 3, 3, 3}, rng);
  auto ch = leaf({2}, rng);
  auto r = check_gradients({{"x", x}, {"w", w}, {"b", b}, {"w2", w2}, {"ch", ch}}, [&] {
    auto h = ad::conv2d(x, w, b, 2, 1);         // 3 x 3 x 3
    h = ad::upsample_nearest2x(ad::silu(h));     // 3 x 6 x 6
    h = ad::conv2d(h, w2, ad::Var(), 1, 1);      // 2 x 6 x 6
    h = ad::add_channel(h, ch);
    auto cat = ad::concat0({h, ad::slice0(h, 1, 2)});
    return ad::mean(ad::mul(cat, cat));
  }, 1e-4, 0);
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
}

TEST_CASE("conv2d matches a direct reference") {
  std::mt19937_64 rng(6);
  Tensor x = init_normal({1, 4, 4}, 1.0, rng);
  Tensor w = init_normal({1, 1, 3, 3}, 1.0, rng);
  auto y = ad::conv2d(ad::constant(x), ad::constant(w), ad::Var(), 2, 1).value();
  REQUIRE(y.shape() == Shape{1, 2, 2});
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      double s = 0.0;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
          if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
          s += w[static_cast<std::size_t>(ky * 3 + kx)] * x[static_cast<std::size_t>(iy * 4 + ix)];
        }
      CHECK(y[static_cast<std::size_t>(oy * 2 + ox)] == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("zero-norm normalisation raises") {
  auto z = ad::constant(Tensor({1, 3}));
  CHECK_THROWS_AS(ad::l2_normalize_rows(z), std::domain_error);
}

TEST_CASE("no tape means no recording") {
  std::mt19937_64 rng(7);
  auto x = leaf({2, 2}, rng);
  auto y = ad::mul(x, x);
  CHECK_FALSE(y.requires_grad());
  ad::Tape tape;
  {
    ad::GradScope scope(tape);
    auto z = ad::mul(x, x);
    CHECK(z.requires_grad());
    {
      ad::NoGradScope ng;
      CHECK_FALSE(ad::mul(x, x).requires_grad());
    }
  }
  CHECK(tape.size() == 1);
}
