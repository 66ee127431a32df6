#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "lprnet/rng.hpp"
#include "lprnet/tensor.hpp"

using namespace lprnet;

namespace {

Tensorf random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensorf t(s);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Direct nested-loop patch extractor, the oracle for im2col.
Matf im2col_oracle(const Tensorf& x, const ConvGeom& g) {
  const int ho = conv_out_dim(x.shape.h, g.kh, g.sh, g.ph);
  const int wo = conv_out_dim(x.shape.w, g.kw, g.sw, g.pw);
  const int per = ho * wo;
  Matf out(x.shape.c * g.kh * g.kw, x.shape.n * per);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      for (int kh = 0; kh < g.kh; ++kh) {
        for (int kw = 0; kw < g.kw; ++kw) {
          const int r = (c * g.kh + kh) * g.kw + kw;
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const int iy = oy * g.sh - g.ph + kh;
              const int ix = ox * g.sw - g.pw + kw;
              float v = 0.0f;
              if (iy >= 0 && iy < x.shape.h && ix >= 0 && ix < x.shape.w) {
                v = x.at(n, c, iy, ix);
              }
              out.at(r, n * per + oy * wo + ox) = v;
            }
          }
        }
      }
    }
  }
  return out;
}

// Direct cross-correlation, the oracle for im2col+matmul convolution.
Tensorf conv_oracle(const Tensorf& x, const Tensorf& w, const ConvGeom& g) {
  const int ho = conv_out_dim(x.shape.h, g.kh, g.sh, g.ph);
  const int wo = conv_out_dim(x.shape.w, g.kw, g.sw, g.pw);
  Tensorf y({x.shape.n, w.shape.n, ho, wo});
  for (int n = 0; n < x.shape.n; ++n) {
    for (int co = 0; co < w.shape.n; ++co) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int ci = 0; ci < x.shape.c; ++ci) {
            for (int kh = 0; kh < g.kh; ++kh) {
              for (int kw = 0; kw < g.kw; ++kw) {
                const int iy = oy * g.sh - g.ph + kh;
                const int ix = ox * g.sw - g.pw + kw;
                if (iy < 0 || iy >= x.shape.h || ix < 0 || ix >= x.shape.w) {
                  continue;
                }
                acc += static_cast<double>(x.at(n, ci, iy, ix)) *
                       w.at(co, ci, kh, kw);
              }
            }
          }
          y.at(n, co, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("im2col full-window case") {
  Tensorf x({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto m = im2col(x, ConvGeom{2, 2, 1, 1, 0, 0});
  CHECK(m.rows == 4);
  CHECK(m.cols == 1);
  CHECK(m.v == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("im2col 1x1 identity lowering") {
  Rng rng(3);
  auto x = random_tensor(rng, {1, 1, 3, 3});
  const auto m = im2col(x, ConvGeom{1, 1, 1, 1, 0, 0});
  CHECK(m.rows == 1);
  CHECK(m.cols == 9);
  CHECK(m.v == x.data);
}

TEST_CASE("im2col matches nested-loop patch extractor") {
  Rng rng(17);
  auto x = random_tensor(rng, {1, 2, 5, 7});
  const ConvGeom g{3, 3, 2, 2, 1, 1};
  const auto got = im2col(x, g);
  const auto want = im2col_oracle(x, g);
  REQUIRE(got.rows == want.rows);
  REQUIRE(got.cols == want.cols);
  CHECK(got.v == want.v);

  // a batch of 3 with asymmetric geometry
  auto xb = random_tensor(rng, {3, 3, 6, 9});
  const ConvGeom g2{3, 1, 2, 1, 1, 0};
  CHECK(im2col(xb, g2).v == im2col_oracle(xb, g2).v);
}

TEST_CASE("im2col rejects kernels larger than padded input") {
  Tensorf x({1, 1, 2, 2});
  CHECK_THROWS_AS(im2col(x, ConvGeom{5, 5, 1, 1, 1, 1}),
                  std::invalid_argument);
}

TEST_CASE("matmul identity and hand cases") {
  Matf eye(3, 3);
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
  Rng rng(5);
  Matf m(3, 4);
  for (auto& v : m.v) v = static_cast<float>(rng.uniform(-2, 2));
  CHECK(matmul(eye, m).v == m.v);

  Matf a(2, 2, {1, 2, 3, 4});
  Matf b(2, 1, {1, 1});
  const auto c = matmul(a, b);
  CHECK(c.v == std::vector<float>{3, 7});
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  Matf a(7, 5);
  Matf b(5, 3);
  for (auto& v : a.v) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : b.v) v = static_cast<float>(rng.uniform(-1, 1));
  const auto c = matmul(a, b);
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 5; ++k) {
        acc += static_cast<double>(a.at(i, k)) * b.at(k, j);
      }
      CHECK(std::abs(c.at(i, j) - acc) <=
            1e-5 * std::max(1.0, std::abs(acc)));
    }
  }
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("elementwise basics") {
  Tensorf x({1, 1, 1, 3}, {-1, 0, 2});
  const auto r = elementwise(EwOp::relu, x);
  CHECK(r.data == std::vector<float>{0, 0, 2});

  Tensorf z({1, 1, 1, 1}, {0});
  CHECK(elementwise(EwOp::tanh, z).data[0] == 0.0f);

  Tensorf y({1, 1, 1, 3}, {5, 5, 5});
  CHECK(elementwise(EwOp::add, x, y).data == std::vector<float>{4, 5, 7});
  CHECK(elementwise(EwOp::mul, x, y).data == std::vector<float>{-5, 0, 10});
  CHECK(elementwise(EwOp::max, x, y).data == std::vector<float>{5, 5, 5});

  Tensorf bad({1, 1, 3, 1});
  CHECK_THROWS_AS(elementwise(EwOp::add, x, bad), std::invalid_argument);
}

TEST_CASE("per-channel bias add matches loop oracle") {
  Rng rng(23);
  auto x = random_tensor(rng, {2, 3, 4, 5});
  std::vector<float> bias{0.5f, -1.25f, 2.0f};
  const auto y = add_per_channel(x, bias);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int h = 0; h < 4; ++h) {
        for (int w = 0; w < 5; ++w) {
          CHECK(y.at(n, c, h, w) == x.at(n, c, h, w) + bias[c]);
        }
      }
    }
  }
  CHECK_THROWS_AS(add_per_channel(x, std::vector<float>{1.0f}),
                  std::invalid_argument);
}

TEST_CASE("im2col + matmul equals direct convolution oracle") {
  Rng rng(31);
  const ConvGeom geoms[] = {
      {3, 3, 1, 1, 1, 1}, {3, 3, 2, 1, 1, 1}, {1, 1, 1, 1, 0, 0},
      {4, 1, 1, 1, 0, 0}, {1, 5, 1, 1, 0, 2}, {2, 3, 2, 2, 0, 1}};
  for (const auto& g : geoms) {
    const int n = 1 + static_cast<int>(rng.uniform_index(3));
    const int ci = 1 + static_cast<int>(rng.uniform_index(7));
    const int co = 1 + static_cast<int>(rng.uniform_index(7));
    const int h = std::max(g.kh, 4 + static_cast<int>(rng.uniform_index(12)));
    const int w = std::max(g.kw, 4 + static_cast<int>(rng.uniform_index(12)));
    auto x = random_tensor(rng, {n, ci, h, w});
    auto wt = random_tensor(rng, {co, ci, g.kh, g.kw});

    const auto cols = im2col(x, g);
    Matf wm(co, ci * g.kh * g.kw, wt.data);
    const auto y = matmul(wm, cols);
    const auto want = conv_oracle(x, wt, g);

    const int per = cols.cols / n;
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < co; ++c) {
        for (int s = 0; s < per; ++s) {
          const float got = y.at(c, b * per + s);
          const float exp = want.slice(b)[c * per + s];
          CHECK(std::abs(got - exp) < 1e-5f);
        }
      }
    }
    CHECK(want.all_finite());
  }
}

TEST_CASE("softmax rows normalize and stay stable") {
  Matf m(2, 4);
  for (int c = 0; c < 4; ++c) m.at(0, c) = 3.5f;
  m.at(1, 0) = std::log(1.0f);
  m.at(1, 1) = std::log(3.0f);
  m.at(1, 2) = -1e30f;
  m.at(1, 3) = -1e30f;
  auto s = softmax_rows(m);
  for (int c = 0; c < 4; ++c) CHECK(s.at(0, c) == doctest::Approx(0.25));
  CHECK(s.at(1, 0) == doctest::Approx(0.25));
  CHECK(s.at(1, 1) == doctest::Approx(0.75));

  Rng rng(41);
  Matf r(40, 66);
  for (auto& v : r.v) v = static_cast<float>(rng.uniform(-30, 30));
  auto sr = softmax_rows(r);
  for (int i = 0; i < sr.rows; ++i) {
    double sum = 0.0;
    for (int c = 0; c < sr.cols; ++c) {
      CHECK(sr.at(i, c) >= 0.0f);
      sum += sr.at(i, c);
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("col2im scatter is the adjoint of im2col") {
  Rng rng(53);
  const ConvGeom g{3, 3, 2, 1, 1, 1};
  auto x = random_tensor(rng, {1, 2, 5, 6});
  const int ho = conv_out_dim(x.shape.h, g.kh, g.sh, g.ph);
  const int wo = conv_out_dim(x.shape.w, g.kw, g.sw, g.pw);
  const int rows = x.shape.c * g.kh * g.kw;
  std::vector<float> cols(static_cast<std::size_t>(rows) * ho * wo);
  for (auto& v : cols) v = static_cast<float>(rng.uniform(-1, 1));

  // <im2col(x), cols> == <x, col2im(cols)>
  std::vector<float> lowered(cols.size());
  im2col_slice(x.slice(0), x.shape.c, x.shape.h, x.shape.w, g, lowered.data());
  double lhs = 0.0;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    lhs += static_cast<double>(lowered[i]) * cols[i];
  }
  Tensorf back(x.shape);
  col2im_slice(cols.data(), x.shape.c, x.shape.h, x.shape.w, g,
               back.slice(0));
  double rhs = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    rhs += static_cast<double>(x.data[i]) * back.data[i];
  }
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}
