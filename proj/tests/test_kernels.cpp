#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <vector>

#include "lprnet/kernels.hpp"
#include "lprnet/rng.hpp"

using lprnet::Rng;
namespace kern = lprnet::kern;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n, double lo = -1.0,
                              double hi = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

// max |a-b| scaled by the largest magnitude involved
double rel_diff(const std::vector<float>& a, const std::vector<float>& b) {
  REQUIRE(a.size() == b.size());
  double md = 0.0, mv = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    md = std::max(md, std::abs(static_cast<double>(a[i]) - b[i]));
    mv = std::max({mv, std::abs(static_cast<double>(a[i])),
                   std::abs(static_cast<double>(b[i]))});
  }
  return md / mv;
}

}  // namespace

TEST_CASE("every available table matches the scalar reference") {
  const auto tables = kern::available_kernels();
  REQUIRE(!tables.empty());
  CHECK(std::string(tables[0]->name) == "scalar");
  const auto& ref = *tables[0];

  Rng rng(20240917);
  for (const auto* t : tables) {
    CAPTURE(t->name);
    for (int trial = 0; trial < 20; ++trial) {
      const int m = 1 + static_cast<int>(rng.uniform_index(40));
      const int n = 1 + static_cast<int>(rng.uniform_index(70));
      const int k = 1 + static_cast<int>(rng.uniform_index(90));
      const auto a = random_vec(rng, static_cast<std::size_t>(m) * k);
      const auto b = random_vec(rng, static_cast<std::size_t>(k) * n);
      auto c0 = random_vec(rng, static_cast<std::size_t>(m) * n);
      auto c1 = c0;

      ref.gemm(m, n, k, a.data(), k, b.data(), n, c0.data(), n, trial % 2);
      t->gemm(m, n, k, a.data(), k, b.data(), n, c1.data(), n, trial % 2);
      CHECK(rel_diff(c0, c1) < 1e-5);

      // gemm_nt: b acts as an (n x k) matrix
      const auto bt = random_vec(rng, static_cast<std::size_t>(n) * k);
      auto d0 = random_vec(rng, static_cast<std::size_t>(m) * n);
      auto d1 = d0;
      ref.gemm_nt(m, n, k, a.data(), k, bt.data(), k, d0.data(), n, trial % 2);
      t->gemm_nt(m, n, k, a.data(), k, bt.data(), k, d1.data(), n, trial % 2);
      CHECK(rel_diff(d0, d1) < 1e-5);
    }

    for (std::size_t len : {1u, 7u, 8u, 33u, 1000u}) {
      const auto a = random_vec(rng, len);
      const auto b = random_vec(rng, len);
      std::vector<float> y0(len), y1(len);

      ref.add(a.data(), b.data(), y0.data(), len);
      t->add(a.data(), b.data(), y1.data(), len);
      CHECK(y0 == y1);

      ref.mul(a.data(), b.data(), y0.data(), len);
      t->mul(a.data(), b.data(), y1.data(), len);
      CHECK(y0 == y1);

      ref.max(a.data(), b.data(), y0.data(), len);
      t->max(a.data(), b.data(), y1.data(), len);
      CHECK(y0 == y1);

      ref.relu(a.data(), y0.data(), len);
      t->relu(a.data(), y1.data(), len);
      CHECK(y0 == y1);

      ref.relu_bwd(a.data(), b.data(), y0.data(), len);
      t->relu_bwd(a.data(), b.data(), y1.data(), len);
      CHECK(y0 == y1);

      ref.scale(a.data(), 0.37f, y0.data(), len);
      t->scale(a.data(), 0.37f, y1.data(), len);
      CHECK(y0 == y1);

      ref.add_scalar(a.data(), -0.21f, y0.data(), len);
      t->add_scalar(a.data(), -0.21f, y1.data(), len);
      CHECK(y0 == y1);

      y0 = b;
      y1 = b;
      ref.axpy(1.7f, a.data(), y0.data(), len);
      t->axpy(1.7f, a.data(), y1.data(), len);
      CHECK(rel_diff(y0, y1) < 1e-6);

      CHECK(std::abs(ref.reduce_sum(a.data(), len) -
                     t->reduce_sum(a.data(), len)) < 1e-4);
      CHECK(ref.reduce_max(a.data(), len) == t->reduce_max(a.data(), len));
    }
  }
}

TEST_CASE("gemm handles strided (submatrix) operands") {
  const auto tables = kern::available_kernels();
  Rng rng(7);
  const int m = 5, n = 9, k = 6, lda = 11, ldb = 17, ldc = 13;
  const auto a = random_vec(rng, static_cast<std::size_t>(m) * lda);
  const auto b = random_vec(rng, static_cast<std::size_t>(k) * ldb);
  std::vector<float> expect(static_cast<std::size_t>(m) * ldc, 0.0f);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += a[i * lda + p] * b[p * ldb + j];
      expect[i * ldc + j] = acc;
    }
  }
  for (const auto* t : tables) {
    CAPTURE(t->name);
    std::vector<float> c(static_cast<std::size_t>(m) * ldc, 0.0f);
    t->gemm(m, n, k, a.data(), lda, b.data(), ldb, c.data(), ldc, false);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        CHECK(std::abs(c[i * ldc + j] - expect[i * ldc + j]) < 1e-5f);
      }
    }
  }
}

TEST_CASE("repeated calls on one table are bit-identical") {
  const auto& t = kern::active_kernels();
  Rng rng(99);
  const int m = 13, n = 29, k = 31;
  const auto a = random_vec(rng, static_cast<std::size_t>(m) * k);
  const auto b = random_vec(rng, static_cast<std::size_t>(k) * n);
  std::vector<float> c0(static_cast<std::size_t>(m) * n);
  std::vector<float> c1(static_cast<std::size_t>(m) * n);
  t.gemm(m, n, k, a.data(), k, b.data(), n, c0.data(), n, false);
  t.gemm(m, n, k, a.data(), k, b.data(), n, c1.data(), n, false);
  CHECK(c0 == c1);
}
