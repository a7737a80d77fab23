// memory bank: cosine addressing, top-k sparse read, L2-normalized write,
// memory-augmented output, nearest-item queries.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "stn/memory.hpp"
#include "support/oracles.hpp"

using namespace stn;
using oracle::random_tensor;
using D = double;
using TapeD = Tape<double>;

namespace {

MemoryBank<D> bank_from(Tensor<D> items, double k_percent) {
  Rng rng(1);
  MemoryBank<D> b(rng, items.rows(), items.cols(), k_percent);
  b.m.value = std::move(items);
  return b;
}

}  // namespace

TEST_CASE("cosine similarity: orthonormal case, scale invariance, loop oracle") {
  TapeD g(false);
  {
    Tensor<D> q(Shape{1, 2}, {1, 0});
    Tensor<D> m(Shape{2, 2}, {1, 0, 0, 1});
    auto y = g.val(g.cosine_sim(g.leaf(q), g.leaf(m), 1e-8));
    CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(y(0, 1) == doctest::Approx(0.0).epsilon(1e-7));
  }
  {
    Tensor<D> q(Shape{1, 2}, {2.5, 0});
    Tensor<D> m(Shape{1, 2}, {7.0, 0});
    auto y = g.val(g.cosine_sim(g.leaf(q), g.leaf(m), 1e-8));
    CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-7));
  }
  {
    Rng rng(3);
    auto q = random_tensor(rng, {3, 2});
    auto m = random_tensor(rng, {4, 2});
    auto y = g.val(g.cosine_sim(g.leaf(q), g.leaf(m), 1e-8));
    for (long i = 0; i < 3; ++i)
      for (long j = 0; j < 4; ++j) {
        double dot = 0, nq = 0, nm = 0;
        for (long c = 0; c < 2; ++c) {
          dot += q(i, c) * m(j, c);
          nq += q(i, c) * q(i, c);
          nm += m(j, c) * m(j, c);
        }
        double expect = dot / (std::sqrt(nq) * std::sqrt(nm) + 1e-8);
        CHECK(std::abs(y(i, j) - expect) < 1e-7);
      }
  }
}

TEST_CASE("cosine argmax is invariant to positive query rescaling") {
  Rng rng(5);
  auto q = random_tensor(rng, {4, 3});
  auto m = random_tensor(rng, {6, 3});
  TapeD g(false);
  auto y1 = g.val(g.cosine_sim(g.leaf(q), g.leaf(m), 1e-8));
  Tensor<D> q2 = q.clone();
  for (long i = 0; i < q2.numel(); ++i) q2[i] *= 3.7;
  auto y2 = g.val(g.cosine_sim(g.leaf(q2), g.leaf(m), 1e-8));
  for (long i = 0; i < 4; ++i) {
    long a1 = 0, a2 = 0;
    for (long j = 1; j < 6; ++j) {
      if (y1(i, j) > y1(i, a1)) a1 = j;
      if (y2(i, j) > y2(i, a2)) a2 = j;
    }
    CHECK(a1 == a2);
  }
}

TEST_CASE("topk_softmax: masking semantics from the worked row") {
  Tensor<D> row(Shape{1, 4}, {0.9, 0.1, 0.5, 0.3});
  Tensor<D> w = topk_softmax(row, 50.0);  // keep ceil(2) = 2 entries
  double z = std::exp(0.9) + std::exp(0.0) + std::exp(0.5) + std::exp(0.0);
  CHECK(w(0, 0) == doctest::Approx(std::exp(0.9) / z).epsilon(1e-12));
  CHECK(w(0, 1) == doctest::Approx(1.0 / z).epsilon(1e-12));
  CHECK(w(0, 2) == doctest::Approx(std::exp(0.5) / z).epsilon(1e-12));
  CHECK(w(0, 3) == doctest::Approx(1.0 / z).epsilon(1e-12));

  // k = 100 is a plain softmax
  Tensor<D> w_full = topk_softmax(row, 100.0);
  double zf = std::exp(0.9) + std::exp(0.1) + std::exp(0.5) + std::exp(0.3);
  CHECK(w_full(0, 0) == doctest::Approx(std::exp(0.9) / zf).epsilon(1e-12));

  Rng rng(7);
  auto sims = random_tensor(rng, {10, 20});
  Tensor<D> ww = topk_softmax(sims, 37.0);
  for (long i = 0; i < 10; ++i) {
    double s = 0;
    for (long j = 0; j < 20; ++j) {
      CHECK(ww(i, j) >= 0.0);
      s += ww(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("topk_mask keeps exactly ceil(k*N/100) entries, ties to lower index") {
  Tensor<D> tied(Shape{1, 4}, {0.5, 0.5, 0.5, 0.5});
  Tensor<D> m = topk_mask(tied, 50.0);
  CHECK(m(0, 0) == 1.0);
  CHECK(m(0, 1) == 1.0);
  CHECK(m(0, 2) == 0.0);
  CHECK(m(0, 3) == 0.0);
  CHECK_THROWS_AS(topk_mask(tied, 0.0), Error);
  CHECK_THROWS_AS(topk_mask(tied, 130.0), Error);
  for (long n : {80L, 60L, 40L, 20L}) {
    Rng rng(11 + n);
    auto sims = random_tensor(rng, {5, n});
    Tensor<D> mask = topk_mask(sims, 60.0);
    long keep = (long)std::ceil(0.6 * (double)n);
    for (long i = 0; i < 5; ++i) {
      long cnt = 0;
      for (long j = 0; j < n; ++j) cnt += mask(i, j) == 1.0;
      CHECK(cnt == keep);
    }
  }
}

TEST_CASE("memory_read: frozen softmax([1,0]) expectation") {
  auto bank = bank_from(Tensor<D>(Shape{2, 2}, {1, 0, 0, 1}), 100.0);
  TapeD g(false);
  Ctx<D> ctx(g);
  auto q = g.leaf(Tensor<D>(Shape{1, 2}, {1, 0}));
  auto rd = bank.read(ctx, q);
  // softmax([1, 0]) = [e/(1+e), 1/(1+e)]
  CHECK(g.val(rd.weights)(0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-7));
  CHECK(g.val(rd.weights)(0, 1) == doctest::Approx(0.2689414213699951).epsilon(1e-7));
  CHECK(g.val(rd.q_hat)(0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-7));
  CHECK(g.val(rd.q_hat)(0, 1) == doctest::Approx(0.2689414213699951).epsilon(1e-7));
}

TEST_CASE("memory_read: single-item bank reconstructs that item") {
  auto bank = bank_from(Tensor<D>(Shape{1, 3}, {0.6, 0.0, 0.8}), 100.0);
  Rng rng(13);
  auto Q = random_tensor(rng, {5, 3});
  TapeD g(false);
  Ctx<D> ctx(g);
  auto rd = bank.read(ctx, g.leaf(Q));
  for (long i = 0; i < 5; ++i) {
    CHECK(g.val(rd.q_hat)(i, 0) == doctest::Approx(0.6));
    CHECK(g.val(rd.q_hat)(i, 2) == doctest::Approx(0.8));
  }
}

TEST_CASE("memory_read weights stay on the simplex (convex hull property)") {
  Rng rng(17);
  MemoryBank<D> bank(rng, 8, 4, 60.0);
  auto Q = random_tensor(rng, {10, 4});
  TapeD g(false);
  Ctx<D> ctx(g);
  auto rd = bank.read(ctx, g.leaf(Q));
  for (long i = 0; i < 10; ++i) {
    double s = 0;
    for (long j = 0; j < 8; ++j) {
      CHECK(g.val(rd.weights)(i, j) >= 0.0);
      s += g.val(rd.weights)(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("memory_write: collinear fixed point and unit norms") {
  auto bank = bank_from(Tensor<D>(Shape{1, 2}, {1, 0}), 100.0);
  Tensor<D> Q(Shape{1, 2}, {1, 0});
  bank.write(Q, /*train_mode=*/true);
  CHECK(bank.m.value(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(bank.m.value(0, 1) == doctest::Approx(0.0).epsilon(1e-6));

  Rng rng(19);
  MemoryBank<D> b2(rng, 6, 5, 60.0);
  auto Q2 = random_tensor(rng, {9, 5});
  b2.write(Q2, true);
  for (long j = 0; j < 6; ++j) {
    double n = 0;
    for (long c = 0; c < 5; ++c) n += b2.m.value(j, c) * b2.m.value(j, c);
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("memory_write matches a scalar-loop oracle") {
  Rng rng(23);
  MemoryBank<D> bank(rng, 3, 4, 100.0);
  Tensor<D> M0 = bank.m.value.clone();
  auto Q = random_tensor(rng, {5, 4});
  bank.write(Q, true);

  // independent loop translation of the write rule
  for (long j = 0; j < 3; ++j) {
    double mn = 0;
    for (long c = 0; c < 4; ++c) mn += M0(j, c) * M0(j, c);
    mn = std::sqrt(mn);
    std::vector<double> sim(5), w(5);
    double z = 0;
    for (long i = 0; i < 5; ++i) {
      double dot = 0, qn = 0;
      for (long c = 0; c < 4; ++c) {
        dot += M0(j, c) * Q(i, c);
        qn += Q(i, c) * Q(i, c);
      }
      sim[i] = dot / (mn * std::sqrt(qn) + 1e-8);
    }
    for (long i = 0; i < 5; ++i) z += std::exp(sim[i]);
    for (long i = 0; i < 5; ++i) w[i] = std::exp(sim[i]) / z;
    std::vector<double> upd(4);
    double norm = 0;
    for (long c = 0; c < 4; ++c) {
      upd[c] = M0(j, c);
      for (long i = 0; i < 5; ++i) upd[c] += w[i] * Q(i, c);
      norm += upd[c] * upd[c];
    }
    norm = std::sqrt(norm) + 1e-8;
    for (long c = 0; c < 4; ++c)
      CHECK(bank.m.value(j, c) == doctest::Approx(upd[c] / norm).epsilon(1e-10));
  }
}

TEST_CASE("memory_write is permutation-equivariant in the query order") {
  Rng rng(29);
  MemoryBank<D> a(rng, 4, 3, 100.0);
  MemoryBank<D> b = bank_from(a.m.value.clone(), 100.0);
  auto Q = random_tensor(rng, {7, 3});
  Tensor<D> Qshuf(Q.shape());
  std::vector<long> perm = {3, 6, 0, 5, 1, 4, 2};
  for (long i = 0; i < 7; ++i)
    for (long c = 0; c < 3; ++c) Qshuf(i, c) = Q(perm[i], c);
  a.write(Q, true);
  b.write(Qshuf, true);
  CHECK(max_abs_diff(a.m.value, b.m.value) < 1e-12);
}

TEST_CASE("memory_write at test time is a contract violation") {
  Rng rng(31);
  MemoryBank<D> bank(rng, 4, 3, 60.0);
  auto Q = random_tensor(rng, {2, 3});
  CHECK_THROWS_AS(bank.write(Q, /*train_mode=*/false), Error);
  try {
    bank.write(Q, false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Contract);
  }
}

TEST_CASE("memory_augment: balance algebra and the s=0 / ones extremes") {
  Rng rng(37);
  MemoryBank<D> bank(rng, 5, 4, 60.0);
  auto F = random_tensor(rng, {6, 4});
  {
    // general algebra: out - s*F == q_hat, exactly
    TapeD g(false);
    Ctx<D> ctx(g);
    auto f = g.leaf(F);
    auto aug = bank.augment(ctx, f);
    auto resid = g.sub(aug.out, g.mul_cols(f, ctx.use(bank.s)));
    CHECK(max_abs_diff(g.val(resid), g.val(aug.read.q_hat)) < 1e-14);
    CHECK(g.val(aug.out).rows() == 6);
    CHECK(g.val(aug.out).cols() == 4);
  }
  {
    bank.s.value.zero();  // out reduces to the read output alone
    TapeD g(false);
    Ctx<D> ctx(g);
    auto aug = bank.augment(ctx, g.leaf(F));
    CHECK(max_abs_diff(g.val(aug.out), g.val(aug.read.q_hat)) == 0.0);
  }
}

TEST_CASE("nearest_two_items: hand case, ties, sort oracle") {
  {
    Tensor<D> Q(Shape{1, 2}, {1, 0});
    Tensor<D> M(Shape{3, 2}, {1, 0, 0, 1, -1, 0});
    auto nn = nearest_two_items(Q, M);
    CHECK(nn.first[0] == 0);
    CHECK(nn.d1[0] == doctest::Approx(0.0));
    CHECK(nn.second[0] == 1);
    CHECK(nn.d2[0] == doctest::Approx(2.0));
  }
  {
    Tensor<D> M = Tensor<D>::full({4, 2}, 0.3);
    Tensor<D> Q(Shape{1, 2}, {0.9, -0.4});
    auto nn = nearest_two_items(Q, M);
    CHECK(nn.first[0] == 0);
    CHECK(nn.second[0] == 1);  // ties break to the lower index
  }
  {
    Rng rng(41);
    auto Q = random_tensor(rng, {6, 3});
    auto M = random_tensor(rng, {7, 3});
    auto nn = nearest_two_items(Q, M);
    for (long i = 0; i < 6; ++i) {
      std::vector<std::pair<double, long>> ds;
      for (long j = 0; j < 7; ++j) {
        double d = 0;
        for (long c = 0; c < 3; ++c)
          d += (Q(i, c) - M(j, c)) * (Q(i, c) - M(j, c));
        ds.push_back({d, j});
      }
      std::sort(ds.begin(), ds.end());
      CHECK(nn.first[i] == ds[0].second);
      CHECK(nn.second[i] == ds[1].second);
      CHECK(nn.d1[i] == doctest::Approx(ds[0].first).epsilon(1e-12));
      CHECK(nn.d2[i] == doctest::Approx(ds[1].first).epsilon(1e-12));
    }
  }
  {
    Tensor<D> Q(Shape{1, 2}, {1, 0});
    Tensor<D> M(Shape{1, 2}, {1, 0});
    CHECK_THROWS_AS(nearest_two_items(Q, M), Error);
  }
}

TEST_CASE("memory_read gradient with the mask held constant") {
  Rng rng(43);
  MemoryBank<D> bank(rng, 3, 4, 60.0);
  auto Q = random_tensor(rng, {4, 4});
  // freeze the mask at the unperturbed similarities
  Tensor<D> mask;
  {
    TapeD g(false);
    auto sim = g.cosine_sim(g.leaf(Q), g.leaf(bank.m.value), 1e-8);
    mask = topk_mask(g.val(sim), 60.0);
  }
  std::vector<Tensor<D>*> watch = {&Q, &bank.m.value};
  auto value = [&]() {
    TapeD g;
    Ctx<D> ctx(g);
    auto rd = bank.read_with_mask(ctx, g.leaf(Q), mask.clone());
    return g.val(g.sum_all(g.mul(rd.q_hat, rd.q_hat)))[0];
  };
  auto analytic = [&]() {
    TapeD g;
    Ctx<D> ctx(g);
    auto q = g.leaf(Q, true);
    auto rd = bank.read_with_mask(ctx, q, mask.clone());
    g.backward(g.sum_all(g.mul(rd.q_hat, rd.q_hat)));
    std::vector<Tensor<D>> out = {g.grad(q).clone()};
    Tensor<D> mg(bank.m.value.shape());
    for (auto& [pp, id] : ctx.bound)
      if (pp == &bank.m && g.has_grad(id)) mg = g.grad(id).clone();
    out.push_back(std::move(mg));
    return out;
  };
  auto res = oracle::fd_compare(watch, value, analytic, rng, 1e-5, 16);
  CHECK(res.pass());
}

TEST_CASE("reads never mutate the bank") {
  Rng rng(47);
  MemoryBank<D> bank(rng, 6, 4, 60.0);
  Tensor<D> before = bank.m.value.clone();
  for (int rep = 0; rep < 5; ++rep) {
    auto Q = random_tensor(rng, {8, 4});
    TapeD g(false);
    Ctx<D> ctx(g);
    bank.read(ctx, g.leaf(Q));
  }
  CHECK(max_abs_diff(before, bank.m.value) == 0.0);
}
