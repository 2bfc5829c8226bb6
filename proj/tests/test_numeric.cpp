#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dtn/optim.hpp"
#include "dtn/tensor.hpp"

using namespace dtn;

namespace {

Tensor make_tensor(Shape s, std::vector<double> vals) {
  Tensor t(s);
  t.value = std::move(vals);
  return t;
}

void randomize(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (double& v : t.value) v = rng.uniform(lo, hi);
}

}  // namespace

TEST_CASE("matmul forward basics") {
  Tape tape;
  Tensor I2 = make_tensor(Shape::mat(2, 2), {1, 0, 0, 1});
  Tensor A = make_tensor(Shape::mat(2, 2), {1, 2, 3, 4});
  Var c = tape.matmul(tape.leaf(I2), tape.leaf(A));
  auto v = tape.val(c);
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 2.0);
  CHECK(v[2] == 3.0);
  CHECK(v[3] == 4.0);

  Tensor r = make_tensor(Shape::mat(1, 2), {1, 0});
  Tensor col = make_tensor(Shape::mat(2, 1), {0, 5});
  Var picked = tape.matmul(tape.leaf(r), tape.leaf(col));
  CHECK(tape.val(picked)[0] == 0.0);

  Tensor bad = make_tensor(Shape::mat(3, 3), std::vector<double>(9, 0.0));
  CHECK_THROWS_AS(tape.matmul(tape.leaf(A), tape.leaf(bad)), DimensionError);
}

TEST_CASE("matmul gradient vs central finite differences") {
  Rng rng(42);
  Tensor A(Shape::mat(3, 4)), B(Shape::mat(4, 2)), W(Shape::mat(3, 2));
  randomize(A, rng);
  randomize(B, rng);
  randomize(W, rng);

  Tape tape;
  auto forward = [&]() {
    tape.reset();
    Var c = tape.matmul(tape.leaf(A), tape.leaf(B));
    // project to a scalar with fixed weights so every entry matters
    return tape.sum(tape.mul(c, tape.constant(Shape::mat(3, 2), W.value.data())));
  };
  A.zero_grad();
  B.zero_grad();
  Var loss = forward();
  tape.backward(loss);
  std::vector<Tensor*> params{&A, &B};
  auto res = finite_diff_check([&]() { return tape.scalar(forward()); }, params);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("elementwise ops and gradients") {
  Tape tape;
  Tensor z = make_tensor(Shape::vec(1), {0.0});
  CHECK(tape.val(tape.sigmoid(tape.leaf(z)))[0] == 0.5);
  CHECK(tape.val(tape.tanh(tape.leaf(z)))[0] == 0.0);

  Tensor x = make_tensor(Shape::vec(1), {0.3});
  x.zero_grad();
  tape.reset();
  Var s = tape.sigmoid(tape.leaf(x));
  tape.backward(s);
  std::vector<Tensor*> params{&x};
  auto res = finite_diff_check(
      [&]() {
        tape.reset();
        return tape.scalar(tape.sigmoid(tape.leaf(x)));
      },
      params, 1e-5);
  CHECK(res.max_rel_err < 1e-6);

  Tensor a = make_tensor(Shape::vec(2), {1, 2});
  Tensor b = make_tensor(Shape::vec(3), {1, 2, 3});
  tape.reset();
  CHECK_THROWS_AS(tape.add(tape.leaf(a), tape.leaf(b)), DimensionError);
}

TEST_CASE("binary elementwise gradients vs finite differences") {
  Rng rng(7);
  Tensor a(Shape::vec(5)), b(Shape::vec(5)), w(Shape::vec(5));
  randomize(a, rng);
  randomize(b, rng);
  randomize(w, rng);
  Tape tape;
  auto forward = [&]() {
    tape.reset();
    Var t = tape.mul(tape.sub(tape.leaf(a), tape.leaf(b)), tape.add(tape.leaf(a), tape.leaf(b)));
    t = tape.tanh(t);
    return tape.sum(tape.mul(t, tape.constant(Shape::vec(5), w.value.data())));
  };
  a.zero_grad();
  b.zero_grad();
  Var loss = forward();
  tape.backward(loss);
  std::vector<Tensor*> params{&a, &b};
  auto res = finite_diff_check([&]() { return tape.scalar(forward()); }, params);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("concat behavior") {
  Tape tape;
  Tensor a = make_tensor(Shape::vec(2), {1, 2});
  Tensor b = make_tensor(Shape::vec(1), {3});
  Var c = tape.concat({tape.leaf(a), tape.leaf(b)});
  REQUIRE(tape.shape(c).size() == 3);
  CHECK(tape.val(c)[0] == 1.0);
  CHECK(tape.val(c)[1] == 2.0);
  CHECK(tape.val(c)[2] == 3.0);

  Var single = tape.concat({tape.leaf(a)});
  CHECK(tape.val(single)[0] == 1.0);
  CHECK(tape.val(single)[1] == 2.0);
  CHECK(tape.shape(single).size() == 2);
}

TEST_CASE("concat gradient split vs finite differences") {
  Rng rng(11);
  Tensor a(Shape::vec(3)), b(Shape::vec(2)), w(Shape::vec(5));
  randomize(a, rng);
  randomize(b, rng);
  randomize(w, rng);
  Tape tape;
  auto forward = [&]() {
    tape.reset();
    Var c = tape.concat({tape.leaf(a), tape.leaf(b)});
    Var sq = tape.mul(c, c);
    return tape.sum(tape.mul(sq, tape.constant(Shape::vec(5), w.value.data())));
  };
  a.zero_grad();
  b.zero_grad();
  tape.backward(forward());
  std::vector<Tensor*> params{&a, &b};
  auto res = finite_diff_check([&]() { return tape.scalar(forward()); }, params);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax cross entropy") {
  Tape tape;
  SECTION("uniform logits") {
    Tensor l = make_tensor(Shape::vec(4), {1.5, 1.5, 1.5, 1.5});
    auto out = tape.softmax_ce(tape.leaf(l), 2);
    CHECK(tape.scalar(out.loss) == Catch::Approx(std::log(4.0)).epsilon(1e-12));
    for (double p : out.probs) CHECK(p == Catch::Approx(0.25).epsilon(1e-12));
  }
  SECTION("extreme logits stay finite") {
    Tensor l = make_tensor(Shape::vec(2), {1000.0, 0.0});
    auto out = tape.softmax_ce(tape.leaf(l), 0);
    CHECK(std::isfinite(tape.scalar(out.loss)));
    CHECK(tape.scalar(out.loss) == Catch::Approx(0.0).margin(1e-12));
    double s = 0.0;
    for (double p : out.probs) s += p;
    CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("probabilities sum to one for large random logits") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor l(Shape::vec(7));
      randomize(l, rng, -1e3, 1e3);
      tape.reset();
      auto out = tape.softmax_ce(tape.leaf(l), 3);
      double s = 0.0;
      for (double p : out.probs) s += p;
      CHECK(std::fabs(s - 1.0) <= 1e-12);
      CHECK(std::isfinite(tape.scalar(out.loss)));
    }
  }
  SECTION("gold out of range") {
    Tensor l = make_tensor(Shape::vec(3), {0, 0, 0});
    tape.reset();
    CHECK_THROWS_AS(tape.softmax_ce(tape.leaf(l), 3), IndexError);
    CHECK_THROWS_AS(tape.softmax_ce(tape.leaf(l), -1), IndexError);
  }
  SECTION("gradient is p minus onehot, matches finite differences") {
    Rng rng(13);
    Tensor l(Shape::vec(6));
    randomize(l, rng, -2.0, 2.0);
    l.zero_grad();
    tape.reset();
    auto out = tape.softmax_ce(tape.leaf(l), 4);
    std::vector<double> probs(out.probs.begin(), out.probs.end());
    tape.backward(out.loss);
    for (size_t i = 0; i < 6; ++i) {
      double expect = probs[i] - (i == 4 ? 1.0 : 0.0);
      CHECK(l.grad[i] == Catch::Approx(expect).margin(1e-12));
    }
    std::vector<Tensor*> params{&l};
    auto res = finite_diff_check(
        [&]() {
          tape.reset();
          return tape.scalar(tape.softmax_ce(tape.leaf(l), 4).loss);
        },
        params);
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("l2 distance over parameter subsets") {
  ParamStore store;
  Tensor& a1 = store.create("soft.target.w", Shape::vec(2), Partition::Target);
  Tensor& b1 = store.create("soft.source.w", Shape::vec(2), Partition::Source);
  SECTION("equal subsets give zero") {
    a1.value = {1.0, 2.0};
    b1.value = {1.0, 2.0};
    Tape tape;
    Var d = l2_distance_sq(tape, store, "soft.target.", "soft.source.");
    CHECK(tape.scalar(d) == 0.0);
  }
  SECTION("hand-computed value") {
    a1.value = {1.0, 2.0};
    b1.value = {0.0, 0.0};
    Tape tape;
    Var d = l2_distance_sq(tape, store, "soft.target.", "soft.source.");
    CHECK(tape.scalar(d) == 5.0);
  }
  SECTION("gradient vs finite differences") {
    Rng rng(5);
    randomize(a1, rng);
    randomize(b1, rng);
    Tape tape;
    auto forward = [&]() {
      tape.reset();
      return l2_distance_sq(tape, store, "soft.target.", "soft.source.");
    };
    store.zero_grads();
    tape.backward(forward());
    std::vector<Tensor*> params{&a1, &b1};
    auto res = finite_diff_check([&]() { return tape.scalar(forward()); }, params);
    CHECK(res.max_rel_err < 1e-6);
  }
  SECTION("unmatched name raises pairing error") {
    store.create("soft.target.extra", Shape::vec(1), Partition::Target);
    Tape tape;
    CHECK_THROWS_AS(l2_distance_sq(tape, store, "soft.target.", "soft.source."),
                    PairingError);
  }
  SECTION("shape mismatch raises pairing error") {
    ParamStore s2;
    s2.create("a.w", Shape::vec(2), Partition::Target);
    s2.create("b.w", Shape::vec(3), Partition::Source);
    Tape tape;
    CHECK_THROWS_AS(l2_distance_sq(tape, s2, "a.", "b."), PairingError);
  }
}

TEST_CASE("backward accumulation semantics") {
  Rng rng(17);
  Tensor x(Shape::vec(4));
  randomize(x, rng);
  Tape tape;
  auto forward = [&]() {
    Var t = tape.tanh(tape.leaf(x));
    return tape.sum(tape.mul(t, t));
  };
  x.zero_grad();
  Var loss = forward();
  tape.backward(loss);
  std::vector<double> once = x.grad;

  // second backward on the same tape accumulates
  tape.backward(loss);
  for (size_t i = 0; i < 4; ++i) CHECK(x.grad[i] == Catch::Approx(2.0 * once[i]).epsilon(1e-14));

  // fresh forward+backward reproduces the single-pass gradient exactly
  x.zero_grad();
  tape.reset();
  tape.backward(forward());
  for (size_t i = 0; i < 4; ++i) CHECK(x.grad[i] == once[i]);
}

TEST_CASE("backward rejects stale or non-scalar variables") {
  Tape tape;
  Tensor x = make_tensor(Shape::vec(2), {1, 2});
  Var v = tape.leaf(x);
  CHECK_THROWS_AS(tape.backward(v), TapeError);  // not scalar
  tape.reset();
  CHECK_THROWS_AS(tape.backward(v), TapeError);  // stale epoch
}

TEST_CASE("views share storage with their parent") {
  Tape tape;
  Tensor x = make_tensor(Shape::vec(4), {1, 2, 3, 4});
  x.zero_grad();
  Var v = tape.leaf(x);
  Var s = tape.slice(v, 1, 2);
  CHECK(tape.val(s)[0] == 2.0);
  CHECK(tape.val(s)[1] == 3.0);
  Var loss = tape.sum(tape.mul(s, s));
  tape.backward(loss);
  CHECK(x.grad[0] == 0.0);
  CHECK(x.grad[1] == Catch::Approx(4.0));
  CHECK(x.grad[2] == Catch::Approx(6.0));
  CHECK(x.grad[3] == 0.0);
}

TEST_CASE("adam step") {
  SECTION("zero gradient leaves parameters unchanged") {
    ParamStore store;
    Tensor& p = store.create("p", Shape::vec(3), Partition::Target);
    p.value = {1.0, -2.0, 0.5};
    std::vector<double> before = p.value;
    Adam adam(store);
    adam.step(store, PartitionSet::all());
    CHECK(p.value == before);
  }
  SECTION("single scalar with unit gradient moves by about lr") {
    ParamStore store;
    Tensor& p = store.create("p", Shape::vec(1), Partition::Target);
    p.value = {2.0};
    p.grad = {1.0};
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam adam(store, cfg);
    adam.step(store, PartitionSet::all());
    // bias-corrected first step: delta = lr * 1 / (1 + eps)
    CHECK(p.value[0] == Catch::Approx(2.0 - 0.1).epsilon(1e-6));
    CHECK(p.grad[0] == 0.0);  // gradients cleared afterward
  }
  SECTION("partition mask freezes everything outside it") {
    ParamStore store;
    Tensor& tgt = store.create("t", Shape::vec(2), Partition::Target);
    Tensor& src = store.create("s", Shape::vec(2), Partition::Source);
    Tensor& shr = store.create("h", Shape::vec(2), Partition::Shared);
    Rng rng(23);
    randomize(tgt, rng);
    randomize(src, rng);
    randomize(shr, rng);
    for (Tensor* t : {&tgt, &src, &shr}) t->grad = {0.3, -0.7};
    std::vector<double> src_before = src.value;
    std::vector<double> shr_before = shr.value;
    std::vector<double> tgt_before = tgt.value;
    Adam adam(store);
    PartitionSet only_target;
    only_target.target = true;
    adam.step(store, only_target);
    CHECK(src.value == src_before);  // bit-identical
    CHECK(shr.value == shr_before);
    CHECK(tgt.value != tgt_before);
  }
  SECTION("store growth after construction is a state error") {
    ParamStore store;
    store.create("a", Shape::vec(1), Partition::Target);
    Adam adam(store);
    store.create("b", Shape::vec(1), Partition::Target);
    CHECK_THROWS_AS(adam.step(store, PartitionSet::all()), StateError);
  }
}

TEST_CASE("finite difference checker sanity") {
  SECTION("linear function is exact") {
    Tensor x(Shape::vec(3));
    x.value = {0.4, -0.2, 1.1};
    Tape tape;
    double w[3] = {2.0, -1.0, 0.5};
    auto forward = [&]() {
      tape.reset();
      return tape.sum(tape.mul(tape.leaf(x), tape.constant(Shape::vec(3), w)));
    };
    x.zero_grad();
    tape.backward(forward());
    std::vector<Tensor*> params{&x};
    auto res = finite_diff_check([&]() { return tape.scalar(forward()); }, params);
    CHECK(res.max_rel_err < 1e-9);
  }
  SECTION("constant function gives zero on both sides") {
    Tensor x(Shape::vec(2));
    x.value = {1.0, 2.0};
    x.zero_grad();
    Tape tape;
    double c[1] = {3.0};
    auto forward = [&]() {
      tape.reset();
      tape.leaf(x);
      return tape.scalar(tape.constant(Shape::scalar(), c));
    };
    std::vector<Tensor*> params{&x};
    auto res = finite_diff_check([&]() { return forward(); }, params);
    CHECK(res.max_rel_err == 0.0);
  }
}

TEST_CASE("dropout op") {
  Rng rng(31);
  Tensor x(Shape::vec(64));
  randomize(x, rng);
  Tape tape;
  SECTION("rate zero and eval mode are identities") {
    Var v = tape.leaf(x);
    Var d0 = tape.dropout(v, 0.0, rng, true);
    Var de = tape.dropout(v, 0.9, rng, false);
    for (size_t i = 0; i < 64; ++i) {
      CHECK(tape.val(d0)[i] == x.value[i]);
      CHECK(tape.val(de)[i] == x.value[i]);
    }
  }
  SECTION("invalid rate") {
    Var v = tape.leaf(x);
    CHECK_THROWS_AS(tape.dropout(v, 1.0, rng, true), ConfigError);
  }
  SECTION("train-mode expectation matches input") {
    // Monte-Carlo oracle: inverted dropout is unbiased
    const int trials = 10000;
    std::vector<double> acc(64, 0.0);
    for (int i = 0; i < trials; ++i) {
      tape.reset();
      Var d = tape.dropout(tape.leaf(x), 0.5, rng, true);
      auto vals = tape.val(d);
      for (size_t j = 0; j < 64; ++j) acc[j] += vals[j];
    }
    for (size_t j = 0; j < 64; ++j) {
      double mean = acc[j] / trials;
      CHECK(mean == Catch::Approx(x.value[j]).margin(0.05));
    }
  }
  SECTION("gradient flows through the mask") {
    x.zero_grad();
    Rng fixed(99);
    tape.reset();
    Var d = tape.dropout(tape.leaf(x), 0.5, fixed, true);
    Var loss = tape.sum(d);
    tape.backward(loss);
    // every gradient entry is either 0 or 1/keep
    for (size_t j = 0; j < 64; ++j) {
      bool ok = x.grad[j] == 0.0 || x.grad[j] == Catch::Approx(2.0);
      CHECK(ok);
    }
  }
}

TEST_CASE("rows gather and scatter") {
  Tape tape;
  Tensor table = make_tensor(Shape::mat(4, 2), {0, 1, 10, 11, 20, 21, 30, 31});
  table.zero_grad();
  std::vector<int> ids{2, 0, 2};
  Var g = tape.rows(tape.leaf(table), ids);
  CHECK(tape.val(g)[0] == 20.0);
  CHECK(tape.val(g)[2] == 0.0);
  CHECK(tape.val(g)[4] == 20.0);
  Var loss = tape.sum(g);
  tape.backward(loss);
  CHECK(table.grad[0] == 1.0);  // row 0 hit once
  CHECK(table.grad[4] == 2.0);  // row 2 hit twice
  CHECK(table.grad[6] == 0.0);  // row 3 untouched

  std::vector<int> bad{7};
  CHECK_THROWS_AS(tape.rows(tape.leaf(table), bad), IndexError);
}
