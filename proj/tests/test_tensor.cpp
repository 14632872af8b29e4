#include "tensor.hpp"

#include <cmath>

#include "doctest.h"
#include "support/oracles.hpp"

using c3s::Rng;
using c3s::Tape;
using c3s::Tensor;

TEST_CASE("matmul identity and scalar cases") {
  Tape tape;
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  Tensor c = tape.matmul(eye, b);
  for (int i = 0; i < 4; ++i) CHECK(c.data()[i] == b.data()[i]);

  Tensor s = tape.matmul(Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3}));
  CHECK(s.data()[0] == doctest::Approx(6.0));
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  Tensor a = oracle::random_tensor({3, 4}, rng, false);
  Tensor b = oracle::random_tensor({4, 2}, rng, false);
  Tape tape;
  Tensor c = tape.matmul(a, b);
  auto ref = oracle::matmul(a.values(), b.values(), 3, 4, 2);
  for (int i = 0; i < 6; ++i)
    CHECK(std::fabs(c.data()[i] - ref[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("matmul with transposes matches oracle") {
  Rng rng(12);
  // effective A[3,4] * B[4,2] assembled from transposed storage
  Tensor at = oracle::random_tensor({4, 3}, rng, false);
  Tensor bt = oracle::random_tensor({2, 4}, rng, false);
  std::vector<double> a(12), b(8);
  for (int i = 0; i < 3; ++i)
    for (int l = 0; l < 4; ++l) a[static_cast<size_t>(i * 4 + l)] = at.data()[l * 3 + i];
  for (int l = 0; l < 4; ++l)
    for (int j = 0; j < 2; ++j) b[static_cast<size_t>(l * 2 + j)] = bt.data()[j * 4 + l];
  auto ref = oracle::matmul(a, b, 3, 4, 2);
  Tape tape;
  Tensor c = tape.matmul(at, bt, true, true);
  for (int i = 0; i < 6; ++i)
    CHECK(std::fabs(c.data()[i] - ref[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tape tape;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(tape.matmul(a, b),
                       doctest::Contains("[2,3]"), c3s::DimensionError);
  try {
    tape.matmul(a, b);
  } catch (const c3s::DimensionError& e) {
    CHECK(std::string(e.what()).find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("softmax basics") {
  Tape tape;
  Tensor x = Tensor::from({2}, {0, 0});
  Tensor y = tape.softmax(x, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  // large inputs must not overflow
  Tensor big = Tensor::from({2}, {1000, 0});
  Tensor yb = tape.softmax(big, 0);
  CHECK(yb.data()[0] == doctest::Approx(1.0));
  CHECK(yb.data()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(yb.data()[0]));

  Rng rng(3);
  Tensor r = oracle::random_tensor({5}, rng, false, -3, 3);
  Tensor yr = tape.softmax(r, 0);
  auto ref = oracle::softmax(r.values());
  for (int i = 0; i < 5; ++i)
    CHECK(std::fabs(yr.data()[i] - ref[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("softmax rows sum to one for any finite input") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = oracle::random_tensor({4, 6}, rng, false, -50, 50);
    Tape tape;
    Tensor y = tape.softmax(x, 1);
    for (int i = 0; i < 4; ++i) {
      double s = 0.0;
      for (int j = 0; j < 6; ++j) s += y.data()[i * 6 + j];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
    // middle axis of a 3-D tensor
    Tensor x3 = oracle::random_tensor({2, 5, 3}, rng, false, -10, 10);
    Tape t2;
    Tensor y3 = t2.softmax(x3, 1);
    for (int o = 0; o < 2; ++o)
      for (int in = 0; in < 3; ++in) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) s += y3.data()[(o * 5 + c) * 3 + in];
        CHECK(std::fabs(s - 1.0) < 1e-9);
      }
  }
}

TEST_CASE("backward on elementwise square") {
  Tape tape;
  Tensor w = Tensor::from({2}, {1, 2}, true);
  Tensor loss = tape.sum_all(tape.mul(w, w));
  tape.backward(loss);
  CHECK(w.grad()[0] == doctest::Approx(2.0));
  CHECK(w.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward of softmax cross-entropy matches finite differences") {
  Rng rng(5);
  Tensor logits = oracle::random_tensor({1, 3}, rng, true, -2, 2);
  auto make_loss = [&](Tape& t) {
    Tensor lp = t.log_softmax_rows(logits);
    Tensor picked = t.gather_per_row(lp, {1});
    return t.affine(t.mean_all(picked), -1.0, 0.0);
  };
  oracle::GradCheck gc;
  gc.tolerance = 1e-5;
  gc.run({logits}, make_loss);
}

TEST_CASE("backward requires scalar loss") {
  Tape tape;
  Tensor w = Tensor::from({2}, {1, 2}, true);
  Tensor y = tape.mul(w, w);
  CHECK_THROWS_AS(tape.backward(y), c3s::DimensionError);
}

TEST_CASE("disconnected leaf keeps zero gradient") {
  Tape tape;
  Tensor w = Tensor::from({3}, {1, 2, 3}, true);
  Tensor v = Tensor::from({2}, {5, 7}, true);
  Tensor loss = tape.sum_all(tape.mul(v, v));
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(w.grad()[i] == 0.0);
}

TEST_CASE("gradient additivity over independent subgraphs") {
  Rng rng(6);
  std::vector<double> va = {0.3, -0.7, 1.2};
  std::vector<double> vb = {0.9, 0.1};

  auto build_a = [&](Tape& t, Tensor& a) { return t.sum_all(t.tanh(a)); };
  auto build_b = [&](Tape& t, Tensor& b) { return t.mean_all(t.mul(b, b)); };

  Tensor a1 = Tensor::from({3}, va, true);
  Tensor b1 = Tensor::from({2}, vb, true);
  {
    Tape t;
    Tensor loss = t.add(build_a(t, a1), build_b(t, b1));
    t.backward(loss);
  }
  Tensor a2 = Tensor::from({3}, va, true);
  Tensor b2 = Tensor::from({2}, vb, true);
  {
    Tape t;
    t.backward(build_a(t, a2));
  }
  {
    Tape t;
    t.backward(build_b(t, b2));
  }
  for (int i = 0; i < 3; ++i)
    CHECK(a1.grad()[i] == doctest::Approx(a2.grad()[i]).epsilon(1e-12));
  for (int i = 0; i < 2; ++i)
    CHECK(b1.grad()[i] == doctest::Approx(b2.grad()[i]).epsilon(1e-12));
}

TEST_CASE("finite differences pass for every differentiable op") {
  Rng rng(7);
  oracle::GradCheck gc;

  SUBCASE("matmul all transpose combos") {
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        Tensor a = oracle::random_tensor(ta ? c3s::Shape{4, 3} : c3s::Shape{3, 4}, rng);
        Tensor b = oracle::random_tensor(tb ? c3s::Shape{2, 4} : c3s::Shape{4, 2}, rng);
        gc.run({a, b}, [&](Tape& t) {
          return t.sum_all(t.tanh(t.matmul(a, b, ta, tb)));
        });
      }
  }
  SUBCASE("add mul affine") {
    Tensor a = oracle::random_tensor({2, 3}, rng);
    Tensor b = oracle::random_tensor({2, 3}, rng);
    gc.run({a, b}, [&](Tape& t) {
      return t.sum_all(t.mul(t.add(a, b), t.affine(b, 0.5, -1.0)));
    });
  }
  SUBCASE("tanh relu exp") {
    Tensor a = oracle::random_tensor({6}, rng, true, -2, 2);
    gc.run({a}, [&](Tape& t) {
      Tensor u = t.tanh(a);
      Tensor v = t.exp(t.affine(a, 0.3, 0.0));
      // shift relu input away from the kink at 0
      Tensor w = t.relu(t.affine(a, 1.0, 0.05));
      return t.sum_all(t.mul(t.add(u, v), w));
    });
  }
  SUBCASE("softmax and log_softmax") {
    Tensor a = oracle::random_tensor({3, 4}, rng, true, -2, 2);
    Tensor weights = oracle::random_tensor({3, 4}, rng, false);
    gc.run({a}, [&](Tape& t) {
      return t.sum_all(t.mul(t.softmax(a, 1), weights));
    });
    gc.run({a}, [&](Tape& t) {
      return t.sum_all(t.mul(t.log_softmax_rows(a), weights));
    });
    Tensor a3 = oracle::random_tensor({2, 3, 2}, rng, true, -2, 2);
    Tensor w3 = oracle::random_tensor({2, 3, 2}, rng, false);
    gc.run({a3}, [&](Tape& t) {
      return t.sum_all(t.mul(t.softmax(a3, 1), w3));
    });
  }
  SUBCASE("concat slice gather") {
    Tensor a = oracle::random_tensor({3, 2}, rng);
    Tensor b = oracle::random_tensor({3, 3}, rng);
    Tensor c = oracle::random_tensor({2, 2}, rng);
    gc.run({a, b, c}, [&](Tape& t) {
      Tensor cat = t.concat(a, b, 1);            // [3,5]
      Tensor rows = t.concat(a, c, 0);           // [5,2]
      Tensor sl = t.slice_rows(cat, 1, 3);       // [2,5]
      Tensor gr = t.gather_rows(rows, {0, 4, 4});
      return t.add(t.sum_all(t.tanh(sl)), t.sum_all(t.mul(gr, gr)));
    });
  }
  SUBCASE("gather_per_row and embedding_gather") {
    Tensor x = oracle::random_tensor({3, 4}, rng);
    Tensor table = oracle::random_tensor({5, 3}, rng);
    gc.run({x, table}, [&](Tape& t) {
      Tensor picked = t.gather_per_row(x, {1, 0, 3});
      Tensor emb = t.embedding_gather(table, {4, 0, 2, 2});
      return t.add(t.sum_all(t.exp(picked)), t.sum_all(t.tanh(emb)));
    });
  }
  SUBCASE("position unfold windows") {
    const int64_t B = 2, T = 3, d = 2;
    Tensor x = oracle::random_tensor({B * T, d}, rng);
    Tensor pos = oracle::random_tensor({T, d}, rng);
    gc.run({x, pos}, [&](Tape& t) {
      Tensor xp = t.add_position(x, pos, B, T);
      Tensor uf = t.causal_unfold(xp, B, T, 2);
      Tensor w = t.gather_windows(xp, B, T, {2, 1}, 3);
      return t.add(t.sum_all(t.tanh(uf)), t.sum_all(t.mul(w, w)));
    });
  }
  SUBCASE("row_broadcast_mul layer_norm mask") {
    Tensor x = oracle::random_tensor({4, 3}, rng);
    Tensor v = oracle::random_tensor({3}, rng);
    Tensor g = oracle::random_tensor({3}, rng, true, 0.5, 1.5);
    Tensor b = oracle::random_tensor({3}, rng);
    gc.run({x, v, g, b}, [&](Tape& t) {
      Tensor y = t.row_broadcast_mul(x, v);
      Tensor n = t.layer_norm_rows(y, g, b);
      Tensor m = t.mask_rows(n, {1, 0, 1, 1});
      return t.sum_all(t.tanh(m));
    });
  }
  SUBCASE("row_cosine") {
    Tensor a = oracle::random_tensor({3, 4}, rng, true, 0.1, 1.0);
    Tensor b = oracle::random_tensor({3, 4}, rng, true, 0.1, 1.0);
    gc.run({a, b}, [&](Tape& t) {
      return t.sum_all(t.row_cosine(a, b));
    });
  }
  SUBCASE("causal attention kernels") {
    const int64_t B = 2, T = 4, d = 3;
    Tensor q = oracle::random_tensor({B * T, d}, rng);
    Tensor k = oracle::random_tensor({B * T, d}, rng);
    Tensor v = oracle::random_tensor({B * T, d}, rng);
    gc.run({q, k, v}, [&](Tape& t) {
      Tensor p = t.causal_softmax_qk(q, k, B, T, 1.0 / std::sqrt(3.0));
      Tensor o = t.attn_apply(p, v, B, T);
      return t.sum_all(t.tanh(o));
    });
  }
  SUBCASE("item_logits") {
    Tensor repr = oracle::random_tensor({2, 3}, rng);
    Tensor emb = oracle::random_tensor({5, 3}, rng);
    gc.run({repr, emb}, [&](Tape& t) {
      Tensor logits = t.item_logits(repr, emb);
      Tensor lp = t.log_softmax_rows(logits);
      return t.affine(t.sum_all(t.gather_per_row(lp, {0, 3})), -1.0, 0.0);
    });
  }
  SUBCASE("reductions") {
    Tensor a = oracle::random_tensor({2, 3}, rng);
    gc.run({a}, [&](Tape& t) {
      return t.add(t.mean_all(t.mul(a, a)), t.affine(t.sum_all(a), 0.25, 0.0));
    });
  }
}

TEST_CASE("dropout backward uses the forward mask") {
  Rng data_rng(8);
  Tensor x = oracle::random_tensor({40}, data_rng, true);
  Rng drop_rng(99);
  Tape tape;
  Tensor y = tape.dropout(x, 0.5, drop_rng);
  tape.backward(tape.sum_all(y));
  int dropped = 0;
  for (int i = 0; i < 40; ++i) {
    if (y.data()[i] == 0.0) {
      CHECK(x.grad()[i] == 0.0);
      ++dropped;
    } else {
      CHECK(y.data()[i] == doctest::Approx(2.0 * x.data()[i]));
      CHECK(x.grad()[i] == doctest::Approx(2.0));
    }
  }
  CHECK(dropped > 0);
  CHECK(dropped < 40);
}

TEST_CASE("causal softmax rows are normalized and strictly causal") {
  Rng rng(9);
  const int64_t B = 2, T = 5, d = 4;
  Tensor q = oracle::random_tensor({B * T, d}, rng, false);
  Tensor k = oracle::random_tensor({B * T, d}, rng, false);
  Tape tape(false);
  Tensor p = tape.causal_softmax_qk(q, k, B, T, 0.5);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t) {
      double sum = 0.0;
      for (int64_t j = 0; j < T; ++j) {
        double w = p.data()[(b * T + t) * T + j];
        if (j > t) CHECK(w == 0.0);
        sum += w;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("reshape aliases storage for values and gradients") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor flat = x.reshape({6});
  CHECK(flat.data() == x.data());
  Tape tape;
  tape.backward(tape.sum_all(tape.mul(flat, flat)));
  CHECK(x.grad()[4] == doctest::Approx(10.0));
  CHECK_THROWS_AS(x.reshape({4}), c3s::DimensionError);
}

TEST_CASE("tape refuses double backward") {
  Tape tape;
  Tensor w = Tensor::from({1}, {2.0}, true);
  Tensor loss = tape.sum_all(w);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
}
