#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "unbias/autodiff.hpp"
#include "unbias/losses.hpp"

using namespace unbias;

namespace {

Matrix random_matrix(Rng& rng, Index rows, Index cols, Real scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

Real max_rel_err(const Matrix& got, const Matrix& want) {
  Real worst = 0.0;
  for (Index i = 0; i < got.rows(); ++i)
    for (Index j = 0; j < got.cols(); ++j) {
      const Real denom = std::max(std::abs(want(i, j)), 1e-3);
      worst = std::max(worst, std::abs(got(i, j) - want(i, j)) / denom);
    }
  return worst;
}

// Analytic gradient of f(P) for a leaf parameter vs central differences.
Real check_against_fd(const std::function<NodePtr<Real>(Tape<Real>&, const NodePtr<Real>&)>& f,
                      const Matrix& p0) {
  auto param = make_leaf<Real>(p0, true);
  Tape<Real> tape;
  auto loss = f(tape, param);
  backward(tape, loss);
  const Matrix analytic = param->grad;

  auto scalar_f = [&](const Matrix& p) {
    auto leaf = make_leaf<Real>(p, false);
    Tape<Real> t;
    return f(t, leaf)->values(0, 0);
  };
  const Matrix fd = finite_diff_grad<Real>(scalar_f, p0, 1e-5);
  return max_rel_err(analytic, fd);
}

}  // namespace

TEST_CASE("matmul forward") {
  Tape<Real> tape;
  Rng rng(11);
  const Matrix m = random_matrix(rng, 2, 2);
  auto id = make_leaf<Real>(Matrix::Identity(2, 2));
  auto a = make_leaf<Real>(m);
  CHECK(matmul(tape, id, a)->values == m);

  Matrix b(2, 2), c(2, 1);
  b << 1, 2, 3, 4;
  c << 1, 1;
  auto r = matmul(tape, make_leaf<Real>(b), make_leaf<Real>(c));
  CHECK(r->values(0, 0) == doctest::Approx(3));
  CHECK(r->values(1, 0) == doctest::Approx(7));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<Real> tape;
  auto a = make_leaf<Real>(Matrix::Zero(2, 3));
  auto b = make_leaf<Real>(Matrix::Zero(2, 3));
  CHECK_THROWS_WITH_AS(matmul(tape, a, b),
                       doctest::Contains("2x3"), DimensionError);
}

TEST_CASE("matmul gradient of sum(A*B) matches finite differences") {
  Rng rng(42);
  const Matrix a0 = random_matrix(rng, 3, 4);
  const Matrix b0 = random_matrix(rng, 4, 2);
  auto wrt_a = [&](Tape<Real>& t, const NodePtr<Real>& a) {
    return sum(t, matmul(t, a, make_leaf<Real>(b0)));
  };
  CHECK(check_against_fd(wrt_a, a0) < 1e-4);
  auto wrt_b = [&](Tape<Real>& t, const NodePtr<Real>& b) {
    return sum(t, matmul(t, make_leaf<Real>(a0), b));
  };
  CHECK(check_against_fd(wrt_b, b0) < 1e-4);
}

TEST_CASE("add_bias") {
  Tape<Real> tape;
  Matrix x(2, 2), b(1, 2);
  x << 1, 2, 3, 4;
  b << 10, 20;
  auto r = add_bias(tape, make_leaf<Real>(x), make_leaf<Real>(b));
  Matrix want(2, 2);
  want << 11, 22, 13, 24;
  CHECK(r->values == want);

  auto zero = make_leaf<Real>(Matrix::Zero(1, 2));
  CHECK(add_bias(tape, make_leaf<Real>(x), zero)->values == x);

  auto bad = make_leaf<Real>(Matrix::Zero(1, 3));
  CHECK_THROWS_AS(add_bias(tape, make_leaf<Real>(x), bad), DimensionError);
}

TEST_CASE("add_bias gradient of sum w.r.t. bias sums over rows") {
  Rng rng(7);
  Tape<Real> tape;
  auto x = make_leaf<Real>(random_matrix(rng, 5, 3));
  auto b = make_leaf<Real>(Matrix::Zero(1, 3), true);
  backward(tape, sum(tape, add_bias(tape, x, b)));
  CHECK(b->grad == Matrix::Constant(1, 3, 5.0));
}

TEST_CASE("relu") {
  Tape<Real> tape;
  Matrix x(1, 3);
  x << -1, 0, 2;
  auto r = relu(tape, make_leaf<Real>(x));
  Matrix want(1, 3);
  want << 0, 0, 2;
  CHECK(r->values == want);

  Matrix pos(2, 2);
  pos << 1, 2, 3, 4;
  CHECK(relu(tape, make_leaf<Real>(pos))->values == pos);

  Matrix p0(1, 2);
  p0 << -1, 2;
  auto f = [](Tape<Real>& t, const NodePtr<Real>& p) { return sum(t, relu(t, p)); };
  CHECK(check_against_fd(f, p0) < 1e-6);
}

TEST_CASE("softmax_rows basics") {
  Tape<Real> tape;
  auto u = softmax_rows(tape, make_leaf<Real>(Matrix::Zero(1, 4)));
  CHECK(u->values.isApprox(Matrix::Constant(1, 4, 0.25), 1e-12));

  Matrix big(1, 2);
  big << 1000.0, 1000.0 + std::log(3.0);
  auto r = softmax_rows(tape, make_leaf<Real>(big));
  CHECK(r->values(0, 0) == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(r->values(0, 1) == doctest::Approx(0.75).epsilon(1e-9));
  CHECK(r->values.allFinite());
}

TEST_CASE("softmax_rows shift invariance and row sums") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Tape<Real> tape;
    const Matrix z = random_matrix(rng, 4, 5, 3.0);
    auto p = softmax_rows(tape, make_leaf<Real>(z));
    auto p_shift = softmax_rows(tape, make_leaf<Real>((z.array() + 500.0).matrix()));
    CHECK((p->values - p_shift->values).cwiseAbs().maxCoeff() < 1e-9);
    for (Index i = 0; i < 4; ++i) CHECK(std::abs(p->values.row(i).sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("softmax_rows gradient vs finite differences") {
  Rng rng(5);
  const Matrix z0 = random_matrix(rng, 3, 4);
  const Matrix w = random_matrix(rng, 3, 4);
  auto f = [&](Tape<Real>& t, const NodePtr<Real>& z) {
    return weighted_sum(t, softmax_rows(t, z), w);
  };
  CHECK(check_against_fd(f, z0) < 1e-4);
}

TEST_CASE("backward on a leaf gives d x / d x = 1") {
  Tape<Real> tape;
  auto leaf = make_leaf<Real>(Matrix::Zero(1, 1), true);
  backward(tape, leaf);
  CHECK(leaf->grad(0, 0) == 1.0);
}

TEST_CASE("backward accumulates across calls until zero_grads") {
  Rng rng(9);
  auto w = make_leaf<Real>(random_matrix(rng, 3, 2), true);
  auto x = make_leaf<Real>(random_matrix(rng, 4, 3));

  Tape<Real> tape;
  auto loss = mean(tape, relu(tape, matmul(tape, x, w)));
  backward(tape, loss);
  const Matrix once = w->grad;
  backward(tape, loss);
  CHECK(w->grad == (2.0 * once).eval());

  std::vector<NodePtr<Real>> params{w};
  zero_grads(params);
  CHECK(w->grad == Matrix::Zero(3, 2));
}

TEST_CASE("backward requires a scalar output") {
  Tape<Real> tape;
  auto x = make_leaf<Real>(Matrix::Zero(2, 2), true);
  auto y = relu(tape, x);
  CHECK_THROWS_AS(backward(tape, y), Error);
}

TEST_CASE("backward leaves non-grad leaves with zero gradient") {
  Rng rng(21);
  Tape<Real> tape;
  auto x = make_leaf<Real>(random_matrix(rng, 4, 3), false);
  auto w = make_leaf<Real>(random_matrix(rng, 3, 2), true);
  backward(tape, sum(tape, matmul(tape, x, w)));
  CHECK(x->grad == Matrix::Zero(4, 3));
  CHECK(w->grad != Matrix::Zero(3, 2));
}

TEST_CASE("full MLP loss gradient matches finite differences") {
  Rng rng(17);
  const Matrix x = random_matrix(rng, 6, 5);
  IntVector labels(6);
  for (Index i = 0; i < 6; ++i) labels[i] = static_cast<int>(rng.bounded(3));
  const Matrix w1_0 = random_matrix(rng, 5, 8, 0.5);
  const Matrix b1_0 = random_matrix(rng, 1, 8, 0.1);
  const Matrix w2_0 = random_matrix(rng, 8, 3, 0.5);

  auto network_loss = [&](Tape<Real>& t, const NodePtr<Real>& w1, const NodePtr<Real>& b1,
                          const NodePtr<Real>& w2) {
    auto h = relu(t, add_bias(t, matmul(t, make_leaf<Real>(x), w1), b1));
    return softmax_loss(t, matmul(t, h, w2), labels);
  };

  auto w1 = make_leaf<Real>(w1_0, true);
  auto b1 = make_leaf<Real>(b1_0, true);
  auto w2 = make_leaf<Real>(w2_0, true);
  Tape<Real> tape;
  backward(tape, network_loss(tape, w1, b1, w2));

  auto fd_for = [&](const Matrix& p0, int which) {
    auto f = [&](const Matrix& p) {
      Tape<Real> t;
      auto l1 = make_leaf<Real>(which == 0 ? p : w1_0);
      auto l2 = make_leaf<Real>(which == 1 ? p : b1_0);
      auto l3 = make_leaf<Real>(which == 2 ? p : w2_0);
      return network_loss(t, l1, l2, l3)->values(0, 0);
    };
    return finite_diff_grad<Real>(f, p0, 1e-5);
  };
  CHECK(max_rel_err(w1->grad, fd_for(w1_0, 0)) < 1e-4);
  CHECK(max_rel_err(b1->grad, fd_for(b1_0, 1)) < 1e-4);
  CHECK(max_rel_err(w2->grad, fd_for(w2_0, 2)) < 1e-4);
}

TEST_CASE("tape records are topologically ordered") {
  Rng rng(13);
  Tape<Real> tape;
  auto x = make_leaf<Real>(random_matrix(rng, 3, 3), true);
  auto h = relu(tape, x);
  auto g = matmul(tape, h, h);
  sum(tape, add(tape, g, h));
  const auto& nodes = tape.nodes();
  for (size_t i = 0; i < nodes.size(); ++i)
    for (const auto& input : nodes[i]->inputs) {
      if (input->is_leaf()) continue;
      const auto pos = std::find(nodes.begin(), nodes.end(), input) - nodes.begin();
      CHECK(static_cast<size_t>(pos) < i);
    }
}

TEST_CASE("sgd_step") {
  auto w = make_leaf<Real>(Matrix::Constant(1, 1, 1.0), true);
  w->grad = Matrix::Constant(1, 1, 2.0);
  std::vector<NodePtr<Real>> params{w};
  sgd_step(params, 0.1);
  CHECK(w->values(0, 0) == doctest::Approx(0.8));

  auto fixed = make_leaf<Real>(Matrix::Constant(1, 1, 3.0), true);
  std::vector<NodePtr<Real>> ps{fixed};
  sgd_step(ps, 0.5);  // zero gradient: unchanged
  CHECK(fixed->values(0, 0) == 3.0);

  auto frozen = make_leaf<Real>(Matrix::Constant(1, 1, 5.0), false);
  frozen->frozen = true;
  frozen->grad = Matrix::Constant(1, 1, 100.0);
  std::vector<NodePtr<Real>> fs{frozen};
  sgd_step(fs, 0.5);
  CHECK(frozen->values(0, 0) == 5.0);

  CHECK_THROWS_AS(sgd_step(params, 0.0), ConfigError);
}

TEST_CASE("finite_diff_grad basics") {
  auto square = [](const Matrix& p) { return p(0, 0) * p(0, 0); };
  const Matrix at3 = Matrix::Constant(1, 1, 3.0);
  CHECK(finite_diff_grad<Real>(square, at3, 1e-5)(0, 0) == doctest::Approx(6.0).epsilon(1e-6));

  auto constant = [](const Matrix&) { return 1.5; };
  CHECK(finite_diff_grad<Real>(constant, Matrix::Zero(2, 3), 1e-5) == Matrix::Zero(2, 3));

  // softmax entry 0 of a 2-logit row: gradient is [p0(1-p0), -p0 p1] = [.25, -.25] at zero
  auto softmax0 = [](const Matrix& p) { return softmax_rows_values(p)(0, 0); };
  const Matrix fd = finite_diff_grad<Real>(softmax0, Matrix::Zero(1, 2), 1e-5);
  CHECK(fd(0, 0) == doctest::Approx(0.25).epsilon(1e-5));
  CHECK(fd(0, 1) == doctest::Approx(-0.25).epsilon(1e-5));

  CHECK_THROWS_AS(finite_diff_grad<Real>(square, at3, 0.0), ConfigError);
}

TEST_CASE("every differentiable op matches the finite-difference oracle on seeded instances") {
  Rng rng(2024);
  for (int rep = 0; rep < 20; ++rep) {
    const Index n = 2 + static_cast<Index>(rng.bounded(3));
    const Index k = 2 + static_cast<Index>(rng.bounded(3));
    const Matrix z0 = random_matrix(rng, n, k, 2.0);
    const Matrix w = random_matrix(rng, n, k);
    IntVector labels(n);
    for (Index i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.bounded(k));

    auto probe = [&](auto op) {
      return [&, op](Tape<Real>& t, const NodePtr<Real>& p) {
        return weighted_sum(t, op(t, p), w);
      };
    };
    CHECK(check_against_fd(probe([&](Tape<Real>& t, const NodePtr<Real>& p) {
            return softmax_rows(t, p);
          }), z0) < 1e-4);
    CHECK(check_against_fd([&](Tape<Real>& t, const NodePtr<Real>& p) {
            return softmax_loss(t, p, labels);
          }, z0) < 1e-4);
    CHECK(check_against_fd([&](Tape<Real>& t, const NodePtr<Real>& p) {
            return confusion_loss_ce(t, p);
          }, z0) < 1e-4);
    CHECK(check_against_fd([&](Tape<Real>& t, const NodePtr<Real>& p) {
            return confusion_loss_kl(t, p);
          }, z0) < 1e-4);
    CHECK(check_against_fd([&](Tape<Real>& t, const NodePtr<Real>& p) {
            return confusion_loss_kl(t, p, ConfusionVariant::kKlUniformToP);
          }, z0) < 1e-4);
    CHECK(check_against_fd([&](Tape<Real>& t, const NodePtr<Real>& p) {
            return mean(t, relu(t, p));
          }, z0) < 1e-4);
  }
}

TEST_CASE("forward and backward stay finite on finite inputs") {
  Rng rng(31);
  for (int rep = 0; rep < 10; ++rep) {
    Tape<Real> tape;
    auto x = make_leaf<Real>(random_matrix(rng, 5, 4, 50.0));
    auto w = make_leaf<Real>(random_matrix(rng, 4, 3, 50.0), true);
    IntVector labels(5);
    for (Index i = 0; i < 5; ++i) labels[i] = static_cast<int>(rng.bounded(3));
    auto logits = matmul(tape, x, w);
    auto loss = add(tape, softmax_loss(tape, logits, labels),
                    confusion_loss_kl(tape, logits));
    backward(tape, loss);
    CHECK(loss->values.allFinite());
    CHECK(w->grad.allFinite());
    for (const auto& node : tape.nodes()) {
      CHECK(node->values.allFinite());
      CHECK(node->grad.allFinite());
    }
  }
}
