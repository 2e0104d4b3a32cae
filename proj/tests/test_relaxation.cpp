#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "certilax/model.hpp"
#include "certilax/relaxation.hpp"
#include "certilax/rng.hpp"
#include "test_util.hpp"

using namespace certilax;
using testutil::random_interior_point;
using testutil::random_net;
using testutil::sample_feasible;

namespace {

AttackSpec make_spec(const Vector& x_hat, double radius, Norm norm) {
  AttackSpec s;
  s.x_hat = x_hat;
  s.true_class = 0;
  s.target_class = 1;
  s.radius = radius;
  s.norm = norm;
  return s;
}

struct Instance {
  MlpNetwork net;
  AttackSpec spec;
  MarginObjective mobj;
  PreactivationBounds bounds;
};

Instance make_instance(const std::vector<int>& dims, uint64_t seed, double radius,
                       Norm norm) {
  Instance ins{random_net(dims, seed), {}, {}, {}};
  Rng rng(derive_seed(seed, 17));
  ins.spec = make_spec(random_interior_point(dims.front(), rng), radius, norm);
  ins.mobj = margin_objective(ins.net, ins.spec.true_class, ins.spec.target_class);
  ins.bounds = interval_bounds(ins.net, ins.spec);
  return ins;
}

BmPoint random_point(const MlpNetwork& net, int rank, Rng& rng, double u_span = 2.0,
                     double v_span = 1.0) {
  BmPoint p;
  for (int k = 1; k <= net.depth(); ++k) {
    int n = net.layer_dim(k);
    Vector u(n);
    Matrix V(n, rank - 1);
    for (int j = 0; j < n; ++j) u(j) = rng.uniform(-u_span, u_span);
    for (int c = 0; c < rank - 1; ++c)
      for (int j = 0; j < n; ++j) V(j, c) = rng.uniform(-v_span, v_span);
    p.u.push_back(std::move(u));
    p.V.push_back(std::move(V));
  }
  return p;
}

Multipliers random_multipliers(const MlpNetwork& net, Norm norm, bool full,
                               Rng& rng, double lo = 0.0, double hi = 3.0) {
  auto rv = [&](int n, double a, double b) {
    Vector v(n);
    for (int j = 0; j < n; ++j) v(j) = rng.uniform(a, b);
    return v;
  };
  Multipliers m;
  int n1 = net.layer_dim(1);
  if (norm == Norm::L2) {
    m.y0 = rv(1, lo, hi);
    m.y01 = rv(n1, lo, hi);
    m.y02 = rv(n1, lo, hi);
  } else {
    m.y0 = rv(n1, lo, hi);
  }
  for (int k = 1; k < net.depth(); ++k) {
    int nk = net.layer_dim(k + 1);
    m.yk1.push_back(full ? Vector() : rv(nk, lo, hi));
    m.yk2.push_back(rv(nk, lo, hi));
    m.yk.push_back(full ? rv(nk, lo, hi) : Vector());
    m.zk.push_back(rv(nk, -2.0, 2.0));
  }
  m.mu = rng.uniform(-1.0, 0.0);
  return m;
}

// Ground-truth evaluation of the variant's objective and constraints, written
// as plain per-row loops straight from the constraint definitions, using only
// the BmPoint (never the packed layout).
struct RefEval {
  double f = 0.0;
  std::vector<double> g, h;
};

RefEval reference_eval(const Instance& ins, bool full, double R2,
                       const BmPoint& p) {
  const MlpNetwork& net = ins.net;
  const int ell = net.depth();
  RefEval out;
  out.f = 0.0;
  for (Eigen::Index j = 0; j < ins.mobj.w_ell.size(); ++j)
    out.f += ins.mobj.w_ell(j) * p.u[ell - 1](j);

  int n1 = net.layer_dim(1);
  if (ins.spec.norm == Norm::L2) {
    double ball = -ins.spec.radius * ins.spec.radius;
    for (int j = 0; j < n1; ++j) {
      double d = p.u[0](j) - ins.spec.x_hat(j);
      ball += d * d;
      for (Eigen::Index c = 0; c < p.V[0].cols(); ++c)
        ball += p.V[0](j, c) * p.V[0](j, c);
    }
    out.g.push_back(ball);
    for (int j = 0; j < n1; ++j) out.g.push_back(-p.u[0](j));
    for (int j = 0; j < n1; ++j) out.g.push_back(p.u[0](j) - 1.0);
  } else {
    for (int j = 0; j < n1; ++j) {
      double d = p.u[0](j) - ins.bounds.input_center(j);
      double row = d * d - ins.bounds.input_radius(j) * ins.bounds.input_radius(j);
      for (Eigen::Index c = 0; c < p.V[0].cols(); ++c)
        row += p.V[0](j, c) * p.V[0](j, c);
      out.g.push_back(row);
    }
  }

  for (int k = 1; k < ell; ++k) {
    const Layer& lay = net.hidden(k);
    int m = net.layer_dim(k + 1);
    std::vector<double> pre(m);
    for (int i = 0; i < m; ++i) {
      double s = p.u[k](i) - lay.b(i);
      for (int j = 0; j < net.layer_dim(k); ++j) s -= lay.W(i, j) * p.u[k - 1](j);
      pre[i] = s;
    }
    if (!full)
      for (int i = 0; i < m; ++i) out.g.push_back(-p.u[k](i));
    for (int i = 0; i < m; ++i) out.g.push_back(-pre[i]);
    if (full) {
      for (int i = 0; i < m; ++i) {
        double d = p.u[k](i) - ins.bounds.post_center[k - 1](i);
        double row = d * d - ins.bounds.post_radius[k - 1](i) *
                                 ins.bounds.post_radius[k - 1](i);
        for (Eigen::Index c = 0; c < p.V[k].cols(); ++c)
          row += p.V[k](i, c) * p.V[k](i, c);
        out.g.push_back(row);
      }
    }
    for (int i = 0; i < m; ++i) {
      double row = pre[i] * p.u[k](i);
      for (Eigen::Index c = 0; c < p.V[k].cols(); ++c) {
        double mic = p.V[k](i, c);
        for (int j = 0; j < net.layer_dim(k); ++j)
          mic -= lay.W(i, j) * p.V[k - 1](j, c);
        row += mic * p.V[k](i, c);
      }
      out.h.push_back(row);
    }
  }

  // Collapsed coordinates carry pin rows: all first moments, then all second
  // moments, inputs before hidden layers, each in index order.
  std::vector<int> pin_layer, pin_idx;
  std::vector<double> pin_val;
  for (int j = 0; j < n1; ++j)
    if (ins.bounds.input_radius(j) <= 0.0) {
      pin_layer.push_back(0);
      pin_idx.push_back(j);
      pin_val.push_back(ins.bounds.input_center(j));
    }
  for (int k = 1; k < ell; ++k)
    for (int i = 0; i < net.layer_dim(k + 1); ++i)
      if (ins.bounds.post_radius[k - 1](i) <= 0.0) {
        pin_layer.push_back(k);
        pin_idx.push_back(i);
        pin_val.push_back(ins.bounds.post_center[k - 1](i));
      }
  for (size_t t = 0; t < pin_idx.size(); ++t)
    out.h.push_back(p.u[pin_layer[t]](pin_idx[t]) - pin_val[t]);
  for (size_t t = 0; t < pin_idx.size(); ++t) {
    double uv = p.u[pin_layer[t]](pin_idx[t]);
    double row = uv * uv - pin_val[t] * pin_val[t];
    for (Eigen::Index c = 0; c < p.V[pin_layer[t]].cols(); ++c)
      row += p.V[pin_layer[t]](pin_idx[t], c) * p.V[pin_layer[t]](pin_idx[t], c);
    out.h.push_back(row);
  }

  double tr = 1.0;
  for (int k = 0; k < ell; ++k) {
    for (Eigen::Index j = 0; j < p.u[k].size(); ++j) tr += p.u[k](j) * p.u[k](j);
    for (Eigen::Index c = 0; c < p.V[k].cols(); ++c)
      for (Eigen::Index j = 0; j < p.V[k].rows(); ++j)
        tr += p.V[k](j, c) * p.V[k](j, c);
  }
  out.g.push_back(tr - R2);
  return out;
}

// Lifted factor U = [e_1 | blocks]: row 0 is (1, 0, ..), layer k stacks
// [u_k | V_k].  S acts on U U^T.
Matrix lift_factor(const MlpNetwork& net, const BmPoint& p) {
  int rank = p.rank();
  int N = net.total_neurons();
  Matrix U = Matrix::Zero(N + 1, rank);
  U(0, 0) = 1.0;
  int at = 1;
  for (int k = 0; k < net.depth(); ++k) {
    int n = net.layer_dim(k + 1);
    U.block(at, 0, n, 1) = p.u[k];
    U.block(at, 1, n, rank - 1) = p.V[k];
    at += n;
  }
  return U;
}

double frob_inner(const Matrix& A, const Matrix& B) {
  return (A.array() * B.array()).sum();
}

Multipliers zero_multipliers(const MlpNetwork& net, Norm norm, bool full) {
  Multipliers m;
  int n1 = net.layer_dim(1);
  if (norm == Norm::L2) {
    m.y0 = Vector::Zero(1);
    m.y01 = Vector::Zero(n1);
    m.y02 = Vector::Zero(n1);
  } else {
    m.y0 = Vector::Zero(n1);
  }
  for (int k = 1; k < net.depth(); ++k) {
    int nk = net.layer_dim(k + 1);
    m.yk1.push_back(full ? Vector() : Vector(Vector::Zero(nk)));
    m.yk2.push_back(Vector::Zero(nk));
    m.yk.push_back(full ? Vector(Vector::Zero(nk)) : Vector());
    m.zk.push_back(Vector::Zero(nk));
  }
  m.mu = 0.0;
  return m;
}

struct VariantCase {
  Norm norm;
  bool full;
  double radius;
};

const VariantCase kVariants[] = {{Norm::L2, false, 0.3},
                                 {Norm::L2, true, 0.3},
                                 {Norm::Linf, false, 0.08},
                                 {Norm::Linf, true, 0.08}};

}  // namespace

TEST_CASE("relaxation: constraint and variable counts per variant") {
  // Provably inactive hidden units add two pin equalities each on top of the
  // complementarity rows; the count depends on the instance's bounds.
  auto npins = [](const Instance& ins) {
    int c = 0;
    for (Eigen::Index i = 0; i < ins.bounds.input_radius.size(); ++i)
      if (ins.bounds.input_radius(i) <= 0.0) ++c;
    for (const auto& r : ins.bounds.post_radius)
      for (Eigen::Index i = 0; i < r.size(); ++i)
        if (r(i) <= 0.0) ++c;
    return c;
  };

  // dims {2,3,2}: one hidden layer of 3 units, so one complementarity block.
  Instance l2 = make_instance({2, 3, 2}, 5, 0.3, Norm::L2);
  BmProblem plain = build_bm(l2.net, l2.spec, l2.mobj, l2.bounds, false, 2);
  // 1 ball + 2*2 box + 3 sign + 3 preactivation + 1 trace.
  CHECK(plain.num_ineq() == 12);
  CHECK(plain.num_eq() == 3 + 2 * npins(l2));
  CHECK(plain.num_vars() == (2 + 3) * 2);
  CHECK(plain.rank() == 2);

  BmProblem full = build_bm(l2.net, l2.spec, l2.mobj, l2.bounds, true, 3);
  // sign rows swap for elementwise bound rows: same total.
  CHECK(full.num_ineq() == 12);
  CHECK(full.num_eq() == 3 + 2 * npins(l2));
  CHECK(full.num_vars() == (2 + 3) * 3);

  Instance li = make_instance({2, 3, 2}, 5, 0.08, Norm::Linf);
  BmProblem lplain = build_bm(li.net, li.spec, li.mobj, li.bounds, false, 2);
  // 2 per-coordinate balls + 3 sign + 3 preactivation + 1 trace.
  CHECK(lplain.num_ineq() == 9);
  CHECK(lplain.num_eq() == 3 + 2 * npins(li));

  Instance deep = make_instance({3, 4, 3, 2}, 6, 0.3, Norm::L2);
  BmProblem dp = build_bm(deep.net, deep.spec, deep.mobj, deep.bounds, false, 2);
  CHECK(dp.num_ineq() == 1 + 6 + (4 + 4) + (3 + 3) + 1);
  CHECK(dp.num_eq() == 7 + 2 * npins(deep));

  CHECK(static_cast<int>(dp.ineq_blocks().size()) == dp.num_ineq());
  CHECK(static_cast<int>(dp.eq_blocks().size()) == dp.num_eq());
  // Block ids partition the rows into contiguous nondecreasing runs, and the
  // equality ids continue past the inequality ids.
  auto ib = dp.ineq_blocks();
  for (size_t i = 1; i < ib.size(); ++i) CHECK(ib[i] >= ib[i - 1]);
  auto eb = dp.eq_blocks();
  for (int id : eb) CHECK(id > ib.back());
}

TEST_CASE("relaxation: pack/unpack roundtrip and multiplier packing") {
  for (const auto& vc : kVariants) {
    Instance ins = make_instance({3, 4, 3, 2}, 11, vc.radius, vc.norm);
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 3);
    Rng rng(99);
    BmPoint p = random_point(ins.net, 3, rng);
    BmPoint q = prob.unpack(prob.pack(p));
    REQUIRE(q.u.size() == p.u.size());
    for (size_t k = 0; k < p.u.size(); ++k) {
      CHECK((q.u[k] - p.u[k]).lpNorm<Eigen::Infinity>() == 0.0);
      CHECK((q.V[k] - p.V[k]).lpNorm<Eigen::Infinity>() == 0.0);
    }
    CHECK(p.rank() == 3);

    Multipliers m = random_multipliers(ins.net, vc.norm, vc.full, rng);
    Vector y = prob.pack_multipliers(m);
    Vector z = prob.pack_eq_multipliers(m);
    REQUIRE(y.size() == prob.num_ineq());
    REQUIRE(z.size() == prob.num_eq());
    Multipliers m2 = prob.unpack_multipliers(y, z);
    CHECK((m2.y0 - m.y0).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(m2.mu == m.mu);
    for (size_t k = 0; k < m.zk.size(); ++k) {
      CHECK((m2.zk[k] - m.zk[k]).lpNorm<Eigen::Infinity>() == 0.0);
      CHECK((m2.yk2[k] - m.yk2[k]).lpNorm<Eigen::Infinity>() == 0.0);
      if (vc.full)
        CHECK((m2.yk[k] - m.yk[k]).lpNorm<Eigen::Infinity>() == 0.0);
      else
        CHECK((m2.yk1[k] - m.yk1[k]).lpNorm<Eigen::Infinity>() == 0.0);
    }
  }
}

TEST_CASE("relaxation: eval matches an independent per-row evaluator") {
  for (const auto& vc : kVariants) {
    for (uint64_t seed : {21ull, 22ull}) {
      Instance ins = make_instance({3, 4, 3, 2}, seed, vc.radius, vc.norm);
      BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 3);
      Rng rng(derive_seed(seed, 7));
      for (int trial = 0; trial < 50; ++trial) {
        BmPoint p = random_point(ins.net, 3, rng);
        RefEval ref = reference_eval(ins, vc.full, prob.R2(), p);
        double f;
        Vector g, h;
        prob.eval(prob.pack(p), f, g, h);
        REQUIRE(g.size() == static_cast<int>(ref.g.size()));
        REQUIRE(h.size() == static_cast<int>(ref.h.size()));
        CHECK(std::abs(f - ref.f) <= 1e-12 * (1.0 + std::abs(ref.f)));
        for (int i = 0; i < g.size(); ++i)
          CHECK(std::abs(g(i) - ref.g[i]) <= 1e-12 * (1.0 + std::abs(ref.g[i])));
        for (int i = 0; i < h.size(); ++i)
          CHECK(std::abs(h(i) - ref.h[i]) <= 1e-12 * (1.0 + std::abs(ref.h[i])));
      }
    }
  }
}

TEST_CASE("relaxation: gradients match central finite differences") {
  const double step = 1e-5;
  for (const auto& vc : kVariants) {
    Instance ins = make_instance({2, 3, 3, 2}, 31, vc.radius, vc.norm);
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 3);
    Rng rng(derive_seed(31, 9));
    for (int trial = 0; trial < 25; ++trial) {
      Vector x = prob.pack(random_point(ins.net, 3, rng));
      Vector grad_f;
      Matrix jac_g, jac_h;
      prob.eval_gradients(x, grad_f, jac_g, jac_h);
      for (int v = 0; v < prob.num_vars(); ++v) {
        Vector xp = x, xm = x;
        xp(v) += step;
        xm(v) -= step;
        double fp, fm;
        Vector gp, gm, hp, hm;
        prob.eval(xp, fp, gp, hp);
        prob.eval(xm, fm, gm, hm);
        double dfd = (fp - fm) / (2.0 * step);
        CHECK(std::abs(grad_f(v) - dfd) <= 1e-6 * (1.0 + std::abs(dfd)));
        for (int i = 0; i < prob.num_ineq(); ++i) {
          double d = (gp(i) - gm(i)) / (2.0 * step);
          CHECK(std::abs(jac_g(i, v) - d) <= 1e-6 * (1.0 + std::abs(d)));
        }
        for (int i = 0; i < prob.num_eq(); ++i) {
          double d = (hp(i) - hm(i)) / (2.0 * step);
          CHECK(std::abs(jac_h(i, v) - d) <= 1e-6 * (1.0 + std::abs(d)));
        }
      }
    }
  }
}

TEST_CASE("relaxation: objective gradient lives on the last layer block") {
  Instance ins = make_instance({3, 4, 3, 2}, 41, 0.3, Norm::L2);
  BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 3);
  Rng rng(5);
  Vector x = prob.pack(random_point(ins.net, 3, rng));
  Vector grad_f;
  Matrix jac_g, jac_h;
  prob.eval_gradients(x, grad_f, jac_g, jac_h);

  BmPoint expect;
  for (int k = 1; k <= ins.net.depth(); ++k) {
    expect.u.push_back(Vector::Zero(ins.net.layer_dim(k)));
    expect.V.push_back(Matrix::Zero(ins.net.layer_dim(k), 2));
  }
  expect.u.back() = ins.mobj.w_ell;
  CHECK((grad_f - prob.pack(expect)).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("relaxation: ball gradient vanishes at the center") {
  Instance ins = make_instance({3, 4, 2}, 43, 0.3, Norm::L2);
  BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 2);
  Rng rng(6);
  BmPoint p = random_point(ins.net, 2, rng);
  p.u[0] = ins.spec.x_hat;
  p.V[0].setZero();
  Vector grad_f;
  Matrix jac_g, jac_h;
  prob.eval_gradients(prob.pack(p), grad_f, jac_g, jac_h);
  // Row 0 is the input ball; it only touches layer-1 variables, all of which
  // sit at the ball's center here.
  CHECK(jac_g.row(0).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("relaxation: exact ReLU traces embed feasibly at V = 0") {
  for (const auto& vc : kVariants) {
    for (uint64_t seed : {51ull, 52ull, 53ull}) {
      Instance ins = make_instance({3, 4, 3, 2}, seed, vc.radius, vc.norm);
      BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 2);
      Rng rng(derive_seed(seed, 3));
      for (int trial = 0; trial < 20; ++trial) {
        Vector x0 = sample_feasible(ins.spec, rng);
        ForwardTrace t = forward(ins.net, x0);
        BmPoint p;
        for (int k = 0; k < ins.net.depth(); ++k) {
          p.u.push_back(t.x[k]);
          p.V.push_back(Matrix::Zero(t.x[k].size(), 1));
        }
        double f;
        Vector g, h;
        prob.eval(prob.pack(p), f, g, h);
        CHECK(g.maxCoeff() <= 1e-12);
        CHECK(h.lpNorm<Eigen::Infinity>() <= 1e-12);
        double margin = margin_value(ins.net, ins.mobj, x0);
        CHECK(f + ins.mobj.w0 == doctest::Approx(margin).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("relaxation: full-variant boxes imply the plain sign constraints") {
  for (Norm norm : {Norm::L2, Norm::Linf}) {
    Instance ins = make_instance({3, 4, 3, 2}, 61, norm == Norm::L2 ? 0.3 : 0.08,
                                 norm);
    // Layer boxes are ReLU images, so their lower edges are never negative...
    for (const auto& c : ins.bounds.post_center)
      CHECK(c.size() > 0);
    for (size_t k = 0; k < ins.bounds.post_center.size(); ++k)
      CHECK((ins.bounds.post_center[k] - ins.bounds.post_radius[k]).minCoeff() >=
            -1e-12);
    // ...hence any V = 0 point inside all the full-variant boxes satisfies
    // the plain variant's u >= 0 rows as well.
    BmProblem plain = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 2);
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
      BmPoint p;
      Vector x0(ins.net.layer_dim(1));
      for (int j = 0; j < x0.size(); ++j)
        x0(j) = rng.uniform(ins.bounds.input_lo(j), ins.bounds.input_hi(j));
      p.u.push_back(x0);
      p.V.push_back(Matrix::Zero(x0.size(), 1));
      for (int k = 1; k < ins.net.depth(); ++k) {
        int n = ins.net.layer_dim(k + 1);
        Vector u(n);
        for (int j = 0; j < n; ++j) {
          double c = ins.bounds.post_center[k - 1](j);
          double r = ins.bounds.post_radius[k - 1](j);
          u(j) = rng.uniform(c - r, c + r);
        }
        p.u.push_back(u);
        p.V.push_back(Matrix::Zero(n, 1));
      }
      double f;
      Vector g, h;
      plain.eval(plain.pack(p), f, g, h);
      // Sign rows for hidden layer k sit right before its preactivation rows.
      int row = norm == Norm::L2 ? 1 + 2 * ins.net.layer_dim(1)
                                 : ins.net.layer_dim(1);
      for (int k = 1; k < ins.net.depth(); ++k) {
        int n = ins.net.layer_dim(k + 1);
        for (int j = 0; j < n; ++j) CHECK(g(row + j) <= 1e-12);
        row += 2 * n;
      }
    }
  }
}

TEST_CASE("relaxation: Lagrangian identity ties eval to the slack matrix") {
  for (const auto& vc : kVariants) {
    for (auto dims : {std::vector<int>{2, 3, 2}, std::vector<int>{3, 4, 3, 2}}) {
      Instance ins = make_instance(dims, 71 + dims.size(), vc.radius, vc.norm);
      BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 3);
      Rng rng(derive_seed(71, dims.size() * 4 + vc.full + 2 * (vc.norm == Norm::Linf)));
      for (int trial = 0; trial < 250; ++trial) {
        BmPoint p = random_point(ins.net, 3, rng);
        Multipliers m = random_multipliers(ins.net, vc.norm, vc.full, rng);

        double f;
        Vector g, h;
        Vector x = prob.pack(p);
        prob.eval(x, f, g, h);
        double lhs = f + prob.pack_multipliers(m).dot(g) +
                     prob.pack_eq_multipliers(m).dot(h);

        SlackReport rep = assemble_slack(prob, p, m);
        Matrix U = lift_factor(ins.net, p);
        Matrix X = U * U.transpose();
        double rhs = rep.z0 + m.mu * prob.R2() + frob_inner(rep.S, X) -
                     m.mu * X.trace();
        CHECK(std::abs(lhs - rhs) <= 1e-10 * (1.0 + std::abs(lhs)));

        // The slack matrix is symmetric with one row/column per neuron plus
        // the homogenizing slot.
        REQUIRE(rep.S.rows() == ins.net.total_neurons() + 1);
        REQUIRE(rep.S.cols() == rep.S.rows());
        CHECK((rep.S - rep.S.transpose()).lpNorm<Eigen::Infinity>() == 0.0);
      }
    }
  }
}

TEST_CASE("relaxation: collapsed coordinates get pin equalities") {
  // At radius zero every coordinate's certified interval collapses, so the
  // problem carries a first-moment (u = c) and a second-moment
  // (u^2 + |V row|^2 = c^2) pin equality per coordinate.  Check the
  // bookkeeping, the row values, the gradients, and that the Lagrangian
  // identity still ties eval to the slack matrix.
  for (const auto& vc : kVariants) {
    Instance ins = make_instance({2, 3, 3}, 101, 0.0, vc.norm);
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 3);
    int n1 = ins.net.layer_dim(1);
    int n2 = ins.net.layer_dim(2);
    const int npin = n1 + n2;  // all inputs plus the whole hidden layer

    REQUIRE(static_cast<int>(prob.pins().size()) == npin);
    CHECK(prob.num_eq() == n2 + 2 * npin);
    CHECK(static_cast<int>(prob.eq_blocks().size()) == prob.num_eq());
    for (int j = 0; j < n1; ++j) {
      CHECK(prob.pins()[j].layer == 0);
      CHECK(prob.pins()[j].index == j);
      CHECK(prob.pins()[j].value ==
            doctest::Approx(ins.spec.x_hat(j)).epsilon(1e-15));
    }
    ForwardTrace trace = forward(ins.net, ins.spec.x_hat);
    for (int i = 0; i < n2; ++i) {
      CHECK(prob.pins()[n1 + i].layer == 1);
      CHECK(prob.pins()[n1 + i].index == i);
      CHECK(prob.pins()[n1 + i].value ==
            doctest::Approx(trace.x[1](i)).epsilon(1e-12));
    }
    // A positive radius pins exactly the units whose activation range still
    // degenerates (provably inactive ones); inputs never collapse there.
    Instance pos = make_instance({2, 3, 3}, 101, 0.1, vc.norm);
    BmProblem pprob = build_bm(pos.net, pos.spec, pos.mobj, pos.bounds, vc.full, 3);
    int dead = 0;
    for (int i = 0; i < n2; ++i)
      if (pos.bounds.post_radius[0](i) <= 0.0) ++dead;
    for (const auto& pc : pprob.pins()) CHECK(pc.layer == 1);
    CHECK(static_cast<int>(pprob.pins().size()) == dead);
    CHECK(pprob.num_eq() == n2 + 2 * dead);

    Rng rng(derive_seed(101, 13 + vc.full + 2 * (vc.norm == Norm::Linf)));
    const double step = 1e-5;
    for (int trial = 0; trial < 25; ++trial) {
      BmPoint p = random_point(ins.net, 3, rng);
      Vector x = prob.pack(p);
      double f;
      Vector g, h;
      prob.eval(x, f, g, h);
      REQUIRE(h.size() == n2 + 2 * npin);
      for (int t = 0; t < npin; ++t) {
        const PinnedCoord& pc = prob.pins()[t];
        double uv = p.u[pc.layer](pc.index);
        CHECK(h(n2 + t) == doctest::Approx(uv - pc.value).epsilon(1e-14));
        CHECK(h(n2 + npin + t) ==
              doctest::Approx(uv * uv + p.V[pc.layer].row(pc.index).squaredNorm() -
                              pc.value * pc.value)
                  .epsilon(1e-12));
      }

      // Pin rows are linear or quadratic, so central differences are exact
      // up to rounding.
      Vector grad_f;
      Matrix jac_g, jac_h;
      prob.eval_gradients(x, grad_f, jac_g, jac_h);
      for (int v = 0; v < prob.num_vars(); ++v) {
        Vector xp = x, xm = x;
        xp(v) += step;
        xm(v) -= step;
        double fp, fm;
        Vector gp, gm, hp, hm;
        prob.eval(xp, fp, gp, hp);
        prob.eval(xm, fm, gm, hm);
        for (int i = 0; i < prob.num_eq(); ++i) {
          double d = (hp(i) - hm(i)) / (2.0 * step);
          CHECK(std::abs(jac_h(i, v) - d) <= 1e-6 * (1.0 + std::abs(d)));
        }
      }

      Multipliers m = random_multipliers(ins.net, vc.norm, vc.full, rng);
      m.z_pin.resize(npin);
      m.z_pin2.resize(npin);
      for (int t = 0; t < npin; ++t) {
        m.z_pin(t) = rng.uniform(-2.0, 2.0);
        m.z_pin2(t) = rng.uniform(-2.0, 2.0);
      }
      double lhs = f + prob.pack_multipliers(m).dot(g) +
                   prob.pack_eq_multipliers(m).dot(h);
      SlackReport rep = assemble_slack(prob, p, m);
      Matrix U = lift_factor(ins.net, p);
      Matrix X = U * U.transpose();
      double rhs = rep.z0 + m.mu * prob.R2() + frob_inner(rep.S, X) -
                   m.mu * X.trace();
      CHECK(std::abs(lhs - rhs) <= 1e-10 * (1.0 + std::abs(lhs)));
    }

    // The only feasible point (the trace of x_hat itself) satisfies the pin
    // rows exactly and keeps the closed-form margin.
    BmPoint p;
    for (int k = 0; k < ins.net.depth(); ++k) {
      p.u.push_back(trace.x[k]);
      p.V.push_back(Matrix::Zero(trace.x[k].size(), 2));
    }
    double f;
    Vector g, h;
    prob.eval(prob.pack(p), f, g, h);
    CHECK(g.maxCoeff() <= 1e-12);
    CHECK(h.lpNorm<Eigen::Infinity>() <= 1e-12);
    CHECK(f + ins.mobj.w0 ==
          doctest::Approx(margin_value(ins.net, ins.mobj, ins.spec.x_hat))
              .epsilon(1e-12));
  }
}

TEST_CASE("relaxation: corrupted slack assembly breaks the identity") {
  Instance ins = make_instance({2, 3, 2}, 81, 0.3, Norm::L2);
  BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 2);
  Rng rng(12);
  BmPoint p = random_point(ins.net, 2, rng);
  // Make sure the objective actually sees the point.
  p.u.back() = ins.mobj.w_ell;
  Multipliers m = random_multipliers(ins.net, Norm::L2, false, rng);

  double f;
  Vector g, h;
  prob.eval(prob.pack(p), f, g, h);
  double lhs = f + prob.pack_multipliers(m).dot(g) +
               prob.pack_eq_multipliers(m).dot(h);

  certilax::testing::inject_slack_sign_flip = true;
  SlackReport rep = assemble_slack(prob, p, m);
  certilax::testing::inject_slack_sign_flip = false;

  Matrix U = lift_factor(ins.net, p);
  Matrix X = U * U.transpose();
  double rhs = rep.z0 + m.mu * prob.R2() + frob_inner(rep.S, X) - m.mu * X.trace();
  CHECK(std::abs(lhs - rhs) > 1e-6);
}

TEST_CASE("relaxation: zero multipliers at the origin give the closed form") {
  Instance ins = make_instance({3, 4, 2}, 91, 0.3, Norm::L2);
  BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 2);
  BmPoint p;
  for (int k = 1; k <= ins.net.depth(); ++k) {
    p.u.push_back(Vector::Zero(ins.net.layer_dim(k)));
    p.V.push_back(Matrix::Zero(ins.net.layer_dim(k), 1));
  }
  Multipliers m = zero_multipliers(ins.net, Norm::L2, false);
  SlackReport rep = assemble_slack(prob, p, m);
  double wn = ins.mobj.w_ell.norm();
  // Only the objective row survives: S = (1/2) [[0, w^T],[w, 0]] shaped into
  // the last layer block, whose extreme eigenvalues are +-|w|/2.
  CHECK(rep.z0 == 0.0);
  CHECK(rep.lambda_min == doctest::Approx(-wn / 2.0).epsilon(1e-9));
  CHECK(rep.eps_feas == -rep.lambda_min);
  double lb = dual_lower_bound(rep, prob.R2(), 0.0);
  CHECK(lb == doctest::Approx(-prob.R2() * wn / 2.0).epsilon(1e-6));
}

TEST_CASE("relaxation: eigen certificate and bound identity") {
  for (const auto& vc : kVariants) {
    Instance ins = make_instance({2, 3, 3, 2}, 101, vc.radius, vc.norm);
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 2);
    Rng rng(derive_seed(101, vc.full + 2 * (vc.norm == Norm::Linf)));
    for (int trial = 0; trial < 100; ++trial) {
      BmPoint p = random_point(ins.net, 2, rng);
      Multipliers m = random_multipliers(ins.net, vc.norm, vc.full, rng);
      SlackReport rep = assemble_slack(prob, p, m);

      // xi is the unit eigenvector for the smallest eigenvalue; lambda_min
      // carries a 1e-9 safety cushion.
      double raw = rep.lambda_min + 1e-9;
      CHECK(rep.xi.norm() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(std::abs(rep.xi.dot(rep.S * rep.xi) - raw) <=
            1e-8 * (1.0 + std::abs(raw)));
      CHECK((rep.S * rep.xi - raw * rep.xi).norm() <=
            1e-7 * (1.0 + rep.S.norm()));
      CHECK(rep.eps_feas == std::max(0.0, -rep.lambda_min));

      // The reported bound and the (z0, eps_feas) pair are mutually exact.
      double w0 = ins.mobj.w0;
      double lb = dual_lower_bound(rep, prob.R2(), w0);
      CHECK(lb == w0 + rep.z0 - rep.eps_feas * prob.R2());
    }
  }
}

TEST_CASE("relaxation: dual bound is sound for arbitrary sanitized multipliers") {
  for (const auto& vc : kVariants) {
    Instance ins = make_instance({2, 3, 2}, 111, vc.radius, vc.norm);
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 2);
    Rng rng(derive_seed(111, vc.full + 2 * (vc.norm == Norm::Linf)));

    // Dense sampling gives an upper estimate of the exact margin; any sound
    // lower bound must sit below every sampled value.
    double best = std::numeric_limits<double>::infinity();
    for (int s = 0; s < 500; ++s) {
      Vector x = sample_feasible(ins.spec, rng);
      best = std::min(best, margin_value(ins.net, ins.mobj, x));
    }

    for (int trial = 0; trial < 100; ++trial) {
      BmPoint p = random_point(ins.net, 2, rng);
      // Half the trials use raw nonnegative draws, half sanitize a draw with
      // negative entries mixed in.
      Multipliers m =
          trial % 2 == 0
              ? random_multipliers(ins.net, vc.norm, vc.full, rng)
              : sanitize_multipliers(
                    random_multipliers(ins.net, vc.norm, vc.full, rng, -2.0, 3.0));
      SlackReport rep = assemble_slack(prob, p, m);
      double lb = dual_lower_bound(rep, prob.R2(), ins.mobj.w0);
      CHECK(lb <= best + 1e-9);
    }
  }
}

TEST_CASE("relaxation: slack assembly refuses unsanitized multipliers") {
  Instance ins = make_instance({2, 3, 2}, 119, 0.3, Norm::L2);
  BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 2);
  Rng rng(3);
  BmPoint p = random_point(ins.net, 2, rng);
  Multipliers m = random_multipliers(ins.net, Norm::L2, false, rng);
  m.yk2[0](1) = -1e-3;
  CHECK_THROWS_AS(assemble_slack(prob, p, m), std::invalid_argument);
  CHECK_NOTHROW(assemble_slack(prob, p, sanitize_multipliers(m)));
}

TEST_CASE("relaxation: sanitize clamps onto the dual cone") {
  Instance ins = make_instance({2, 3, 2}, 121, 0.3, Norm::L2);
  Multipliers m = zero_multipliers(ins.net, Norm::L2, false);
  m.y0(0) = -0.3;
  m.y01 << 0.5, -1.0;
  m.yk1[0] << -2.0, 3.0, -0.25;
  m.zk[0] << -1.5, 2.5, 0.0;
  m.mu = 0.7;
  Multipliers s = sanitize_multipliers(m);
  CHECK(s.y0(0) == 0.0);
  CHECK(s.y01(0) == 0.5);
  CHECK(s.y01(1) == 0.0);
  CHECK(s.yk1[0](0) == 0.0);
  CHECK(s.yk1[0](1) == 3.0);
  CHECK(s.yk1[0](2) == 0.0);
  // Equality multipliers pass through untouched; mu is capped at zero.
  CHECK((s.zk[0] - m.zk[0]).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(s.mu == 0.0);

  Multipliers t = sanitize_multipliers(s);
  CHECK((t.y01 - s.y01).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(t.mu == s.mu);
}

TEST_CASE("relaxation: initialization is deterministic and small in V") {
  Instance ins = make_instance({3, 4, 3, 2}, 131, 0.3, Norm::L2);
  BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 3);
  Vector x0 = ins.spec.x_hat;
  BmPoint a = initialize(prob, x0, 7);
  BmPoint b = initialize(prob, x0, 7);
  BmPoint c = initialize(prob, x0, 8);
  CHECK((prob.pack(a) - prob.pack(b)).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((prob.pack(a) - prob.pack(c)).lpNorm<Eigen::Infinity>() > 0.0);

  ForwardTrace t = forward(ins.net, x0);
  for (int k = 0; k < ins.net.depth(); ++k) {
    CHECK((a.u[k] - t.x[k]).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(a.V[k].lpNorm<Eigen::Infinity>() <= 1e-3);
    CHECK(a.V[k].cols() == 2);
  }
  // The seed changes V only; u always copies the forward trace.
  for (int k = 0; k < ins.net.depth(); ++k)
    CHECK((c.u[k] - t.x[k]).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("relaxation: nondegeneracy check accepts and rejects correctly") {
  Layer h1;
  h1.W.resize(3, 2);
  h1.W << 1.0, -1.0, 0.5, 2.0, -3.0, 0.2;
  h1.b.resize(3);
  h1.b << 10.0, 10.0, 10.0;
  Layer out;
  out.W = Matrix::Identity(2, 3);
  out.b = Vector::Zero(2);
  MlpNetwork net({h1}, out);
  AttackSpec spec = make_spec(Vector::Constant(2, 0.5), 0.2, Norm::L2);
  MarginObjective mobj = margin_objective(net, 0, 1);
  PreactivationBounds bounds = interval_bounds(net, spec);
  BmProblem prob = build_bm(net, spec, mobj, bounds, false, 3);

  BmPoint good;
  good.u.push_back((Vector(2) << 0.2, 0.7).finished());
  good.u.push_back((Vector(3) << 1.0, 1.0, 1.0).finished());
  Matrix V0(2, 2);
  V0 << 1.0, 0.0, 0.0, 1.0;
  good.V.push_back(V0);
  good.V.push_back(Matrix::Constant(3, 2, 0.3));
  NpcqReport ok = npcq_check(prob, good);
  CHECK(ok.ok);
  CHECK(ok.offending.empty());
  // Preactivations are W u + b with b = 10, so the margin stays near 10.
  CHECK(ok.worst_preact == doctest::Approx(9.5).epsilon(0.2));
  CHECK(ok.worst_vw > 0.1);

  MlpNetwork net0({Layer{h1.W, Vector::Zero(3)}}, out);
  BmProblem prob0 = build_bm(net0, spec, mobj, interval_bounds(net0, spec), false, 3);
  BmPoint bad;
  bad.u.push_back(Vector::Zero(2));
  bad.u.push_back(Vector::Zero(3));
  bad.V.push_back(Matrix::Zero(2, 2));
  bad.V.push_back(Matrix::Zero(3, 2));
  NpcqReport rej = npcq_check(prob0, bad);
  CHECK(!rej.ok);
  CHECK(rej.worst_preact == 0.0);
  CHECK(rej.worst_vw == 0.0);
  CHECK(rej.offending.size() == 3);  // every hidden unit fails

  // A zero V kills the rank condition even with healthy preactivations.
  BmPoint flat = good;
  flat.V[0].setZero();
  NpcqReport deg = npcq_check(prob, flat);
  CHECK(!deg.ok);
  CHECK(deg.worst_preact > 1.0);
  CHECK(deg.worst_vw == 0.0);
}

TEST_CASE("relaxation: trace radius strictly dominates feasible traces") {
  for (const auto& vc : kVariants) {
    Instance ins = make_instance({3, 4, 3, 2}, 141, vc.radius, vc.norm);
    double R2 = auto_trace_bound(ins.bounds);
    CHECK(R2 > 1.0);
    BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, vc.full, 2);
    CHECK(prob.R2() == R2);

    Rng rng(derive_seed(141, vc.full + 2 * (vc.norm == Norm::Linf)));
    for (int s = 0; s < 200; ++s) {
      Vector x0 = sample_feasible(ins.spec, rng);
      ForwardTrace t = forward(ins.net, x0);
      double tr = 1.0;
      for (const auto& u : t.x) tr += u.squaredNorm();
      CHECK(tr < R2);
      // trace_margin reports the same slack through the packed interface.
      BmPoint p;
      for (const auto& u : t.x) {
        p.u.push_back(u);
        p.V.push_back(Matrix::Zero(u.size(), 1));
      }
      CHECK(prob.trace_margin(prob.pack(p)) == doctest::Approx(R2 - tr).epsilon(1e-12));
    }
  }
}

TEST_CASE("relaxation: constructor rejects bad rank and radius") {
  Instance ins = make_instance({2, 3, 2}, 151, 0.3, Norm::L2);
  CHECK_THROWS_AS(build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 2, 0.5),
      std::invalid_argument);

  // Rank one is the degenerate factor with no V columns at all.
  BmProblem r1 = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 1);
  CHECK(r1.num_vars() == 2 + 3);
  BmPoint p1 = initialize(r1, ins.spec.x_hat, 3);
  CHECK(p1.rank() == 1);
  CHECK(r1.unpack(r1.pack(p1)).u[0] == p1.u[0]);

  BmProblem prob = build_bm(ins.net, ins.spec, ins.mobj, ins.bounds, false, 2);
  BmProblem wide = prob.with_rank(4);
  CHECK(wide.rank() == 4);
  CHECK(wide.num_vars() == (2 + 3) * 4);
  CHECK(wide.R2() == prob.R2());
  BmProblem big = prob.with_R2(prob.R2() * 2.0);
  CHECK(big.R2() == 2.0 * prob.R2());
  CHECK(big.rank() == prob.rank());
}
