#include "ccrs/meta_trainer.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace ccrs;
using namespace ccrs::meta;

namespace {

/// 1/2 (x - c)^T A (x - c) on group "w", plus 1/2 k (o - r)^2 on group "o".
struct Quadratic {
  Matrix A;
  Vector c;
  double k = 0.0;
  double r = 0.0;

  double value(const ParamSet& p) const {
    const Vector d = p.at("w").col(0) - c;
    const double o = p.at("o")(0, 0) - r;
    return 0.5 * d.dot(A * d) + 0.5 * k * o * o;
  }
  LossFn fn() const {
    return [q = *this](const ParamSet& p) {
      LossGrad lg;
      lg.loss = q.value(p);
      lg.grads = p.zeros_like();
      lg.grads.at("w") = q.A * (p.at("w").col(0) - q.c);
      lg.grads.at("o")(0, 0) = q.k * (p.at("o")(0, 0) - q.r);
      lg.count = 1;
      return lg;
    };
  }
};

Quadratic scalar_quad(double a, double center, double k = 0.0, double r = 0.0) {
  return Quadratic{Matrix::Constant(1, 1, a), Vector::Constant(1, center), k, r};
}

ParamSet scalar_params(double w, double o = 0.0) {
  ParamSet p;
  p.set("w", Matrix::Constant(1, 1, w));
  p.set("o", Matrix::Constant(1, 1, o));
  return p;
}

const ParamPartition kInnerW{{"w"}, {"o"}};

MetaConfig config(double beta, int steps, bool first_order) {
  MetaConfig c;
  c.beta = beta;
  c.inner_steps = steps;
  c.first_order = first_order;
  c.optimizer = Optimizer::sgd;
  c.clip_min = 0.0;
  c.clip_max = 1e9;
  c.nu = 1.0;
  return c;
}

}  // namespace

TEST_SUITE("maml") {

TEST_CASE("inner step closed form") {
  // L1 = 1/2 w^2: phi = theta - beta * theta.
  const auto sup = scalar_quad(1.0, 0.0);
  const ParamSet theta = scalar_params(1.0);
  CHECK(std::abs(inner_adapt(theta, sup.fn(), {"w"}, 0.9, 1).at("w")(0, 0) - 0.1) <= 1e-7);
  CHECK(std::abs(inner_adapt(theta, sup.fn(), {"w"}, 0.9, 2).at("w")(0, 0) - 0.01) <= 1e-7);
  // phi_n = c + (1 - beta a)^n (theta - c)
  const auto sup2 = scalar_quad(2.0, 0.5);
  for (int n = 0; n <= 4; ++n) {
    const double expect = 0.5 + std::pow(1.0 - 0.1 * 2.0, n) * (1.0 - 0.5);
    CHECK(std::abs(inner_adapt(theta, sup2.fn(), {"w"}, 0.1, n).at("w")(0, 0) - expect) <= 1e-7);
  }
  // Outer groups are untouched.
  const auto sup3 = scalar_quad(1.0, 0.0, 1.0, 5.0);
  const ParamSet phi = inner_adapt(scalar_params(1.0, 2.0), sup3.fn(), {"w"}, 0.5, 3);
  CHECK(phi.at("o")(0, 0) == 2.0);
  CHECK(std::abs(phi.at("w")(0, 0) - 0.125) <= 1e-7);
}

TEST_CASE("first- and second-order query gradients match the closed form") {
  const double a = 1.5, s = 0.2, b = 2.0, q = -0.3, beta = 0.1, theta_w = 0.8;
  MetaTask task{"u", scalar_quad(a, s).fn(), scalar_quad(b, q, 3.0, 1.0).fn()};
  const ParamSet theta = scalar_params(theta_w, 0.4);
  const double phi = theta_w - beta * a * (theta_w - s);
  const auto fo = query_gradient(theta, task, kInnerW, config(beta, 1, true));
  const auto so = query_gradient(theta, task, kInnerW, config(beta, 1, false));
  CHECK(std::abs(fo.grads.at("w")(0, 0) - b * (phi - q)) <= 1e-7);
  CHECK(std::abs(so.grads.at("w")(0, 0) - b * (phi - q) * (1.0 - beta * a)) <= 1e-7);
  // The outer group does not enter the support loss, so both orders agree there.
  CHECK(std::abs(fo.grads.at("o")(0, 0) - 3.0 * (0.4 - 1.0)) <= 1e-7);
  CHECK(std::abs(so.grads.at("o")(0, 0) - 3.0 * (0.4 - 1.0)) <= 1e-7);
  CHECK(std::abs(fo.loss - 0.5 * b * (phi - q) * (phi - q) - 0.5 * 3.0 * 0.36) <= 1e-12);

  // Three inner steps: the Jacobian is (1 - beta a)^3.
  const double phi3 = s + std::pow(1.0 - beta * a, 3) * (theta_w - s);
  const auto so3 = query_gradient(theta, task, kInnerW, config(beta, 3, false));
  CHECK(std::abs(so3.grads.at("w")(0, 0) - b * (phi3 - q) * std::pow(1.0 - beta * a, 3)) <= 1e-7);
}

TEST_CASE("second-order gradient for a coupled quadratic") {
  const Matrix A = (Matrix(3, 3) << 2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 1.5).finished();
  const Matrix B = (Matrix(3, 3) << 1.0, -0.2, 0.1, -0.2, 2.0, 0.0, 0.1, 0.0, 0.7).finished();
  const Vector s = (Vector(3) << 0.1, -0.4, 0.3).finished();
  const Vector q = (Vector(3) << -0.2, 0.5, 0.0).finished();
  const Vector t = (Vector(3) << 1.0, 0.2, -0.6).finished();
  const double beta = 0.2;
  ParamSet theta;
  theta.set("w", t);
  theta.set("o", Matrix::Zero(1, 1));
  MetaTask task{"u", Quadratic{A, s}.fn(), Quadratic{B, q}.fn()};
  const Vector phi = t - beta * A * (t - s);
  const Vector expect = (Matrix::Identity(3, 3) - beta * A).transpose() * B * (phi - q);
  const auto so = query_gradient(theta, task, kInnerW, config(beta, 1, false));
  CHECK((so.grads.at("w").col(0) - expect).cwiseAbs().maxCoeff() <= 1e-7);
}

TEST_CASE("beta = 0 collapses to joint training") {
  const auto sup = scalar_quad(1.0, 0.3, 0.5, 0.0);
  const auto qry = scalar_quad(2.0, -1.0, 1.0, 2.0);
  MetaTask task{"u", sup.fn(), qry.fn()};
  const ParamSet theta = scalar_params(0.7, 0.1);
  CHECK(inner_adapt(theta, sup.fn(), {"w"}, 0.0, 3).identical(theta));
  for (bool first_order : {true, false}) {
    const MetaConfig cfg = config(0.0, 1, first_order);
    ParamSet th = theta;
    GlobalOptimizer opt(cfg);
    const auto rep = meta_step(th, {task}, kInnerW, cfg, opt);
    // Sum of the gradients of both losses at theta.
    CHECK(std::abs(rep.accumulated.at("w")(0, 0) - (1.0 * (0.7 - 0.3) + 2.0 * (0.7 + 1.0))) <= 1e-7);
    CHECK(std::abs(rep.accumulated.at("o")(0, 0) - (0.5 * 0.1 + 1.0 * (0.1 - 2.0))) <= 1e-7);
    CHECK(std::abs(th.at("w")(0, 0) - (0.7 - rep.accumulated.at("w")(0, 0))) <= 1e-12);
  }
}

TEST_CASE("second-order to first-order ratio equals 1 / (1 - beta a)") {
  MetaTask task{"u", scalar_quad(1.0, 0.0).fn(), scalar_quad(1.0, 1.0).fn()};
  const ParamSet theta = scalar_params(2.0);
  const auto fo = query_gradient(theta, task, kInnerW, config(0.9, 1, true));
  const auto so = query_gradient(theta, task, kInnerW, config(0.9, 1, false));
  CHECK(std::abs(fo.grads.at("w")(0, 0) / so.grads.at("w")(0, 0) - 10.0) <= 1e-6);
}

TEST_CASE("element-wise clipping bounds every applied entry") {
  ParamSet g;
  g.set("a", (Matrix(1, 5) << 0.5, -0.5, 0.05, 0.0, -1e-9).finished());
  clip_elementwise(g, 0.01, 0.1);
  CHECK(g.at("a")(0, 0) == 0.1);
  CHECK(g.at("a")(0, 1) == -0.1);
  CHECK(g.at("a")(0, 2) == 0.05);
  CHECK(g.at("a")(0, 3) == 0.0);
  CHECK(g.at("a")(0, 4) == -0.01);

  std::mt19937_64 rng(1);
  MetaConfig cfg = config(0.1, 1, true);
  cfg.clip_min = 0.0;
  cfg.clip_max = 0.1;
  cfg.nu = 0.5;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix c = testing::random_matrix(1, 1, rng, 10.0);
    MetaTask task{"u", scalar_quad(3.0, c(0, 0), 2.0, -c(0, 0)).fn(), scalar_quad(4.0, -c(0, 0), 5.0, c(0, 0)).fn()};
    ParamSet theta = scalar_params(testing::random_matrix(1, 1, rng, 10.0)(0, 0), 1.0);
    const ParamSet before = theta;
    GlobalOptimizer opt(cfg);
    const auto rep = meta_step(theta, {task, task}, kInnerW, cfg, opt);
    CHECK(rep.applied.max_abs() <= 0.1);
    ParamSet delta = theta;
    delta.axpy(-1.0, before);
    CHECK(delta.max_abs() <= cfg.nu * cfg.clip_max + 1e-15);
  }
}

TEST_CASE("meta_step sums users and applies sgd") {
  MetaTask u1{"a", scalar_quad(1.0, 0.0).fn(), scalar_quad(1.0, 1.0).fn()};
  MetaTask u2{"b", nullptr, scalar_quad(2.0, -1.0).fn()};
  MetaConfig cfg = config(0.5, 1, true);
  cfg.nu = 0.1;
  ParamSet theta = scalar_params(1.0);
  GlobalOptimizer opt(cfg);
  const auto rep = meta_step(theta, {u1, u2}, kInnerW, cfg, opt);
  // u1: support grad 1, phi = 0.5, query grad -0.5; u2: no support, query grad 2 * 2 = 4.
  CHECK(std::abs(rep.accumulated.at("w")(0, 0) - (1.0 - 0.5 + 4.0)) <= 1e-12);
  CHECK(rep.users == 2);
  CHECK(std::abs(theta.at("w")(0, 0) - (1.0 - 0.1 * 4.5)) <= 1e-12);
  CHECK(opt.steps() == 1);
}

TEST_CASE("first Adam step moves each entry by nu in the descent direction") {
  MetaConfig cfg;
  cfg.nu = 0.01;
  GlobalOptimizer opt(cfg);
  ParamSet theta;
  theta.set("x", (Matrix(1, 3) << 1.0, 2.0, 3.0).finished());
  ParamSet g;
  g.set("x", (Matrix(1, 3) << 4.0, -0.5, 1e-3).finished());
  opt.apply(theta, g);
  CHECK(std::abs(theta.at("x")(0, 0) - 0.99) <= 1e-6);
  CHECK(std::abs(theta.at("x")(0, 1) - 2.01) <= 1e-6);
  CHECK(std::abs(theta.at("x")(0, 2) - 2.99) <= 1e-5);
}

TEST_CASE("a small meta step decreases the meta objective") {
  const auto sup = scalar_quad(1.0, 0.5, 1.0, 0.0);
  const auto qry = scalar_quad(2.0, -0.5, 1.0, 1.0);
  MetaTask task{"u", sup.fn(), qry.fn()};
  for (bool first_order : {true, false}) {
    MetaConfig cfg = config(1e-4, 1, first_order);
    cfg.nu = 1e-3;
    ParamSet theta = scalar_params(1.0, 0.0);
    auto objective = [&](const ParamSet& p) {
      return sup.value(p) + qry.value(inner_adapt(p, sup.fn(), {"w"}, cfg.beta, cfg.inner_steps));
    };
    const double before = objective(theta);
    GlobalOptimizer opt(cfg);
    meta_step(theta, {task}, kInnerW, cfg, opt);
    CHECK(objective(theta) < before);
  }
}

TEST_CASE("non-finite user gradients are reported") {
  MetaTask bad{"bad-user", nullptr, [](const ParamSet& p) {
                 LossGrad lg;
                 lg.grads = p.zeros_like();
                 lg.grads.at("w")(0, 0) = std::numeric_limits<double>::quiet_NaN();
                 lg.count = 1;
                 return lg;
               }};
  ParamSet theta = scalar_params(1.0);
  const MetaConfig cfg = config(0.1, 1, true);
  GlobalOptimizer opt(cfg);
  try {
    meta_step(theta, {bad}, kInnerW, cfg, opt);
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(e.user() == "bad-user");
  }
  CHECK(theta.at("w")(0, 0) == 1.0);
}

TEST_CASE("empty support leaves theta unadapted") {
  MetaTask task{"u", [](const ParamSet& p) {
                  LossGrad lg;
                  lg.grads = p.zeros_like();
                  return lg;
                },
                scalar_quad(1.0, 0.0).fn()};
  const ParamSet theta = scalar_params(0.6);
  CHECK(inner_adapt(theta, task.support, {"w"}, 0.5, 1).identical(theta));
  const auto so = query_gradient(theta, task, kInnerW, config(0.5, 1, false));
  CHECK(std::abs(so.grads.at("w")(0, 0) - 0.6) <= 1e-12);
}

TEST_CASE("default partitions and overrides") {
  ParamSet p;
  for (const char* n : {"rec.entity_emb", "rec.user_emb", "rec.turn_emb", "rec.layer0.A", "dial.enc.emb",
                        "dial.dec.emb", "dial.style.L", "dial.style.F.W1", "dial.gen.W"})
    p.set(n, Matrix::Zero(1, 1));
  const auto rp = partition_params(Part::rec, p);
  CHECK(rp.inner == std::set<std::string>{"rec.entity_emb", "rec.user_emb"});
  CHECK(rp.outer.count("rec.layer0.A"));
  CHECK(rp.outer.count("dial.style.L"));
  const auto dp = partition_params(Part::dial, p);
  CHECK(dp.inner == std::set<std::string>{"dial.enc.emb", "dial.style.F.W1", "dial.style.L"});
  CHECK(dp.outer.count("rec.entity_emb"));

  const auto moved = partition_params(Part::rec, p, {{"inner", {"rec.turn_emb"}}, {"outer", {"rec.user_emb"}}});
  CHECK(moved.inner == std::set<std::string>{"rec.entity_emb", "rec.turn_emb"});
  const auto swapped = partition_params(Part::rec, p, {{"swap", true}});
  CHECK(swapped.inner == std::set<std::string>{"rec.layer0.A", "rec.turn_emb"});
  CHECK(swapped.outer.count("rec.entity_emb"));
  CHECK(swapped.outer.count("dial.gen.W"));
  CHECK_THROWS(partition_params(Part::rec, p, {{"inner", {"dial.gen.W"}}}));
  CHECK_THROWS(partition_params(Part::rec, p, {{"inner", {"rec.nope"}}}));
  CHECK_THROWS(partition_params(Part::rec, p, nlohmann::json::array()));

  ParamPartition overlap{{"w"}, {"w", "o"}};
  CHECK_THROWS(overlap.validate(scalar_params(0.0)));
  ParamPartition missing{{"w"}, {}};
  CHECK_THROWS(missing.validate(scalar_params(0.0)));
}

TEST_CASE("configuration round trip and validation") {
  MetaConfig c = MetaConfig::defaults(Part::dial);
  CHECK(c.beta == 0.0003);
  c.optimizer = Optimizer::sgd;
  c.first_order = false;
  const MetaConfig back = MetaConfig::from_json(c.to_json(), MetaConfig{});
  CHECK(back.to_json() == c.to_json());
  CHECK(MetaConfig::from_json({{"nu", 0.5}}, c).beta == c.beta);
  CHECK_THROWS(MetaConfig::from_json({{"clip_min", 0.2}, {"clip_max", 0.1}}, c));
  CHECK_THROWS(MetaConfig::from_json({{"optimizer", "rmsprop"}}, c));
  CHECK_THROWS(MetaConfig::from_json({{"nu", 0.0}}, c));
  CHECK(part_from_string("dial") == Part::dial);
  CHECK_THROWS(part_from_string("both"));
}

TEST_CASE("train_loop stops after `patience` epochs without improvement") {
  MetaTask task{"u", scalar_quad(1.0, 0.0).fn(), scalar_quad(1.0, 0.0).fn()};
  MetaConfig cfg = config(0.1, 1, true);
  cfg.nu = 0.01;
  TrainOptions opts;
  opts.max_epochs = 50;
  opts.patience = 3;
  opts.maximize = true;
  int calls = 0;
  // Improves for four epochs, then falls.
  const auto res = train_loop(scalar_params(1.0), {task}, kInnerW, cfg, opts, [&](const ParamSet&) {
    ++calls;
    return calls <= 4 ? static_cast<double>(calls) : 0.0;
  });
  CHECK(res.best_epoch == 4);
  CHECK(res.early_stopped);
  CHECK(res.history.size() == 7);
  // Replaying four steps reproduces the returned parameters.
  ParamSet replay = scalar_params(1.0);
  GlobalOptimizer opt(cfg);
  for (int i = 0; i < 4; ++i) meta_step(replay, {task}, kInnerW, cfg, opt);
  CHECK(std::abs(res.best.at("w")(0, 0) - replay.at("w")(0, 0)) <= 1e-12);

  std::vector<double> seen;
  opts.on_epoch = [&](const EpochRecord& r) { seen.push_back(r.train_loss); };
  opts.patience = 2;
  // A constant metric still tracks the epoch with the lowest training loss.
  const auto tied = train_loop(scalar_params(1.0), {task}, kInnerW, cfg, opts, [](const ParamSet&) { return 1.0; });
  CHECK_FALSE(tied.early_stopped);
  CHECK(tied.best_epoch == 50);
  CHECK(seen.size() == 50);
  CHECK_THROWS(train_loop(scalar_params(1.0), {}, kInnerW, cfg, opts, nullptr));
}

}  // TEST_SUITE
