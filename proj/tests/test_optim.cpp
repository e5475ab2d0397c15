#include "auditlm/optim.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace auditlm;
using namespace auditlm::testing;

namespace {

// f(x) = 0.5 * sum_i a_i (x_i - c_i)^2
struct Quadratic {
  MatrixX<double> a, c;
  double value(const MatrixX<double>& x) const { return 0.5 * (a.array() * (x - c).array().square()).sum(); }
  MatrixX<double> grad(const MatrixX<double>& x) const { return (a.array() * (x - c).array()).matrix(); }
};

Quadratic make_quadratic() {
  Quadratic q;
  q.a.resize(1, 4);
  q.c.resize(1, 4);
  q.a << 1.0, 4.0, 0.5, 10.0;
  q.c << 1.0, -2.0, 0.5, 3.0;
  return q;
}

}  // namespace

TEST_CASE("AdamW first step moves each coordinate by lr against the gradient sign") {
  ParameterList<double> p{MatrixX<double>::Zero(1, 3)};
  ParameterList<double> g{MatrixX<double>(1, 3)};
  g[0] << 2.0, -0.5, 0.0;
  auto s = make_optim_state(OptimizerKind::AdamW, p);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  adamw_step(p, g, s, cfg);
  CHECK(p[0](0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(p[0](1) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(p[0](2) == 0.0);
  CHECK(s.step == 1);
}

TEST_CASE("AdamW weight decay is decoupled") {
  ParameterList<double> p{MatrixX<double>::Constant(1, 1, 2.0)};
  ParameterList<double> g{MatrixX<double>::Zero(1, 1)};
  auto s = make_optim_state(OptimizerKind::AdamW, p);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  adamw_step(p, g, s, cfg);
  CHECK(p[0](0) == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("Sophia update: clipped ratio plus decoupled decay") {
  ParameterList<double> p{MatrixX<double>(1, 3)};
  p[0] << 1.0, 1.0, -2.0;
  ParameterList<double> g{MatrixX<double>(1, 3)};
  g[0] << 1.0, 0.001, 0.0;
  auto s = make_optim_state(OptimizerKind::Sophia, p);
  s.second[0] << 1.0, 1.0, 1.0;
  SophiaConfig cfg;
  cfg.lr = 0.01;
  const auto rep = sophia_step(p, g, s, cfg);
  // m = 0.035 g; ratio = m / (0.04 h)
  const double m0 = 0.035, m1 = 0.035 * 0.001;
  CHECK(p[0](0) == doctest::Approx(1.0 - 0.01 * 0.1 * 1.0 - 0.01 * std::min(1.0, m0 / 0.04)));
  CHECK(p[0](1) == doctest::Approx(1.0 - 0.001 - 0.01 * (m1 / 0.04)));
  CHECK(p[0](2) == doctest::Approx(-2.0 + 0.01 * 0.1 * 2.0));
  CHECK(rep.bound_violations == 0);
  CHECK(rep.coordinates == 3);
}

TEST_CASE("Sophia with zero curvature saturates at lr") {
  ParameterList<double> p{MatrixX<double>::Zero(1, 2)};
  ParameterList<double> g{MatrixX<double>(1, 2)};
  g[0] << 5.0, -5.0;
  auto s = make_optim_state(OptimizerKind::Sophia, p);
  SophiaConfig cfg;
  cfg.lr = 0.02;
  cfg.weight_decay = 0.0;
  const auto rep = sophia_step(p, g, s, cfg);
  CHECK(p[0](0) == doctest::Approx(-0.02));
  CHECK(p[0](1) == doctest::Approx(0.02));
  CHECK(rep.clipped == 2);
}

TEST_CASE("Hessian merge is an EMA of batch-scaled squared sampled gradients") {
  ParameterList<double> p{MatrixX<double>::Zero(1, 2)};
  auto s = make_optim_state(OptimizerKind::Sophia, p);
  s.second[0] << 1.0, 2.0;
  ParameterList<double> g{MatrixX<double>(1, 2)};
  g[0] << 0.5, -1.0;
  merge_hessian_sample(s, g, 4.0, 0.99);
  CHECK(s.second[0](0) == doctest::Approx(0.99 + 0.01 * 4 * 0.25));
  CHECK(s.second[0](1) == doctest::Approx(1.98 + 0.01 * 4 * 1.0));
  CHECK(s.hessian_updates == 1);
}

TEST_CASE("stale Hessian is flagged after 2 k steps") {
  ParameterList<double> p{MatrixX<double>::Zero(1, 1)};
  ParameterList<double> g{MatrixX<double>::Ones(1, 1)};
  auto s = make_optim_state(OptimizerKind::Sophia, p);
  SophiaConfig cfg;
  cfg.hessian_interval = 2;
  bool stale = false;
  for (int i = 0; i < 4; ++i) stale = sophia_step(p, g, s, cfg).stale_hessian;
  CHECK_FALSE(stale);
  CHECK(sophia_step(p, g, s, cfg).stale_hessian);
}

TEST_CASE("both optimizers solve a convex quadratic") {
  const auto q = make_quadratic();
  SUBCASE("adamw") {
    ParameterList<double> x{MatrixX<double>::Zero(1, 4)};
    auto s = make_optim_state(OptimizerKind::AdamW, x);
    AdamWConfig cfg;
    for (int t = 0; t < 2000; ++t) {
      cfg.lr = scheduled_lr(t, 0.05, 0, 2000, 0.0);
      adamw_step(x, ParameterList<double>{q.grad(x[0])}, s, cfg);
    }
    CHECK(q.value(x[0]) < 1e-6);
  }
  SUBCASE("sophia") {
    ParameterList<double> x{MatrixX<double>::Zero(1, 4)};
    auto s = make_optim_state(OptimizerKind::Sophia, x);
    SophiaConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.rho = 1.0;
    for (int t = 0; t < 2000; ++t) {
      if (t % cfg.hessian_interval == 0) merge_hessian_sample(s, ParameterList<double>{q.a.cwiseSqrt()}, 1.0, cfg.beta2);
      cfg.lr = scheduled_lr(t, 0.05, 0, 2000, 0.0);
      sophia_step(x, ParameterList<double>{q.grad(x[0])}, s, cfg);
    }
    CHECK(q.value(x[0]) < 1e-6);
  }
}

TEST_CASE("learning-rate schedule") {
  CHECK(scheduled_lr(0, 1.0, 100, 1000) == doctest::Approx(0.01));
  CHECK(scheduled_lr(99, 1.0, 100, 1000) == doctest::Approx(1.0));
  CHECK(scheduled_lr(100, 1.0, 100, 1000) == doctest::Approx(1.0));
  CHECK(scheduled_lr(550, 1.0, 100, 1000) == doctest::Approx(0.55));
  CHECK(scheduled_lr(1000, 1.0, 100, 1000) == doctest::Approx(0.1));
  CHECK(scheduled_lr(5000, 1.0, 100, 1000) == doctest::Approx(0.1));
}

TEST_CASE("GNB estimate refreshes the curvature state") {
  const auto layout = small_vocab().layout();
  const auto m = init_model<double>(tiny_config(Architecture::DecoderAbsolute, layout), 1);
  std::mt19937_64 rng(2), est(3);
  const std::vector<std::vector<TokenId>> batch{random_sequence(rng, layout, 3), random_sequence(rng, layout, 3)};
  auto s = make_optim_state(OptimizerKind::Sophia, m.params);
  s.step = 7;
  estimate_hessian_diag(m, batch, s, SophiaConfig{}, est);
  CHECK(s.last_hessian_step == 7);
  double total = 0.0;
  for (const auto& h : s.second) {
    CHECK((h.array() >= 0).all());
    total += h.sum();
  }
  CHECK(total > 0.0);
}

TEST_CASE("GNB scale: sequences or scored tokens") {
  const auto layout = small_vocab().layout();
  const auto m = init_model<double>(tiny_config(Architecture::DecoderAbsolute, layout), 1);
  std::mt19937_64 rng(2);
  const std::vector<std::vector<TokenId>> batch{random_sequence(rng, layout, 3), random_sequence(rng, layout, 2)};
  const double tokens = static_cast<double>(loss_and_grads<double>(m, batch, nullptr).count);
  REQUIRE(tokens == 15.0);
  SophiaConfig per_seq, per_tok;
  per_tok.hessian_scale_tokens = true;
  auto a = make_optim_state(OptimizerKind::Sophia, m.params), b = a;
  std::mt19937_64 ra(9), rb(9);
  estimate_hessian_diag(m, batch, a, per_seq, ra);
  estimate_hessian_diag(m, batch, b, per_tok, rb);
  for (std::size_t i = 0; i < a.second.size(); ++i)
    CHECK(((b.second[i] - a.second[i] * (tokens / 2.0)).cwiseAbs().array() <= 1e-12 * (1.0 + b.second[i].cwiseAbs().array())).all());
}

TEST_CASE("GNB on logistic regression tracks the Gauss-Newton diagonal") {
  // Two weights, eight examples; the GN diagonal is mean_i p_i (1 - p_i) x_ij^2.
  const std::vector<std::array<double, 2>> x{{1.0, 0.5},  {-0.5, 2.0}, {1.5, -1.0}, {0.2, 0.3},
                                             {-1.2, -0.7}, {0.8, 1.1}, {2.0, 0.1},  {-0.3, -1.5}};
  const std::array<double, 2> w{0.4, -0.6};
  const double n = static_cast<double>(x.size());
  std::array<double, 2> exact{};  // mean over examples
  std::vector<double> p;
  for (const auto& xi : x) {
    const double pi = 1.0 / (1.0 + std::exp(-(w[0] * xi[0] + w[1] * xi[1])));
    p.push_back(pi);
    for (int j = 0; j < 2; ++j) exact[j] += pi * (1 - pi) * xi[j] * xi[j] / n;
  }
  ParameterList<double> params{MatrixX<double>::Zero(1, 2)};
  auto s = make_optim_state(OptimizerKind::Sophia, params);
  std::mt19937_64 rng(12);
  std::array<double, 2> mean{};
  const int samples = 200;
  // Batches of one example, cycling through the data set.
  for (int t = 0; t < samples; ++t) {
    const auto& xi = x[static_cast<std::size_t>(t) % x.size()];
    const double pi = p[static_cast<std::size_t>(t) % x.size()];
    const double y = std::uniform_real_distribution<double>(0, 1)(rng) < pi ? 1.0 : 0.0;
    MatrixX<double> g(1, 2);
    g << (pi - y) * xi[0], (pi - y) * xi[1];
    auto fresh = make_optim_state(OptimizerKind::Sophia, params);
    merge_hessian_sample(fresh, ParameterList<double>{g}, 1.0, 0.0);
    for (int j = 0; j < 2; ++j) mean[j] += fresh.second[0](0, j) / samples;
    merge_hessian_sample(s, ParameterList<double>{g}, 1.0, 0.99);
  }
  for (int j = 0; j < 2; ++j) CHECK(std::abs(mean[j] - exact[j]) / exact[j] < 0.10);
}

TEST_CASE("optimizer names") {
  CHECK(optimizer_from_name("adamw") == OptimizerKind::AdamW);
  CHECK(optimizer_name(OptimizerKind::Sophia) == "sophia");
  CHECK_THROWS_AS(optimizer_from_name("sgd"), ConfigError);
}
