#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dlign/align.hpp"
#include "dlign/error.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dlign;

namespace {

AlignHead random_head(std::mt19937_64& rng, int d, double sd = 0.5) {
  AlignHead h = AlignHead::zeros(d);
  h.wq = testutil::random_matrix(rng, d, d, sd);
  h.wk = testutil::random_matrix(rng, d, d, sd);
  h.wv = testutil::random_matrix(rng, d, d, sd);
  h.wo = testutil::random_matrix(rng, d, d, sd);
  h.log_inv_tau = 1.3;
  return h;
}

AlignBatch random_batch(std::mt19937_64& rng, int b, int t, int d) {
  AlignBatch batch;
  for (int i = 0; i < b; ++i) batch.tokens.push_back(testutil::random_matrix(rng, t, d));
  batch.frozen = testutil::random_matrix(rng, b, d);
  batch.image = testutil::random_matrix(rng, b, d, 0.4);
  return batch;
}

std::vector<AlignSample> matched_dataset(std::mt19937_64& rng, int n, int t, int d) {
  std::vector<AlignSample> out;
  for (int i = 0; i < n; ++i) {
    AlignSample s;
    s.id = "s" + std::to_string(i);
    s.tokens = testutil::random_matrix(rng, t, d);
    s.frozen = testutil::random_matrix(rng, 1, d).row(0).transpose().normalized();
    s.image = s.frozen;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("initialization") {
  const AlignHead h = AlignHead::initialize(16, 3);
  CHECK(h.wo.isZero(0.0));
  CHECK(h.inv_tau() == doctest::Approx(14.3).epsilon(1e-12));
  const double var = h.wq.squaredNorm() / h.wq.size();
  CHECK(var == doctest::Approx(1.0 / 16).epsilon(0.25));
  const AlignHead h2 = AlignHead::initialize(16, 3);
  CHECK(h2.wq == h.wq);
  CHECK(AlignHead::initialize(16, 4).wq != h.wq);
}

TEST_CASE("head forward") {
  std::mt19937_64 rng(1);
  const Eigen::VectorXd frozen = testutil::random_matrix(rng, 1, 8).row(0).transpose();

  const AlignHead zero = AlignHead::zeros(8);
  const Eigen::MatrixXd x = testutil::random_matrix(rng, 4, 8);
  CHECK((head_forward(zero, x, frozen) - frozen.normalized()).norm() < 1e-15);

  AlignHead h = random_head(rng, 8);
  const Eigen::MatrixXd x1 = testutil::random_matrix(rng, 1, 8);
  const Eigen::VectorXd expect = (frozen + (x1 * h.wv * h.wo).row(0).transpose()).normalized();
  CHECK((head_forward(h, x1, frozen) - expect).norm() < 1e-12);
  AlignHead h_other_qk = h;
  h_other_qk.wq = testutil::random_matrix(rng, 8, 8);
  CHECK((head_forward(h_other_qk, x1, frozen) - head_forward(h, x1, frozen)).norm() < 1e-15);

  for (int trial = 0; trial < 5; ++trial) {
    const AlignHead r = random_head(rng, 8);
    const Eigen::MatrixXd x4 = testutil::random_matrix(rng, 4, 8);
    const Eigen::VectorXd got = head_forward(r, x4, frozen);
    CHECK((got - oracle::head_forward(r.wq, r.wk, r.wv, r.wo, x4, frozen)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(got.norm() - 1.0) < 1e-7);
  }
  CHECK_THROWS_AS(head_forward(h, Eigen::MatrixXd(0, 8), frozen), PreconditionError);
}

TEST_CASE("closed-form losses") {
  AlignBatch batch;
  batch.tokens = {Eigen::MatrixXd::Zero(1, 2), Eigen::MatrixXd::Zero(1, 2)};
  batch.frozen = Eigen::MatrixXd::Identity(2, 2);
  batch.image = Eigen::MatrixXd::Identity(2, 2);
  AlignHead h = AlignHead::zeros(2);
  h.log_inv_tau = 0.0;
  const LossResult r = composite_loss(h, batch);
  CHECK(std::abs(r.contrastive - 2.0 * -std::log(std::numbers::e / (std::numbers::e + 1.0))) < 1e-9);
  CHECK(std::abs(r.contrastive - 0.6265233750364456) < 1e-12);
  CHECK(r.distance == 0.0);
  CHECK(r.total == r.contrastive);

  for (int b : {2, 4, 8}) {
    AlignBatch same;
    same.frozen = Eigen::MatrixXd::Ones(b, 3);
    same.image = Eigen::MatrixXd::Constant(b, 3, 0.2);
    for (int i = 0; i < b; ++i) same.tokens.push_back(Eigen::MatrixXd::Ones(2, 3));
    AlignHead hh = AlignHead::zeros(3);
    for (double lit : {0.0, 1.7, 4.0}) {
      hh.log_inv_tau = lit;
      CHECK(std::abs(composite_loss(hh, same).contrastive - b * std::log(static_cast<double>(b))) < 1e-9);
    }
  }
  CHECK(std::abs(4 * std::log(4.0) - 5.545177444479562) < 1e-12);
}

TEST_CASE("loss is non-negative and permutation invariant") {
  std::mt19937_64 rng(6);
  const AlignHead h = random_head(rng, 5);
  const AlignBatch batch = random_batch(rng, 6, 3, 5);
  const LossResult base = composite_loss(h, batch);
  CHECK(base.contrastive >= 0.0);
  CHECK(base.distance >= 0.0);
  const int perm[6] = {3, 0, 5, 1, 4, 2};
  AlignBatch p = batch;
  for (int i = 0; i < 6; ++i) {
    p.tokens[i] = batch.tokens[perm[i]];
    p.frozen.row(i) = batch.frozen.row(perm[i]);
    p.image.row(i) = batch.image.row(perm[i]);
  }
  const LossResult q = composite_loss(h, p);
  CHECK(q.total == doctest::Approx(base.total).epsilon(1e-12));
  CHECK((q.grad.wv - base.grad.wv).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("loss errors") {
  std::mt19937_64 rng(2);
  const AlignHead h = random_head(rng, 4);
  CHECK_THROWS_AS(composite_loss(h, random_batch(rng, 1, 2, 4)), PreconditionError);
  AlignBatch bad = random_batch(rng, 3, 2, 4);
  bad.tokens[1](0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    composite_loss(h, bad);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
  CHECK_THROWS_AS(composite_loss(h, random_batch(rng, 3, 2, 5)), PreconditionError);
}

TEST_CASE("analytic gradients match finite differences") {
  for (int t : {1, 2, 4}) {
    for (int b : {2, 4, 8}) {
      std::mt19937_64 rng(100 + t * 10 + b);
      const AlignHead h = random_head(rng, 6);
      const AlignBatch batch = random_batch(rng, b, t, 6);
      CHECK(grad_check(h, batch, 1e-5) < 1e-4);
      CHECK(grad_check(h, batch, 1e-6) < 1e-4);
    }
  }
  std::mt19937_64 rng(9);
  const AlignHead big = random_head(rng, 20, 0.3);
  CHECK(grad_check(big, random_batch(rng, 3, 2, 20), 1e-5, 4, 256) < 1e-4);
}

TEST_CASE("query and key gradients vanish for single tokens") {
  std::mt19937_64 rng(12);
  const AlignHead h = random_head(rng, 4);
  const AlignBatch batch = random_batch(rng, 3, 1, 4);
  const LossResult r = composite_loss(h, batch);
  CHECK(r.grad.wq.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(r.grad.wk.cwiseAbs().maxCoeff() < 1e-12);
  AlignHead hp = h, hm = h;
  hp.wq(1, 2) += 1e-5;
  hm.wq(1, 2) -= 1e-5;
  CHECK(std::abs(composite_loss_value(hp, batch) - composite_loss_value(hm, batch)) / 2e-5 < 1e-8);
}

TEST_CASE("onecycle endpoints") {
  TrainConfig c;
  c.peak_lr = 1e-3;
  const int total = 100;
  CHECK(std::abs(onecycle_lr(0, total, c) - 1e-3 / 25.0) < 1e-15);
  CHECK(std::abs(onecycle_lr(30, total, c) - 1e-3) < 1e-18);
  CHECK(std::abs(onecycle_lr(99, total, c) - 1e-3 / 1e4) < 1e-15);
  double prev = 0.0;
  for (int s = 0; s <= 30; ++s) {
    CHECK(onecycle_lr(s, total, c) >= prev);
    prev = onecycle_lr(s, total, c);
  }
  for (int s = 31; s < total; ++s) CHECK(onecycle_lr(s, total, c) <= onecycle_lr(s - 1, total, c));
  CHECK(onecycle_lr(0, 1, c) == c.peak_lr);
  CHECK_THROWS_AS(onecycle_lr(100, total, c), PreconditionError);
}

TEST_CASE("adamw") {
  TrainConfig c;
  std::vector<double> p{1.0};
  std::vector<double> g{1.0};
  AdamState s;
  adamw_update(p, g, s, 0.1, c);
  CHECK(std::abs(p[0] - 0.899000001) < 1e-12);

  TrainConfig nowd;
  nowd.weight_decay = 0.0;
  std::vector<double> q{0.3, -2.0};
  std::vector<double> zg{0.0, 0.0};
  AdamState s2;
  for (int i = 0; i < 5; ++i) adamw_update(q, zg, s2, 0.1, nowd);
  CHECK(q == std::vector<double>{0.3, -2.0});

  std::vector<double> r{2.0};
  std::vector<double> z1{0.0};
  AdamState s3;
  adamw_update(r, z1, s3, 0.1, c);
  CHECK(r[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.01)).epsilon(1e-15));
  adamw_update(r, z1, s3, 0.1, c);
  CHECK(r[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.01) * (1 - 0.1 * 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw step does not decay the temperature and clamps it") {
  AlignHead h = AlignHead::zeros(2);
  h.wq.setConstant(1.0);
  h.log_inv_tau = 2.0;
  TrainConfig c;
  c.weight_decay = 0.5;
  AdamState s;
  adamw_step(h, AlignHead::zeros(2), s, 0.1, c);
  CHECK(h.log_inv_tau == 2.0);
  CHECK(h.wq(0, 0) == doctest::Approx(0.95));

  AlignHead g = AlignHead::zeros(2);
  g.log_inv_tau = -1.0;
  h.log_inv_tau = AlignHead::kMaxLogInvTau;
  adamw_step(h, g, s, 1.0, c);
  CHECK(h.log_inv_tau == AlignHead::kMaxLogInvTau);
  g.log_inv_tau = 1.0;
  h.log_inv_tau = 0.2;
  AdamState s2;
  adamw_step(h, g, s2, 1.0, c);
  CHECK(h.log_inv_tau == 0.0);
}

TEST_CASE("batching merges a trailing single sample") {
  std::vector<std::size_t> order(9);
  std::iota(order.begin(), order.end(), 0);
  const auto b = make_batches(order, 4);
  REQUIRE(b.size() == 2);
  CHECK(b[1].size() == 5);
  CHECK(make_batches(std::span(order).first(8), 4).size() == 2);
  CHECK(make_batches(std::span(order).first(3), 4).size() == 1);
}

TEST_CASE("training on a reachable target decreases the loss") {
  std::mt19937_64 rng(21);
  auto data = matched_dataset(rng, 64, 2, 8);
  // Target is the frozen feature plus a token-dependent shift the head can learn.
  for (auto& s : data) s.image = (s.frozen + 0.5 * s.tokens.colwise().mean().transpose()).normalized();
  TrainConfig c;
  c.peak_lr = 1e-2;
  c.batch = 64;
  c.epochs = 30;
  c.seed = 3;
  const TrainResult r = train_align(data, c);
  REQUIRE(r.curve.size() == 30);
  CHECK(r.curve.back().total < 0.5 * r.curve.front().total);
  for (std::size_t i = 1; i < r.curve.size(); ++i) CHECK(r.curve[i].total < r.curve[i - 1].total);
}

TEST_CASE("training is deterministic and epochs=0 is the identity") {
  std::mt19937_64 rng(22);
  auto data = matched_dataset(rng, 20, 3, 6);
  for (auto& s : data) s.image = (s.image + 0.3 * testutil::random_matrix(rng, 6, 1).col(0)).eval();
  TrainConfig c;
  c.batch = 8;
  c.epochs = 3;
  c.peak_lr = 1e-2;
  c.seed = 5;
  const TrainResult a = train_align(data, c);
  const TrainResult b = train_align(data, c);
  REQUIRE(a.curve.size() == b.curve.size());
  CHECK(a.curve.size() == 9);  // 8 + 8 + 4 per epoch
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].total == b.curve[i].total);
  CHECK(a.head.wo == b.head.wo);
  CHECK(a.head.log_inv_tau == b.head.log_inv_tau);

  testutil::TempDir dir("ckpt");
  write_checkpoint(a.head, dir / "a.dlhd");
  write_checkpoint(b.head, dir / "b.dlhd");
  CHECK(testutil::read_file(dir / "a.dlhd") == testutil::read_file(dir / "b.dlhd"));
  const AlignHead back = read_checkpoint(dir / "a.dlhd");
  CHECK(back.wq == a.head.wq);
  CHECK(back.wo == a.head.wo);
  CHECK(back.log_inv_tau == a.head.log_inv_tau);

  c.epochs = 0;
  const AlignHead init = AlignHead::initialize(6, 77);
  const TrainResult z = train_align(data, c, init);
  CHECK(z.curve.empty());
  CHECK(z.head.wq == init.wq);
  CHECK(z.head.log_inv_tau == init.log_inv_tau);
}

TEST_CASE("checkpoint errors") {
  testutil::TempDir dir("ckpt");
  testutil::write_file(dir / "x.dlhd", "DLHX");
  CHECK_THROWS_AS(read_checkpoint(dir / "x.dlhd"), Error);
  write_checkpoint(AlignHead::zeros(3), dir / "y.dlhd");
  std::string bytes = testutil::read_file(dir / "y.dlhd");
  bytes.pop_back();
  testutil::write_file(dir / "y.dlhd", bytes);
  CHECK_THROWS_AS(read_checkpoint(dir / "y.dlhd"), Error);
}
