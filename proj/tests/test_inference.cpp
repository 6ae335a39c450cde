#include <doctest.h>

#include <cmath>
#include <random>

#include "dlign/error.hpp"
#include "dlign/inference.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dlign;
using testutil::random_matrix;
using testutil::unit_rows;

namespace {

EmbeddingMatrix emb(const Eigen::MatrixXd& m, EncoderTag tag) {
  EmbeddingMatrix e;
  e.data = m;
  e.tag = tag;
  return e;
}

LabelBank orthogonal_bank(const std::vector<std::string>& names, int d) {
  LabelBank b;
  b.names = names;
  b.directions = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(names.size()), d);
  return b;
}

}  // namespace

TEST_CASE("aggregate logits examples") {
  const Eigen::MatrixXd e1 = Eigen::RowVector2d(1, 0), e2 = Eigen::RowVector2d(0, 1);
  const LogitMatrix l = aggregate_logits(e1, e2, Eigen::Matrix2d::Identity());
  CHECK(l.aggregated == Eigen::Vector2d(1, 1));
  CHECK(l.per_view(0, 0) == 1.0);
  CHECK(l.per_view(1, 0) == 0.0);

  Eigen::MatrixXd dirs = Eigen::MatrixXd::Identity(3, 3);
  const Eigen::MatrixXd all = dirs.row(2).replicate(4, 1);
  const LogitMatrix l2 = aggregate_logits(all, all, dirs);
  CHECK(l2.aggregated(2) == 8.0);
  CHECK(rank_labels(l2.aggregated, {"a", "b", "c"})[0].label == "c");

  CHECK_THROWS_AS(aggregate_logits(Eigen::MatrixXd::Ones(1, 2), e2, Eigen::Matrix2d::Identity()), PreconditionError);
  CHECK_THROWS_AS(aggregate_logits(e1, e2, Eigen::Matrix3d::Identity()), PreconditionError);
}

TEST_CASE("aggregate logits equal the double-loop oracle exactly") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const int n_pre = 1 + trial % 5, n_ft = trial % 4, m = 2 + trial % 7, d = 3 + trial % 13;
    const Eigen::MatrixXd pre = unit_rows(random_matrix(rng, n_pre, d));
    const Eigen::MatrixXd ft = unit_rows(random_matrix(rng, n_ft, d));
    const Eigen::MatrixXd dirs = unit_rows(random_matrix(rng, m, d));
    const LogitMatrix l = aggregate_logits(pre, ft, dirs);
    Eigen::MatrixXd views(n_pre + n_ft, d);
    views << pre, ft;
    const Eigen::MatrixXd o = oracle::logits(views, dirs);
    CHECK(l.per_view == o);
    Eigen::VectorXd agg = Eigen::VectorXd::Zero(m);
    for (int i = 0; i < o.rows(); ++i)
      for (int j = 0; j < m; ++j) agg(j) += o(i, j);
    CHECK(l.aggregated == agg);
  }
}

TEST_CASE("rank labels breaks ties lexicographically") {
  const auto r = rank_labels(Eigen::Vector4d(0.5, 0.9, 0.9, 0.1), {"zeta", "beta", "alpha", "gamma"});
  CHECK(r[0].label == "alpha");
  CHECK(r[1].label == "beta");
  CHECK(r[2].label == "zeta");
  CHECK(r[3].label == "gamma");
}

TEST_CASE("default split") {
  CHECK(default_view_split(10).pretrained == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(default_view_split(10).finetuned == std::vector<int>{5, 6, 7, 8, 9});
  CHECK(default_view_split(3).pretrained == std::vector<int>{0, 1});
  CHECK(default_view_split(3).finetuned == std::vector<int>{2});
  CHECK(default_view_split(1).finetuned.empty());
}

TEST_CASE("zero-shot classification") {
  const LabelBank bank = orthogonal_bank({"bed", "chair", "desk", "lamp", "sofa"}, 5);
  const Eigen::MatrixXd views = Eigen::RowVectorXd::Unit(5, 1).replicate(8, 1) * 3.0;
  const auto res = zeroshot_classify(emb(views, EncoderTag::kPretrained), emb(views, EncoderTag::kFinetuned), bank, 3);
  REQUIRE(res.ranked.size() == 3);
  CHECK(res.ranked[0].label == "chair");
  CHECK(res.ranked[0].score == 8.0);
  CHECK(res.logits.per_view.rows() == 8);
  CHECK(res.ranked[1].label == "bed");

  LabelBank twins;
  twins.names = {"mug", "cup"};
  twins.directions = Eigen::MatrixXd(2, 2);
  twins.directions << 1, 0, 1, 0;
  const Eigen::MatrixXd v = Eigen::RowVector2d(1, 0).replicate(2, 1);
  const auto tie = zeroshot_classify(emb(v, EncoderTag::kPretrained), emb(v, EncoderTag::kFinetuned), twins, 2);
  CHECK(tie.ranked[0].label == "cup");

  ViewSplit split{{0}, {1}};
  Eigen::MatrixXd pre(2, 2), ft(2, 2);
  pre << 1, 0, 0, 1;
  ft << 1, 0, 0, 1;
  const auto custom = zeroshot_classify(emb(pre, EncoderTag::kPretrained), emb(ft, EncoderTag::kFinetuned),
                                        orthogonal_bank({"a", "b"}, 2), 0, split);
  CHECK(custom.logits.aggregated == Eigen::Vector2d(1, 1));
  CHECK(custom.ranked.size() == 2);
}

TEST_CASE("zero-shot from files names the missing encoder") {
  testutil::TempDir dir("zs");
  EmbeddingMatrix m = emb(Eigen::MatrixXd::Identity(2, 2), EncoderTag::kPretrained);
  write_embeddings(m, dir / "pre.dlem");
  ShapeFeatures s;
  s.id = "s1";
  s.pretrained = dir / "pre.dlem";
  s.finetuned = dir / "nope.dlem";
  try {
    zeroshot_classify(s, orthogonal_bank({"a", "b"}, 2), 1);
    FAIL("expected error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("finetuned") != std::string::npos);
  }
  s.finetuned = dir / "pre.dlem";
  CHECK(zeroshot_classify(s, orthogonal_bank({"a", "b"}, 2), 1).ranked.size() == 1);
}

TEST_CASE("logistic regression objective gradient") {
  std::mt19937_64 rng(31);
  for (double lambda : {0.0, 0.3}) {
    const Eigen::MatrixXd x = random_matrix(rng, 12, 4);
    std::vector<int> y;
    for (int i = 0; i < 12; ++i) y.push_back(i % 3);
    const Eigen::MatrixXd w = random_matrix(rng, 3, 4);
    const Eigen::VectorXd b = random_matrix(rng, 3, 1).col(0);
    const LogRegObjective obj = logreg_objective(w, b, x, y, lambda);
    const double h = 1e-5;
    double worst = 0.0;
    auto rel = [](double a, double f) { return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-8}); };
    for (int i = 0; i < w.size(); ++i) {
      Eigen::MatrixXd wp = w, wm = w;
      wp.data()[i] += h;
      wm.data()[i] -= h;
      const double f = (logreg_objective(wp, b, x, y, lambda).loss - logreg_objective(wm, b, x, y, lambda).loss) / (2 * h);
      worst = std::max(worst, rel(obj.grad_w.data()[i], f));
    }
    for (int i = 0; i < b.size(); ++i) {
      Eigen::VectorXd bp = b, bm = b;
      bp(i) += h;
      bm(i) -= h;
      const double f = (logreg_objective(w, bp, x, y, lambda).loss - logreg_objective(w, bm, x, y, lambda).loss) / (2 * h);
      worst = std::max(worst, rel(obj.grad_b(i), f));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("logistic regression fits separable clusters") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.3);
  Eigen::MatrixXd x(40, 2);
  std::vector<int> y;
  for (int i = 0; i < 40; ++i) {
    const int c = i % 2;
    x.row(i) << (c ? 2.0 : -2.0) + n(rng), (c ? 1.0 : -1.0) + n(rng);
    y.push_back(c);
  }
  const LogRegModel m = fit_logreg(x, y, 2, {0.1, 500, 0.0, 1});
  REQUIRE(m.loss_history.size() == 501);
  for (std::size_t i = 1; i < m.loss_history.size(); ++i) CHECK(m.loss_history[i] < m.loss_history[i - 1]);
  for (int i = 0; i < 40; ++i) {
    const auto r = fewshot_classify(m, {x.row(i)}, {"0", "1"});
    CHECK(r[0].label == std::to_string(y[i]));
  }
  const LogRegModel again = fit_logreg(x, y, 2, {0.1, 500, 0.0, 1});
  CHECK(again.weights == m.weights);

  const LogRegModel heavy = fit_logreg(x, y, 2, {0.1, 500, 10.0, 1});
  CHECK(heavy.weights.norm() < 0.1 * m.weights.norm());

  CHECK_THROWS_AS(fit_logreg(x, std::vector<int>(40, 0), 2, {}), PreconditionError);
}

TEST_CASE("few-shot logits") {
  LogRegModel m;
  m.weights = Eigen::Matrix2d::Identity() * 5.0;
  m.bias = Eigen::Vector2d::Zero();
  const Eigen::MatrixXd e1 = Eigen::RowVector2d(1, 0).replicate(4, 1);
  CHECK(fewshot_classify(m, {e1, e1}, {"first", "second"})[0].label == "first");

  std::mt19937_64 rng(40);
  m.weights = random_matrix(rng, 4, 6);
  m.bias = random_matrix(rng, 4, 1).col(0);
  const Eigen::MatrixXd a = random_matrix(rng, 3, 6), b = random_matrix(rng, 2, 6);
  Eigen::VectorXd ref = Eigen::VectorXd::Zero(4);
  for (const Eigen::MatrixXd* set : {&a, &b})
    for (int i = 0; i < set->rows(); ++i)
      for (int k = 0; k < 4; ++k) {
        double s = 0.0;
        for (int c = 0; c < 6; ++c) s += m.weights(k, c) * (*set)(i, c);
        ref(k) += s + m.bias(k);
      }
  CHECK(fewshot_logits(m, {a, b}) == ref);

  const Eigen::MatrixXd one = a.row(0);
  const Eigen::VectorXd single = m.weights * one.row(0).transpose() + m.bias;
  CHECK((fewshot_logits(m, {one}) - single).norm() < 1e-12);
  const std::vector<std::string> names{"a", "b", "c", "d"};
  const auto r1 = fewshot_classify(m, {one}, names);
  const auto r5 = fewshot_classify(m, {one.replicate(5, 1)}, names);
  for (int k = 0; k < 4; ++k) CHECK(r1[k].label == r5[k].label);
  CHECK_THROWS_AS(fewshot_logits(m, {Eigen::MatrixXd::Ones(1, 3)}), PreconditionError);
}

TEST_CASE("retrieval") {
  std::mt19937_64 rng(50);
  const Eigen::MatrixXd vecs = unit_rows(random_matrix(rng, 100, 16));
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("item" + std::to_string(1000 + i));
  const RetrievalIndex index(ids, vecs);

  for (int i = 0; i < 100; i += 9) {
    const auto hits = knn_retrieve(index, vecs.row(i).transpose(), 5);
    CHECK(hits[0].id == ids[i]);
    CHECK(std::abs(hits[0].cosine - 1.0) < 1e-6);
  }
  for (int t = 0; t < 10; ++t) {
    const Eigen::VectorXd q = random_matrix(rng, 16, 1).col(0);
    const auto got = knn_retrieve(index, q, 100);
    const auto ref = oracle::knn(ids, vecs, q, 100);
    for (int i = 0; i < 100; ++i) {
      CHECK(got[i].id == ref[i].first);
      CHECK(std::abs(got[i].cosine - ref[i].second) < 1e-12);
      CHECK(got[i].cosine <= 1.0);
      CHECK(got[i].cosine >= -1.0);
    }
    const auto pair = knn_retrieve(index, q, q, 10);
    const auto single = knn_retrieve(index, q, 10);
    for (int i = 0; i < 10; ++i) {
      CHECK(pair[i].id == single[i].id);
      CHECK(pair[i].cosine == single[i].cosine);
    }
  }
  CHECK_THROWS_AS(knn_retrieve(index, Eigen::VectorXd::Zero(16), 1), PreconditionError);
  CHECK_THROWS_AS(knn_retrieve(index, vecs.row(0).transpose(), 101), PreconditionError);
  CHECK_THROWS_AS(RetrievalIndex({"a", "a"}, unit_rows(random_matrix(rng, 2, 3))), PreconditionError);
  CHECK_THROWS_AS(RetrievalIndex({"a"}, Eigen::MatrixXd::Ones(1, 3)), PreconditionError);
}

TEST_CASE("retrieval ties are broken by id") {
  Eigen::MatrixXd v(3, 2);
  v << 1, 0, 1, 0, 0, 1;
  const RetrievalIndex index({"c", "a", "b"}, v);
  const auto hits = knn_retrieve(index, Eigen::Vector2d(1, 0), 3);
  CHECK(hits[0].id == "a");
  CHECK(hits[1].id == "c");
  CHECK(hits[2].id == "b");
}

TEST_CASE("shape embedding") {
  Eigen::MatrixXd pre(1, 2), ft(1, 2);
  pre << 2, 0;
  ft << 0, 5;
  const Eigen::VectorXd e = shape_embedding(emb(pre, EncoderTag::kPretrained), emb(ft, EncoderTag::kFinetuned));
  CHECK(std::abs(e(0) - std::sqrt(0.5)) < 1e-15);
  CHECK(std::abs(e(1) - std::sqrt(0.5)) < 1e-15);
}

TEST_CASE("top-k accuracy") {
  const std::vector<std::string> truth{"a", "b"};
  CHECK(topk_accuracy({{"a", "x", "y"}, {"b", "x", "y"}}, truth) == std::vector<double>{1, 1, 1});
  CHECK(topk_accuracy({{"x", "y", "a"}, {"x", "y", "b"}}, truth) == std::vector<double>{0, 1, 1});

  const std::vector<std::vector<std::string>> preds{
      {"a", "b", "c", "d", "e"}, {"b", "a", "c", "d", "e"}, {"c", "d", "e", "a", "b"}, {"e", "d", "c", "b", "a"},
      {"a", "c", "b", "d", "e"}, {"d", "a", "b", "c", "e"}, {"b", "c", "d", "e", "a"}, {"c", "b", "a", "d", "e"},
      {"a", "e", "d", "c", "b"}, {"e", "a", "b", "c", "d"}};
  const std::vector<std::string> t{"a", "a", "a", "a", "b", "b", "c", "c", "e", "f"};
  // Truth ranks by hand: 1 2 4 5 3 3 2 1 2 -.
  const auto acc = topk_accuracy(preds, t);
  CHECK(acc[0] == doctest::Approx(0.2));
  CHECK(acc[1] == doctest::Approx(0.7));
  CHECK(acc[2] == doctest::Approx(0.9));
  CHECK_THROWS_AS(topk_accuracy({{"a"}}, truth), PreconditionError);
}

TEST_CASE("prediction CSV round trip") {
  testutil::TempDir dir("csv");
  const std::vector<PredictionRow> rows{{"s1", 1, "chair", 1.0 / 3.0}, {"s1", 2, "table", -2.5e-300}};
  write_predictions_csv(rows, dir / "p.csv");
  CHECK(testutil::read_file(dir / "p.csv").rfind("shape_id,rank,label,logit\n", 0) == 0);
  const auto back = read_predictions_csv(dir / "p.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].logit == rows[0].logit);
  CHECK(back[1].logit == rows[1].logit);
  CHECK(back[1].label == "table");
  CHECK(back[1].rank == 2);
  testutil::write_file(dir / "bad.csv", "shape_id,rank,label,logit\ns1,x,chair,1\n");
  CHECK_THROWS_AS(read_predictions_csv(dir / "bad.csv"), ValidationError);
  testutil::write_file(dir / "nohdr.csv", "s1,1,chair,1\n");
  CHECK_THROWS_AS(read_predictions_csv(dir / "nohdr.csv"), ValidationError);
}
