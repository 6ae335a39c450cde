#include "dlign/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dlign/error.hpp"

namespace dlign {
namespace {

constexpr double kUnitTol = 1e-4;

void require_unit_rows(const Eigen::MatrixXd& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (std::abs(m.row(i).norm() - 1.0) > kUnitTol) {
      throw PreconditionError(std::string(what) + ": row " + std::to_string(i) + " is not unit-normalized");
    }
  }
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<int>& rows, const char* what) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= m.rows()) {
      throw PreconditionError(std::string(what) + ": view index " + std::to_string(rows[i]) + " out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  }
  return out;
}

Eigen::MatrixXd normalized_rows(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n == 0.0) throw PreconditionError("view " + std::to_string(i) + " has an all-zero feature row");
    out.row(i) /= n;
  }
  return out;
}

// Left-to-right sum, independent of the vectorization width.
template <typename A, typename B>
double dot_seq(const A& a, const B& b) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < a.size(); ++c) s += a(c) * b(c);
  return s;
}

void fill_logits(Eigen::MatrixXd& out, Eigen::Index first, const Eigen::MatrixXd& views, const Eigen::MatrixXd& dirs) {
  for (Eigen::Index i = 0; i < views.rows(); ++i) {
    for (Eigen::Index j = 0; j < dirs.rows(); ++j) out(first + i, j) = dot_seq(views.row(i), dirs.row(j));
  }
}

}  // namespace

LabelBank LabelBank::from_features(const std::vector<LabelTextFeature>& feats) {
  if (feats.empty()) throw PreconditionError("label bank needs at least one label");
  LabelBank bank;
  bank.directions.resize(static_cast<Eigen::Index>(feats.size()), feats.front().direction.size());
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (feats[i].direction.size() != bank.directions.cols()) {
      throw PreconditionError("label bank: label '" + feats[i].label + "' has a different dimension");
    }
    bank.names.push_back(feats[i].label);
    bank.directions.row(static_cast<Eigen::Index>(i)) = feats[i].direction.transpose();
  }
  return bank;
}

LogitMatrix aggregate_logits(const Eigen::MatrixXd& views_pre, const Eigen::MatrixXd& views_ft,
                             const Eigen::MatrixXd& label_dirs) {
  const Eigen::Index d = label_dirs.cols();
  if (views_pre.cols() != d || views_ft.cols() != d) {
    throw PreconditionError("aggregate_logits: view and label dimensions differ");
  }
  if (views_pre.rows() + views_ft.rows() < 1) throw PreconditionError("aggregate_logits: no views");
  require_unit_rows(views_pre, "aggregate_logits: pretrained views");
  require_unit_rows(views_ft, "aggregate_logits: fine-tuned views");
  require_unit_rows(label_dirs, "aggregate_logits: label directions");

  LogitMatrix out;
  const Eigen::Index n = views_pre.rows() + views_ft.rows();
  out.per_view.resize(n, label_dirs.rows());
  fill_logits(out.per_view, 0, views_pre, label_dirs);
  fill_logits(out.per_view, views_pre.rows(), views_ft, label_dirs);
  out.aggregated = Eigen::VectorXd::Zero(label_dirs.rows());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < label_dirs.rows(); ++j) out.aggregated(j) += out.per_view(i, j);
  }
  return out;
}

std::vector<RankedLabel> rank_labels(const Eigen::VectorXd& scores, const std::vector<std::string>& names) {
  if (static_cast<std::size_t>(scores.size()) != names.size()) {
    throw PreconditionError("rank_labels: score count differs from label count");
  }
  std::vector<RankedLabel> out;
  out.reserve(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) out.push_back({names[i], scores(static_cast<Eigen::Index>(i))});
  std::sort(out.begin(), out.end(), [](const RankedLabel& a, const RankedLabel& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.label < b.label;
  });
  return out;
}

ViewSplit default_view_split(int n_views) {
  ViewSplit split;
  const int n_pre = (n_views + 1) / 2;
  for (int i = 0; i < n_views; ++i) (i < n_pre ? split.pretrained : split.finetuned).push_back(i);
  return split;
}

ZeroShotResult zeroshot_classify(const EmbeddingMatrix& pretrained, const EmbeddingMatrix& finetuned,
                                 const LabelBank& labels, int k, const std::optional<ViewSplit>& split) {
  if (pretrained.rows() != finetuned.rows()) {
    throw PreconditionError("zeroshot_classify: pretrained and fine-tuned files hold different view counts");
  }
  const ViewSplit s = split ? *split : default_view_split(static_cast<int>(pretrained.rows()));
  const Eigen::MatrixXd pre = normalized_rows(select_rows(pretrained.data, s.pretrained, "pretrained"));
  const Eigen::MatrixXd ft = normalized_rows(select_rows(finetuned.data, s.finetuned, "finetuned"));
  ZeroShotResult res;
  res.logits = aggregate_logits(pre, ft, labels.directions);
  res.ranked = rank_labels(res.logits.aggregated, labels.names);
  if (k > 0 && static_cast<std::size_t>(k) < res.ranked.size()) res.ranked.resize(static_cast<std::size_t>(k));
  return res;
}

ZeroShotResult zeroshot_classify(const ShapeFeatures& shape, const LabelBank& labels, int k,
                                 const std::optional<ViewSplit>& split) {
  auto load = [&](const std::optional<std::filesystem::path>& p, EncoderTag tag) {
    if (!p || !std::filesystem::exists(*p)) {
      throw ValidationError("shape '" + shape.id + "': missing " + to_string(tag) + " encoder features");
    }
    return read_embeddings(*p);
  };
  return zeroshot_classify(load(shape.pretrained, EncoderTag::kPretrained),
                           load(shape.finetuned, EncoderTag::kFinetuned), labels, k, split);
}

LogRegObjective logreg_objective(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                                 const Eigen::MatrixXd& features, const std::vector<int>& labels, double l2_lambda) {
  const Eigen::Index n = features.rows();
  const Eigen::Index m = weights.rows();
  if (static_cast<std::size_t>(n) != labels.size() || features.cols() != weights.cols() || bias.size() != m) {
    throw PreconditionError("logreg: feature, label and parameter shapes disagree");
  }
  Eigen::MatrixXd logits = features * weights.transpose();
  logits.rowwise() += bias.transpose();
  LogRegObjective obj;
  Eigen::MatrixXd g_logits(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    const double z = e.sum();
    obj.loss += (mx + std::log(z)) - logits(i, labels[static_cast<std::size_t>(i)]);
    g_logits.row(i) = e / z;
    g_logits(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  obj.loss = obj.loss * inv_n + 0.5 * l2_lambda * weights.squaredNorm();
  obj.grad_w = g_logits.transpose() * features * inv_n + l2_lambda * weights;
  obj.grad_b = g_logits.colwise().sum().transpose() * inv_n;
  return obj;
}

LogRegModel fit_logreg(const Eigen::MatrixXd& features, const std::vector<int>& labels, int num_classes,
                       const LogRegConfig& cfg) {
  if (num_classes < 2) throw PreconditionError("fit_logreg: needs at least 2 classes");
  if (features.rows() < num_classes) throw PreconditionError("fit_logreg: fewer samples than classes");
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw PreconditionError("fit_logreg: label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw PreconditionError("fit_logreg: class " + std::to_string(c) + " is absent from the support set");
    }
  }
  LogRegModel model;
  model.l2_lambda = cfg.l2_lambda;
  model.weights.resize(num_classes, features.cols());
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1e-3);
  for (Eigen::Index i = 0; i < model.weights.size(); ++i) model.weights.data()[i] = normal(rng);
  model.bias = Eigen::VectorXd::Zero(num_classes);
  for (int step = 0; step < cfg.steps; ++step) {
    const LogRegObjective obj = logreg_objective(model.weights, model.bias, features, labels, cfg.l2_lambda);
    model.loss_history.push_back(obj.loss);
    model.weights -= cfg.lr * obj.grad_w;
    model.bias -= cfg.lr * obj.grad_b;
  }
  model.loss_history.push_back(logreg_objective(model.weights, model.bias, features, labels, cfg.l2_lambda).loss);
  return model;
}

Eigen::VectorXd fewshot_logits(const LogRegModel& model, const std::vector<Eigen::MatrixXd>& view_sets) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.num_classes());
  for (const auto& views : view_sets) {
    if (views.cols() != model.dim()) throw PreconditionError("fewshot_classify: feature dimension != model dimension");
    for (Eigen::Index i = 0; i < views.rows(); ++i) {
      for (Eigen::Index m = 0; m < model.num_classes(); ++m) {
        acc(m) += dot_seq(model.weights.row(m), views.row(i)) + model.bias(m);
      }
    }
  }
  return acc;
}

std::vector<RankedLabel> fewshot_classify(const LogRegModel& model, const std::vector<Eigen::MatrixXd>& view_sets,
                                          const std::vector<std::string>& class_names) {
  return rank_labels(fewshot_logits(model, view_sets), class_names);
}

RetrievalIndex::RetrievalIndex(std::vector<std::string> ids, Eigen::MatrixXd vectors)
    : ids_(std::move(ids)), vectors_(std::move(vectors)) {
  if (static_cast<Eigen::Index>(ids_.size()) != vectors_.rows()) {
    throw PreconditionError("retrieval index: id count differs from vector count");
  }
  if (std::set<std::string>(ids_.begin(), ids_.end()).size() != ids_.size()) {
    throw PreconditionError("retrieval index: ids must be unique");
  }
  for (Eigen::Index i = 0; i < vectors_.rows(); ++i) {
    if (std::abs(vectors_.row(i).norm() - 1.0) > 1e-5) {
      throw PreconditionError("retrieval index: vector '" + ids_[static_cast<std::size_t>(i)] + "' is not unit norm");
    }
  }
}

std::vector<RetrievalHit> knn_retrieve(const RetrievalIndex& index, const Eigen::VectorXd& query, int k) {
  if (k < 0 || k > index.size()) throw PreconditionError("knn_retrieve: k must lie in [0, n]");
  if (query.size() != index.vectors().cols()) throw PreconditionError("knn_retrieve: query dimension mismatch");
  if (!query.allFinite()) throw PreconditionError("knn_retrieve: query is not finite");
  const double n = query.norm();
  if (n == 0.0) throw PreconditionError("knn_retrieve: zero query vector");
  const Eigen::VectorXd q = query / n;
  std::vector<RetrievalHit> hits;
  hits.reserve(static_cast<std::size_t>(index.size()));
  for (int i = 0; i < index.size(); ++i) {
    hits.push_back({index.ids()[static_cast<std::size_t>(i)], std::clamp(dot_seq(index.vectors().row(i), q), -1.0, 1.0)});
  }
  const auto cmp = [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.id < b.id;
  };
  std::partial_sort(hits.begin(), hits.begin() + k, hits.end(), cmp);
  hits.resize(static_cast<std::size_t>(k));
  return hits;
}

std::vector<RetrievalHit> knn_retrieve(const RetrievalIndex& index, const Eigen::VectorXd& image_query,
                                       const Eigen::VectorXd& text_query, int k) {
  if (image_query.size() != text_query.size()) throw PreconditionError("knn_retrieve: query dimensions differ");
  const Eigen::VectorXd avg = 0.5 * (image_query + text_query);
  if (!avg.allFinite() || avg.norm() == 0.0) throw PreconditionError("knn_retrieve: averaged query is zero");
  return knn_retrieve(index, avg, k);
}

Eigen::VectorXd shape_embedding(const EmbeddingMatrix& pretrained, const EmbeddingMatrix& finetuned) {
  if (pretrained.dim() != finetuned.dim()) throw PreconditionError("shape_embedding: encoder dimensions differ");
  Eigen::MatrixXd all(pretrained.rows() + finetuned.rows(), pretrained.dim());
  all << pretrained.data, finetuned.data;
  Eigen::VectorXd v = mean_pool_normalized(all);
  const double n = v.norm();
  if (n == 0.0) throw PreconditionError("shape_embedding: views average to zero");
  return v / n;
}

std::vector<double> topk_accuracy(const std::vector<std::vector<std::string>>& predictions,
                                  const std::vector<std::string>& truths, const std::vector<int>& ks) {
  if (predictions.size() != truths.size()) throw PreconditionError("topk_accuracy: prediction/truth count mismatch");
  if (truths.empty()) throw PreconditionError("topk_accuracy: no shapes");
  std::vector<double> acc;
  for (int k : ks) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      const auto& p = predictions[i];
      const auto end = p.begin() + std::min<std::ptrdiff_t>(k, static_cast<std::ptrdiff_t>(p.size()));
      if (std::find(p.begin(), end, truths[i]) != end) ++hits;
    }
    acc.push_back(static_cast<double>(hits) / static_cast<double>(truths.size()));
  }
  return acc;
}

void write_predictions_csv(const std::vector<PredictionRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "shape_id,rank,label,logit\n";
  char num[40];
  for (const auto& r : rows) {
    if (r.shape_id.find_first_of(",\n") != std::string::npos || r.label.find_first_of(",\n") != std::string::npos) {
      throw PreconditionError("prediction CSV: ids and labels may not contain commas or newlines");
    }
    std::snprintf(num, sizeof(num), "%.17g", r.logit);
    out << r.shape_id << ',' << r.rank << ',' << r.label << ',' << num << '\n';
  }
}

std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open prediction CSV '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("shape_id,rank,label,logit", 0) != 0) {
    throw ValidationError("prediction CSV '" + path.string() + "' lacks the shape_id,rank,label,logit header");
  }
  std::vector<PredictionRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    PredictionRow r;
    std::string rank, logit;
    if (!std::getline(ss, r.shape_id, ',') || !std::getline(ss, rank, ',') || !std::getline(ss, r.label, ',') ||
        !std::getline(ss, logit)) {
      throw ValidationError("prediction CSV line " + std::to_string(line_no) + " is malformed");
    }
    try {
      r.rank = std::stoi(rank);
      r.logit = std::stod(logit);
    } catch (const std::exception&) {
      throw ValidationError("prediction CSV line " + std::to_string(line_no) + " has a bad number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace dlign
