#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dlign/embedstore.hpp"
#include "dlign/prompts.hpp"

namespace dlign {

struct LogitMatrix {
  Eigen::MatrixXd per_view;    // N x M, pretrained views first
  Eigen::VectorXd aggregated;  // M, per-view rows summed in view order
};

// Label directions as an M x d matrix plus names, rows in label order.
struct LabelBank {
  std::vector<std::string> names;
  Eigen::MatrixXd directions;

  static LabelBank from_features(const std::vector<LabelTextFeature>& feats);
};

LogitMatrix aggregate_logits(const Eigen::MatrixXd& views_pre, const Eigen::MatrixXd& views_ft,
                             const Eigen::MatrixXd& label_dirs);

struct RankedLabel {
  std::string label;
  double score = 0.0;
};

// Descending score; ties broken by label in lexicographic order.
std::vector<RankedLabel> rank_labels(const Eigen::VectorXd& scores, const std::vector<std::string>& names);

// Which view rows of the two encoder files take part in zero-shot scoring.
// Default: first ceil(N/2) views pretrained, the rest fine-tuned.
ViewSplit default_view_split(int n_views);

struct ZeroShotResult {
  LogitMatrix logits;
  std::vector<RankedLabel> ranked;  // top-k
};

ZeroShotResult zeroshot_classify(const EmbeddingMatrix& pretrained, const EmbeddingMatrix& finetuned,
                                 const LabelBank& labels, int k, const std::optional<ViewSplit>& split = {});

// Reads both encoder files of a shape; a missing one is reported by tag.
ZeroShotResult zeroshot_classify(const ShapeFeatures& shape, const LabelBank& labels, int k,
                                 const std::optional<ViewSplit>& split = {});

struct LogRegConfig {
  double lr = 0.1;
  int steps = 500;
  double l2_lambda = 0.0;
  std::uint64_t seed = 0;
};

struct LogRegModel {
  Eigen::MatrixXd weights;  // M x d
  Eigen::VectorXd bias;     // M
  double l2_lambda = 0.0;
  std::vector<double> loss_history;  // objective before each step, then final

  int num_classes() const { return static_cast<int>(weights.rows()); }
  int dim() const { return static_cast<int>(weights.cols()); }
};

struct LogRegObjective {
  double loss = 0.0;
  Eigen::MatrixXd grad_w;
  Eigen::VectorXd grad_b;
};

// Mean softmax cross-entropy over rows plus (lambda / 2) * ||W||^2.
LogRegObjective logreg_objective(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                                 const Eigen::MatrixXd& features, const std::vector<int>& labels, double l2_lambda);

// Full-batch gradient descent. Every class in [0, num_classes) must occur.
LogRegModel fit_logreg(const Eigen::MatrixXd& features, const std::vector<int>& labels, int num_classes,
                       const LogRegConfig& cfg);

// Sum of W v + b over every view row of every given matrix.
Eigen::VectorXd fewshot_logits(const LogRegModel& model, const std::vector<Eigen::MatrixXd>& view_sets);

std::vector<RankedLabel> fewshot_classify(const LogRegModel& model, const std::vector<Eigen::MatrixXd>& view_sets,
                                          const std::vector<std::string>& class_names);

struct RetrievalHit {
  std::string id;
  double cosine = 0.0;
};

class RetrievalIndex {
 public:
  RetrievalIndex(std::vector<std::string> ids, Eigen::MatrixXd vectors);

  const std::vector<std::string>& ids() const { return ids_; }
  const Eigen::MatrixXd& vectors() const { return vectors_; }
  int size() const { return static_cast<int>(ids_.size()); }

 private:
  std::vector<std::string> ids_;
  Eigen::MatrixXd vectors_;  // n x d, unit rows
};

std::vector<RetrievalHit> knn_retrieve(const RetrievalIndex& index, const Eigen::VectorXd& query, int k);
// Averages the two queries, then normalizes, then scores.
std::vector<RetrievalHit> knn_retrieve(const RetrievalIndex& index, const Eigen::VectorXd& image_query,
                                       const Eigen::VectorXd& text_query, int k);

// Shape embedding for retrieval: normalized mean of the normalized view rows
// of both encoder states.
Eigen::VectorXd shape_embedding(const EmbeddingMatrix& pretrained, const EmbeddingMatrix& finetuned);

std::vector<double> topk_accuracy(const std::vector<std::vector<std::string>>& predictions,
                                  const std::vector<std::string>& truths, const std::vector<int>& ks = {1, 3, 5});

// Prediction CSV rows: shape_id,rank,label,logit (rank from 1).
struct PredictionRow {
  std::string shape_id;
  int rank = 0;
  std::string label;
  double logit = 0.0;
};

void write_predictions_csv(const std::vector<PredictionRow>& rows, const std::filesystem::path& path);
std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path);

}  // namespace dlign
