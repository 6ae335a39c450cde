#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlign/embedstore.hpp"

namespace dlign {

// Trainable single-head attention residual on top of frozen encoder
// features, plus the contrastive temperature. 1/tau = exp(log_inv_tau).
struct AlignHead {
  Eigen::MatrixXd wq, wk, wv, wo;  // d x d
  double log_inv_tau = 0.0;

  static constexpr double kMaxLogInvTau = 4.605170185988092;  // ln 100
  static constexpr double kInitInvTau = 14.3;

  static AlignHead zeros(int d);
  // Q/K/V ~ N(0, 1/d) under `seed`; W_O = 0 so the untrained head passes the
  // frozen features through unchanged.
  static AlignHead initialize(int d, std::uint64_t seed);

  int dim() const { return static_cast<int>(wq.rows()); }
  double inv_tau() const { return std::exp(log_inv_tau); }
  double tau() const { return 1.0 / inv_tau(); }
  void clamp_temperature();

  // Flat parameter view in the order wq, wk, wv, wo (row-major), log_inv_tau.
  std::size_t num_params() const;
  double get_param(std::size_t i) const;
  void set_param(std::size_t i, double v);
};

struct AlignBatch {
  // Penultimate-layer tokens per row, each T x d (T may be 1).
  std::vector<Eigen::MatrixXd> tokens;
  Eigen::MatrixXd frozen;  // b x d, frozen final-layer features
  Eigen::MatrixXd image;   // b x d, view-pooled image features (positives by row)

  int size() const { return static_cast<int>(frozen.rows()); }
  void validate() const;
};

// normalize(frozen + mean_t(softmax(Q K^T / sqrt d) V W_O)).
Eigen::VectorXd head_forward(const AlignHead& head, const Eigen::MatrixXd& tokens, const Eigen::VectorXd& frozen);

struct LossResult {
  double contrastive = 0.0;
  double distance = 0.0;
  double total = 0.0;
  AlignHead grad;  // same layout as the head
};

// Symmetric InfoNCE over positives on the diagonal plus summed Euclidean
// distance of positive pairs. Gradients are analytic.
LossResult composite_loss(const AlignHead& head, const AlignBatch& batch);

// Loss value only; used by the finite-difference checker.
double composite_loss_value(const AlignHead& head, const AlignBatch& batch);

// Max relative error |a - f| / max(|a|, |f|, 1e-8) between analytic and
// central-difference gradients. Checks every parameter for d <= 16, else a
// seeded subset of `max_coords` coordinates (plus the temperature).
double grad_check(const AlignHead& head, const AlignBatch& batch, double step, std::uint64_t seed = 0,
                  std::size_t max_coords = 256);

struct TrainConfig {
  double peak_lr = 3e-4;
  int batch = 128;
  int epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  std::uint64_t seed = 0;

  void validate() const;
};

double onecycle_lr(int step, int total_steps, const TrainConfig& cfg);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  int step = 0;
};

// One decoupled-weight-decay Adam step over flat parameters. `decay_mask`,
// when non-empty, selects which coordinates receive weight decay.
void adamw_update(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                  const TrainConfig& cfg, std::span<const bool> decay_mask = {});

// AdamW on the head. The temperature is not decayed and is clamped to
// 1/tau in [1, 100] after the step.
void adamw_step(AlignHead& head, const AlignHead& grad, AdamState& state, double lr, const TrainConfig& cfg);

struct AlignSample {
  std::string id;
  Eigen::MatrixXd tokens;  // T x d
  Eigen::VectorXd frozen;  // d
  Eigen::VectorXd image;   // d, pooled
};

struct LossRecord {
  int step = 0;
  double lr = 0.0;
  double contrastive = 0.0;
  double distance = 0.0;
  double total = 0.0;
};

struct TrainResult {
  AlignHead head;
  std::vector<LossRecord> curve;
};

// Splits a shuffled epoch into batches of cfg.batch; a trailing batch of a
// single sample is merged into the previous one.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, int batch);

TrainResult train_align(const std::vector<AlignSample>& samples, const TrainConfig& cfg);
TrainResult train_align(const std::vector<AlignSample>& samples, const TrainConfig& cfg, const AlignHead& init);

// Reads depth_tokens (T x d), depth_frozen (1 x d) and image (N x d, pooled
// with mean_pool_normalized) for every shape of the manifest.
std::vector<AlignSample> load_align_dataset(const FeatureManifest& manifest);

// "DLHD": magic, u32 version, u32 d, wq/wk/wv/wo as f64 row-major, log_inv_tau.
void write_checkpoint(const AlignHead& head, const std::filesystem::path& path);
AlignHead read_checkpoint(const std::filesystem::path& path);

void write_loss_csv(const std::vector<LossRecord>& curve, const std::filesystem::path& path);

}  // namespace dlign
