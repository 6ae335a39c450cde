#include "dlign/align.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <cstdio>
#include <iterator>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>

#include "dlign/error.hpp"

namespace dlign {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr double kDistEps = 1e-12;

// Intermediates of one head_forward call kept for the backward pass.
struct ForwardCache {
  Eigen::MatrixXd q, k, v;  // T x d
  Eigen::MatrixXd attn;     // T x T, row softmax
  Eigen::MatrixXd z;        // T x d, attn * v
  Eigen::VectorXd u;        // frozen + pooled residual
  double norm = 0.0;
  Eigen::VectorXd out;      // u / norm
};

void softmax_rows(Eigen::MatrixXd& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

ForwardCache forward(const AlignHead& head, const Eigen::MatrixXd& x, const Eigen::VectorXd& frozen) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head.dim()));
  ForwardCache c;
  c.q = x * head.wq;
  c.k = x * head.wk;
  c.v = x * head.wv;
  c.attn = (c.q * c.k.transpose()) * scale;
  softmax_rows(c.attn);
  c.z = c.attn * c.v;
  const Eigen::VectorXd pooled = (c.z * head.wo).colwise().mean().transpose();
  c.u = frozen + pooled;
  c.norm = c.u.norm();
  c.out = c.u / c.norm;
  return c;
}

// Accumulates head gradients given dL/d(out) for one row.
void backward(const AlignHead& head, const Eigen::MatrixXd& x, const ForwardCache& c, const Eigen::VectorXd& g_out,
              AlignHead& grad) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head.dim()));
  const double t = static_cast<double>(x.rows());
  const Eigen::VectorXd g_u = (g_out - c.out * c.out.dot(g_out)) / c.norm;
  const Eigen::VectorXd z_mean = c.z.colwise().mean().transpose();
  grad.wo.noalias() += z_mean * g_u.transpose();

  // Every token row of dL/dZ equals (W_O g_u)^T / T.
  const Eigen::RowVectorXd g_z_row = (head.wo * g_u).transpose() / t;
  const Eigen::MatrixXd g_z = Eigen::MatrixXd::Ones(x.rows(), 1) * g_z_row;
  const Eigen::MatrixXd g_attn = g_z * c.v.transpose();
  const Eigen::MatrixXd g_v = c.attn.transpose() * g_z;
  grad.wv.noalias() += x.transpose() * g_v;

  Eigen::MatrixXd g_s = c.attn.cwiseProduct(g_attn);
  const Eigen::VectorXd row_dot = g_s.rowwise().sum();
  g_s -= c.attn.cwiseProduct(row_dot * Eigen::RowVectorXd::Ones(x.rows()));
  grad.wq.noalias() += x.transpose() * (g_s * c.k) * scale;
  grad.wk.noalias() += x.transpose() * (g_s.transpose() * c.q) * scale;
}

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double mx = v.maxCoeff();
  return mx + std::log((v.array() - mx).exp().sum());
}

struct PairTerms {
  double contrastive = 0.0;
  double distance = 0.0;
  Eigen::MatrixXd g_h;  // dL/dh^D, b x d
  double g_log_inv_tau = 0.0;
};

PairTerms pair_terms(const Eigen::MatrixXd& h, const Eigen::MatrixXd& r, double log_inv_tau, bool want_grad) {
  const Eigen::Index b = h.rows();
  const double inv_tau = std::exp(log_inv_tau);
  const Eigen::MatrixXd dots = h * r.transpose();
  const Eigen::MatrixXd logits = dots * inv_tau;
  Eigen::VectorXd row_lse(b), col_lse(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    row_lse(i) = log_sum_exp(logits.row(i).transpose());
    col_lse(i) = log_sum_exp(logits.col(i));
  }
  PairTerms out;
  for (Eigen::Index i = 0; i < b; ++i) {
    out.contrastive += 0.5 * (row_lse(i) - logits(i, i)) + 0.5 * (col_lse(i) - logits(i, i));
  }
  Eigen::VectorXd dist_raw(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    dist_raw(i) = std::sqrt((h.row(i) - r.row(i)).squaredNorm() + kDistEps);
    // Offset so an exact match contributes exactly zero.
    out.distance += dist_raw(i) - std::sqrt(kDistEps);
  }
  if (!want_grad) return out;

  // dL/dlogits = (P_row + P_col) / 2 - I.
  Eigen::MatrixXd g_logits(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      g_logits(i, j) = 0.5 * std::exp(logits(i, j) - row_lse(i)) + 0.5 * std::exp(logits(i, j) - col_lse(j)) -
                       (i == j ? 1.0 : 0.0);
    }
  }
  out.g_h = (g_logits * r) * inv_tau;
  out.g_log_inv_tau = inv_tau * g_logits.cwiseProduct(dots).sum();
  for (Eigen::Index i = 0; i < b; ++i) {
    out.g_h.row(i) += (h.row(i) - r.row(i)) / dist_raw(i);
  }
  return out;
}

void check_batch_row(const Eigen::VectorXd& v, int row) {
  if (!v.allFinite()) throw Error("composite_loss: non-finite forward value in row " + std::to_string(row));
}

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::vector<char>& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw Error("checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

Eigen::MatrixXd& param_block(AlignHead& h, std::size_t k) {
  switch (k) {
    case 0:
      return h.wq;
    case 1:
      return h.wk;
    case 2:
      return h.wv;
    default:
      return h.wo;
  }
}

const Eigen::MatrixXd& param_block(const AlignHead& h, std::size_t k) {
  return param_block(const_cast<AlignHead&>(h), k);
}

}  // namespace

AlignHead AlignHead::zeros(int d) {
  AlignHead h;
  h.wq = h.wk = h.wv = h.wo = Eigen::MatrixXd::Zero(d, d);
  h.log_inv_tau = 0.0;
  return h;
}

AlignHead AlignHead::initialize(int d, std::uint64_t seed) {
  AlignHead h = zeros(d);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  for (Eigen::MatrixXd* m : {&h.wq, &h.wk, &h.wv}) {
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) (*m)(i, j) = normal(rng);
    }
  }
  h.log_inv_tau = std::log(kInitInvTau);
  return h;
}

void AlignHead::clamp_temperature() { log_inv_tau = std::clamp(log_inv_tau, 0.0, kMaxLogInvTau); }

std::size_t AlignHead::num_params() const { return 4 * static_cast<std::size_t>(wq.size()) + 1; }

double AlignHead::get_param(std::size_t i) const {
  const std::size_t block = static_cast<std::size_t>(wq.size());
  if (i == 4 * block) return log_inv_tau;
  const std::size_t k = i / block, off = i % block;
  const auto d = static_cast<std::size_t>(dim());
  return param_block(*this, k)(static_cast<Eigen::Index>(off / d), static_cast<Eigen::Index>(off % d));
}

void AlignHead::set_param(std::size_t i, double v) {
  const std::size_t block = static_cast<std::size_t>(wq.size());
  if (i == 4 * block) {
    log_inv_tau = v;
    return;
  }
  const std::size_t k = i / block, off = i % block;
  const auto d = static_cast<std::size_t>(dim());
  param_block(*this, k)(static_cast<Eigen::Index>(off / d), static_cast<Eigen::Index>(off % d)) = v;
}

void AlignBatch::validate() const {
  const Eigen::Index b = frozen.rows();
  if (b < 2) throw PreconditionError("align batch needs at least 2 rows, got " + std::to_string(b));
  if (image.rows() != b || static_cast<Eigen::Index>(tokens.size()) != b) {
    throw PreconditionError("align batch: tokens, frozen and image must have the same number of rows");
  }
  const Eigen::Index d = frozen.cols();
  if (image.cols() != d) throw PreconditionError("align batch: frozen and image dimensions differ");
  for (const auto& t : tokens) {
    if (t.rows() < 1 || t.cols() != d) throw PreconditionError("align batch: token block has the wrong shape");
  }
}

Eigen::VectorXd head_forward(const AlignHead& head, const Eigen::MatrixXd& tokens, const Eigen::VectorXd& frozen) {
  if (tokens.rows() < 1) throw PreconditionError("head_forward: needs at least one token");
  if (tokens.cols() != head.dim() || frozen.size() != head.dim()) {
    throw PreconditionError("head_forward: feature dimension does not match the head");
  }
  return forward(head, tokens, frozen).out;
}

LossResult composite_loss(const AlignHead& head, const AlignBatch& batch) {
  batch.validate();
  if (batch.frozen.cols() != head.dim()) throw PreconditionError("composite_loss: batch dimension != head dimension");
  if (!batch.image.allFinite()) throw PreconditionError("composite_loss: image features contain NaN/Inf");
  const int b = batch.size();
  std::vector<ForwardCache> caches;
  caches.reserve(b);
  Eigen::MatrixXd h(b, head.dim());
  for (int i = 0; i < b; ++i) {
    caches.push_back(forward(head, batch.tokens[i], batch.frozen.row(i).transpose()));
    check_batch_row(caches.back().out, i);
    h.row(i) = caches.back().out.transpose();
  }
  const PairTerms terms = pair_terms(h, batch.image, head.log_inv_tau, true);

  LossResult res;
  res.contrastive = terms.contrastive;
  res.distance = terms.distance;
  res.total = terms.contrastive + terms.distance;
  res.grad = AlignHead::zeros(head.dim());
  for (int i = 0; i < b; ++i) {
    backward(head, batch.tokens[i], caches[i], terms.g_h.row(i).transpose(), res.grad);
  }
  res.grad.log_inv_tau = terms.g_log_inv_tau;
  return res;
}

double composite_loss_value(const AlignHead& head, const AlignBatch& batch) {
  batch.validate();
  const int b = batch.size();
  Eigen::MatrixXd h(b, head.dim());
  for (int i = 0; i < b; ++i) {
    const Eigen::VectorXd out = forward(head, batch.tokens[i], batch.frozen.row(i).transpose()).out;
    check_batch_row(out, i);
    h.row(i) = out.transpose();
  }
  const PairTerms terms = pair_terms(h, batch.image, head.log_inv_tau, false);
  return terms.contrastive + terms.distance;
}

double grad_check(const AlignHead& head, const AlignBatch& batch, double step, std::uint64_t seed,
                  std::size_t max_coords) {
  if (!(step > 0.0)) throw PreconditionError("grad_check: step must be > 0");
  const LossResult analytic = composite_loss(head, batch);
  const std::size_t n = head.num_params();
  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  if (head.dim() > 16 && max_coords + 1 < n) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> picked;
    std::sample(coords.begin(), coords.end() - 1, std::back_inserter(picked), max_coords, rng);
    picked.push_back(n - 1);
    coords.swap(picked);
  }
  AlignHead probe = head;
  double worst = 0.0;
  for (const std::size_t i : coords) {
    const double orig = probe.get_param(i);
    probe.set_param(i, orig + step);
    const double up = composite_loss_value(probe, batch);
    probe.set_param(i, orig - step);
    const double down = composite_loss_value(probe, batch);
    probe.set_param(i, orig);
    const double fd = (up - down) / (2.0 * step);
    const double an = analytic.grad.get_param(i);
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0)) throw PreconditionError("train: peak_lr must be > 0");
  if (!(pct_start > 0.0 && pct_start < 1.0)) throw PreconditionError("train: pct_start must lie in (0, 1)");
  if (batch < 2) throw PreconditionError("train: batch must be >= 2");
  if (epochs < 0) throw PreconditionError("train: epochs must be >= 0");
  if (!(div_factor > 0.0) || !(final_div_factor > 0.0)) throw PreconditionError("train: div factors must be > 0");
}

// One-cycle schedule with cosine annealing. With knee = round(pct_start * total):
//   step <= knee: lr = peak + (initial - peak) * (1 + cos(pi * step / knee)) / 2
//   step >  knee: lr = final + (peak - final) * (1 + cos(pi * (step - knee) / (total - 1 - knee))) / 2
// where initial = peak / div_factor and final = peak / final_div_factor.
double onecycle_lr(int step, int total_steps, const TrainConfig& cfg) {
  if (total_steps < 1 || step < 0 || step >= total_steps) {
    throw PreconditionError("onecycle_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + ")");
  }
  const double peak = cfg.peak_lr;
  const double initial = peak / cfg.div_factor;
  const double final_lr = peak / cfg.final_div_factor;
  auto anneal = [](double start, double end, double frac) {
    return end + (start - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  const int last = total_steps - 1;
  const int knee = std::min(static_cast<int>(std::lround(cfg.pct_start * total_steps)), last);
  if (step <= knee) {
    if (knee == 0) return peak;
    return anneal(initial, peak, static_cast<double>(step) / knee);
  }
  return anneal(peak, final_lr, static_cast<double>(step - knee) / (last - knee));
}

void adamw_update(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                  const TrainConfig& cfg, std::span<const bool> decay_mask) {
  if (params.size() != grads.size() || (!decay_mask.empty() && decay_mask.size() != params.size())) {
    throw PreconditionError("adamw: parameter, gradient and mask sizes differ");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw PreconditionError("adamw: optimizer state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, state.step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (decay_mask.empty() || decay_mask[i]) params[i] -= lr * cfg.weight_decay * params[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

void adamw_step(AlignHead& head, const AlignHead& grad, AdamState& state, double lr, const TrainConfig& cfg) {
  const std::size_t n = head.num_params();
  std::vector<double> p(n), g(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = head.get_param(i);
    g[i] = grad.get_param(i);
  }
  std::unique_ptr<bool[]> decay(new bool[n]);
  std::fill_n(decay.get(), n, true);
  decay[n - 1] = false;  // temperature
  adamw_update(p, g, state, lr, cfg, std::span<const bool>(decay.get(), n));
  for (std::size_t i = 0; i < n; ++i) head.set_param(i, p[i]);
  head.clamp_temperature();
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, int batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (out.size() >= 2 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

TrainResult train_align(const std::vector<AlignSample>& samples, const TrainConfig& cfg) {
  if (samples.empty()) throw PreconditionError("train_align: empty dataset");
  return train_align(samples, cfg, AlignHead::initialize(static_cast<int>(samples.front().frozen.size()), cfg.seed));
}

TrainResult train_align(const std::vector<AlignSample>& samples, const TrainConfig& cfg, const AlignHead& init) {
  cfg.validate();
  TrainResult result{init, {}};
  if (cfg.epochs == 0) return result;
  if (samples.size() < 2) throw PreconditionError("train_align: needs at least 2 samples");
  const Eigen::Index d = init.dim();
  const Eigen::Index t = samples.front().tokens.rows();
  for (const auto& s : samples) {
    if (s.frozen.size() != d || s.image.size() != d || s.tokens.cols() != d) {
      throw PreconditionError("train_align: sample '" + s.id + "' has dimension mismatching the head");
    }
    if (s.tokens.rows() != t) throw PreconditionError("train_align: sample '" + s.id + "' has a different token count");
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = make_batches(order, cfg.batch).size();
  const int total_steps = static_cast<int>(steps_per_epoch) * cfg.epochs;

  std::mt19937_64 rng(cfg.seed);
  AdamState state;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> shuffled = order;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (const auto& idx : make_batches(shuffled, cfg.batch)) {
      AlignBatch batch;
      batch.frozen.resize(static_cast<Eigen::Index>(idx.size()), d);
      batch.image.resize(static_cast<Eigen::Index>(idx.size()), d);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const AlignSample& s = samples[idx[r]];
        batch.tokens.push_back(s.tokens);
        batch.frozen.row(static_cast<Eigen::Index>(r)) = s.frozen.transpose();
        batch.image.row(static_cast<Eigen::Index>(r)) = s.image.transpose();
      }
      const LossResult loss = composite_loss(result.head, batch);
      const double lr = onecycle_lr(step, total_steps, cfg);
      result.curve.push_back(LossRecord{step, lr, loss.contrastive, loss.distance, loss.total});
      adamw_step(result.head, loss.grad, state, lr, cfg);
      ++step;
    }
  }
  return result;
}

std::vector<AlignSample> load_align_dataset(const FeatureManifest& manifest) {
  std::vector<AlignSample> samples;
  Eigen::Index d = -1;
  for (const ShapeFeatures& s : manifest.shapes) {
    for (const auto& [field, path] : {std::pair{"depth_tokens", &s.depth_tokens}, std::pair{"depth_frozen", &s.depth_frozen},
                                      std::pair{"image", &s.image}}) {
      if (!*path) throw ValidationError("shape '" + s.id + "' has no \"" + field + "\" features");
    }
    AlignSample a;
    a.id = s.id;
    a.tokens = read_embeddings(*s.depth_tokens).data;
    const EmbeddingMatrix frozen = read_embeddings(*s.depth_frozen);
    if (frozen.rows() != 1) throw ValidationError("shape '" + s.id + "': depth_frozen must hold exactly one row");
    a.frozen = frozen.data.row(0).transpose();
    a.image = mean_pool_normalized(read_embeddings(*s.image).data);
    if (d < 0) d = a.frozen.size();
    if (a.frozen.size() != d || a.tokens.cols() != d || a.image.size() != d) {
      throw ValidationError("shape '" + s.id + "': feature dimensions disagree with the rest of the manifest");
    }
    samples.push_back(std::move(a));
  }
  return samples;
}

void write_checkpoint(const AlignHead& head, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write("DLHD", 4);
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(head.dim()));
  for (std::size_t k = 0; k < 4; ++k) {
    const Eigen::MatrixXd& m = param_block(head, k);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(out, m(i, j));
    }
  }
  put<double>(out, head.log_inv_tau);
  if (!out) throw Error("short write to '" + path.string() + "'");
}

AlignHead read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 || std::memcmp(buf.data(), "DLHD", 4) != 0) throw Error("checkpoint: bad magic");
  std::size_t pos = 4;
  if (take<std::uint32_t>(buf, pos) != 1) throw Error("checkpoint: unsupported version");
  const auto d = static_cast<int>(take<std::uint32_t>(buf, pos));
  const std::size_t expected = 12 + (4 * static_cast<std::size_t>(d) * d + 1) * sizeof(double);
  if (buf.size() != expected) throw Error("checkpoint: size does not match dimension");
  AlignHead head = AlignHead::zeros(d);
  for (std::size_t k = 0; k < 4; ++k) {
    Eigen::MatrixXd& m = param_block(head, k);
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) m(i, j) = take<double>(buf, pos);
    }
  }
  head.log_inv_tau = take<double>(buf, pos);
  return head;
}

void write_loss_csv(const std::vector<LossRecord>& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "step,lr,loss_cont,loss_dist,loss_total\n";
  char line[160];
  for (const LossRecord& r : curve) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g\n", r.step, r.lr, r.contrastive, r.distance,
                  r.total);
    out << line;
  }
}

}  // namespace dlign
