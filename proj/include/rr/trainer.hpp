// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-reflective contrastive training of the projection head.
//
// For sample i of a batch with queries q, positives P and reflective
// negatives R (all image-side rows pass through the head):
//
//   s_j   = <q_i, P_j> / tau           j = 0..N-1 (j != i are in-batch negatives)
//   s_ref = <q_i, R_i> / tau_ref       tau_ref = tau, or 1 for the literal form
//   loss_i = logsumexp(s_0..s_{N-1}, s_ref) - s_i
//
// "normal" mode drops s_ref, giving plain in-batch InfoNCE. The batch loss is
// the mean over samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rr/detail/io.hpp"
#include "rr/error.hpp"
#include "rr/head.hpp"
#include "rr/log.hpp"
#include "rr/miner.hpp"
#include "rr/parallel.hpp"
#include "rr/random.hpp"
#include "rr/store.hpp"

namespace rr {

enum class LossMode { normal, real };

inline std::string_view to_string(LossMode m) { return m == LossMode::normal ? "normal" : "real"; }

inline LossMode parse_loss_mode(std::string_view s) {
  if (s == "normal") return LossMode::normal;
  if (s == "real") return LossMode::real;
  fail(Errc::InvalidArgument, "unknown mode '" + std::string(s) + "' (expected normal or real)");
}

struct LossConfig {
  double tau = 0.07;
  bool apply_tau_to_reflective = true;
  LossMode mode = LossMode::real;

  void validate() const {
    require(tau > 0.0 && std::isfinite(tau), Errc::InvalidArgument, "tau must be a positive finite number");
  }
};

struct TrainBatch {
  std::vector<std::vector<double>> queries;  // frozen text side
  std::vector<std::size_t> positive_rows;
  std::vector<std::size_t> reflective_rows;  // empty when no assignment was given
  std::vector<std::string> prompt_ids;

  std::size_t size() const { return positive_rows.size(); }
  friend bool operator==(const TrainBatch&, const TrainBatch&) = default;
};

struct BatchPlan {
  std::vector<TrainBatch> batches;
  std::vector<std::string> dropped;  // prompts in a dropped singleton remainder
};

/// Shuffles prompts with a generator keyed on (seed, epoch) and cuts them
/// into chunks of n. A trailing remainder of one prompt is dropped; a
/// single-sample normal-mode batch has no negatives.
///
/// With an assignment every prompt must have an entry and the batch carries
/// reflective rows; without one, reflective_rows stays empty.
inline BatchPlan assemble_batches(const GeneratedEmbeddingSet& pairs, const ReflectiveAssignment* assignment,
                                  std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  if (pairs.empty()) fail(Errc::EmptyInput, "no prompts to batch");
  require(n >= 1, Errc::InvalidArgument, "batch size must be >= 1");
  require(n <= pairs.size(), Errc::InvalidArgument,
          "batch size " + std::to_string(n) + " exceeds prompt count " + std::to_string(pairs.size()));

  std::vector<std::size_t> reflective(pairs.size());
  if (assignment) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& p = pairs.prompts[i];
      auto it = assignment->find(p.prompt_id);
      if (it == assignment->end()) fail(Errc::MissingAssignment, "no reflective negative for '" + p.prompt_id + "'");
      if (it->second.negative_row == p.positive_row)
        fail(Errc::MalformedRecord, "reflective negative equals the positive for '" + p.prompt_id + "'");
      reflective[i] = it->second.negative_row;
    }
  }

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng({seed, epoch});
  rng.shuffle(std::span<std::size_t>(order));

  BatchPlan plan;
  for (std::size_t start = 0; start < order.size(); start += n) {
    const std::size_t end = std::min(order.size(), start + n);
    if (end - start == 1 && n > 1) {
      plan.dropped.push_back(pairs.prompts[order[start]].prompt_id);
      break;
    }
    TrainBatch b;
    for (std::size_t k = start; k < end; ++k) {
      const auto& p = pairs.prompts[order[k]];
      b.queries.emplace_back(p.query.begin(), p.query.end());
      b.positive_rows.push_back(p.positive_row);
      if (assignment) b.reflective_rows.push_back(reflective[order[k]]);
      b.prompt_ids.push_back(p.prompt_id);
    }
    plan.batches.push_back(std::move(b));
  }
  return plan;
}

struct LossResult {
  double loss = 0.0;
  HeadGradients grads;
};

namespace detail {

inline void check_batch(const TrainBatch& batch, const EmbeddingStore& db, const ProjectionHead& head, bool need_reflective) {
  const std::size_t n = batch.size();
  if (n == 0) fail(Errc::ShapeMismatch, "empty batch");
  if (batch.queries.size() != n) fail(Errc::ShapeMismatch, "queries and positives differ in length");
  if (need_reflective && batch.reflective_rows.size() != n)
    fail(Errc::ShapeMismatch, "real mode needs one reflective row per sample");
  if (db.dim() != head.d) fail(Errc::ShapeMismatch, "db dim differs from head dim");
  for (const auto& q : batch.queries)
    if (q.size() != head.d) fail(Errc::ShapeMismatch, "query dim differs from head dim");
  for (auto r : batch.positive_rows)
    if (r >= db.count()) fail(Errc::ShapeMismatch, "positive row out of range");
  if (need_reflective)
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.reflective_rows[i] >= db.count()) fail(Errc::ShapeMismatch, "reflective row out of range");
      if (batch.reflective_rows[i] == batch.positive_rows[i])
        fail(Errc::ShapeMismatch, "reflective row equals positive row");
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Mean batch loss and its exact gradient w.r.t. the head weights.
inline LossResult compute_loss(const TrainBatch& batch, const EmbeddingStore& db, const ProjectionHead& head,
                               const LossConfig& cfg) {
  cfg.validate();
  const bool real = cfg.mode == LossMode::real;
  detail::check_batch(batch, db, head, real);
  const std::size_t n = batch.size();
  const std::size_t d = head.d;

  // Image-side embeddings: positives 0..n-1, then reflectives n..2n-1.
  const std::size_t m = real ? 2 * n : n;
  std::vector<ForwardTrace> traces(m);
  parallel_for(m, [&](std::size_t k) {
    const std::size_t row = k < n ? batch.positive_rows[k] : batch.reflective_rows[k - n];
    std::vector<double> v(db.row(row).begin(), db.row(row).end());
    traces[k] = forward_trace(head, v);
  }, 8);

  const double inv_tau = 1.0 / cfg.tau;
  const double inv_tau_ref = cfg.apply_tau_to_reflective ? inv_tau : 1.0;
  std::vector<std::vector<double>> upstream(m, std::vector<double>(d, 0.0));
  double total = 0.0;
  std::vector<double> logits(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& q = batch.queries[i];
    const std::size_t c = real ? n + 1 : n;
    for (std::size_t j = 0; j < n; ++j) logits[j] = detail::dot(q, traces[j].out) * inv_tau;
    if (real) logits[n] = detail::dot(q, traces[n + i].out) * inv_tau_ref;

    double mx = logits[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - logits[i];

    // d loss_i / d logit_j = softmax_j - [j == i], scaled by 1/n for the mean.
    for (std::size_t j = 0; j < c; ++j) {
      const double g = (std::exp(logits[j] - lse) - (j == i ? 1.0 : 0.0)) / static_cast<double>(n);
      const double scale = j < n ? g * inv_tau : g * inv_tau_ref;
      auto& up = j < n ? upstream[j] : upstream[n + i];
      for (std::size_t k = 0; k < d; ++k) up[k] += scale * q[k];
    }
  }
  const double loss = total / static_cast<double>(n);
  if (!std::isfinite(loss)) fail(Errc::NonFiniteLoss, "batch loss is not finite");

  std::vector<HeadGradients> per(m);
  parallel_for(m, [&](std::size_t k) {
    per[k] = zero_gradients(head);
    accumulate_backward(head, traces[k], upstream[k], per[k]);
  }, 8);
  LossResult out{loss, zero_gradients(head)};
  for (const auto& g : per) out.grads += g;
  return out;
}

/// Textbook in-batch InfoNCE (positive against the other samples'
/// positives), evaluated independently of compute_loss.
inline double infonce_reference(const TrainBatch& batch, const EmbeddingStore& db, const ProjectionHead& head,
                                const LossConfig& cfg) {
  cfg.validate();
  detail::check_batch(batch, db, head, false);
  const std::size_t n = batch.size();
  std::vector<std::vector<double>> images;
  images.reserve(n);
  for (auto r : batch.positive_rows) images.push_back(forward(head, db.row(r)));

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> sims(n);
    for (std::size_t j = 0; j < n; ++j) sims[j] = detail::dot(batch.queries[i], images[j]) / cfg.tau;
    const double mx = *std::max_element(sims.begin(), sims.end());
    double denom = 0.0;
    for (double s : sims) denom += std::exp(s - mx);
    total += -std::log(std::exp(sims[i] - mx) / denom);
  }
  const double loss = total / static_cast<double>(n);
  if (!std::isfinite(loss)) fail(Errc::NonFiniteLoss, "reference loss is not finite");
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  fail(Errc::InvalidArgument, "unknown optimizer '" + std::string(s) + "' (expected sgd or adam)");
}

struct TrainerConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::vector<std::size_t> checkpoint_epochs{2, 4, 6, 8, 10};
  /// Re-mine reflective negatives at the start of every epoch against the
  /// database as projected by the current head.
  bool remine_each_epoch = false;
  /// Checkpoints and train_log.jsonl are written here when set.
  std::optional<std::filesystem::path> out_dir;

  void validate() const {
    require(epochs >= 1, Errc::InvalidArgument, "epochs must be >= 1");
    require(batch_size >= 1, Errc::InvalidArgument, "batch_size must be >= 1");
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), Errc::InvalidArgument,
            "learning_rate must be finite and >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, Errc::InvalidArgument,
            "adam betas must be in [0, 1)");
    require(eps > 0.0, Errc::InvalidArgument, "eps must be > 0");
  }
};

class Optimizer {
 public:
  Optimizer(const TrainerConfig& cfg, const ProjectionHead& head)
      : kind_(cfg.optimizer), lr_(cfg.learning_rate), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {
    if (kind_ == OptimizerKind::adam) {
      m_ = zero_gradients(head);
      v_ = zero_gradients(head);
    }
  }

  void step(ProjectionHead& head, const HeadGradients& g) {
    require(g.d == head.d && g.h == head.h, Errc::ShapeMismatch, "gradient shape differs from head");
    auto params = tensors(head);
    auto grads = tensors(g);
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t t = 0; t < params.size(); ++t)
        for (std::size_t i = 0; i < params[t].size(); ++i) params[t][i] -= lr_ * grads[t][i];
      return;
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    auto ms = tensors(m_);
    auto vs = tensors(v_);
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i) {
        const double gi = grads[t][i];
        ms[t][i] = beta1_ * ms[t][i] + (1.0 - beta1_) * gi;
        vs[t][i] = beta2_ * vs[t][i] + (1.0 - beta2_) * gi * gi;
        params[t][i] -= lr_ * (ms[t][i] / c1) / (std::sqrt(vs[t][i] / c2) + eps_);
      }
  }

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
  HeadGradients m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainReport {
  std::vector<double> epoch_losses;
  std::vector<std::filesystem::path> checkpoints;
  ProjectionHead head;
};

inline std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%02zu.rrph", epoch);
  return buf;
}

inline constexpr const char* kTrainLogName = "train_log.jsonl";

/// Called with (epoch, head) at every checkpoint epoch.
using CheckpointHook = std::function<void(std::size_t, const ProjectionHead&)>;

inline TrainReport train(const EmbeddingStore& db, const GeneratedEmbeddingSet& pairs,
                         const ReflectiveAssignment* assignment, ProjectionHead head, const LossConfig& loss_cfg,
                         const TrainerConfig& cfg, const CheckpointHook& on_checkpoint = {}) {
  loss_cfg.validate();
  cfg.validate();
  if (db.dim() != head.d || pairs.dim != head.d) fail(Errc::DimMismatch, "db, prompts and head disagree on dim");
  validate(pairs, db.count());
  const bool real = loss_cfg.mode == LossMode::real;
  if (real && !assignment && !cfg.remine_each_epoch)
    fail(Errc::MissingAssignment, "real mode needs a reflective assignment");
  if (cfg.out_dir) std::filesystem::create_directories(*cfg.out_dir);

  const std::set<std::size_t> ckpt(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end());
  Optimizer opt(cfg, head);
  TrainReport report;
  std::string log_text;
  ReflectiveAssignment remined;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const ReflectiveAssignment* assign = assignment;
    if (cfg.remine_each_epoch) {
      const auto projected = project_rows(head, db.vectors());
      const std::vector<float> rows(projected.begin(), projected.end());
      remined = mine_reflective_rows(pairs, rows, db.dim());
      assign = &remined;
    }
    auto plan = assemble_batches(pairs, assign, cfg.batch_size, cfg.seed, epoch);
    for (const auto& id : plan.dropped)
      log(LogLevel::Info, "epoch " + std::to_string(epoch) + ": dropped singleton remainder '" + id + "'");

    double sum = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : plan.batches) {
      auto r = compute_loss(batch, db, head, loss_cfg);
      opt.step(head, r.grads);
      sum += r.loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    const double mean = seen ? sum / static_cast<double>(seen) : 0.0;
    if (!std::isfinite(mean) || !all_finite(head))
      fail(Errc::DivergenceDetected, "epoch " + std::to_string(epoch) + " mean loss is not finite");
    report.epoch_losses.push_back(mean);
    log(LogLevel::Info, "epoch " + std::to_string(epoch) + " mean loss " + std::to_string(mean));

    nlohmann::ordered_json rec;
    rec["epoch"] = epoch;
    rec["mean_loss"] = mean;
    rec["checkpoint"] = nullptr;
    if (ckpt.count(epoch)) {
      if (cfg.out_dir) {
        const auto name = checkpoint_name(epoch);
        const auto path = *cfg.out_dir / name;
        save_head(head, path);
        report.checkpoints.push_back(path);
        rec["checkpoint"] = name;
      }
      if (on_checkpoint) on_checkpoint(epoch, head);
    }
    log_text += rec.dump() + "\n";
    if (cfg.out_dir) detail::write_text_atomic(*cfg.out_dir / kTrainLogName, log_text);
  }
  report.head = std::move(head);
  return report;
}

}  // namespace rr
