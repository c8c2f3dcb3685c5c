#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dcollab/checkpoint.hpp"
#include "dcollab/encode.hpp"
#include "dcollab/metrics.hpp"
#include "dcollab/net.hpp"
#include "dcollab/rng.hpp"

namespace dcollab {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  // 0.1 trains the desk-scale nets well within 60 epochs; set to 0 to fall
  // back to the linear-scaling rule 0.1 * batch_size / 256.
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 32;
  OptimizerConfig optimizer;
  double lr_decay_factor = 0.1;
  std::vector<double> lr_decay_at = {0.5, 0.75};  // fractions of total epochs
  std::uint64_t seed = 0;
  double train_ratio = 0.5;  // deterministic prefix split
  int eval_every = 1;
  int summary_window = 5;  // test metrics averaged over the last N epochs
  // Interrupt after this many epochs without touching the lr schedule
  // (0 = run to `epochs`). A checkpoint taken at the interruption resumes
  // the exact uninterrupted trajectory.
  int stop_after_epochs = 0;

  double base_learning_rate() const {
    return optimizer.learning_rate > 0.0
               ? optimizer.learning_rate
               : 0.1 * static_cast<double>(batch_size) / 256.0;
  }

  double learning_rate_at(int epoch) const {
    double lr = base_learning_rate();
    for (double frac : lr_decay_at)
      if (epoch >= static_cast<int>(frac * epochs)) lr *= lr_decay_factor;
    return lr;
  }

  void validate() const {
    if (epochs < 1 || batch_size < 1)
      throw UsageError("train config: epochs and batch_size must be >= 1");
    if (train_ratio <= 0.0 || train_ratio >= 1.0)
      throw UsageError("train config: train ratio must lie in (0,1), got " +
                       std::to_string(train_ratio));
    if (eval_every < 1)
      throw UsageError("train config: eval_every must be >= 1");
  }
};

// First floor(n * ratio) samples train, the rest test. The partition depends
// only on (n, ratio) -- no shuffling before splitting.
struct Split {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> test;
};

inline Split prefix_split(std::int64_t n, double ratio) {
  if (ratio <= 0.0 || ratio >= 1.0)
    throw UsageError("prefix_split: ratio must lie in (0,1)");
  const auto n_train = static_cast<std::int64_t>(
      std::floor(static_cast<double>(n) * ratio));
  if (n_train < 1 || n_train >= n)
    throw UsageError("prefix_split: ratio " + std::to_string(ratio) +
                     " leaves an empty side for " + std::to_string(n) +
                     " samples");
  Split s;
  for (std::int64_t i = 0; i < n_train; ++i) s.train.push_back(i);
  for (std::int64_t i = n_train; i < n; ++i) s.test.push_back(i);
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// SGD with momentum and decoupled-from-nothing classic L2 weight decay:
//   u = g + wd * w;  buf = m * buf + u;  w -= lr * buf
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(MultiTaskNet<T>& net, const OptimizerConfig& cfg)
      : momentum_coef_(cfg.momentum), weight_decay_(cfg.weight_decay) {
    net.visit([&](const std::string& name, Tensor<T>& t, ParamKind kind) {
      if (kind != ParamKind::kParam) return;
      names_.push_back(name);
      params_.push_back(&t);
      buffers_.emplace_back(t.numel(), T(0));
    });
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = *params_[i];
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& buf = buffers_[i];
      T* w = p.data();
      const T m = static_cast<T>(momentum_coef_);
      const T wd = static_cast<T>(weight_decay_);
      const T eta = static_cast<T>(lr);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const T u = g[k] + wd * w[k];
        buf[k] = m * buf[k] + u;
        w[k] -= eta * buf[k];
      }
    }
  }

  void snapshot(Checkpoint& ckpt) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::vector<float> values(buffers_[i].begin(), buffers_[i].end());
      ckpt.add("opt.momentum." + names_[i], params_[i]->shape(), "opt",
               values);
    }
  }

  void restore(const Checkpoint& ckpt) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const CheckpointTensor* src = ckpt.find("opt.momentum." + names_[i]);
      if (!src)
        throw FormatError("checkpoint: missing optimizer state for '" +
                          names_[i] + "'");
      for (std::size_t k = 0; k < src->values.size(); ++k)
        buffers_[i][k] = static_cast<T>(src->values[k]);
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>*> params_;
  std::vector<std::vector<T>> buffers_;
  double momentum_coef_;
  double weight_decay_;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// loss = L_landmarks + sum_related lambda_t * L_t, where each L_t is the mean
// softmax cross entropy over the task's subproblems. The main (landmarks)
// weight is pinned to 1; lambda applies to related tasks only.
template <typename T>
Tensor<T> multitask_loss(const std::vector<std::vector<Tensor<T>>>& logits,
                         const EncodedTargets& targets,
                         const std::vector<TaskSpec>& tasks,
                         std::vector<double>* per_task_loss = nullptr) {
  if (logits.size() != tasks.size() || targets.labels.size() != tasks.size())
    throw UsageError("multitask_loss: got " + std::to_string(logits.size()) +
                     " logit groups / " + std::to_string(targets.labels.size()) +
                     " target groups for " + std::to_string(tasks.size()) +
                     " tasks");
  if (per_task_loss) per_task_loss->assign(tasks.size(), 0.0);

  Tensor<T> total;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = tasks[t];
    if (logits[t].size() != static_cast<std::size_t>(task.subproblems()) ||
        targets.labels[t].size() != logits[t].size())
      throw UsageError("multitask_loss: task '" + task.name + "' expects " +
                       std::to_string(task.subproblems()) + " subproblems");
    Tensor<T> acc;
    for (std::size_t j = 0; j < logits[t].size(); ++j) {
      Tensor<T> ce = softmax_cross_entropy(logits[t][j], targets.labels[t][j]);
      acc = acc.defined() ? add(acc, ce) : ce;
    }
    Tensor<T> task_loss =
        scale(acc, T(1) / static_cast<T>(logits[t].size()));
    if (per_task_loss)
      (*per_task_loss)[t] = static_cast<double>(task_loss.item());
    const double weight =
        task.kind == TaskSpec::Kind::kLandmarks ? 1.0 : task.loss_weight;
    Tensor<T> weighted = scale(task_loss, static_cast<T>(weight));
    total = total.defined() ? add(total, weighted) : weighted;
  }
  return total;
}

// lambda = exp(gamma), gamma ~ U(ln 1e-4, ln 1); one weight per related task.
inline std::vector<double> sample_task_weights(Rng& rng, int n_related) {
  std::vector<double> out(static_cast<std::size_t>(n_related));
  const double lo = std::log(1e-4), hi = std::log(1.0);
  for (auto& w : out) w = std::exp(rng.uniform(lo, hi));
  return out;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::vector<double> train_loss_per_task;
  bool evaluated = false;
  double failure_rate = 0.0;
  double mean_error = 0.0;
  double wall_ms = 0.0;
};

struct RunManifest {
  std::string strategy;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string dataset_hash;
  std::vector<std::string> task_names;
  std::vector<EpochRecord> epochs;
  std::int64_t global_step = 0;
  double summary_failure_rate = 0.0;  // mean over last summary_window epochs
  double summary_mean_error = 0.0;
  int summary_window = 5;
  double wall_ms = 0.0;

  nlohmann::json epoch_json(const EpochRecord& e) const {
    nlohmann::json j;
    j["epoch"] = e.epoch;
    j["lr"] = e.lr;
    j["train_loss"] = e.train_loss;
    nlohmann::json per;
    for (std::size_t t = 0; t < task_names.size(); ++t)
      per[task_names[t]] = e.train_loss_per_task[t];
    j["train_loss_per_task"] = per;
    if (e.evaluated) {
      j["failure_rate"] = e.failure_rate;
      j["mean_error"] = e.mean_error;
    }
    j["wall_ms"] = e.wall_ms;
    return j;
  }

  nlohmann::json summary_json() const {
    nlohmann::json j;
    j["strategy"] = strategy;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["dataset_hash"] = dataset_hash;
    j["epochs"] = epochs.size();
    j["global_step"] = global_step;
    j["summary_window"] = summary_window;
    j["failure_rate"] = summary_failure_rate;
    j["mean_error"] = summary_mean_error;
    j["wall_ms"] = wall_ms;
    return j;
  }

  void write(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
      std::ofstream out(fs::path(dir) / "manifest.jsonl",
                        std::ios::binary | std::ios::trunc);
      if (!out) throw FormatError("manifest: cannot write to '" + dir + "'");
      for (const auto& e : epochs) out << epoch_json(e).dump() << "\n";
    }
    {
      std::ofstream out(fs::path(dir) / "summary.json",
                        std::ios::binary | std::ios::trunc);
      if (!out) throw FormatError("summary: cannot write to '" + dir + "'");
      out << summary_json().dump(2) << "\n";
    }
  }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct RunContext {
  std::string out_dir;      // when set: manifest.jsonl, summary.json,
                            // checkpoint.bin are written here
  std::string config_hash;  // recorded in manifest and checkpoint
  const Checkpoint* resume = nullptr;
};

template <typename T>
RunManifest train(MultiTaskNet<T>& net, const Dataset& ds,
                  const TrainConfig& cfg, const RunContext& ctx = {}) {
  cfg.validate();
  const auto t_run0 = std::chrono::steady_clock::now();

  const Split split = prefix_split(ds.size(), cfg.train_ratio);
  SgdOptimizer<T> opt(net, cfg.optimizer);
  // Per-epoch substreams: epoch k's batch order is a pure function of
  // (seed, k), so a resumed run replays the exact schedule of an
  // uninterrupted one.
  const Rng rng_train = Rng(cfg.seed).child("training");

  RunManifest manifest;
  manifest.strategy = strategy_name(net.strategy);
  manifest.seed = cfg.seed;
  manifest.config_hash = ctx.config_hash;
  manifest.dataset_hash = to_hex(ds.content_hash());
  manifest.summary_window = cfg.summary_window;
  for (const auto& t : net.tasks) manifest.task_names.push_back(t.name);

  int start_epoch = 0;
  std::int64_t global_step = 0;
  if (ctx.resume) {
    restore_net(net, *ctx.resume);
    opt.restore(*ctx.resume);
    start_epoch = ctx.resume->epoch;
    global_step = ctx.resume->global_step;
  }

  const int end_epoch = cfg.stop_after_epochs > 0
                            ? std::min(cfg.epochs, cfg.stop_after_epochs)
                            : cfg.epochs;
  int completed_epoch = start_epoch;
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const auto t_epoch0 = std::chrono::steady_clock::now();
    const double lr = cfg.learning_rate_at(epoch);
    std::vector<std::int64_t> order = split.train;
    Rng epoch_rng = rng_train.child(static_cast<std::uint64_t>(epoch));
    epoch_rng.shuffle(order);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss_per_task.assign(net.tasks.size(), 0.0);
    int steps = 0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::int64_t> batch_idx(order.begin() + start,
                                          order.begin() + end);
      Tensor<T> batch = make_batch<T>(ds, batch_idx);
      EncodedTargets targets = encode_targets(ds, batch_idx, net.tasks);

      GradTape<T> tape;
      auto logits = net.forward(batch, Mode::kTrain);
      std::vector<double> per_task;
      Tensor<T> loss = multitask_loss(logits, targets, net.tasks, &per_task);
      const double loss_v = static_cast<double>(loss.item());
      if (!std::isfinite(loss_v)) {
        std::string task = "?";
        for (std::size_t t = 0; t < per_task.size(); ++t)
          if (!std::isfinite(per_task[t])) task = net.tasks[t].name;
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(steps) + ", task " + task);
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step(lr);

      rec.train_loss += loss_v;
      for (std::size_t t = 0; t < per_task.size(); ++t)
        rec.train_loss_per_task[t] += per_task[t];
      ++steps;
      ++global_step;
    }
    if (steps > 0) {
      rec.train_loss /= steps;
      for (auto& v : rec.train_loss_per_task) v /= steps;
    }

    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == end_epoch) {
      const FailureRateResult r = evaluate(net, ds, split.test, 128);
      rec.evaluated = true;
      rec.failure_rate = r.failure_rate;
      rec.mean_error = r.mean_error;
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t_epoch0)
                      .count();
    manifest.epochs.push_back(std::move(rec));
    completed_epoch = epoch + 1;
  }
  manifest.global_step = global_step;

  // Final report: arithmetic mean of the last summary_window evaluated
  // epochs, recomputable from the stored per-epoch records.
  {
    double fr = 0.0, me = 0.0;
    int n = 0;
    for (auto it = manifest.epochs.rbegin();
         it != manifest.epochs.rend() && n < cfg.summary_window; ++it) {
      if (!it->evaluated) continue;
      fr += it->failure_rate;
      me += it->mean_error;
      ++n;
    }
    if (n > 0) {
      manifest.summary_failure_rate = fr / n;
      manifest.summary_mean_error = me / n;
    }
  }
  manifest.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t_run0)
                         .count();

  if (!ctx.out_dir.empty()) {
    manifest.write(ctx.out_dir);
    Checkpoint ckpt;
    ckpt.global_step = global_step;
    ckpt.epoch = completed_epoch;
    ckpt.config_hash = ctx.config_hash;
    ckpt.rng_state = rng_train.state();  // informational; resume derives
                                         // per-epoch streams from the seed
    snapshot_net(net, ckpt);
    opt.snapshot(ckpt);
    write_checkpoint(
        (std::filesystem::path(ctx.out_dir) / "checkpoint.bin").string(),
        ckpt);
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Scarcity sweep
// ---------------------------------------------------------------------------

struct SweepCell {
  double ratio = 0.0;
  Strategy strategy = Strategy::kSingle;
  std::uint64_t seed = 0;
  double failure_rate = 0.0;
  double mean_error = 0.0;
};

// One trained run per (ratio, strategy, seed); cells are independent and the
// pool executes them in parallel. hard_widened targets the collaboration
// network's parameter count for the same config.
template <typename T>
std::vector<SweepCell> scarcity_sweep(const Dataset& ds,
                                      const UnderlyingNetConfig& netcfg,
                                      const std::vector<TaskSpec>& tasks,
                                      const std::vector<Strategy>& strategies,
                                      const std::vector<double>& ratios,
                                      const std::vector<std::uint64_t>& seeds,
                                      const TrainConfig& base, int jobs = 1) {
  if (ratios.empty() || strategies.empty() || seeds.empty())
    throw UsageError("scarcity_sweep: empty ratio/strategy/seed list");
  for (double r : ratios)
    if (r <= 0.0 || r >= 1.0)
      throw UsageError("scarcity_sweep: ratio " + std::to_string(r) +
                       " outside (0,1)");

  std::vector<SweepCell> cells;
  for (double ratio : ratios)
    for (Strategy s : strategies)
      for (std::uint64_t seed : seeds) {
        SweepCell c;
        c.ratio = ratio;
        c.strategy = s;
        c.seed = seed;
        cells.push_back(c);
      }

  const std::int64_t collab_target =
      expected_param_count(netcfg, tasks, Strategy::kCollaboration);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      SweepCell& c = cells[i];
      TrainConfig cfg = base;
      cfg.train_ratio = c.ratio;
      cfg.seed = c.seed;
      BuildOptions opts;
      if (c.strategy == Strategy::kHardWidened)
        opts.widen_target = collab_target;
      MultiTaskNet<T> net =
          MultiTaskNet<T>::build(netcfg, tasks, c.strategy, c.seed, opts);
      const RunManifest m = train(net, ds, cfg);
      c.failure_rate = m.summary_failure_rate;
      c.mean_error = m.summary_mean_error;
    }
  };

  const int n_workers =
      std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return cells;
}

inline void write_sweep_csv(const std::vector<SweepCell>& cells,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("sweep: cannot open '" + path + "'");
  out << csv_row({"ratio", "strategy", "seed", "failure_rate", "mean_error"});
  for (const auto& c : cells)
    out << csv_row({format_double(c.ratio), strategy_name(c.strategy),
                    std::to_string(c.seed), format_double(c.failure_rate),
                    format_double(c.mean_error)});
  if (!out) throw FormatError("sweep: short write to '" + path + "'");
}

}  // namespace dcollab
