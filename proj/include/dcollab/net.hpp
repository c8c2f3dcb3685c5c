#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dcollab/collab.hpp"
#include "dcollab/layers.hpp"
#include "dcollab/ops.hpp"
#include "dcollab/rng.hpp"

namespace dcollab {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Strategy {
  kSingle,         // independent per-task columns, no connections
  kHard,           // one shared trunk, per-task heads
  kHardWidened,    // hard sharing widened to a target parameter count
  kCrossStitch,    // per-depth linear combination of task columns
  kCollaboration,  // per-depth collaborative blocks
};

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kSingle: return "single";
    case Strategy::kHard: return "hard";
    case Strategy::kHardWidened: return "hard_widened";
    case Strategy::kCrossStitch: return "cross_stitch";
    case Strategy::kCollaboration: return "collaboration";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& name) {
  if (name == "single") return Strategy::kSingle;
  if (name == "hard") return Strategy::kHard;
  if (name == "hard_widened") return Strategy::kHardWidened;
  if (name == "cross_stitch") return Strategy::kCrossStitch;
  if (name == "collaboration") return Strategy::kCollaboration;
  throw UsageError("unknown strategy '" + name +
                   "' (valid: single, hard, hard_widened, cross_stitch, "
                   "collaboration)");
}

struct InputConfig {
  int channels = 1;
  int height = 40;
  int width = 40;
};

struct StemConfig {
  int channels = 8;
  int kernel = 3;
  int stride = 1;
  bool pool = true;  // 2x2/stride-2 max pool after the stem conv
};

struct StageConfig {
  int units = 1;
  int channels = 16;
  int first_stride = 1;
};

// Mini residual underlying network: stem conv (+ optional pool), then stages
// of two-conv residual units. One fusion point sits after the stem and after
// each stage, so fusion depth d=0 is the stem output.
struct UnderlyingNetConfig {
  InputConfig input;
  StemConfig stem;
  std::vector<StageConfig> stages;

  void validate() const {
    if (input.channels < 1 || input.height < 1 || input.width < 1)
      throw UsageError("net config: input dimensions must be positive");
    if (stem.channels < 1 || stem.kernel < 1)
      throw UsageError("net config: stem channels/kernel must be positive");
    if (stem.stride != 1 && stem.stride != 2)
      throw UsageError("net config: stem stride must be 1 or 2");
    if (stages.empty())
      throw UsageError("net config: at least one stage required");
    for (const auto& st : stages) {
      if (st.units < 1 || st.channels < 1)
        throw UsageError("net config: stage units/channels must be positive");
      if (st.first_stride != 1 && st.first_stride != 2)
        throw UsageError("net config: stage stride must be 1 or 2");
    }
  }

  int fusion_points() const { return 1 + static_cast<int>(stages.size()); }

  // Per-task channel width at each fusion point.
  std::vector<int> fusion_channels() const {
    std::vector<int> c{stem.channels};
    for (const auto& st : stages) c.push_back(st.channels);
    return c;
  }
};

// A task's output encoding. Landmark tasks emit num_points x 2 independent
// classification subproblems with image_size bins each (1-pixel-wide bins
// per axis); categorical tasks emit one subproblem with num_classes logits.
struct TaskSpec {
  enum class Kind { kLandmarks, kCategorical };

  std::string name;
  Kind kind = Kind::kCategorical;
  int num_points = 0;
  int image_size = 0;
  int num_classes = 0;
  double loss_weight = 1.0;

  static TaskSpec landmarks(std::string name, int num_points, int image_size,
                            double loss_weight = 1.0) {
    TaskSpec t;
    t.name = std::move(name);
    t.kind = Kind::kLandmarks;
    t.num_points = num_points;
    t.image_size = image_size;
    t.loss_weight = loss_weight;
    return t;
  }

  static TaskSpec categorical(std::string name, int num_classes,
                              double loss_weight = 1.0) {
    TaskSpec t;
    t.name = std::move(name);
    t.kind = Kind::kCategorical;
    t.num_classes = num_classes;
    t.loss_weight = loss_weight;
    return t;
  }

  int subproblems() const {
    return kind == Kind::kLandmarks ? 2 * num_points : 1;
  }
  int bins() const {
    return kind == Kind::kLandmarks ? image_size : num_classes;
  }

  void validate() const {
    if (loss_weight <= 0)
      throw UsageError("task '" + name + "': loss weight must be positive");
    if (kind == Kind::kLandmarks) {
      if (num_points < 1 || image_size < 2)
        throw UsageError("task '" + name +
                         "': landmarks need num_points >= 1, image_size >= 2");
    } else if (num_classes < 2) {
      throw UsageError("task '" + name + "': needs num_classes >= 2");
    }
  }
};

struct BuildOptions {
  bool identity_init = true;    // zero final-BN gamma in each merge F_t
  int head_hidden_dim = 0;      // optional hidden FC before the affine heads
  std::int64_t widen_target = 0;  // required for Strategy::kHardWidened
};

// ---------------------------------------------------------------------------
// Network pieces
// ---------------------------------------------------------------------------

template <typename T>
struct ResidualUnit {
  Conv2dLayer<T> conv1, conv2;
  BatchNormLayer<T> bn1, bn2;
  bool projected = false;
  Conv2dLayer<T> down_conv;
  BatchNormLayer<T> down_bn;

  ResidualUnit() = default;

  ResidualUnit(int in_ch, int out_ch, int stride, Rng& rng) {
    conv1 = Conv2dLayer<T>(in_ch, out_ch, 3, stride, 1, false, rng);
    bn1 = BatchNormLayer<T>(out_ch);
    conv2 = Conv2dLayer<T>(out_ch, out_ch, 3, 1, 1, false, rng);
    bn2 = BatchNormLayer<T>(out_ch);
    projected = stride != 1 || in_ch != out_ch;
    if (projected) {
      down_conv = Conv2dLayer<T>(in_ch, out_ch, 1, stride, 0, false, rng);
      down_bn = BatchNormLayer<T>(out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> h = relu(bn1.forward(conv1.forward(x), mode));
    h = bn2.forward(conv2.forward(h), mode);
    Tensor<T> skip = projected ? down_bn.forward(down_conv.forward(x), mode) : x;
    return relu(add(skip, h));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    conv1.visit(prefix + ".conv1", fn);
    bn1.visit(prefix + ".bn1", fn);
    conv2.visit(prefix + ".conv2", fn);
    bn2.visit(prefix + ".bn2", fn);
    if (projected) {
      down_conv.visit(prefix + ".down.conv", fn);
      down_bn.visit(prefix + ".down.bn", fn);
    }
  }
};

template <typename T>
struct Column {
  Conv2dLayer<T> stem_conv;
  BatchNormLayer<T> stem_bn;
  bool stem_pool = false;
  std::vector<std::vector<ResidualUnit<T>>> stages;

  Column() = default;

  Column(const UnderlyingNetConfig& cfg, Rng& rng) {
    stem_conv = Conv2dLayer<T>(cfg.input.channels, cfg.stem.channels,
                               cfg.stem.kernel, cfg.stem.stride,
                               cfg.stem.kernel / 2, false, rng);
    stem_bn = BatchNormLayer<T>(cfg.stem.channels);
    stem_pool = cfg.stem.pool;
    int in_ch = cfg.stem.channels;
    for (const auto& st : cfg.stages) {
      std::vector<ResidualUnit<T>> units;
      units.reserve(static_cast<std::size_t>(st.units));
      for (int u = 0; u < st.units; ++u) {
        units.emplace_back(in_ch, st.channels, u == 0 ? st.first_stride : 1,
                           rng);
        in_ch = st.channels;
      }
      stages.push_back(std::move(units));
    }
  }

  int segments() const { return 1 + static_cast<int>(stages.size()); }

  // Segment 0 is the stem; segment i>0 is stage i-1.
  Tensor<T> forward_segment(int seg, const Tensor<T>& x, Mode mode) {
    if (seg == 0) {
      Tensor<T> h = relu(stem_bn.forward(stem_conv.forward(x), mode));
      if (stem_pool) h = max_pool2d(h, 2, 2);
      return h;
    }
    Tensor<T> h = x;
    for (auto& unit : stages[static_cast<std::size_t>(seg - 1)])
      h = unit.forward(h, mode);
    return h;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    stem_conv.visit(prefix + ".stem.conv", fn);
    stem_bn.visit(prefix + ".stem.bn", fn);
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t u = 0; u < stages[s].size(); ++u)
        stages[s][u].visit(prefix + ".stage" + std::to_string(s) + ".unit" +
                               std::to_string(u),
                           fn);
  }
};

template <typename T>
struct TaskHead {
  int hidden_dim = 0;
  LinearLayer<T> hidden;
  std::vector<LinearLayer<T>> subs;  // one affine per subproblem

  TaskHead() = default;

  TaskHead(const TaskSpec& task, int feature_dim, int hidden_dim_, Rng& rng)
      : hidden_dim(hidden_dim_) {
    int in_dim = feature_dim;
    if (hidden_dim > 0) {
      hidden = LinearLayer<T>(feature_dim, hidden_dim, rng);
      in_dim = hidden_dim;
    }
    subs.reserve(static_cast<std::size_t>(task.subproblems()));
    for (int j = 0; j < task.subproblems(); ++j)
      subs.emplace_back(in_dim, task.bins(), rng);
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& pooled) {
    Tensor<T> feat = pooled;
    if (hidden_dim > 0) feat = relu(hidden.forward(feat));
    std::vector<Tensor<T>> logits;
    logits.reserve(subs.size());
    for (auto& s : subs) logits.push_back(s.forward(feat));
    return logits;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    if (hidden_dim > 0) hidden.visit(prefix + ".hidden", fn);
    for (std::size_t j = 0; j < subs.size(); ++j)
      subs[j].visit(prefix + ".sub" + std::to_string(j), fn);
  }
};

// Per-depth, per-task feature-zeroing mask for the ablation study.
// mask[d][t] == false zeroes task t's map at the input of depth d's central
// aggregation. Only meaningful for Strategy::kCollaboration.
using AblationMask = std::vector<std::vector<bool>>;

// ---------------------------------------------------------------------------
// Analytic parameter counting (used by widen; cross-checked against exact
// enumeration in tests)
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t conv_params(std::int64_t in, std::int64_t out,
                                std::int64_t k) {
  return out * in * k * k;  // no bias; every conv here feeds a BN
}

inline std::int64_t bn_params(std::int64_t c) { return 2 * c; }

inline std::int64_t column_params(const UnderlyingNetConfig& cfg) {
  std::int64_t total = conv_params(cfg.input.channels, cfg.stem.channels,
                                   cfg.stem.kernel) +
                       bn_params(cfg.stem.channels);
  std::int64_t in_ch = cfg.stem.channels;
  for (const auto& st : cfg.stages) {
    for (int u = 0; u < st.units; ++u) {
      const int stride = u == 0 ? st.first_stride : 1;
      total += conv_params(in_ch, st.channels, 3) + bn_params(st.channels);
      total += conv_params(st.channels, st.channels, 3) +
               bn_params(st.channels);
      if (stride != 1 || in_ch != st.channels)
        total += conv_params(in_ch, st.channels, 1) + bn_params(st.channels);
      in_ch = st.channels;
    }
  }
  return total;
}

inline std::int64_t head_params(const TaskSpec& task, std::int64_t feat_dim,
                                int hidden_dim) {
  std::int64_t total = 0;
  std::int64_t in_dim = feat_dim;
  if (hidden_dim > 0) {
    total += hidden_dim * feat_dim + hidden_dim;
    in_dim = hidden_dim;
  }
  total += static_cast<std::int64_t>(task.subproblems()) *
           (static_cast<std::int64_t>(task.bins()) * in_dim + task.bins());
  return total;
}

}  // namespace detail

inline std::int64_t expected_param_count(const UnderlyingNetConfig& cfg,
                                         const std::vector<TaskSpec>& tasks,
                                         Strategy strategy,
                                         int head_hidden_dim = 0) {
  const std::int64_t t_count = static_cast<std::int64_t>(tasks.size());
  const std::int64_t col = detail::column_params(cfg);
  const std::int64_t feat_dim = cfg.stages.back().channels;
  std::int64_t heads = 0;
  for (const auto& task : tasks)
    heads += detail::head_params(task, feat_dim, head_hidden_dim);

  switch (strategy) {
    case Strategy::kHard:
    case Strategy::kHardWidened:
      return col + heads;
    case Strategy::kSingle:
      return t_count * col + heads;
    case Strategy::kCrossStitch: {
      std::int64_t fusion = 0;
      for (int d = 0; d < cfg.fusion_points(); ++d) fusion += t_count * t_count;
      return t_count * col + fusion + heads;
    }
    case Strategy::kCollaboration: {
      std::int64_t fusion = 0;
      for (int c : cfg.fusion_channels())
        fusion += collab_param_count(static_cast<int>(t_count), c);
      return t_count * col + fusion + heads;
    }
  }
  throw UsageError("expected_param_count: unhandled strategy");
}

// Scales all channel counts by a common factor (rounded to the nearest
// multiple of 4) so the hard-sharing network built from the result matches
// `target_params` within 5%.
inline UnderlyingNetConfig widen(const UnderlyingNetConfig& cfg,
                                 const std::vector<TaskSpec>& tasks,
                                 std::int64_t target_params,
                                 int head_hidden_dim = 0) {
  cfg.validate();
  const std::int64_t base =
      expected_param_count(cfg, tasks, Strategy::kHard, head_hidden_dim);
  if (target_params < base)
    throw UsageError("widen: target " + std::to_string(target_params) +
                     " below unwidened count " + std::to_string(base));

  auto scaled = [&](double f) {
    UnderlyingNetConfig w = cfg;
    auto round4 = [](int c, double f) {
      const int r = static_cast<int>(std::lround(c * f / 4.0)) * 4;
      return std::max(4, r);
    };
    if (f != 1.0) {
      w.stem.channels = round4(cfg.stem.channels, f);
      for (std::size_t i = 0; i < w.stages.size(); ++i)
        w.stages[i].channels = round4(cfg.stages[i].channels, f);
    }
    return w;
  };
  auto count_of = [&](double f) {
    return expected_param_count(scaled(f), tasks, Strategy::kHard,
                                head_hidden_dim);
  };

  if (base == target_params) return cfg;

  // The count is a step function of the factor (channels round to multiples
  // of 4 independently), so scan the factor range finely and keep the
  // configuration closest to the target.
  double f_best = 1.0;
  std::int64_t best = base;
  for (double f = 1.0; f <= 1024.0; f *= 1.0025) {
    const std::int64_t count = count_of(f);
    if (std::abs(count - target_params) < std::abs(best - target_params)) {
      best = count;
      f_best = f;
    }
    if (count > 2 * target_params) break;
  }
  const double rel = std::abs(static_cast<double>(best - target_params)) /
                     static_cast<double>(target_params);
  if (rel > 0.05)
    throw UsageError("widen: no channel multiple-of-4 scaling reaches within "
                     "5% of target " +
                     std::to_string(target_params) + " (closest " +
                     std::to_string(best) + ")");
  return scaled(f_best);
}

// ---------------------------------------------------------------------------
// MultiTaskNet
// ---------------------------------------------------------------------------

template <typename T>
class MultiTaskNet {
 public:
  Strategy strategy = Strategy::kSingle;
  UnderlyingNetConfig config;
  std::vector<TaskSpec> tasks;
  BuildOptions options;

  std::vector<Column<T>> columns;           // T columns, or 1 for hard
  std::vector<CollabBlock<T>> collab_blocks;  // per depth (collaboration)
  std::vector<Tensor<T>> stitch_alphas;     // per depth (cross-stitch)
  std::vector<TaskHead<T>> heads;           // per task

  static MultiTaskNet build(const UnderlyingNetConfig& cfg,
                            const std::vector<TaskSpec>& tasks,
                            Strategy strategy, std::uint64_t seed,
                            const BuildOptions& options = {}) {
    cfg.validate();
    if (tasks.empty()) throw UsageError("build: at least one task required");
    for (const auto& t : tasks) t.validate();

    MultiTaskNet net;
    net.strategy = strategy;
    net.tasks = tasks;
    net.options = options;
    net.config = cfg;
    if (strategy == Strategy::kHardWidened) {
      if (options.widen_target <= 0)
        throw UsageError("build: hard_widened requires a widen target");
      net.config = widen(cfg, tasks, options.widen_target,
                         options.head_hidden_dim);
    }
    const UnderlyingNetConfig& built_cfg = net.config;

    Rng rng = Rng(seed).child("init");
    const int t_count = static_cast<int>(tasks.size());
    const bool shared_trunk = strategy == Strategy::kHard ||
                              strategy == Strategy::kHardWidened;

    const int n_columns = shared_trunk ? 1 : t_count;
    net.columns.reserve(static_cast<std::size_t>(n_columns));
    for (int t = 0; t < n_columns; ++t) net.columns.emplace_back(built_cfg, rng);

    if (strategy == Strategy::kCollaboration) {
      for (int c : built_cfg.fusion_channels())
        net.collab_blocks.emplace_back(t_count, c, rng,
                                       options.identity_init);
    } else if (strategy == Strategy::kCrossStitch) {
      for (int d = 0; d < built_cfg.fusion_points(); ++d) {
        Tensor<T> alpha = Tensor<T>::zeros({t_count, t_count});
        for (int i = 0; i < t_count; ++i)
          for (int j = 0; j < t_count; ++j)
            alpha.data()[i * t_count + j] =
                i == j ? T(0.9)
                       : T(0.1) / static_cast<T>(std::max(1, t_count - 1));
        if (t_count == 1) alpha.data()[0] = T(1);
        alpha.set_requires_grad(true);
        net.stitch_alphas.push_back(std::move(alpha));
      }
    }

    const int feat_dim = built_cfg.stages.back().channels;
    net.heads.reserve(tasks.size());
    for (const auto& task : tasks)
      net.heads.emplace_back(task, feat_dim, options.head_hidden_dim, rng);
    return net;
  }

  int fusion_points() const { return config.fusion_points(); }
  int task_count() const { return static_cast<int>(tasks.size()); }

  // Returns logits[task][subproblem], each [N, bins]. The optional ablation
  // mask zeroes designated task maps at the input of the central aggregation
  // (collaboration strategy only).
  std::vector<std::vector<Tensor<T>>> forward(
      const Tensor<T>& batch, Mode mode,
      const AblationMask* ablation_mask = nullptr) {
    if (ablation_mask) {
      if (strategy != Strategy::kCollaboration)
        throw UsageError(
            "forward: ablation mask is only valid for strategy=collaboration");
      if (static_cast<int>(ablation_mask->size()) != fusion_points())
        throw UsageError("forward: ablation mask has " +
                         std::to_string(ablation_mask->size()) +
                         " depths, network has " +
                         std::to_string(fusion_points()));
      for (const auto& row : *ablation_mask)
        if (static_cast<int>(row.size()) != task_count())
          throw UsageError("forward: ablation mask row length " +
                           std::to_string(row.size()) + " != task count " +
                           std::to_string(task_count()));
    }

    const bool shared_trunk = strategy == Strategy::kHard ||
                              strategy == Strategy::kHardWidened;
    std::vector<std::vector<Tensor<T>>> out;
    out.reserve(tasks.size());

    if (shared_trunk) {
      Tensor<T> h = batch;
      for (int seg = 0; seg < columns[0].segments(); ++seg)
        h = columns[0].forward_segment(seg, h, mode);
      Tensor<T> pooled = global_avg_pool(h);
      for (auto& head : heads) out.push_back(head.forward(pooled));
      return out;
    }

    std::vector<Tensor<T>> maps(tasks.size());
    for (std::size_t t = 0; t < tasks.size(); ++t) maps[t] = batch;
    const int segs = columns[0].segments();
    for (int seg = 0; seg < segs; ++seg) {
      for (std::size_t t = 0; t < tasks.size(); ++t)
        maps[t] = columns[t].forward_segment(seg, maps[t], mode);
      if (strategy == Strategy::kCollaboration) {
        const std::vector<bool>* mask_row =
            ablation_mask ? &(*ablation_mask)[static_cast<std::size_t>(seg)]
                          : nullptr;
        auto res = collab_blocks[static_cast<std::size_t>(seg)].forward(
            maps, mode, mask_row);
        maps = std::move(res.task_maps);
      } else if (strategy == Strategy::kCrossStitch) {
        maps = cross_stitch_combine(
            maps, stitch_alphas[static_cast<std::size_t>(seg)]);
      }
    }
    for (std::size_t t = 0; t < tasks.size(); ++t)
      out.push_back(heads[t].forward(global_avg_pool(maps[t])));
    return out;
  }

  void visit(const ParamVisitor<T>& fn) {
    const bool shared_trunk = strategy == Strategy::kHard ||
                              strategy == Strategy::kHardWidened;
    if (shared_trunk) {
      columns[0].visit("trunk", fn);
    } else {
      for (std::size_t t = 0; t < columns.size(); ++t)
        columns[t].visit("task" + std::to_string(t), fn);
    }
    for (std::size_t d = 0; d < collab_blocks.size(); ++d)
      collab_blocks[d].visit("collab" + std::to_string(d), fn);
    for (std::size_t d = 0; d < stitch_alphas.size(); ++d)
      fn("stitch" + std::to_string(d) + ".alpha", stitch_alphas[d],
         ParamKind::kParam);
    for (std::size_t t = 0; t < heads.size(); ++t)
      heads[t].visit("head" + std::to_string(t), fn);
  }

  // Exact learnable-parameter count by enumeration.
  std::int64_t param_count() {
    std::int64_t total = 0;
    visit([&](const std::string&, Tensor<T>& t, ParamKind kind) {
      if (kind == ParamKind::kParam) total += t.numel();
    });
    return total;
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    visit([&](const std::string&, Tensor<T>& t, ParamKind kind) {
      if (kind == ParamKind::kParam) out.push_back(&t);
    });
    return out;
  }
};

}  // namespace dcollab
