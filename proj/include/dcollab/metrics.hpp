#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dcollab/csv.hpp"
#include "dcollab/encode.hpp"
#include "dcollab/errors.hpp"
#include "dcollab/net.hpp"

namespace dcollab {

using Point = std::array<double, 2>;

struct FailureRateResult {
  double failure_rate = 0.0;  // fraction of samples over the 10% threshold
  double mean_error = 0.0;    // mean normalized distance over samples
};

// Landmark metric: per sample, the mean Euclidean distance between predicted
// and ground-truth points, normalized by the ground-truth inter-ocular
// distance. A normalized distance above 10% counts the sample as a failure.
inline FailureRateResult failure_rate(
    const std::vector<std::vector<Point>>& predictions,
    const std::vector<std::vector<Point>>& ground_truth,
    std::pair<int, int> eye_indices = {kLeftEye, kRightEye}) {
  if (predictions.empty())
    throw UsageError("failure_rate: needs at least one sample");
  if (predictions.size() != ground_truth.size())
    throw UsageError("failure_rate: " + std::to_string(predictions.size()) +
                     " predictions vs " + std::to_string(ground_truth.size()) +
                     " ground-truth samples");

  double err_sum = 0.0;
  std::int64_t failures = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& pred = predictions[i];
    const auto& gt = ground_truth[i];
    if (pred.size() != gt.size() || gt.empty())
      throw UsageError("failure_rate: landmark count mismatch at sample " +
                       std::to_string(i));
    const auto& le = gt[static_cast<std::size_t>(eye_indices.first)];
    const auto& re = gt[static_cast<std::size_t>(eye_indices.second)];
    const double iod = std::hypot(le[0] - re[0], le[1] - re[1]);
    if (iod <= 0.0)
      throw DataError("failure_rate: zero inter-ocular distance at sample " +
                      std::to_string(i));
    double dist = 0.0;
    for (std::size_t p = 0; p < gt.size(); ++p)
      dist += std::hypot(pred[p][0] - gt[p][0], pred[p][1] - gt[p][1]);
    const double norm = dist / static_cast<double>(gt.size()) / iod;
    err_sum += norm;
    if (norm > 0.10) ++failures;
  }
  FailureRateResult r;
  r.failure_rate =
      static_cast<double>(failures) / static_cast<double>(predictions.size());
  r.mean_error = err_sum / static_cast<double>(predictions.size());
  return r;
}

// Decodes landmark-head logits (one [N, image_size] tensor per subproblem,
// ordered x0,y0,x1,y1,...) into per-sample points at bin centers.
template <typename T>
std::vector<std::vector<Point>> decode_landmark_predictions(
    const std::vector<Tensor<T>>& sub_logits, int image_size) {
  if (sub_logits.empty() || sub_logits.size() % 2 != 0)
    throw UsageError("decode: landmark logits must come in (x,y) pairs");
  const std::int64_t n = sub_logits[0].shape()[0];
  const int num_points = static_cast<int>(sub_logits.size()) / 2;
  const BinEncoder enc = BinEncoder::pixel(image_size);
  std::vector<std::vector<Point>> out(
      static_cast<std::size_t>(n),
      std::vector<Point>(static_cast<std::size_t>(num_points)));
  for (int p = 0; p < num_points; ++p)
    for (int a = 0; a < 2; ++a) {
      const Tensor<T>& logits = sub_logits[static_cast<std::size_t>(2 * p + a)];
      const std::int64_t bins = logits.shape()[1];
      for (std::int64_t i = 0; i < n; ++i) {
        const T* row = logits.data() + i * bins;
        std::int64_t best = 0;
        for (std::int64_t b = 1; b < bins; ++b)
          if (row[b] > row[best]) best = b;
        out[static_cast<std::size_t>(i)][static_cast<std::size_t>(p)]
           [static_cast<std::size_t>(a)] = enc.decode(best);
      }
    }
  return out;
}

inline std::vector<std::vector<Point>> ground_truth_landmarks(
    const Dataset& ds, const std::vector<std::int64_t>& indices) {
  std::vector<std::vector<Point>> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& rec = ds.samples[static_cast<std::size_t>(indices[i])];
    out[i].resize(kNumLandmarks);
    for (int p = 0; p < kNumLandmarks; ++p)
      out[i][static_cast<std::size_t>(p)] = {
          static_cast<double>(
              rec.landmarks[static_cast<std::size_t>(p)][0]),
          static_cast<double>(
              rec.landmarks[static_cast<std::size_t>(p)][1])};
  }
  return out;
}

inline int landmarks_task_index(const std::vector<TaskSpec>& tasks) {
  for (std::size_t t = 0; t < tasks.size(); ++t)
    if (tasks[t].kind == TaskSpec::Kind::kLandmarks) return static_cast<int>(t);
  throw UsageError("no landmarks task in the task list");
}

// Landmark metric of a network over the given samples, eval mode, no
// gradient recording; parameters and buffers are untouched.
template <typename T>
FailureRateResult evaluate(MultiTaskNet<T>& net, const Dataset& ds,
                           const std::vector<std::int64_t>& indices,
                           int batch_size = 64,
                           const AblationMask* mask = nullptr) {
  if (indices.empty()) throw UsageError("evaluate: empty test set");
  NoGradScope<T> no_grad;
  const int lt = landmarks_task_index(net.tasks);
  const int image_size = net.tasks[static_cast<std::size_t>(lt)].image_size;

  std::vector<std::vector<Point>> preds;
  preds.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::int64_t> batch_idx(indices.begin() + start,
                                        indices.begin() + end);
    Tensor<T> batch = make_batch<T>(ds, batch_idx);
    auto logits = net.forward(batch, Mode::kEval, mask);
    auto batch_preds = decode_landmark_predictions(
        logits[static_cast<std::size_t>(lt)], image_size);
    for (auto& p : batch_preds) preds.push_back(std::move(p));
  }
  return failure_rate(preds, ground_truth_landmarks(ds, indices));
}

// ---------------------------------------------------------------------------
// Feature-zeroing ablation study
// ---------------------------------------------------------------------------

// Failure-rate influence grid: rows are tasks, columns are fusion depths.
// relative_change = (ablated - baseline) / baseline, positive = worse. (The
// original narration uses "negative relative change" for degradation; the
// sign is flipped here so heatmaps read monotonically.)
struct AblationReport {
  double baseline_failure_rate = 0.0;
  double baseline_mean_error = 0.0;
  std::vector<std::string> task_names;
  int depths = 0;                  // number of grid columns
  std::vector<int> depth_indices;  // fusion depth of each column
  std::vector<std::vector<double>> grid;             // ablated failure rates
  std::vector<std::vector<double>> relative_change;  // positive = worse
  std::string checkpoint_hash;
};

inline double relative_change_of(double ablated, double baseline) {
  if (baseline == 0.0) return ablated == 0.0 ? 0.0 : 1e9;
  return (ablated - baseline) / baseline;
}

// Evaluates the test-time effect of removing each task's features from the
// central aggregation, one (task, depth) cell at a time. An explicit depth
// list restricts the grid columns; empty means all fusion points.
template <typename T>
AblationReport ablate(MultiTaskNet<T>& net, const Dataset& ds,
                      const std::vector<std::int64_t>& test_indices,
                      int batch_size = 64, std::vector<int> depths = {}) {
  if (net.strategy != Strategy::kCollaboration)
    throw UsageError("ablate: requires strategy=collaboration, got " +
                     std::string(strategy_name(net.strategy)));
  const int t_count = net.task_count();
  const int all_depths = net.fusion_points();
  if (depths.empty())
    for (int d = 0; d < all_depths; ++d) depths.push_back(d);
  for (int d : depths)
    if (d < 0 || d >= all_depths)
      throw UsageError("ablate: depth " + std::to_string(d) + " outside [0," +
                       std::to_string(all_depths) + ")");

  AblationReport report;
  report.depths = static_cast<int>(depths.size());
  report.depth_indices = depths;
  for (const auto& t : net.tasks) report.task_names.push_back(t.name);

  const FailureRateResult base = evaluate(net, ds, test_indices, batch_size);
  report.baseline_failure_rate = base.failure_rate;
  report.baseline_mean_error = base.mean_error;

  report.grid.assign(static_cast<std::size_t>(t_count),
                     std::vector<double>(depths.size()));
  report.relative_change = report.grid;
  for (int t = 0; t < t_count; ++t)
    for (std::size_t col = 0; col < depths.size(); ++col) {
      AblationMask mask(static_cast<std::size_t>(all_depths),
                        std::vector<bool>(static_cast<std::size_t>(t_count),
                                          true));
      mask[static_cast<std::size_t>(depths[col])]
          [static_cast<std::size_t>(t)] = false;
      const FailureRateResult r =
          evaluate(net, ds, test_indices, batch_size, &mask);
      report.grid[static_cast<std::size_t>(t)][col] = r.failure_rate;
      report.relative_change[static_cast<std::size_t>(t)][col] =
          relative_change_of(r.failure_rate, base.failure_rate);
    }
  return report;
}

// Writes the grid as CSV (rows = tasks, columns = fusion depths; the value
// headers spell out the sign convention) and the full report as JSON.
inline void emit_grid(const AblationReport& report, const std::string& csv_path,
                      const std::string& json_path) {
  if (report.task_names.empty() || report.depths == 0)
    throw UsageError("emit_grid: empty ablation grid");
  if (report.grid.size() != report.task_names.size() ||
      report.relative_change.size() != report.task_names.size())
    throw UsageError("emit_grid: grid shape does not match task count");

  {
    std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("emit_grid: cannot open '" + csv_path + "'");
    std::vector<std::string> header{"task"};
    for (int d = 0; d < report.depths; ++d) {
      const int block = report.depth_indices.empty()
                            ? d
                            : report.depth_indices[static_cast<std::size_t>(d)];
      header.push_back("relchange_pos_is_worse_block" + std::to_string(block));
    }
    out << csv_row(header);
    for (std::size_t t = 0; t < report.task_names.size(); ++t) {
      std::vector<std::string> row{report.task_names[t]};
      for (int d = 0; d < report.depths; ++d)
        row.push_back(format_double(
            report.relative_change[t][static_cast<std::size_t>(d)]));
      out << csv_row(row);
    }
    if (!out) throw FormatError("emit_grid: short write to '" + csv_path + "'");
  }
  {
    nlohmann::json j;
    j["baseline"] = report.baseline_failure_rate;
    j["baseline_mean_error"] = report.baseline_mean_error;
    j["grid"] = report.grid;
    j["relative_change"] = report.relative_change;
    j["tasks"] = report.task_names;
    j["depths"] = report.depths;
    j["depth_indices"] = report.depth_indices;
    j["checkpoint_hash"] = report.checkpoint_hash;
    j["sign_convention"] = "positive relative change = higher failure rate";
    std::ofstream out(json_path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("emit_grid: cannot open '" + json_path + "'");
    out << j.dump(2) << "\n";
    if (!out)
      throw FormatError("emit_grid: short write to '" + json_path + "'");
  }
}

}  // namespace dcollab
