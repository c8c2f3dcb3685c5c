#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dcollab/errors.hpp"
#include "dcollab/net.hpp"
#include "dcollab/synth.hpp"
#include "dcollab/tensor.hpp"

namespace dcollab {

// Classification framing for regression targets: pixel positions fall into
// 1-pixel-wide bins, angles into fixed-width degree bins. Decoding returns
// the bin center; the original real values stay in the dataset and are the
// ones compared against at evaluation time.
struct BinEncoder {
  enum class Kind { kPixel, kAngle };

  Kind kind = Kind::kPixel;
  int image_size = 0;       // pixel
  double bin_width = 30.0;  // angle, degrees
  double lo = -180.0;
  double hi = 180.0;

  static BinEncoder pixel(int image_size) {
    if (image_size < 1) throw UsageError("pixel encoder: image_size >= 1");
    BinEncoder e;
    e.kind = Kind::kPixel;
    e.image_size = image_size;
    return e;
  }

  static BinEncoder angle(double bin_width_deg = 30.0, double lo = -180.0,
                          double hi = 180.0) {
    if (bin_width_deg <= 0 || hi <= lo)
      throw UsageError("angle encoder: invalid width/range");
    const double n = (hi - lo) / bin_width_deg;
    if (std::abs(n - std::round(n)) > 1e-9)
      throw UsageError("angle encoder: range must be a whole number of bins");
    BinEncoder e;
    e.kind = Kind::kAngle;
    e.bin_width = bin_width_deg;
    e.lo = lo;
    e.hi = hi;
    return e;
  }

  int num_bins() const {
    return kind == Kind::kPixel
               ? image_size
               : static_cast<int>(std::llround((hi - lo) / bin_width));
  }

  bool in_range(double v) const {
    return kind == Kind::kPixel ? (v >= 0.0 && v < image_size)
                                : (v >= lo && v < hi);
  }

  std::int64_t encode(double v) const {
    if (!in_range(v))
      throw DataError("bin encoder: value " + std::to_string(v) +
                      " outside " +
                      (kind == Kind::kPixel
                           ? "[0," + std::to_string(image_size) + ")"
                           : "[" + std::to_string(lo) + "," +
                                 std::to_string(hi) + ")"));
    const double rel = kind == Kind::kPixel ? v : (v - lo) / bin_width;
    auto b = static_cast<std::int64_t>(std::floor(rel));
    return std::min<std::int64_t>(b, num_bins() - 1);
  }

  double decode(std::int64_t bin) const {
    if (bin < 0 || bin >= num_bins())
      throw IndexError("bin encoder: bin " + std::to_string(bin) +
                       " outside [0," + std::to_string(num_bins()) + ")");
    return kind == Kind::kPixel
               ? static_cast<double>(bin) + 0.5
               : lo + (static_cast<double>(bin) + 0.5) * bin_width;
  }
};

// labels[task][subproblem][sample]
struct EncodedTargets {
  std::vector<std::vector<std::vector<std::int64_t>>> labels;
};

inline std::int64_t attribute_value(const SampleRecord& rec,
                                    const std::string& task_name) {
  if (task_name == "profile") return rec.profile;
  if (task_name == "smile") return rec.smile;
  if (task_name == "glasses") return rec.glasses;
  if (task_name == "gender") return rec.gender;
  throw UsageError("unknown attribute task '" + task_name +
                   "' (valid: profile, smile, glasses, gender)");
}

// Integer bin labels for the given samples, one array per subproblem.
// Out-of-range values abort with the sample index and offending field.
inline EncodedTargets encode_targets(const Dataset& ds,
                                     const std::vector<std::int64_t>& indices,
                                     const std::vector<TaskSpec>& tasks) {
  EncodedTargets out;
  out.labels.resize(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const TaskSpec& task = tasks[t];
    auto& subs = out.labels[t];
    subs.assign(static_cast<std::size_t>(task.subproblems()),
                std::vector<std::int64_t>(indices.size()));
    if (task.kind == TaskSpec::Kind::kLandmarks) {
      const BinEncoder enc = BinEncoder::pixel(task.image_size);
      for (std::size_t s = 0; s < indices.size(); ++s) {
        const auto& rec = ds.samples[static_cast<std::size_t>(indices[s])];
        for (int p = 0; p < task.num_points; ++p)
          for (int a = 0; a < 2; ++a) {
            const double v = rec.landmarks[static_cast<std::size_t>(p)]
                                          [static_cast<std::size_t>(a)];
            if (!enc.in_range(v))
              throw DataError("sample " + std::to_string(indices[s]) +
                              ": landmark " + std::to_string(p) +
                              (a == 0 ? " x" : " y") + " = " +
                              std::to_string(v) + " outside [0," +
                              std::to_string(task.image_size) + ")");
            subs[static_cast<std::size_t>(2 * p + a)][s] = enc.encode(v);
          }
      }
    } else {
      for (std::size_t s = 0; s < indices.size(); ++s) {
        const auto& rec = ds.samples[static_cast<std::size_t>(indices[s])];
        const std::int64_t v = attribute_value(rec, task.name);
        if (v < 0 || v >= task.num_classes)
          throw DataError("sample " + std::to_string(indices[s]) + ": " +
                          task.name + " = " + std::to_string(v) +
                          " outside [0," + std::to_string(task.num_classes) +
                          ")");
        subs[0][s] = v;
      }
    }
  }
  return out;
}

// Image batch tensor [N, 1, S, S] with values in [0, 1].
template <typename T>
Tensor<T> make_batch(const Dataset& ds,
                     const std::vector<std::int64_t>& indices) {
  if (indices.empty()) throw UsageError("make_batch: empty index list");
  const int s = ds.image_size;
  Tensor<T> batch = Tensor<T>::zeros(
      {static_cast<std::int64_t>(indices.size()), 1, s, s});
  T* p = batch.data();
  const T inv = T(1) / T(255);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = ds.samples[static_cast<std::size_t>(indices[i])].image;
    for (std::size_t k = 0; k < img.size(); ++k)
      p[i * img.size() + k] = static_cast<T>(img[k]) * inv;
  }
  return batch;
}

}  // namespace dcollab
