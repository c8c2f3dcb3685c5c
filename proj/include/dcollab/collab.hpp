#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcollab/layers.hpp"
#include "dcollab/ops.hpp"
#include "dcollab/rng.hpp"

namespace dcollab {

// Channel width of the global feature map: the central 1x1 conv divides the
// concatenated T*C maps by 4, clamped so tiny configurations stay legal.
inline int collab_global_channels(int tasks, int channels) {
  return std::max(1, (tasks * channels) / 4);
}

// Learnable parameter count of one block (conv weights plus BN gamma/beta;
// convs carry no bias since each feeds a batch norm).
inline std::int64_t collab_param_count(int tasks, int channels) {
  const std::int64_t t = tasks, c = channels;
  const std::int64_t cz = collab_global_channels(tasks, channels);
  const std::int64_t central = cz * (t * c)      // 1x1 conv
                               + 2 * cz          // bn
                               + cz * cz * 9     // 3x3 conv
                               + 2 * cz;         // bn
  const std::int64_t merge = c * (c + cz)        // 1x1 conv
                             + 2 * c             // bn
                             + c * c * 9         // 3x3 conv
                             + 2 * c;            // bn
  return central + t * merge;
}

// Lateral connection unit joining T task columns at one depth:
//
//   z   = H([x_1, ..., x_T])            central aggregation
//   y_t = ReLU(x_t + F_t([x_t, z]))     per-task merge with identity skip
//
// H   = Conv1x1 -> BN -> ReLU -> Conv3x3 -> BN -> ReLU   (T*C -> Cz -> Cz)
// F_t = Conv1x1 -> BN -> ReLU -> Conv3x3 -> BN           (C+Cz -> C -> C)
//
// With identity_init, each F_t's final BN starts with gamma = 0, so the whole
// block begins as the identity map (modulo the outer ReLU, which is a no-op
// on non-negative inputs).
template <typename T>
struct CollabBlock {
  int tasks = 0;
  int channels = 0;         // per-task input channels C
  int global_channels = 0;  // Cz

  Conv2dLayer<T> central_conv1, central_conv2;
  BatchNormLayer<T> central_bn1, central_bn2;

  struct Merge {
    Conv2dLayer<T> conv1, conv2;
    BatchNormLayer<T> bn1, bn2;
  };
  std::vector<Merge> merges;

  CollabBlock() = default;

  CollabBlock(int tasks_, int channels_, Rng& rng, bool identity_init = true)
      : tasks(tasks_),
        channels(channels_),
        global_channels(collab_global_channels(tasks_, channels_)) {
    if (tasks < 1 || channels < 1)
      throw UsageError("collab block: tasks and channels must be >= 1");
    central_conv1 = Conv2dLayer<T>(tasks * channels, global_channels, 1, 1, 0,
                                   /*with_bias=*/false, rng);
    central_bn1 = BatchNormLayer<T>(global_channels);
    central_conv2 = Conv2dLayer<T>(global_channels, global_channels, 3, 1, 1,
                                   /*with_bias=*/false, rng);
    central_bn2 = BatchNormLayer<T>(global_channels);
    merges.reserve(static_cast<std::size_t>(tasks));
    for (int t = 0; t < tasks; ++t) {
      Merge m;
      m.conv1 = Conv2dLayer<T>(channels + global_channels, channels, 1, 1, 0,
                               /*with_bias=*/false, rng);
      m.bn1 = BatchNormLayer<T>(channels);
      m.conv2 = Conv2dLayer<T>(channels, channels, 3, 1, 1,
                               /*with_bias=*/false, rng);
      m.bn2 = BatchNormLayer<T>(channels, /*zero_gamma=*/identity_init);
      merges.push_back(std::move(m));
    }
  }

  struct Output {
    std::vector<Tensor<T>> task_maps;  // y_t, same shapes as inputs
    Tensor<T> global_map;              // z, [N, Cz, H, W]
  };

  // Masked-out inputs are replaced by zero maps before concatenation at the
  // input of H; the merge path and the skip always see the real x_t.
  Output forward(const std::vector<Tensor<T>>& inputs, Mode mode,
                 const std::vector<bool>* mask = nullptr) {
    if (static_cast<int>(inputs.size()) != tasks)
      throw ShapeError("collab block: built for " + std::to_string(tasks) +
                       " tasks, got " + std::to_string(inputs.size()) +
                       " inputs");
    if (mask && static_cast<int>(mask->size()) != tasks)
      throw UsageError("collab block: mask length " +
                       std::to_string(mask->size()) + " != task count " +
                       std::to_string(tasks));
    for (const auto& x : inputs) {
      detail::require_rank(x.shape(), 4, "collab block input");
      if (x.shape() != inputs[0].shape())
        throw ShapeError("collab block: input shape mismatch " +
                         shape_to_string(inputs[0].shape()) + " vs " +
                         shape_to_string(x.shape()));
      if (x.shape()[1] != channels)
        throw ShapeError("collab block: built for C=" +
                         std::to_string(channels) + ", got input " +
                         shape_to_string(x.shape()));
    }

    std::vector<Tensor<T>> central_in;
    central_in.reserve(inputs.size());
    for (std::size_t t = 0; t < inputs.size(); ++t)
      central_in.push_back(mask && !(*mask)[t]
                               ? Tensor<T>::zeros(inputs[t].shape())
                               : inputs[t]);

    Tensor<T> z = concat_depthwise(central_in);
    z = central_conv1.forward(z);
    z = central_bn1.forward(z, mode);
    z = relu(z);
    z = central_conv2.forward(z);
    z = central_bn2.forward(z, mode);
    z = relu(z);

    Output out;
    out.global_map = z;
    out.task_maps.reserve(inputs.size());
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      auto& m = merges[t];
      Tensor<T> f = concat_depthwise<T>({inputs[t], z});
      f = m.conv1.forward(f);
      f = m.bn1.forward(f, mode);
      f = relu(f);
      f = m.conv2.forward(f);
      f = m.bn2.forward(f, mode);
      out.task_maps.push_back(relu(add(inputs[t], f)));
    }
    return out;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    central_conv1.visit(prefix + ".central.conv1", fn);
    central_bn1.visit(prefix + ".central.bn1", fn);
    central_conv2.visit(prefix + ".central.conv2", fn);
    central_bn2.visit(prefix + ".central.bn2", fn);
    for (std::size_t t = 0; t < merges.size(); ++t) {
      const std::string mp = prefix + ".merge" + std::to_string(t);
      merges[t].conv1.visit(mp + ".conv1", fn);
      merges[t].bn1.visit(mp + ".bn1", fn);
      merges[t].conv2.visit(mp + ".conv2", fn);
      merges[t].bn2.visit(mp + ".bn2", fn);
    }
  }
};

}  // namespace dcollab
