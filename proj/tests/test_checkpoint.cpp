#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dcollab/checkpoint.hpp"
#include "dcollab/config.hpp"

using namespace dcollab;
namespace fs = std::filesystem;

namespace {

UnderlyingNetConfig small_net() {
  UnderlyingNetConfig c;
  c.input = {1, 16, 16};
  c.stem = {4, 3, 1, true};
  c.stages = {{1, 8, 2}};
  return c;
}

std::vector<TaskSpec> small_tasks() {
  return {TaskSpec::landmarks("landmarks", 2, 16),
          TaskSpec::categorical("smile", 2, 0.25)};
}

std::string temp_file(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  auto net = MultiTaskNet<float>::build(small_net(), small_tasks(),
                                        Strategy::kCollaboration, 9);
  Checkpoint ckpt;
  ckpt.global_step = 123;
  ckpt.epoch = 4;
  ckpt.config_hash = "deadbeef";
  ckpt.rng_state = "some engine state";
  snapshot_net(net, ckpt);

  const std::string path = temp_file("dc_ckpt_roundtrip.bin");
  write_checkpoint(path, ckpt);
  const Checkpoint back = read_checkpoint(path);

  EXPECT_EQ(back.global_step, 123);
  EXPECT_EQ(back.epoch, 4);
  EXPECT_EQ(back.config_hash, "deadbeef");
  EXPECT_EQ(back.rng_state, "some engine state");
  ASSERT_EQ(back.tensors.size(), ckpt.tensors.size());
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ckpt.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ckpt.tensors[i].shape);
    EXPECT_EQ(back.tensors[i].kind, ckpt.tensors[i].kind);
    EXPECT_EQ(back.tensors[i].values, ckpt.tensors[i].values);  // bit-exact
  }

  // restoring into a differently-seeded net reproduces every tensor
  auto other = MultiTaskNet<float>::build(small_net(), small_tasks(),
                                          Strategy::kCollaboration, 10);
  restore_net(other, back);
  std::size_t checked = 0;
  net.visit([&](const std::string& name, Tensor<float>& t, ParamKind) {
    other.visit([&](const std::string& n2, Tensor<float>& t2, ParamKind) {
      if (n2 == name) {
        EXPECT_EQ(t.values(), t2.values()) << name;
        ++checked;
      }
    });
  });
  EXPECT_GT(checked, 0u);
  std::remove(path.c_str());
}

TEST(Checkpoint, FileBytesAreDeterministic) {
  auto net = MultiTaskNet<float>::build(small_net(), small_tasks(),
                                        Strategy::kSingle, 3);
  Checkpoint ckpt;
  snapshot_net(net, ckpt);
  const std::string a = temp_file("dc_ckpt_a.bin");
  const std::string b = temp_file("dc_ckpt_b.bin");
  write_checkpoint(a, ckpt);
  write_checkpoint(b, ckpt);
  EXPECT_EQ(file_content_hash(a), file_content_hash(b));
  std::remove(a.c_str());
  std::remove(b.c_str());
}

TEST(Checkpoint, MissingTensorRejected) {
  auto net = MultiTaskNet<float>::build(small_net(), small_tasks(),
                                        Strategy::kCollaboration, 5);
  Checkpoint ckpt;
  snapshot_net(net, ckpt);
  ckpt.tensors.pop_back();
  try {
    restore_net(net, ckpt);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos);
  }
}

TEST(Checkpoint, ShapeMismatchRejected) {
  auto net = MultiTaskNet<float>::build(small_net(), small_tasks(),
                                        Strategy::kSingle, 5);
  Checkpoint ckpt;
  snapshot_net(net, ckpt);
  ckpt.tensors[0].shape = {1, 2, 3};
  EXPECT_THROW(restore_net(net, ckpt), FormatError);
}

TEST(Checkpoint, CorruptContainersRejected) {
  const std::string path = temp_file("dc_ckpt_corrupt.bin");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "this is not a checkpoint at all";
  }
  EXPECT_THROW(read_checkpoint(path), FormatError);

  auto net = MultiTaskNet<float>::build(small_net(), small_tasks(),
                                        Strategy::kSingle, 6);
  Checkpoint ckpt;
  snapshot_net(net, ckpt);
  write_checkpoint(path, ckpt);
  fs::resize_file(path, fs::file_size(path) / 2);
  EXPECT_THROW(read_checkpoint(path), FormatError);
  std::remove(path.c_str());
  EXPECT_THROW(read_checkpoint(path), FormatError);
}

TEST(Checkpoint, SnapshotIncludesBuffersWithKinds) {
  auto net = MultiTaskNet<float>::build(small_net(), small_tasks(),
                                        Strategy::kCollaboration, 7);
  Checkpoint ckpt;
  snapshot_net(net, ckpt);
  bool saw_param = false, saw_buffer = false, saw_collab = false;
  for (const auto& t : ckpt.tensors) {
    if (t.kind == "param") saw_param = true;
    if (t.kind == "buffer") saw_buffer = true;
    if (t.name.rfind("collab0.central.", 0) == 0) saw_collab = true;
  }
  EXPECT_TRUE(saw_param);
  EXPECT_TRUE(saw_buffer);
  EXPECT_TRUE(saw_collab);
}
