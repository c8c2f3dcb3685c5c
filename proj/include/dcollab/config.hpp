#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dcollab/hash.hpp"
#include "dcollab/net.hpp"
#include "dcollab/synth.hpp"
#include "dcollab/train.hpp"

namespace dcollab {

// JSON round trip for every config struct, plus canonicalization: nlohmann
// objects keep keys sorted, so dump() of a fully-populated object is the
// canonical form whose hash is recorded in manifests and checkpoints.

inline nlohmann::json to_json(const UnderlyingNetConfig& c) {
  nlohmann::json j;
  j["input"] = {{"channels", c.input.channels},
                {"height", c.input.height},
                {"width", c.input.width}};
  j["stem"] = {{"channels", c.stem.channels},
               {"kernel", c.stem.kernel},
               {"stride", c.stem.stride},
               {"pool", c.stem.pool}};
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages)
    stages.push_back({{"units", s.units},
                      {"channels", s.channels},
                      {"first_stride", s.first_stride}});
  j["stages"] = stages;
  return j;
}

inline UnderlyingNetConfig net_config_from_json(const nlohmann::json& j) {
  UnderlyingNetConfig c;
  if (j.contains("input")) {
    const auto& i = j.at("input");
    c.input.channels = i.value("channels", c.input.channels);
    c.input.height = i.value("height", c.input.height);
    c.input.width = i.value("width", c.input.width);
  }
  if (j.contains("stem")) {
    const auto& s = j.at("stem");
    c.stem.channels = s.value("channels", c.stem.channels);
    c.stem.kernel = s.value("kernel", c.stem.kernel);
    c.stem.stride = s.value("stride", c.stem.stride);
    c.stem.pool = s.value("pool", c.stem.pool);
  }
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      StageConfig st;
      st.units = s.value("units", 1);
      st.channels = s.at("channels").get<int>();
      st.first_stride = s.value("first_stride", 1);
      c.stages.push_back(st);
    }
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TaskSpec& t) {
  nlohmann::json j;
  j["name"] = t.name;
  j["kind"] =
      t.kind == TaskSpec::Kind::kLandmarks ? "landmarks" : "categorical";
  if (t.kind == TaskSpec::Kind::kLandmarks) {
    j["num_points"] = t.num_points;
    j["image_size"] = t.image_size;
  } else {
    j["num_classes"] = t.num_classes;
  }
  j["loss_weight"] = t.loss_weight;
  return j;
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
  const std::string kind = j.value("kind", "categorical");
  TaskSpec t;
  if (kind == "landmarks") {
    t = TaskSpec::landmarks(j.at("name").get<std::string>(),
                            j.at("num_points").get<int>(),
                            j.at("image_size").get<int>(),
                            j.value("loss_weight", 1.0));
  } else if (kind == "categorical") {
    t = TaskSpec::categorical(j.at("name").get<std::string>(),
                              j.at("num_classes").get<int>(),
                              j.value("loss_weight", 1.0));
  } else {
    throw UsageError("task config: unknown kind '" + kind + "'");
  }
  t.validate();
  return t;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                    {"momentum", c.optimizer.momentum},
                    {"weight_decay", c.optimizer.weight_decay}};
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["lr_decay_at"] = c.lr_decay_at;
  j["seed"] = c.seed;
  j["train_ratio"] = c.train_ratio;
  j["eval_every"] = c.eval_every;
  j["summary_window"] = c.summary_window;
  j["stop_after_epochs"] = c.stop_after_epochs;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.learning_rate =
        o.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    c.optimizer.weight_decay =
        o.value("weight_decay", c.optimizer.weight_decay);
  }
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.lr_decay_at = j.value("lr_decay_at", c.lr_decay_at);
  c.seed = j.value("seed", c.seed);
  c.train_ratio = j.value("train_ratio", c.train_ratio);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.summary_window = j.value("summary_window", c.summary_window);
  c.stop_after_epochs = j.value("stop_after_epochs", c.stop_after_epochs);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json j;
  j["num_samples"] = c.num_samples;
  j["image_size"] = c.image_size;
  j["min_angle_deg"] = c.min_angle_deg;
  j["max_angle_deg"] = c.max_angle_deg;
  j["min_scale"] = c.min_scale;
  j["max_scale"] = c.max_scale;
  j["center_jitter"] = c.center_jitter;
  j["p_smile"] = c.p_smile;
  j["p_glasses"] = c.p_glasses;
  j["pixel_noise"] = c.pixel_noise;
  j["label_noise"] = c.label_noise;
  j["correlated"] = c.correlated;
  j["seed"] = c.seed;
  return j;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.num_samples = j.value("num_samples", c.num_samples);
  c.image_size = j.value("image_size", c.image_size);
  c.min_angle_deg = j.value("min_angle_deg", c.min_angle_deg);
  c.max_angle_deg = j.value("max_angle_deg", c.max_angle_deg);
  c.min_scale = j.value("min_scale", c.min_scale);
  c.max_scale = j.value("max_scale", c.max_scale);
  c.center_jitter = j.value("center_jitter", c.center_jitter);
  c.p_smile = j.value("p_smile", c.p_smile);
  c.p_glasses = j.value("p_glasses", c.p_glasses);
  c.pixel_noise = j.value("pixel_noise", c.pixel_noise);
  c.label_noise = j.value("label_noise", c.label_noise);
  c.correlated = j.value("correlated", c.correlated);
  c.seed = j.value("seed", c.seed);
  return c;
}

// The five-task roster mirroring the landmark benchmark: 5 landmark points
// plus profile / smile / glasses / gender attributes. Related tasks carry
// lambda = 0.25; the landmark weight is pinned to 1 by the loss.
inline std::vector<TaskSpec> default_tasks(int image_size) {
  return {
      TaskSpec::landmarks("landmarks", kNumLandmarks, image_size),
      TaskSpec::categorical("profile", kNumProfileBins, 0.25),
      TaskSpec::categorical("smile", 2, 0.25),
      TaskSpec::categorical("glasses", 2, 0.25),
      TaskSpec::categorical("gender", 2, 0.25),
  };
}

// Desk-scale underlying network: 3x3 stem (stride 2 + pool), then three
// residual stages, giving four fusion points. The deepest stage is wider so
// the top fusion point carries the most capacity.
inline UnderlyingNetConfig default_net_config() {
  UnderlyingNetConfig c;
  c.input = {1, 40, 40};
  c.stem = {8, 3, 2, true};
  c.stages = {{1, 16, 2}, {1, 16, 1}, {1, 24, 1}};
  return c;
}

inline std::string canonical_dump(const nlohmann::json& j) { return j.dump(); }

inline std::string config_hash_of(const nlohmann::json& j) {
  return to_hex(fnv1a64(canonical_dump(j)));
}

}  // namespace dcollab
