// Command-line entry point for the multi-task landmark experiments:
// dataset generation, training runs, strategy comparison sweeps, the
// feature-zeroing ablation study and task-weight sampling.
//
// Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
// failure (non-finite loss).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dcollab/config.hpp"
#include "dcollab/csv.hpp"
#include "dcollab/metrics.hpp"
#include "dcollab/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dcollab;

namespace {

using Scalar = float;

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
  std::string out = "runs";
};

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("config file '" + path + "': " + e.what());
  }
}

SynthConfig synth_from(const json& root, std::uint64_t seed) {
  SynthConfig c = root.contains("synth")
                      ? synth_config_from_json(root.at("synth"))
                      : SynthConfig{};
  if (!root.contains("synth") || !root.at("synth").contains("seed"))
    c.seed = seed;
  return c;
}

std::vector<TaskSpec> tasks_from(const json& root, int image_size) {
  if (!root.contains("tasks")) return default_tasks(image_size);
  std::vector<TaskSpec> tasks;
  for (const auto& t : root.at("tasks")) tasks.push_back(task_from_json(t));
  if (tasks.empty()) throw UsageError("config: empty task list");
  return tasks;
}

UnderlyingNetConfig net_from(const json& root) {
  return root.contains("net") ? net_config_from_json(root.at("net"))
                              : default_net_config();
}

TrainConfig train_from(const json& root) {
  return root.contains("train") ? train_config_from_json(root.at("train"))
                                : TrainConfig{};
}

Dataset obtain_dataset(const std::string& data_path, const json& root,
                       std::uint64_t seed) {
  if (!data_path.empty()) return load(data_path);
  const SynthConfig sc = synth_from(root, seed);
  return generate(sc);
}

json canonical_experiment_config(const json& root, const SynthConfig* synth,
                                 const std::string& data_path,
                                 const UnderlyingNetConfig& net,
                                 const std::vector<TaskSpec>& tasks,
                                 const TrainConfig& tc,
                                 const std::string& strategy) {
  json j;
  if (synth)
    j["synth"] = to_json(*synth);
  else
    j["dataset"] = data_path;
  j["net"] = to_json(net);
  json jt = json::array();
  for (const auto& t : tasks) jt.push_back(to_json(t));
  j["tasks"] = jt;
  j["train"] = to_json(tc);
  j["strategy"] = strategy;
  (void)root;
  return j;
}

// ---------------------------------------------------------------------------

int cmd_gen(const GlobalOpts& g, const json& root, const CLI::App* cmd,
            std::int64_t samples, int size, bool correlated_flag,
            bool uncorrelated_flag, double noise, double label_noise,
            double scale_min, double scale_max, double jitter,
            std::string out_file, const std::string& export_json) {
  SynthConfig cfg = synth_from(root, g.seed);
  if (cmd->count("--samples")) cfg.num_samples = samples;
  if (cmd->count("--size")) cfg.image_size = size;
  if (cmd->count("--noise")) cfg.pixel_noise = noise;
  if (cmd->count("--label-noise")) cfg.label_noise = label_noise;
  if (cmd->count("--scale-min")) cfg.min_scale = scale_min;
  if (cmd->count("--scale-max")) cfg.max_scale = scale_max;
  if (cmd->count("--jitter")) cfg.center_jitter = jitter;
  if (correlated_flag) cfg.correlated = true;
  if (uncorrelated_flag) cfg.correlated = false;
  if (g.seed_set) cfg.seed = g.seed;
  if (cfg.num_samples < 1)
    throw UsageError("gen: --samples must be at least 1");

  Dataset ds = generate(cfg);
  if (out_file.empty())
    out_file = (fs::path(g.out) / "dataset.toyf").string();
  fs::create_directories(fs::path(out_file).parent_path().empty()
                             ? "."
                             : fs::path(out_file).parent_path().string());
  save(ds, out_file);
  std::printf("dataset %s samples %lld hash %s\n", out_file.c_str(),
              static_cast<long long>(ds.size()),
              to_hex(ds.content_hash()).c_str());

  if (!export_json.empty()) {
    json lab = json::array();
    for (const auto& rec : ds.samples) {
      json r;
      json lms = json::array();
      for (const auto& lm : rec.landmarks)
        lms.push_back({lm[0], lm[1]});
      r["landmarks"] = lms;
      r["profile"] = rec.profile;
      r["smile"] = rec.smile;
      r["glasses"] = rec.glasses;
      r["gender"] = rec.gender;
      lab.push_back(r);
    }
    std::ofstream out(export_json, std::ios::trunc);
    if (!out) throw FormatError("gen: cannot open '" + export_json + "'");
    out << lab.dump(2) << "\n";
  }
  return 0;
}

int cmd_train(const GlobalOpts& g, const json& root, const CLI::App* cmd,
              const std::string& data_path, const std::string& strategy_name_,
              int epochs, int batch, double lr, double ratio,
              const std::string& resume_path, std::string run_dir) {
  const Strategy strategy = parse_strategy(strategy_name_);
  UnderlyingNetConfig net_cfg = net_from(root);
  TrainConfig tc = train_from(root);
  if (cmd->count("--epochs")) tc.epochs = epochs;
  if (cmd->count("--batch")) tc.batch_size = batch;
  if (cmd->count("--lr")) tc.optimizer.learning_rate = lr;
  if (cmd->count("--ratio")) tc.train_ratio = ratio;
  if (g.seed_set) tc.seed = g.seed;

  const std::optional<SynthConfig> synth =
      data_path.empty() ? std::optional<SynthConfig>(synth_from(root, tc.seed))
                        : std::nullopt;
  Dataset ds = obtain_dataset(data_path, root, tc.seed);
  std::vector<TaskSpec> tasks = tasks_from(root, ds.image_size);

  if (run_dir.empty())
    run_dir = (fs::path(g.out) /
               ("train_" + std::string(strategy_name(strategy)) + "_seed" +
                std::to_string(tc.seed)))
                  .string();
  fs::create_directories(run_dir);

  const json canon = canonical_experiment_config(
      root, synth ? &*synth : nullptr, data_path, net_cfg, tasks, tc,
      strategy_name(strategy));
  const std::string hash = config_hash_of(canon);
  {
    std::ofstream out(fs::path(run_dir) / "config.json", std::ios::trunc);
    out << canon.dump(2) << "\n";
  }

  BuildOptions opts;
  if (strategy == Strategy::kHardWidened)
    opts.widen_target =
        expected_param_count(net_cfg, tasks, Strategy::kCollaboration);
  MultiTaskNet<Scalar> net =
      MultiTaskNet<Scalar>::build(net_cfg, tasks, strategy, tc.seed, opts);

  Checkpoint resume;
  RunContext ctx;
  ctx.out_dir = run_dir;
  ctx.config_hash = hash;
  if (!resume_path.empty()) {
    resume = read_checkpoint(resume_path);
    ctx.resume = &resume;
  }

  const RunManifest m = train(net, ds, tc, ctx);
  std::printf("run %s strategy %s seed %llu failure_rate %.4f mean_error %.4f\n",
              run_dir.c_str(), strategy_name(strategy),
              static_cast<unsigned long long>(tc.seed),
              m.summary_failure_rate, m.summary_mean_error);
  return 0;
}

std::vector<Strategy> parse_strategy_list(const std::string& csv) {
  std::vector<Strategy> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    const std::string name = csv.substr(
        pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!name.empty()) out.push_back(parse_strategy(name));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw UsageError("empty strategy list");
  return out;
}

int cmd_compare(const GlobalOpts& g, const json& root, const CLI::App* cmd,
                const std::string& data_path, const std::string& strategies_csv,
                int num_seeds, const std::vector<double>& ratios_flag,
                int epochs, const std::string& weights_file) {
  UnderlyingNetConfig net_cfg = net_from(root);
  TrainConfig tc = train_from(root);
  if (cmd->count("--epochs")) tc.epochs = epochs;
  if (g.seed_set) tc.seed = g.seed;

  Dataset ds = obtain_dataset(data_path, root, tc.seed);
  std::vector<TaskSpec> tasks = tasks_from(root, ds.image_size);
  const std::vector<Strategy> strategies = parse_strategy_list(strategies_csv);

  std::vector<double> ratios =
      cmd->count("--ratios") ? ratios_flag
                             : std::vector<double>{tc.train_ratio};
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < num_seeds; ++k)
    seeds.push_back(tc.seed + static_cast<std::uint64_t>(k));

  fs::create_directories(g.out);

  if (!weights_file.empty()) {
    // Paired runs under shared sampled task weights (one row per draw).
    const auto rows = parse_csv_file(weights_file);
    if (rows.size() < 2)
      throw FormatError("compare: weights file '" + weights_file +
                        "' has no draws");
    std::vector<std::vector<double>> draws;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      std::vector<double> w;
      for (std::size_t c = 1; c < rows[r].size(); ++c)
        w.push_back(std::stod(rows[r][c]));
      draws.push_back(std::move(w));
    }
    int n_related = 0;
    for (const auto& t : tasks)
      if (t.kind != TaskSpec::Kind::kLandmarks) ++n_related;

    std::vector<std::vector<double>> results(
        draws.size(), std::vector<double>(strategies.size(), 0.0));
    for (std::size_t d = 0; d < draws.size(); ++d) {
      if (static_cast<int>(draws[d].size()) != n_related)
        throw FormatError("compare: weights row " + std::to_string(d + 1) +
                          " has " + std::to_string(draws[d].size()) +
                          " weights, expected " + std::to_string(n_related));
      std::vector<TaskSpec> weighted = tasks;
      int k = 0;
      for (auto& t : weighted)
        if (t.kind != TaskSpec::Kind::kLandmarks)
          t.loss_weight = draws[d][static_cast<std::size_t>(k++)];
      auto cells = scarcity_sweep<Scalar>(ds, net_cfg, weighted, strategies,
                                          {tc.train_ratio}, {tc.seed}, tc,
                                          g.jobs);
      for (std::size_t s = 0; s < strategies.size(); ++s)
        results[d][s] = cells[s].failure_rate;
    }

    const std::string path = (fs::path(g.out) / "weight_sweep.csv").string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    std::vector<std::string> header{"draw"};
    for (Strategy s : strategies) header.push_back(strategy_name(s));
    if (strategies.size() == 2)
      header.push_back(std::string("improvement_") +
                       strategy_name(strategies[0]) + "_vs_" +
                       strategy_name(strategies[1]));
    out << csv_row(header);
    for (std::size_t d = 0; d < draws.size(); ++d) {
      std::vector<std::string> row{std::to_string(d)};
      for (std::size_t s = 0; s < strategies.size(); ++s)
        row.push_back(format_double(results[d][s]));
      if (strategies.size() == 2)
        row.push_back(format_double(results[d][1] - results[d][0]));
      out << csv_row(row);
    }
    std::printf("wrote %s (%zu draws)\n", path.c_str(), draws.size());
    return 0;
  }

  const auto cells = scarcity_sweep<Scalar>(ds, net_cfg, tasks, strategies,
                                            ratios, seeds, tc, g.jobs);
  const std::string path = (fs::path(g.out) / "compare.csv").string();
  write_sweep_csv(cells, path);

  // Aggregate per (ratio, strategy): mean and std over seeds.
  const std::string agg_path = (fs::path(g.out) / "aggregate.csv").string();
  std::ofstream agg(agg_path, std::ios::binary | std::ios::trunc);
  agg << csv_row({"ratio", "strategy", "mean_failure_rate",
                  "std_failure_rate", "mean_mean_error"});
  for (double ratio : ratios)
    for (Strategy s : strategies) {
      std::vector<double> fr, me;
      for (const auto& c : cells)
        if (c.ratio == ratio && c.strategy == s) {
          fr.push_back(c.failure_rate);
          me.push_back(c.mean_error);
        }
      double mean = 0, mean_me = 0;
      for (std::size_t i = 0; i < fr.size(); ++i) {
        mean += fr[i];
        mean_me += me[i];
      }
      mean /= static_cast<double>(fr.size());
      mean_me /= static_cast<double>(me.size());
      double var = 0;
      for (double v : fr) var += (v - mean) * (v - mean);
      const double stddev =
          fr.size() > 1 ? std::sqrt(var / static_cast<double>(fr.size() - 1))
                        : 0.0;
      agg << csv_row({format_double(ratio), strategy_name(s),
                      format_double(mean), format_double(stddev),
                      format_double(mean_me)});
    }
  std::printf("wrote %s and %s (%zu runs)\n", path.c_str(), agg_path.c_str(),
              cells.size());
  return 0;
}

int cmd_ablate(const GlobalOpts& g, const json& root_ignored,
               const std::string& checkpoint_path, const std::string& data_path,
               const std::vector<int>& depths) {
  (void)root_ignored;
  fs::path ckpt_file = checkpoint_path;
  fs::path cfg_file;
  if (fs::is_directory(ckpt_file)) {
    cfg_file = ckpt_file / "config.json";
    ckpt_file = ckpt_file / "checkpoint.bin";
  } else {
    cfg_file = ckpt_file.parent_path() / "config.json";
  }
  if (!fs::exists(ckpt_file))
    throw FormatError("ablate: checkpoint '" + ckpt_file.string() +
                      "' not found");
  if (!fs::exists(cfg_file))
    throw FormatError("ablate: config '" + cfg_file.string() +
                      "' not found next to the checkpoint");

  const json run_cfg = load_config_file(cfg_file.string());
  if (run_cfg.value("strategy", "") != "collaboration")
    throw UsageError("ablate: checkpoint was trained with strategy '" +
                     run_cfg.value("strategy", "?") +
                     "', ablation requires collaboration");

  const UnderlyingNetConfig net_cfg =
      net_config_from_json(run_cfg.at("net"));
  std::vector<TaskSpec> tasks;
  for (const auto& t : run_cfg.at("tasks")) tasks.push_back(task_from_json(t));
  const TrainConfig tc = train_config_from_json(run_cfg.at("train"));

  Dataset ds;
  if (!data_path.empty()) {
    ds = load(data_path);
  } else if (run_cfg.contains("synth")) {
    ds = generate(synth_config_from_json(run_cfg.at("synth")));
  } else if (run_cfg.contains("dataset")) {
    ds = load(run_cfg.at("dataset").get<std::string>());
  } else {
    throw UsageError("ablate: no dataset given (--data) or recorded in the "
                     "run config");
  }

  MultiTaskNet<Scalar> net = MultiTaskNet<Scalar>::build(
      net_cfg, tasks, Strategy::kCollaboration, tc.seed);
  const Checkpoint ckpt = read_checkpoint(ckpt_file.string());
  restore_net(net, ckpt);

  const Split split = prefix_split(ds.size(), tc.train_ratio);
  AblationReport report = ablate(net, ds, split.test, 128, depths);
  report.checkpoint_hash = file_content_hash(ckpt_file.string());

  fs::create_directories(g.out);
  const std::string csv_path = (fs::path(g.out) / "ablation.csv").string();
  const std::string json_path = (fs::path(g.out) / "ablation.json").string();
  emit_grid(report, csv_path, json_path);
  std::printf("baseline failure_rate %.4f; wrote %s and %s\n",
              report.baseline_failure_rate, csv_path.c_str(),
              json_path.c_str());
  return 0;
}

int cmd_sample_weights(const GlobalOpts& g, const json& root, int n_draws,
                       std::string out_file) {
  std::vector<TaskSpec> tasks = tasks_from(root, 40);
  std::vector<std::string> related;
  for (const auto& t : tasks)
    if (t.kind != TaskSpec::Kind::kLandmarks) related.push_back(t.name);
  if (n_draws < 0) throw UsageError("sample-weights: N must be >= 0");

  if (out_file.empty())
    out_file = (fs::path(g.out) / "weights.csv").string();
  fs::create_directories(fs::path(out_file).parent_path().empty()
                             ? "."
                             : fs::path(out_file).parent_path().string());
  std::ofstream out(out_file, std::ios::binary | std::ios::trunc);
  if (!out)
    throw FormatError("sample-weights: cannot open '" + out_file + "'");
  std::vector<std::string> header{"draw"};
  for (const auto& name : related) header.push_back("lambda_" + name);
  out << csv_row(header);

  Rng rng = Rng(g.seed).child("weights-sampling");
  for (int d = 0; d < n_draws; ++d) {
    const auto w = sample_task_weights(rng, static_cast<int>(related.size()));
    std::vector<std::string> row{std::to_string(d)};
    for (double v : w) row.push_back(format_double(v));
    out << csv_row(row);
  }
  std::printf("wrote %s (%d draws x %zu related tasks)\n", out_file.c_str(),
              n_draws, related.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Multi-task landmark-detection experiments with collaborative-block "
      "feature sharing"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON config file");
  auto* seed_opt = app.add_option("--seed", g.seed, "root random seed");
  app.add_option("--jobs", g.jobs, "parallel workers for sweeps")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory (default: runs)");

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::int64_t gen_samples = 1000;
  int gen_size = 40;
  bool gen_corr = false, gen_uncorr = false;
  double gen_noise = 0.05, gen_label_noise = 0.0;
  double gen_scale_min = 0.7, gen_scale_max = 1.1, gen_jitter = 2.0;
  std::string gen_out, gen_export;
  gen->add_option("--samples", gen_samples, "number of samples");
  gen->add_option("--size", gen_size, "image side length");
  gen->add_flag("--correlated", gen_corr, "labels derived from latents");
  gen->add_flag("--uncorrelated", gen_uncorr,
                "labels resampled independently of the images");
  gen->add_option("--noise", gen_noise, "pixel noise amplitude");
  gen->add_option("--label-noise", gen_label_noise,
                  "per-attribute corruption probability");
  gen->add_option("--scale-min", gen_scale_min, "smallest face scale");
  gen->add_option("--scale-max", gen_scale_max, "largest face scale");
  gen->add_option("--jitter", gen_jitter, "center jitter in pixels");
  gen->add_option("-o,--output", gen_out, "dataset file path");
  gen->add_option("--export-json", gen_export, "dump labels as JSON");

  // train
  auto* tr = app.add_subcommand("train", "train one strategy");
  std::string tr_data, tr_strategy, tr_resume, tr_dir;
  int tr_epochs = 60, tr_batch = 32;
  double tr_lr = 0.0, tr_ratio = 0.5;
  tr->add_option("--data", tr_data, "dataset file (default: synth config)");
  tr->add_option("--strategy", tr_strategy,
                 "single|hard|hard_widened|cross_stitch|collaboration")
      ->required();
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--lr", tr_lr, "base learning rate");
  tr->add_option("--ratio", tr_ratio, "train/test prefix split ratio");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--run-dir", tr_dir, "explicit run directory");

  // compare
  auto* cp = app.add_subcommand(
      "compare", "train the strategy roster across seeds and ratios");
  std::string cp_data,
      cp_strategies = "single,hard,hard_widened,cross_stitch,collaboration";
  std::string cp_weights;
  int cp_seeds = 3, cp_epochs = 60;
  std::vector<double> cp_ratios;
  cp->add_option("--data", cp_data, "dataset file (default: synth config)");
  cp->add_option("--strategies", cp_strategies, "comma-separated roster");
  cp->add_option("--seeds", cp_seeds, "seeds per cell")
      ->check(CLI::PositiveNumber);
  cp->add_option("--ratios", cp_ratios, "train/test ratios")
      ->delimiter(',');
  cp->add_option("--epochs", cp_epochs, "training epochs");
  cp->add_option("--weights-file", cp_weights,
                 "CSV of sampled task weights for paired runs");

  // ablate
  auto* ab = app.add_subcommand(
      "ablate", "feature-zeroing influence grid from a checkpoint");
  std::string ab_ckpt, ab_data;
  std::vector<int> ab_depths;
  ab->add_option("--checkpoint", ab_ckpt, "run directory or checkpoint file")
      ->required();
  ab->add_option("--data", ab_data, "dataset file override");
  ab->add_option("--depths", ab_depths, "fusion depths to evaluate")
      ->delimiter(',');

  // sample-weights
  auto* sw = app.add_subcommand("sample-weights",
                                "draw log-uniform task weights");
  int sw_n = 100;
  std::string sw_out;
  sw->add_option("--n", sw_n, "number of draws");
  sw->add_option("-o,--output", sw_out, "weights CSV path");

  try {
    app.parse(argc, argv);
    g.seed_set = seed_opt->count() > 0;
    const json root = load_config_file(g.config_path);
    if (!g.seed_set && root.contains("seed")) {
      g.seed = root.at("seed").get<std::uint64_t>();
      g.seed_set = true;
    }

    if (gen->parsed())
      return cmd_gen(g, root, gen, gen_samples, gen_size, gen_corr, gen_uncorr,
                     gen_noise, gen_label_noise, gen_scale_min, gen_scale_max,
                     gen_jitter, gen_out, gen_export);
    if (tr->parsed())
      return cmd_train(g, root, tr, tr_data, tr_strategy, tr_epochs, tr_batch,
                       tr_lr, tr_ratio, tr_resume, tr_dir);
    if (cp->parsed())
      return cmd_compare(g, root, cp, cp_data, cp_strategies, cp_seeds,
                         cp_ratios, cp_epochs, cp_weights);
    if (ab->parsed()) return cmd_ablate(g, root, ab_ckpt, ab_data, ab_depths);
    if (sw->parsed()) return cmd_sample_weights(g, root, sw_n, sw_out);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const IndexError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
