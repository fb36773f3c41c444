#pragma once

// Command-line front end: synth / train / eval / infer / gradcheck / bench.
//
// Every command reads a key=value config (optional file, then --set
// overrides, then the dedicated flags), runs, and writes a sorted
// resolved_config.txt echo into the output directory so a run can be
// reproduced exactly from its artifacts. Exit codes: 0 success, 1 usage
// error, 2 data error, 3 verification failure.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "volmark/bench.hpp"
#include "volmark/dataio.hpp"
#include "volmark/metrics.hpp"
#include "volmark/model.hpp"
#include "volmark/train.hpp"
#include "volmark/verify.hpp"

namespace volmark::cli {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerification = 3;

class RunConfig {
 public:
  void load_file(const std::filesystem::path& path) {
    std::istringstream in(volmark::detail::read_file(path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw IoError(path.string() + ":" + std::to_string(lineno) +
                      ": expected 'key = value'");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    detail::require(eq != std::string::npos,
                    "--set expects key=value, got '" + assignment + "'");
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& def) {
    auto it = kv_.find(key);
    if (it == kv_.end()) {
      kv_[key] = def;
      return def;
    }
    return it->second;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) {
    return std::stoull(get(key, std::to_string(def)));
  }
  double get_double(const std::string& key, double def) {
    return std::stod(get(key, volmark::detail::fmt_double(def)));
  }
  bool get_bool(const std::string& key, bool def) {
    const std::string v = get(key, def ? "true" : "false");
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw IoError("config key '" + key + "': expected a boolean, got '" + v + "'");
  }

  // "AxBxC" triple
  Dims3 get_dims(const std::string& key, const std::string& def) {
    const std::string v = get(key, def);
    Dims3 out{};
    std::istringstream ss(v);
    char sep1, sep2;
    if (!(ss >> out[0] >> sep1 >> out[1] >> sep2 >> out[2]) || sep1 != 'x' || sep2 != 'x')
      throw IoError("config key '" + key + "': expected HxWxD, got '" + v + "'");
    return out;
  }

  std::vector<double> get_doubles(const std::string& key, const std::string& def) {
    const std::string v = get(key, def);
    std::vector<double> out;
    std::istringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key, const std::string& def) {
    std::vector<std::size_t> out;
    for (double d : get_doubles(key, def)) out.push_back(static_cast<std::size_t>(d));
    return out;
  }

  std::vector<Dims3> get_dims_list(const std::string& key, const std::string& def) {
    const std::string v = get(key, def);
    std::vector<Dims3> out;
    std::istringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      Dims3 d{};
      std::istringstream ts(tok);
      char s1, s2;
      if (!(ts >> d[0] >> s1 >> d[1] >> s2 >> d[2]) || s1 != 'x' || s2 != 'x')
        throw IoError("config key '" + key + "': expected a list of HxWxD, got '" + v + "'");
      out.push_back(d);
    }
    return out;
  }

  std::string echo() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
    return os.str();
  }

 private:
  std::map<std::string, std::string> kv_;
};

namespace detail_cli {

inline std::filesystem::path require_out(RunConfig& cfg) {
  const std::string out = cfg.get("out", "");
  volmark::detail::require(!out.empty(),
                           "an output directory is required (--out or --set out=...)");
  std::filesystem::create_directories(out);
  return out;
}

inline void write_echo(const std::filesystem::path& out_dir, const RunConfig& cfg) {
  volmark::detail::atomic_write(out_dir / "resolved_config.txt", cfg.echo());
}

inline std::string require_data_dir(RunConfig& cfg) {
  const std::string data = cfg.get("data", "");
  volmark::detail::require(!data.empty(), "a dataset directory is required (--set data=...)");
  if (!std::filesystem::exists(std::filesystem::path(data) / "dataset.txt"))
    throw IoError("no dataset.txt under '" + data +
                  "'; generate one first with `volmark synth --out " + data + "`");
  return data;
}

struct Dataset {
  std::vector<std::string> names;
  std::vector<Volume<float>> volumes;
  std::vector<LandmarkSet> annotations;
};

inline Dataset load_dataset(const std::string& dir, bool with_annotations = true) {
  Dataset ds;
  ds.names = load_manifest(dir);
  for (const auto& name : ds.names) {
    ds.volumes.push_back(load_volume<float>(std::filesystem::path(dir) / name));
    if (with_annotations)
      ds.annotations.push_back(
          load_landmarks(std::filesystem::path(dir) / (name + ".landmarks")));
  }
  return ds;
}

inline ModelConfig model_config_from(RunConfig& cfg, const Dataset& ds) {
  ModelConfig mc;
  const std::string variant = cfg.get("variant", "anchor_free");
  volmark::detail::require(variant == "anchor_free" || variant == "anchor_based",
                           "variant must be anchor_free or anchor_based, got '" + variant +
                               "'");
  mc.variant = variant == "anchor_based" ? Variant::AnchorBased : Variant::AnchorFree;
  const auto vdims = ds.volumes.front().dims();
  char dims_def[48];
  std::snprintf(dims_def, sizeof dims_def, "%zux%zux%zu", vdims[0], vdims[1], vdims[2]);
  mc.input_dims = cfg.get_dims("model.input_dims", dims_def);
  mc.landmark_count = static_cast<std::size_t>(cfg.get_u64(
      "model.landmarks",
      ds.annotations.empty() ? 2 : ds.annotations.front().count()));
  mc.stages = static_cast<std::size_t>(cfg.get_u64("model.stages", 4));
  mc.channels = cfg.get_sizes("model.channels", "8,16,32,64");
  mc.heads = static_cast<std::size_t>(cfg.get_u64("model.heads", 2));
  mc.region_size = cfg.get_dims("model.region", "4x4x4");
  mc.top_k = static_cast<std::size_t>(cfg.get_u64("model.top_k", 4));
  mc.heatmap_sigma = cfg.get_double("model.sigma", 3.0);
  mc.mlp_ratio = cfg.get_double("model.mlp_ratio", 2.0);
  mc.anchor_radii = cfg.get_doubles("model.anchor_radii", "2,4,6");
  mc.aux_heatmap_head = cfg.get_bool("model.aux_heatmap_head", false);
  mc.force_self_region = cfg.get_bool("model.force_self_region", false);
  mc.validate();
  return mc;
}

inline int cmd_synth(RunConfig& cfg) {
  const auto out = require_out(cfg);
  SynthSpec spec;
  spec.count = static_cast<std::size_t>(cfg.get_u64("synth.count", 5));
  spec.dims = cfg.get_dims("synth.dims", "32x32x16");
  {
    const Dims3 d = spec.dims;
    spec.dims = {d[0], d[1], d[2]};
  }
  spec.landmarks = static_cast<std::size_t>(cfg.get_u64("synth.landmarks", 2));
  spec.sigma_blob = cfg.get_double("synth.sigma", 2.0);
  spec.noise_level = cfg.get_double("synth.noise", 0.05);
  spec.missing_prob = cfg.get_double("synth.missing_prob", 0.0);
  spec.seed = cfg.get_u64("seed", 0);
  const auto spacing = cfg.get_doubles("synth.spacing", "1,1,1");
  volmark::detail::require(spacing.size() == 3, "synth.spacing needs three values");
  spec.spacing = {spacing[0], spacing[1], spacing[2]};
  spec.validate();

  auto names = synth_generate<float>(spec, out);
  write_echo(out, cfg);
  std::cout << "wrote " << names.size() << " cases to " << out.string() << "\n";
  return kExitOk;
}

inline int cmd_train(RunConfig& cfg) {
  const auto out = require_out(cfg);
  const std::string data = require_data_dir(cfg);
  Dataset ds = load_dataset(data);
  ModelConfig mc = model_config_from(cfg, ds);

  const std::uint64_t seed = cfg.get_u64("seed", 0);
  TrainOptions opt;
  opt.steps = static_cast<std::size_t>(cfg.get_u64("train.steps", 500));
  opt.learning_rate = cfg.get_double("train.lr", 30.0);
  opt.clip_norm = cfg.get_double("train.clip_norm", 1.0);
  opt.weights.reg = cfg.get_double("loss.reg_weight", 1.0);
  opt.weights.cls = cfg.get_double("loss.cls_weight", 1.0);
  opt.weights.heatmap = cfg.get_double("loss.heatmap_weight", 1.0);
  const std::size_t checkpoint_every =
      static_cast<std::size_t>(cfg.get_u64("train.checkpoint_every", 0));

  std::vector<TrainingCase<float>> cases;
  for (std::size_t i = 0; i < ds.volumes.size(); ++i)
    cases.push_back(make_training_case(mc, ds.volumes[i], ds.annotations[i], ds.names[i]));

  auto model = build_model<float>(mc, seed);
  std::ostringstream curve;
  curve << "step,total,heatmap,reg,cls\n";
  char buf[160];

  if (checkpoint_every == 0) {
    auto records = train_model(model, cases, opt);
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.step, r.total, r.heatmap,
                    r.reg, r.cls);
      curve << buf;
    }
  } else {
    std::size_t done = 0;
    while (done < opt.steps) {
      TrainOptions chunk = opt;
      chunk.steps = std::min(checkpoint_every, opt.steps - done);
      auto records = train_model(model, cases, chunk);
      for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", done + r.step, r.total,
                      r.heatmap, r.reg, r.cls);
        curve << buf;
      }
      done += chunk.steps;
      char name[64];
      std::snprintf(name, sizeof name, "model_step%06zu.ckpt", done);
      save_checkpoint(out / name, model);
    }
  }
  save_checkpoint(out / "model.ckpt", model);
  volmark::detail::atomic_write(out / "loss_curve.csv", curve.str());
  write_echo(out, cfg);

  const auto final_loss = evaluate_loss(model, cases, opt.weights);
  std::snprintf(buf, sizeof buf, "final loss %.6g (heatmap %.6g, reg %.6g, cls %.6g)\n",
                final_loss.total, final_loss.heatmap, final_loss.reg, final_loss.cls);
  std::cout << buf;
  std::cout << "checkpoint: " << (out / "model.ckpt").string() << "\n";
  return kExitOk;
}

inline PredictOptions predict_options(RunConfig& cfg) {
  PredictOptions p;
  p.presence_threshold = cfg.get_double("decode.presence_threshold", 0.25);
  p.tau = cfg.get_double("decode.tau", 0.5);
  p.centroid_refine = cfg.get_bool("decode.centroid_refine", false);
  return p;
}

inline ModelState<float> load_checkpoint_arg(RunConfig& cfg) {
  const std::string ckpt = cfg.get("checkpoint", "");
  volmark::detail::require(!ckpt.empty(),
                           "a checkpoint is required (--set checkpoint=path/model.ckpt)");
  if (!std::filesystem::exists(ckpt))
    throw IoError("checkpoint '" + ckpt + "' does not exist; train one with `volmark train`");
  return load_checkpoint<float>(ckpt);
}

inline int cmd_eval(RunConfig& cfg) {
  const auto out = require_out(cfg);
  const std::string data = require_data_dir(cfg);
  Dataset ds = load_dataset(data);
  auto model = load_checkpoint_arg(cfg);
  const PredictOptions popt = predict_options(cfg);

  EvalReport report;
  report.thresholds_mm = cfg.get_doubles("eval.thresholds_mm", "2,2.5,3,4");
  for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
    LandmarkSet pred = predict_landmarks(model, ds.volumes[i], popt);
    report.add_case(pred, ds.annotations[i], ds.names[i]);
  }
  report.finalize();
  volmark::detail::atomic_write(out / "eval_report.txt", report.to_table());
  volmark::detail::atomic_write(out / "eval_records.csv", report.to_records());
  write_echo(out, cfg);
  std::cout << report.to_table();
  return kExitOk;
}

inline int cmd_infer(RunConfig& cfg) {
  const auto out = require_out(cfg);
  const std::string data = require_data_dir(cfg);
  Dataset ds = load_dataset(data, /*with_annotations=*/false);
  auto model = load_checkpoint_arg(cfg);
  const PredictOptions popt = predict_options(cfg);

  for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
    LandmarkSet pred = predict_landmarks(model, ds.volumes[i], popt);
    save_landmarks(out / (ds.names[i] + ".landmarks"), pred);
  }
  write_echo(out, cfg);
  std::cout << "wrote " << ds.names.size() << " prediction files to " << out.string() << "\n";
  return kExitOk;
}

inline int cmd_gradcheck(RunConfig& cfg, const std::string& suite, bool corrupt) {
  const std::uint64_t seed = cfg.get_u64("seed", 0);
  std::vector<CheckResult> results;
  auto append = [&](std::vector<CheckResult> v) {
    results.insert(results.end(), v.begin(), v.end());
  };
  if (suite == "ops" || suite == "all") append(gradcheck_ops(seed, corrupt));
  if (suite == "vbra" || suite == "all") append(gradcheck_vbra(seed));
  if (suite == "losses" || suite == "all") append(gradcheck_losses(seed));
  if (suite == "end2end" || suite == "all") append(gradcheck_end2end(seed));
  volmark::detail::require(!results.empty(), "unknown gradcheck suite '" + suite +
                                                 "' (ops|vbra|losses|end2end|all)");
  bool ok = true;
  std::ostringstream os;
  for (const auto& r : results) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-28s max rel error %.3e (tolerance %.0e) %s\n",
                  r.name.c_str(), r.max_rel_error, r.tolerance,
                  r.passed() ? "ok" : "FAIL");
    os << buf;
    ok &= r.passed();
  }
  std::cout << os.str();
  if (cfg.has("out")) {
    const auto out = require_out(cfg);
    volmark::detail::atomic_write(out / "gradcheck_report.txt", os.str());
    write_echo(out, cfg);
  }
  return ok ? kExitOk : kExitVerification;
}

inline int cmd_bench(RunConfig& cfg) {
  const std::uint64_t seed = cfg.get_u64("seed", 0);
  const auto dims_list = cfg.get_dims_list("bench.dims", "16x16x16,8x8x8");
  const auto region_list = cfg.get_dims_list("bench.regions", "4x4x4,2x2x2");
  const auto k_list = cfg.get_sizes("bench.k", "1,2,4");
  const std::size_t repeats = static_cast<std::size_t>(cfg.get_u64("bench.repeats", 5));
  const std::size_t heads = static_cast<std::size_t>(cfg.get_u64("bench.heads", 2));
  const std::size_t channels = static_cast<std::size_t>(cfg.get_u64("bench.channels", 8));
  const bool measure = cfg.get_bool("bench.measure", true);

  std::vector<BenchPoint> points;
  for (const Dims3& dims : dims_list)
    for (const Dims3& region : region_list)
      for (std::size_t k : k_list) {
        std::size_t regions = 1;
        for (int ax = 0; ax < 3; ++ax) {
          volmark::detail::require(
              region[ax] >= 1 && dims[ax] % region[ax] == 0,
              "bench: region extent " + std::to_string(region[ax]) +
                  " does not divide volume extent " + std::to_string(dims[ax]));
          regions *= dims[ax] / region[ax];
        }
        volmark::detail::require(k <= regions,
                                 "bench: k=" + std::to_string(k) + " exceeds " +
                                     std::to_string(regions) + " regions for this point");
        points.push_back({dims, region, k, heads, channels});
      }

  auto records = run_benchmark<float>(points, repeats, seed, measure);
  const std::string table = bench_table(records);
  std::cout << table;
  if (cfg.has("out")) {
    const auto out = require_out(cfg);
    volmark::detail::atomic_write(out / "bench_table.txt", table);
    volmark::detail::atomic_write(out / "bench_records.txt",
                                  bench_records(records, /*include_timings=*/false));
    if (measure) {
      std::ostringstream times;
      times << "bench timings (seconds, median of " << repeats << ")\n";
      for (const auto& r : records) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "T=%zu S=%zu k=%zu dense %.6f routed %.6f\n",
                      r.tokens, r.region_tokens, r.point.top_k, r.dense_seconds,
                      r.routed_seconds);
        times << buf;
      }
      volmark::detail::atomic_write(out / "bench_timings.txt", times.str());
    }
    write_echo(out, cfg);
  }
  return kExitOk;
}

}  // namespace detail_cli

inline int run(std::vector<std::string> args) {
  CLI::App app{"volumetric landmark detection workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir, variant, seed_str;
  std::vector<std::string> overrides;
  std::string gradcheck_suite = "all";
  bool corrupt = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value config file");
    cmd->add_option("--seed", seed_str, "master seed (u64)");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--set", overrides, "override a config key, e.g. --set train.lr=10");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  CLI::App* train = app.add_subcommand("train", "train a detector");
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint against annotations");
  CLI::App* infer = app.add_subcommand("infer", "write predicted landmark files");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  CLI::App* bench = app.add_subcommand("bench", "sparse vs dense attention accounting");
  for (CLI::App* cmd : {synth, train, eval_cmd, infer, gradcheck, bench}) add_common(cmd);
  for (CLI::App* cmd : {train, eval_cmd, infer})
    cmd->add_option("--variant", variant, "anchor_free | anchor_based");
  std::string data_dir, checkpoint;
  for (CLI::App* cmd : {train, eval_cmd, infer})
    cmd->add_option("--data", data_dir, "dataset directory");
  for (CLI::App* cmd : {eval_cmd, infer})
    cmd->add_option("--checkpoint", checkpoint, "model checkpoint path");
  gradcheck->add_option("suite", gradcheck_suite, "ops | vbra | losses | end2end | all");
  gradcheck->add_flag("--corrupt", corrupt,
                      "run a deliberately broken gradient through the harness (test hook)");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& o : overrides) cfg.set_override(o);
    if (!seed_str.empty()) cfg.set("seed", seed_str);
    if (!out_dir.empty()) cfg.set("out", out_dir);
    if (!variant.empty()) cfg.set("variant", variant);
    if (!data_dir.empty()) cfg.set("data", data_dir);
    if (!checkpoint.empty()) cfg.set("checkpoint", checkpoint);

    if (synth->parsed()) return detail_cli::cmd_synth(cfg);
    if (train->parsed()) return detail_cli::cmd_train(cfg);
    if (eval_cmd->parsed()) return detail_cli::cmd_eval(cfg);
    if (infer->parsed()) return detail_cli::cmd_infer(cfg);
    if (gradcheck->parsed()) return detail_cli::cmd_gradcheck(cfg, gradcheck_suite, corrupt);
    if (bench->parsed()) return detail_cli::cmd_bench(cfg);
    std::cerr << "no command selected\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitVerification;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace volmark::cli
