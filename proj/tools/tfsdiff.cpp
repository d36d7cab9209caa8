// tfsdiff command-line front end.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tfsdiff/image.hpp"
#include "tfsdiff/pipeline.hpp"

using namespace tfsdiff;

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_if_changed(path, std::vector<unsigned char>(text.begin(), text.end()));
}

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(!item.empty() && used == item.size(), ErrorCode::kInvalidArgument,
            "invalid " + what + " '" + text + "'");
    out.push_back(static_cast<std::size_t>(v));
    pos = comma + 1;
  }
  return out;
}

// Config assembly shared by train and ablate: file, then per-field flags,
// then --set overrides, in that order.
struct ConfigFlags {
  std::string file;
  std::string profile;
  std::map<std::string, std::string> fields;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value config file");
    cmd->add_option("--profile", profile, "base profile: desk, toy or paper");
    for (const std::string& key : config_keys()) {
      if (key == "profile") continue;
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      cmd->add_option(flag, fields[key], "config field " + key);
    }
    cmd->add_option("--set", sets, "override key=value (repeatable)");
  }

  TrainConfig resolve() const {
    std::string text;
    if (!file.empty()) {
      std::ifstream in(file);
      require(in.good(), ErrorCode::kIo, "cannot read config file " + file);
      std::stringstream buf;
      buf << in.rdbuf();
      text = buf.str();
    }
    // The last profile line wins, so --profile overrides the file's choice
    // while the file's other keys still apply on top of it.
    if (!profile.empty()) text += "\nprofile = " + profile + "\n";
    TrainConfig c = parse_config(text);
    for (const std::string& key : config_keys()) {
      const auto it = fields.find(key);
      if (it != fields.end() && !it->second.empty()) apply_config_override(c, key, it->second);
    }
    for (const std::string& kv : sets) {
      const auto eq = kv.find('=');
      require(eq != std::string::npos, ErrorCode::kConfig, "--set expects key=value, got '" + kv + "'");
      apply_config_override(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
  }
};

int run_build_dataset(const std::string& src, const std::string& out, const std::string& scales,
                      const std::string& ratio, std::uint64_t seed, std::size_t synthetic,
                      std::size_t synthetic_size) {
  if (synthetic > 0) {
    generate_synthetic_source(src, {synthetic, synthetic_size, seed + 1});
    std::cerr << "generated " << synthetic << " synthetic samples in " << src << "\n";
  }
  BuildOptions opts;
  opts.scales = parse_sizes(scales, "scale list");
  const auto r = parse_sizes(ratio, "split ratio");
  require(r.size() == 3, ErrorCode::kInvalidArgument, "split ratio needs three parts: train,val,test");
  opts.ratio = {r[0], r[1], r[2]};
  opts.seed = seed;
  const DatasetManifest m = build_dataset(src, out, opts);
  std::cout << "train " << m.train.size() << " val " << m.val.size() << " test " << m.test.size()
            << " rejected " << m.rejected.size() << "\n";
  for (const auto& [id, reason] : m.rejected) std::cout << "rejected " << id << ": " << reason << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tri-modal medical image fusion and super-resolution with a conditional diffusion model"};
  app.require_subcommand(1);

  // build-dataset
  std::string src, out_dir, scales = "2,4,8", ratio = "84,10,25";
  std::uint64_t seed = 0;
  std::size_t synthetic = 0, synthetic_size = 32;
  auto* build = app.add_subcommand("build-dataset", "downsample a source tree into a split dataset");
  build->add_option("--src", src, "source directory of <id>/{x,y,s,gt}.png")->required();
  build->add_option("--out", out_dir, "output dataset directory")->required();
  build->add_option("--scales", scales, "comma-separated scale factors");
  build->add_option("--ratio", ratio, "train,val,test ratio");
  build->add_option("--seed", seed, "split seed");
  build->add_option("--synthetic", synthetic, "first write this many synthetic samples into --src");
  build->add_option("--synthetic-size", synthetic_size, "synthetic ground-truth size in pixels");

  // train
  ConfigFlags train_flags;
  std::string dataset, checkpoint_out, resume, log_path, split = "train";
  std::uint64_t stop_at = 0;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "train a fusion network");
  train_cmd->add_option("--dataset", dataset, "built dataset directory")->required();
  train_cmd->add_option("--checkpoint", checkpoint_out, "checkpoint output path")->required();
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  train_cmd->add_option("--stop-at", stop_at, "stop after this many total steps");
  train_cmd->add_option("--loss-log", log_path, "write the step-indexed loss log here");
  train_cmd->add_option("--split", split, "dataset split to train on");
  train_cmd->add_flag("--quiet", quiet, "no per-step progress");
  train_flags.attach(train_cmd);

  // fuse
  std::string fuse_ckpt, in_x, in_y, in_s, fuse_out;
  std::uint64_t fuse_seed = 0;
  auto* fuse = app.add_subcommand("fuse", "fuse one low-resolution triple");
  fuse->add_option("--checkpoint", fuse_ckpt, "trained checkpoint")->required();
  fuse->add_option("--x", in_x, "first modality PNG")->required();
  fuse->add_option("--y", in_y, "second modality PNG")->required();
  fuse->add_option("--s", in_s, "functional modality PNG")->required();
  fuse->add_option("--out", fuse_out, "output PNG")->required();
  fuse->add_option("--seed", fuse_seed, "sampling seed");

  // eval
  std::string results, gt, eval_json, eval_table, lpips_cmd, eval_ckpt, eval_dataset, eval_split = "test";
  double range = 255.0;
  bool allow_partial = false;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "score fused images against ground truth");
  eval->add_option("--results", results, "directory of fused PNGs (or fused output with --checkpoint)");
  eval->add_option("--gt", gt, "directory of ground-truth PNGs");
  eval->add_option("--checkpoint", eval_ckpt, "fuse a dataset split with this checkpoint first");
  eval->add_option("--dataset", eval_dataset, "built dataset directory (with --checkpoint)");
  eval->add_option("--split", eval_split, "dataset split (with --checkpoint)");
  eval->add_option("--seed", eval_seed, "sampling seed (with --checkpoint)");
  eval->add_option("--range", range, "pixel range for MSE/MAE/RMSE/PSNR");
  eval->add_flag("--allow-partial", allow_partial, "skip files present on only one side");
  eval->add_option("--lpips-cmd", lpips_cmd, "external LPIPS scorer: <cmd> <result> <gt>");
  eval->add_option("--json", eval_json, "write the JSON report here");
  eval->add_option("--table", eval_table, "write the text table here");

  // ablate
  ConfigFlags ablate_flags;
  std::string ablate_dataset, ablate_out, train_split = "train";
  auto* ablate_cmd = app.add_subcommand("ablate", "train and score the baseline and both ablations");
  ablate_cmd->add_option("--dataset", ablate_dataset, "built dataset directory")->required();
  ablate_cmd->add_option("--out", ablate_out, "summary output directory")->required();
  ablate_cmd->add_option("--train-split", train_split, "split to train on");
  ablate_flags.attach(ablate_cmd);

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      std::fprintf(stderr, "error: E_ARG: %s\n", e.what());
      return 2;
    }

    if (build->parsed()) {
      return run_build_dataset(src, out_dir, scales, ratio, seed, synthetic, synthetic_size);
    }

    if (train_cmd->parsed()) {
      TrainConfig config = train_flags.resolve();
      TrainOptions opts;
      opts.split = split;
      opts.checkpoint_path = checkpoint_out;
      opts.stop_at = stop_at;
      if (!resume.empty()) opts.resume = load_checkpoint(resume);
      if (!quiet) {
        opts.on_step = [](const LossRecord& r) {
          if (r.step % 50 == 0) {
            std::fprintf(stderr, "step %llu loss %.6f (diffusion %.6f psf %.6f)\n",
                         static_cast<unsigned long long>(r.step), r.total, r.diffusion, r.psf);
          }
        };
      }
      const TrainResult result = train(config, dataset, opts);
      if (!log_path.empty()) write_text(log_path, format_loss_log(result.log));
      std::cout << "trained to step " << result.final_checkpoint.step << "; checkpoint "
                << checkpoint_out << "\n";
      return 0;
    }

    if (fuse->parsed()) {
      FuseOptions opts;
      opts.seed = fuse_seed;
      double total = 0.0;
      opts.on_step = [&](std::size_t t, double seconds) {
        total += seconds;
        std::fprintf(stderr, "step %zu %.4fs\n", t, seconds);
      };
      fuse_files(fuse_ckpt, in_x, in_y, in_s, fuse_out, opts);
      std::fprintf(stderr, "sampling took %.3fs\n", total);
      std::cout << fuse_out << "\n";
      return 0;
    }

    if (eval->parsed()) {
      MetricsReport report;
      if (!eval_ckpt.empty()) {
        require(!eval_dataset.empty(), ErrorCode::kInvalidArgument, "--checkpoint needs --dataset");
        const Checkpoint c = load_checkpoint(eval_ckpt);
        const TrainConfig config = parse_config(c.config_text);
        const FusionNet net = restore_network(c);
        report = evaluate_samples(net, config, load_split(eval_dataset, eval_split, config.scale),
                                  eval_seed, results);
      } else {
        require(!results.empty() && !gt.empty(), ErrorCode::kInvalidArgument,
                "eval needs --results and --gt, or --checkpoint and --dataset");
        EvalOptions opts;
        opts.range = range;
        opts.allow_partial = allow_partial;
        opts.lpips_command = lpips_cmd;
        report = evaluate_set(results, gt, opts);
      }
      if (!eval_json.empty()) write_text(eval_json, report_to_json(report));
      const std::string table = report_to_table(report);
      if (!eval_table.empty()) write_text(eval_table, table);
      std::cout << table;
      return 0;
    }

    if (ablate_cmd->parsed()) {
      const TrainConfig config = ablate_flags.resolve();
      const auto train_samples = load_split(ablate_dataset, train_split, config.scale);
      const auto eval_samples = load_split(ablate_dataset, config.eval_split, config.scale);
      const AblationResult result = ablate(config, train_samples, eval_samples);
      write_text(std::filesystem::path(ablate_out) / "ablation.json", result.summary_json);
      write_text(std::filesystem::path(ablate_out) / "ablation.txt", result.summary_table);
      std::cout << result.summary_table;
      return 0;
    }
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error: %s: %s\n", std::string(code_name(e.code())).c_str(), msg.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error: E_IO: %s\n", msg.c_str());
    return 1;
  }
  return 0;
}
