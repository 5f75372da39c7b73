// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <functional>

#include "ltd/cli.hpp"

namespace ltd {

namespace {

// A flag that writes one config key when given.
struct KeyFlag {
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

struct Subcommand {
  CLI::App* app = nullptr;
  std::function<int(const RunConfig&, std::ostream&)> run;
  std::vector<std::unique_ptr<KeyFlag>> flags;
  std::vector<std::string> targets;

  void flag(const std::string& name, const std::string& key, const std::string& help) {
    auto f = std::make_unique<KeyFlag>();
    f->key = key;
    f->option = app->add_option(name, f->value, help + " (" + key + ")");
    flags.push_back(std::move(f));
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Language-targeted detection: data preparation, training and evaluation", "ltd"};
  app.require_subcommand(1);

  std::string config_path;
  std::string seed;
  std::string out_dir;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--seed", seed, "global seed");
  app.add_option("--out", out_dir, "output directory (paths.out)");
  app.add_option("--set", overrides, "override one config key, as key=value")->allow_extra_args(false);

  std::vector<Subcommand> subs(6);
  auto define = [&](std::size_t i, const char* name, const char* help, auto run) -> Subcommand& {
    subs[i].app = app.add_subcommand(name, help);
    subs[i].app->fallthrough();
    subs[i].run = run;
    return subs[i];
  };

  Subcommand& gen = define(0, "gen", "write a synthetic shapes dataset with annotations", cmd_gen);
  gen.flag("--n", "gen.images", "number of images");
  gen.flag("--size", "gen.size", "image side in pixels");

  Subcommand& convert = define(1, "convert", "turn detection annotations into targeted samples", cmd_convert);
  convert.flag("--annotations", "paths.annotations", "annotation file");
  convert.flag("--dataset", "paths.dataset", "output dataset file");
  convert.flag("--all-prob", "sampling.all_token_probability", "probability of the [all] phrase");
  convert.flag("--deceptive-rate", "sampling.deceptive_rate", "deceptive target rate");
  convert.flag("--epochs", "sampling.epochs", "samples drawn per image");
  convert.flag("--workers", "workers", "worker threads");

  Subcommand& stats = define(2, "stats", "print statistics of a targeted dataset", cmd_stats);
  stats.flag("--dataset", "paths.dataset", "dataset file");

  Subcommand& train = define(3, "train", "train a detector", cmd_train);
  train.flag("--annotations", "paths.annotations", "annotation file");
  train.flag("--dataset", "paths.dataset", "dataset file");
  train.flag("--steps", "train.steps", "total optimizer steps");
  train.flag("--batch-size", "train.batch_size", "samples per step");
  train.flag("--checkpoint-every", "train.checkpoint_every", "steps between checkpoints");
  train.flag("--resume", "paths.resume", "checkpoint to resume from");

  Subcommand& eval = define(4, "eval", "compute AP under a protocol", cmd_eval);
  eval.flag("--annotations", "paths.annotations", "annotation file");
  eval.flag("--checkpoint", "paths.checkpoint", "checkpoint manifest");
  eval.flag("--protocol", "eval.protocol", "all or targeted_only");
  eval.flag("--rates", "eval.rates", "comma-separated deceptive rates");

  Subcommand& attn = define(5, "attn", "dump attention maps for one image", cmd_attn);
  attn.flag("--annotations", "paths.annotations", "annotation file");
  attn.flag("--checkpoint", "paths.checkpoint", "checkpoint manifest");
  attn.flag("--image-id", "attn.image_id", "image id");
  CLI::Option* target_opt = attn.app->add_option("--target", attn.targets, "target phrase (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    // Subcommand help lands here too.
    if (e.get_exit_code() == 0) {
      for (const auto& s : subs) {
        if (s.app->parsed()) out << s.app->help();
      }
      return 0;
    }
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig() : load_run_config(config_path);
    for (const std::string& item : overrides) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
      cfg.set(item.substr(0, eq), item.substr(eq + 1));
    }
    if (!seed.empty()) cfg.set("seed", seed);
    if (!out_dir.empty()) cfg.set("paths.out", out_dir);
    for (const Subcommand& s : subs) {
      if (!s.app->parsed()) continue;
      for (const auto& f : s.flags) {
        if (f->option->count() > 0) cfg.set(f->key, f->value);
      }
      if (&s == &attn && target_opt->count() > 0) cfg.attn_targets = s.targets;
      return s.run(cfg, out);
    }
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace ltd
