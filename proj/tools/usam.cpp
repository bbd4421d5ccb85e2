// Command-line front end: dataset preparation, training, evaluation,
// ablation grids and the HTTP service.
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <c10/util/Logging.h>

#include "usam/checkpoint.hpp"
#include "usam/data.hpp"
#include "usam/error.hpp"
#include "usam/evaluation.hpp"
#include "usam/service.hpp"
#include "usam/training.hpp"

namespace fs = std::filesystem;
using namespace usam;

namespace {

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

std::vector<uint64_t> to_seeds(const std::vector<int64_t>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Promptable CT segmentation: U-shaped SAM with CNN skip connections"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  // dataset synth / pack
  auto* dataset = app.add_subcommand("dataset", "Build a dataset of 224x224 slice pairs");
  dataset->require_subcommand(1);
  std::string window_text = "40:400";
  fs::path data_out;

  auto* synth = dataset->add_subcommand("synth", "Generate a synthetic dataset");
  fs::path spec_path;
  synth->add_option("--spec", spec_path, "Synthetic spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  synth->add_option("--out", data_out, "Output directory")->required();
  synth->add_option("--window", window_text, "HU window center:width");

  auto* pack = dataset->add_subcommand("pack", "Pack MetaImage CT and label volumes into slice pairs");
  fs::path volume_dir, label_dir;
  std::string split = "train";
  std::vector<std::string> class_names = default_class_names();
  pack->add_option("--volumes", volume_dir, "Directory of CT .mhd files")->required()->check(CLI::ExistingDirectory);
  pack->add_option("--labels", label_dir, "Directory of label .mhd files with matching names")
      ->required()
      ->check(CLI::ExistingDirectory);
  pack->add_option("--out", data_out, "Output directory")->required();
  pack->add_option("--window", window_text, "HU window center:width");
  pack->add_option("--split", split, "Split name recorded in the manifest");
  pack->add_option("--classes", class_names, "Class names, background first");

  // init
  auto* init = app.add_subcommand("init", "Write a freshly initialised checkpoint");
  std::string variant = "tiny", decoder = "usam";
  int64_t image_size = 224, skips = 4;
  uint64_t seed = 0;
  fs::path ckpt_out, pretrained;
  init->add_option("--variant", variant, "Backbone variant: vit-b-full or tiny");
  init->add_option("--image-size", image_size, "Model input size (multiple of 16)");
  init->add_option("--skips", skips, "Enabled skip connections, 0-4");
  init->add_option("--decoder", decoder, "Decoder variant: usam or initial");
  init->add_option("--seed", seed, "Initialisation seed");
  init->add_option("--pretrained", pretrained, "SAM-style weights for backbone, prompt encoder and mask decoder")
      ->check(CLI::ExistingFile);
  init->add_option("--out", ckpt_out, "Checkpoint path")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  fs::path config_path, data_dir, out_dir, resume;
  train_cmd->add_option("--config", config_path, "Training config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--pretrained", pretrained, "SAM-style initial weights")->check(CLI::ExistingFile);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  fs::path ckpt_path, report_stem;
  EvalOptions eval;
  std::string undefined = "exclude";
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--points", eval.k_points, "Prompt points per present class");
  eval_cmd->add_option("--seed", eval.seed, "Prompt sampling seed");
  eval_cmd->add_option("--undefined", undefined, "Pairs without the class: exclude or one")
      ->check(CLI::IsMember({"exclude", "one"}));
  eval_cmd->add_option("--out", report_stem, "Report path stem (writes .json and .csv)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate across point counts or skip counts");
  std::string axis = "points";
  std::vector<int64_t> values, seeds{0, 1, 2};
  fs::path test_dir;
  ablate->add_option("--axis", axis, "points or skips")->check(CLI::IsMember({"points", "skips"}));
  ablate->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  ablate->add_option("--seeds", seeds, "Comma-separated seeds")->delimiter(',');
  ablate->add_option("--config", config_path, "Base training config JSON")->required()->check(CLI::ExistingFile);
  ablate->add_option("--data", data_dir, "Training dataset directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--test-data", test_dir, "Held-out dataset directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--out", report_stem, "Table path stem (writes .json and .csv)");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP segmentation service");
  std::string host = "0.0.0.0";
  int port = 8080;
  ServiceOptions service_options;
  serve->add_option("--ckpt", ckpt_path, "Checkpoint to load at start (env USAM_CKPT)");
  serve->add_option("--port", port, "Port (env USAM_PORT)");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--data", data_dir, "Dataset directory for pair references")->check(CLI::ExistingDirectory);
  serve->add_option("--cors-origin", service_options.cors_origin, "Allowed browser origin");

  CLI11_PARSE(app, argc, argv);
  if (!quiet) c10::ShowLogInfoToStderr();

  try {
    if (synth->parsed()) {
      SyntheticSpec spec;
      if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        spec = synthetic_spec_from_json(json::parse(in));
      }
      auto ds = generate_synthetic_dataset(spec, Window::parse(window_text));
      write_dataset(data_out, ds);
      LOG(INFO) << "wrote " << ds.size() << " pairs to " << data_out;
    } else if (pack->parsed()) {
      auto ds = pack_volumes(volume_dir, label_dir, Window::parse(window_text), split, class_names);
      write_dataset(data_out, ds);
      LOG(INFO) << "wrote " << ds.size() << " pairs to " << data_out;
    } else if (init->parsed()) {
      auto config = ModelConfig::for_variant(variant, image_size);
      config.skips = skips;
      config.decoder_variant = decoder_variant_from_string(decoder);
      Checkpoint c;
      c.model = make_model(config, seed);
      if (!pretrained.empty()) {
        auto report = load_pretrained(pretrained, *c.model);
        LOG(INFO) << report.loaded.size() << " loaded, " << report.adapted.size() << " adapted, "
                  << report.fresh.size() << " fresh, " << report.unused.size() << " unused";
      }
      c.meta.model = config;
      c.meta.class_names = default_class_names();
      c.meta.tag = config.tag();
      save_checkpoint(ckpt_out, c);
      LOG(INFO) << "wrote " << ckpt_out << " (" << config.tag() << ")";
    } else if (train_cmd->parsed()) {
      const auto config = load_train_config(config_path);
      const auto data = read_dataset(data_dir);
      TrainOptions opts;
      opts.out_dir = out_dir;
      if (!resume.empty()) opts.resume = resume;
      if (!pretrained.empty()) opts.pretrained = pretrained;
      auto result = train(config, data, opts);
      LOG(INFO) << "done: step " << result.checkpoint.meta.step << ", final loss "
                << (result.log.empty() ? 0.0 : result.log.back().loss);
    } else if (eval_cmd->parsed()) {
      auto ckpt = load_checkpoint(ckpt_path);
      const auto data = read_dataset(data_dir);
      eval.undefined = undefined == "one" ? UndefinedPolicy::kCountAsOne : UndefinedPolicy::kExclude;
      auto report = evaluate(*ckpt.model, data, eval);
      report.config_tag = ckpt.meta.tag;
      if (!report_stem.empty()) write_report(report_stem, report);
      std::cout << to_json(report).dump(2) << "\n";
    } else if (ablate->parsed()) {
      const auto config = load_train_config(config_path);
      const auto train_data = read_dataset(data_dir);
      const auto test_data = read_dataset(test_dir);
      check_disjoint(train_data.manifest, test_data.manifest);
      auto table = ablation_run(config, axis, values, to_seeds(seeds), train_data, test_data);
      if (!report_stem.empty()) {
        if (report_stem.has_parent_path()) fs::create_directories(report_stem.parent_path());
        std::ofstream(fs::path(report_stem).concat(".json")) << to_json(table).dump(2) << "\n";
        std::ofstream(fs::path(report_stem).concat(".csv")) << to_csv(table);
      }
      std::cout << to_csv(table);
    } else if (serve->parsed()) {
      if (serve->count("--port") == 0) {
        if (const char* env = std::getenv("USAM_PORT")) port = std::stoi(env);
      }
      if (ckpt_path.empty()) {
        if (const char* env = std::getenv("USAM_CKPT")) ckpt_path = env;
      }
      if (!data_dir.empty()) service_options.data_dir = data_dir;
      torch::set_num_threads(1);
      SegmentationService service(service_options);
      if (!ckpt_path.empty()) service.set_model(load_served_model(ckpt_path));
      HttpServer server(service);
      const int bound = server.bind(host, port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      LOG(INFO) << "listening on " << host << ":" << bound;
      server.listen();
      g_server = nullptr;
    }
  } catch (const std::exception& e) {
    LOG(ERROR) << e.what();
    return 1;
  }
  return 0;
}
