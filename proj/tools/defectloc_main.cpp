#include "defectloc/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>

using namespace defectloc;

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised surface-defect localisation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  CommandLine cmd;
  std::string config_file;
  std::string seed, work_dir, board_dir, texture_dir;
  std::vector<std::string> sets;
  app.add_option("--config", config_file, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Global seed (global.seed)");
  app.add_option("--work-dir", work_dir, "Artifact directory (paths.work_dir)");
  app.add_option("--board-dir", board_dir, "Board image directory (paths.board_dir)");
  app.add_option("--texture-dir", texture_dir, "Texture image directory (paths.texture_dir)");
  app.add_option("--set", sets, "Override any key: section.key=value (repeatable)");
  app.add_flag("--force", cmd.force, "Redo the stage even if its inputs are unchanged");

  auto* ingest = app.add_subcommand("ingest", "Build manifest.tsv from the board and texture directories");
  auto* tile = app.add_subcommand("tile", "Cut board images into tiles");
  auto* cluster = app.add_subcommand("cluster", "Extract tile features, cluster, drop the two dominant clusters");

  auto* preview = app.add_subcommand("synth-preview", "Write clean | input | mask sample strips");
  std::string count = "8";
  preview->add_option("--count", count, "Number of samples");

  auto* train = app.add_subcommand("train", "Train the autoencoder (resumes an interrupted run)");
  std::string max_epochs, lr, batch_size;
  train->add_option("--max-epochs", max_epochs, "trainer.max_epochs");
  train->add_option("--lr", lr, "trainer.lr");
  train->add_option("--batch-size", batch_size, "trainer.batch_size");

  auto* eval = app.add_subcommand("eval", "Pixel ROC, threshold and heatmaps on held-out synthetic anomalies");
  std::string model = "best";
  eval->add_option("--model", model, "'best', 'identity' or a checkpoint path");

  auto* ssim = app.add_subcommand("ssim", "Print the mean SSIM of two images");
  std::string a, b;
  ssim->add_option("a", a, "First image")->required();
  ssim->add_option("b", b, "Second image")->required();

  auto* heatmap = app.add_subcommand("heatmap", "Render tile | heatmap | overlay for one tile");
  std::string tile_path, heat_model, out_path;
  heatmap->add_option("--tile", tile_path, "Tile image")->required();
  heatmap->add_option("--model", heat_model, "Checkpoint (default: <work>/train/best.ckpt)");
  heatmap->add_option("--out", out_path, "Output PNG")->required();

  auto* print = app.add_subcommand("print-config", "Print the effective configuration");
  print->add_flag("--sources", cmd.annotate, "Annotate each key with default/file/flag");

  auto* desk = app.add_subcommand("make-desk-data", "Generate the synthetic desk-scale board corpus");
  std::string desk_out, desk_boards, desk_textures;
  desk->add_option("--out", desk_out, "Output directory")->required();
  desk->add_option("--boards", desk_boards, "Number of board images (64)");
  desk->add_option("--textures", desk_textures, "Number of texture images (24)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  for (auto* sub : {ingest, tile, cluster, preview, train, eval, ssim, heatmap, print, desk})
    if (sub->parsed()) cmd.subcommand = sub->get_name();
  if (!config_file.empty()) cmd.config_file = config_file;

  auto flag = [&](const std::string& key, const std::string& value) {
    if (!value.empty()) cmd.overrides.emplace_back(key, value);
  };
  try {
    for (const auto& s : sets) cmd.overrides.push_back(split_override(s));
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  flag("global.seed", seed);
  flag("paths.work_dir", work_dir);
  flag("paths.board_dir", board_dir);
  flag("paths.texture_dir", texture_dir);
  flag("trainer.max_epochs", max_epochs);
  flag("trainer.lr", lr);
  flag("trainer.batch_size", batch_size);

  auto put = [&](const char* key, const std::string& value) {
    if (!value.empty()) cmd.args[key] = value;
  };
  put("count", count);
  put("model", cmd.subcommand == "heatmap" ? heat_model : model);
  put("a", a);
  put("b", b);
  put("tile", tile_path);
  put("out", cmd.subcommand == "make-desk-data" ? desk_out : out_path);
  put("boards", desk_boards);
  put("textures", desk_textures);

  return run_subcommand(cmd, std::cout, std::cerr);
}
