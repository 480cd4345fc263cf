// SPDX-License-Identifier: Apache-2.0
// Operator surface: dataset generation, training, evaluation, single-image
// detection, and a chat REPL. Exit codes: 0 success, 1 user or config error,
// 2 numeric failure during training.
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fabgpt/checkpoint.hpp"
#include "fabgpt/errors.hpp"
#include "fabgpt/image.hpp"
#include "fabgpt/pipeline.hpp"
#include "fabgpt/trainer.hpp"

namespace {

using namespace fabgpt;

std::string iso_now() {
  char buf[32];
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunConfig effective_config(const std::string& config_path, bool seed_set, std::uint64_t seed) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  apply_env_overrides(cfg);
  if (seed_set) cfg.seed = seed;
  cfg.generation.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

// Rebuilds the model a checkpoint was trained with and restores its state.
FabGptModel model_from_checkpoint(const std::string& ckpt_path, Checkpoint& c) {
  c = load_checkpoint(ckpt_path);
  RunConfig cfg = config_from_json(c.config);
  cfg.generation.seed = cfg.seed;
  FabGptModel m = build_model(cfg);
  AdamState opt;
  restore_training(m, opt, c);
  return m;
}

int cmd_gen(const std::string& out, const std::string& config_path, bool seed_set,
            std::uint64_t seed) {
  const RunConfig cfg = effective_config(config_path, seed_set, seed);
  const synth::DatasetManifest manifest = synth::generate_dataset(cfg.generation, out);
  std::ofstream echo(std::filesystem::path(out) / "run_config.json");
  echo << config_to_json(cfg).dump(2) << "\n";
  std::printf("wrote %zu train + %zu test samples under %s\n", manifest.train.size(),
              manifest.test.size(), out.c_str());
  return 0;
}

int cmd_train(const std::string& data, const std::string& out, const std::string& config_path,
              bool seed_set, std::uint64_t seed) {
  RunConfig cfg = effective_config(config_path, seed_set, seed);
  if (cfg.train.total_steps == 0 && cfg.train.epochs == 0)
    throw ConfigError("nothing to train: epochs is 0 and no total_steps pinned");
  const auto manifest =
      synth::load_manifest((std::filesystem::path(data) / "manifest.json").string());
  FabGptModel m = build_model(cfg);
  const TrainResult r = train_model(m, manifest, data, out);
  std::printf("trained %zu steps; final total loss %.6f\n", r.total_steps,
              r.log.empty() ? 0.0 : r.log.back().total);
  std::printf("checkpoint: %s\n", r.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report_path,
             const std::string& csv_path, bool oracle) {
  Checkpoint c;
  FabGptModel m = model_from_checkpoint(ckpt, c);
  const auto manifest =
      synth::load_manifest((std::filesystem::path(data) / "manifest.json").string());

  EvalOptions opts;
  opts.oracle_masks = oracle;
  opts.checkpoint_id = ckpt + "@" + std::to_string(c.step);
  opts.timestamp = iso_now();
  const EvalResult r = evaluate(m, manifest, data, opts);

  std::ofstream out(report_path);
  if (!out.good()) throw IoError("cannot write report " + report_path);
  out << eval_result_to_json(r).dump(2) << "\n";
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv.good()) throw IoError("cannot write csv " + csv_path);
    csv << report_to_csv(r.report);
  }

  for (const auto& [name, cm] : r.report.per_class)
    std::printf("%-20s image_auc %.4f  pixel_auc %.4f  pro %.4f  ap %.4f\n", name.c_str(),
                cm.image_auc, cm.pixel_auc, cm.pro, cm.ap);
  std::printf("%-20s image_auc %.4f  pixel_auc %.4f  pro %.4f  ap %.4f\n", "average",
              r.report.average.image_auc, r.report.average.pixel_auc, r.report.average.pro,
              r.report.average.ap);
  std::printf("pm_accuracy %.4f  qa_overall %.2f%%\n", r.pm_accuracy, r.report.qa.overall);
  std::printf("gate: defect questions %.3f, unrelated %.3f\n", r.gate_mean_defect,
              r.gate_mean_unrelated);
  return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& image_path,
               const std::string& prefix) {
  Checkpoint c;
  FabGptModel m = model_from_checkpoint(ckpt, c);
  const Tensor img = io::read_png_gray(image_path);
  if (img.rows() != m.cfg.generation.height || img.cols() != m.cfg.generation.width)
    throw InputError("image is " + std::to_string(img.rows()) + "x" +
                     std::to_string(img.cols()) + " but the checkpoint expects " +
                     std::to_string(m.cfg.generation.height) + "x" +
                     std::to_string(m.cfg.generation.width));

  SampleForward f = forward_detection(m, img, "");
  io::write_png_gray(prefix + "_mask.png", f.det.mask.binary);
  io::write_png_gray(prefix + "_heat.png", f.det.mask.anomaly_map);

  const Tensor& map = f.det.mask.anomaly_map;
  std::ofstream bin(prefix + "_map.bin", std::ios::binary);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const float v = static_cast<float>(map.at(i));
    char bytes[4];
    std::memcpy(bytes, &v, 4);
    bin.write(bytes, 4);
  }
  std::ofstream shape(prefix + "_shape.json");
  shape << nlohmann::json{{"height", map.rows()},
                          {"width", map.cols()},
                          {"dtype", "f32-le"},
                          {"order", "row-major"},
                          {"checkpoint", ckpt + "@" + std::to_string(c.step)}}
               .dump(2)
        << "\n";

  std::size_t positives = 0;
  for (std::size_t i = 0; i < f.det.mask.binary.size(); ++i)
    if (f.det.mask.binary.at(i) > 0.5) ++positives;
  if (f.pm_valid)
    std::printf("predicted class: %s (p_n %.4f)\n",
                synth::label_phrase(synth::label_from_name(
                                        m.defect_labels[f.pm.predicted_label]))
                    .c_str(),
                f.pm.p_n->value.at(0));
  else
    std::printf("predicted class: classifier disabled by config\n");
  std::printf("defect pixels: %zu of %zu\n", positives, f.det.mask.binary.size());
  return 0;
}

int cmd_chat(const std::string& ckpt, const std::string& image_path,
             const std::string& question) {
  Checkpoint c;
  FabGptModel m = model_from_checkpoint(ckpt, c);

  Tensor img = blank_image(m.cfg);
  if (!image_path.empty()) img = io::read_png_gray(image_path);
  if (img.rows() != m.cfg.generation.height || img.cols() != m.cfg.generation.width)
    throw InputError("image dimensions do not match the checkpoint config");
  SampleForward f = forward_detection(m, img, "");

  auto answer_turn = [&](const std::string& q) {
    QaForward qf = forward_instruction(m, f, q, -1.0);
    const std::string ans = lm_answer(m.lm, m.vocab, qf.instruction, 16);
    std::printf("%s\n", ans.c_str());
    std::printf("gate a = %.3f\n", qf.gate_value);
  };

  if (!question.empty()) {
    answer_turn(question);
    return 0;
  }

  std::printf("commands: /image PATH, /quit\n");
  std::string line;
  while (true) {
    std::printf("> ");
    std::fflush(stdout);
    if (!std::getline(std::cin, line)) break;
    if (line.empty()) continue;
    if (line == "/quit") break;
    if (line.rfind("/image ", 0) == 0) {
      const std::string path = line.substr(7);
      try {
        Tensor next = io::read_png_gray(path);
        if (next.rows() != m.cfg.generation.height || next.cols() != m.cfg.generation.width)
          throw InputError("image dimensions do not match the checkpoint config");
        img = next;
        f = forward_detection(m, img, "");
        std::printf("loaded %s\n", path.c_str());
      } catch (const std::exception& e) {
        std::printf("cannot load image: %s\n", e.what());
      }
      continue;
    }
    answer_turn(line);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wafer defect detection and question answering"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, ckpt_path, report_path, csv_path;
  std::string image_path, prefix, question;
  std::uint64_t seed = 0;
  bool oracle = false;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic wafer dataset");
  gen->add_option("--out", out_path, "output dataset directory")->required();
  gen->add_option("--config", config_path, "run config json");
  CLI::Option* gen_seed = gen->add_option("--seed", seed, "override the config seed");

  CLI::App* train = app.add_subcommand("train", "train on a generated dataset");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_path, "run output directory")->required();
  train->add_option("--config", config_path, "run config json");
  CLI::Option* train_seed = train->add_option("--seed", seed, "override the config seed");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--report", report_path, "output report json")->required();
  eval->add_option("--csv", csv_path, "optional per-class csv");
  eval->add_flag("--oracle", oracle, "use ground-truth masks as anomaly maps");

  CLI::App* detect = app.add_subcommand("detect", "run detection on one image");
  detect->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  detect->add_option("--image", image_path, "input png")->required();
  detect->add_option("--out-prefix", prefix, "output path prefix")->required();

  CLI::App* chat = app.add_subcommand("chat", "ask questions about an image");
  chat->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  chat->add_option("--image", image_path, "optional input png");
  chat->add_option("--question", question, "one-shot question (skips the repl)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen(out_path, config_path, !gen_seed->empty(), seed);
    if (train->parsed())
      return cmd_train(data_dir, out_path, config_path, !train_seed->empty(), seed);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, report_path, csv_path, oracle);
    if (detect->parsed()) return cmd_detect(ckpt_path, image_path, prefix);
    if (chat->parsed()) return cmd_chat(ckpt_path, image_path, question);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
