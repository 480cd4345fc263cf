// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

#include "fabgpt/errors.hpp"

namespace fabgpt {

namespace {

void reject_unknown(const nlohmann::json& j, const std::string& scope,
                    const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config section " + scope + " must be an object");
  for (const auto& [key, value] : j.items())
    if (known.count(key) == 0)
      throw ConfigError("unknown config key: " + (scope.empty() ? key : scope + "." + key));
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for config key ") + key + ": " + e.what());
  }
}

void parse_generation(const nlohmann::json& j, synth::GenConfig& g) {
  reject_unknown(j, "generation",
                 {"height", "width", "count_good", "count_hole", "count_particle",
                  "count_scratch", "count_deformation", "train_fraction"});
  read(j, "height", g.height);
  read(j, "width", g.width);
  read(j, "count_good", g.count_good);
  read(j, "count_hole", g.count_hole);
  read(j, "count_particle", g.count_particle);
  read(j, "count_scratch", g.count_scratch);
  read(j, "count_deformation", g.count_deformation);
  read(j, "train_fraction", g.train_fraction);
}

void parse_encoder(const nlohmann::json& j, EncoderConfig& e) {
  reject_unknown(j, "encoder", {"d_model", "patch", "max_text_tokens", "init_seed"});
  read(j, "d_model", e.d_model);
  read(j, "patch", e.patch);
  read(j, "max_text_tokens", e.max_text_tokens);
  read(j, "init_seed", e.seed);
}

void parse_model(const nlohmann::json& j, ModelConfig& m) {
  reject_unknown(j, "model", {"d_pm", "n_experts", "d_key", "d_llm", "lm_blocks", "max_seq"});
  read(j, "d_pm", m.d_pm);
  read(j, "n_experts", m.n_experts);
  read(j, "d_key", m.d_key);
  read(j, "d_llm", m.d_llm);
  read(j, "lm_blocks", m.lm_blocks);
  read(j, "max_seq", m.max_seq);
}

void parse_train(const nlohmann::json& j, TrainSettings& t) {
  reject_unknown(j, "train",
                 {"lr_init", "lr_final", "beta1", "beta2", "weight_decay", "batch_size",
                  "epochs", "total_steps", "gate_on_corpus_b"});
  read(j, "lr_init", t.lr_init);
  read(j, "lr_final", t.lr_final);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "weight_decay", t.weight_decay);
  read(j, "batch_size", t.batch_size);
  read(j, "epochs", t.epochs);
  read(j, "total_steps", t.total_steps);
  read(j, "gate_on_corpus_b", t.gate_on_corpus_b);
}

void parse_loss(const nlohmann::json& j, LossConfig& l) {
  reject_unknown(j, "loss", {"gamma", "alpha", "beta", "delta", "epsilon"});
  read(j, "gamma", l.gamma);
  read(j, "alpha", l.alpha);
  read(j, "beta", l.beta);
  read(j, "delta", l.delta);
  read(j, "epsilon", l.epsilon);
}

void parse_ablation(const nlohmann::json& j, AblationConfig& a) {
  reject_unknown(j, "ablation",
                 {"use_pm", "use_experts", "use_qformer_stack", "use_corrector",
                  "instruction_format"});
  read(j, "use_pm", a.use_pm);
  read(j, "use_experts", a.use_experts);
  read(j, "use_qformer_stack", a.use_qformer_stack);
  read(j, "use_corrector", a.use_corrector);
  if (j.contains("instruction_format"))
    a.instruction_format =
        instruction_format_from_name(j.at("instruction_format").get<std::string>());
}

}  // namespace

void RunConfig::validate() const {
  if (version != 1) throw ConfigError("unsupported config version");
  generation.validate();
  if (encoder.d_model == 0 || encoder.patch == 0 || encoder.max_text_tokens == 0)
    throw ConfigError("encoder widths must be positive");
  if (generation.height % encoder.patch != 0 || generation.width % encoder.patch != 0)
    throw ConfigError("patch size must divide the image dimensions");
  if (model.d_pm == 0 || model.d_key == 0 || model.d_llm == 0 || model.lm_blocks == 0 ||
      model.max_seq == 0)
    throw ConfigError("model widths must be positive");
  if (train.lr_final > train.lr_init) throw ConfigError("lr_final must not exceed lr_init");
  if (train.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(train.beta1 >= 0.0 && train.beta1 < 1.0 && train.beta2 >= 0.0 && train.beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (loss.gamma < 0.0) throw ConfigError("focal gamma must be non-negative");
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  reject_unknown(j, "",
                 {"version", "seed", "generation", "encoder", "model", "train", "loss",
                  "ablation", "facts_file"});
  read(j, "version", cfg.version);
  read(j, "seed", cfg.seed);
  if (j.contains("generation")) parse_generation(j.at("generation"), cfg.generation);
  if (j.contains("encoder")) parse_encoder(j.at("encoder"), cfg.encoder);
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("loss")) parse_loss(j.at("loss"), cfg.loss);
  if (j.contains("ablation")) parse_ablation(j.at("ablation"), cfg.ablation);
  read(j, "facts_file", cfg.facts_file);
  cfg.validate();
  return cfg;
}

nlohmann::json config_to_json(const RunConfig& cfg) {
  return nlohmann::json{
      {"version", cfg.version},
      {"seed", cfg.seed},
      {"generation",
       {{"height", cfg.generation.height},
        {"width", cfg.generation.width},
        {"count_good", cfg.generation.count_good},
        {"count_hole", cfg.generation.count_hole},
        {"count_particle", cfg.generation.count_particle},
        {"count_scratch", cfg.generation.count_scratch},
        {"count_deformation", cfg.generation.count_deformation},
        {"train_fraction", cfg.generation.train_fraction}}},
      {"encoder",
       {{"d_model", cfg.encoder.d_model},
        {"patch", cfg.encoder.patch},
        {"max_text_tokens", cfg.encoder.max_text_tokens},
        {"init_seed", cfg.encoder.seed}}},
      {"model",
       {{"d_pm", cfg.model.d_pm},
        {"n_experts", cfg.model.n_experts},
        {"d_key", cfg.model.d_key},
        {"d_llm", cfg.model.d_llm},
        {"lm_blocks", cfg.model.lm_blocks},
        {"max_seq", cfg.model.max_seq}}},
      {"train",
       {{"lr_init", cfg.train.lr_init},
        {"lr_final", cfg.train.lr_final},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"weight_decay", cfg.train.weight_decay},
        {"batch_size", cfg.train.batch_size},
        {"epochs", cfg.train.epochs},
        {"total_steps", cfg.train.total_steps},
        {"gate_on_corpus_b", cfg.train.gate_on_corpus_b}}},
      {"loss",
       {{"gamma", cfg.loss.gamma},
        {"alpha", cfg.loss.alpha},
        {"beta", cfg.loss.beta},
        {"delta", cfg.loss.delta},
        {"epsilon", cfg.loss.epsilon}}},
      {"ablation",
       {{"use_pm", cfg.ablation.use_pm},
        {"use_experts", cfg.ablation.use_experts},
        {"use_qformer_stack", cfg.ablation.use_qformer_stack},
        {"use_corrector", cfg.ablation.use_corrector},
        {"instruction_format", instruction_format_name(cfg.ablation.instruction_format)}}},
      {"facts_file", cfg.facts_file}};
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw IoError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config file " + path + " is not valid json: " + e.what());
  }
  return config_from_json(j);
}

void apply_env_overrides(RunConfig& cfg) {
  const char* env = std::getenv("FABGPT_SEED");
  if (env == nullptr) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') throw ConfigError("FABGPT_SEED must be an unsigned integer");
  cfg.seed = static_cast<std::uint64_t>(v);
}

const char* instruction_format_name(InstructionFormat f) {
  return f == InstructionFormat::kGated ? "gated" : "baseline";
}

InstructionFormat instruction_format_from_name(const std::string& name) {
  if (name == "gated") return InstructionFormat::kGated;
  if (name == "baseline") return InstructionFormat::kBaseline;
  throw ConfigError("unknown instruction_format: " + name);
}

}  // namespace fabgpt
