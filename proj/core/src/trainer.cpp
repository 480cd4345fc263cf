// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>

#include "fabgpt/errors.hpp"
#include "fabgpt/objectives.hpp"
#include "fabgpt/rng.hpp"

namespace fabgpt {

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init, double lr_final) {
  if (total_steps == 0) throw InputError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw InputError("cosine_lr: step beyond total_steps");
  if (step == 0) return lr_init;
  if (step == total_steps) return lr_final;
  const double c = std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps));
  return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + c);
}

void adamw_step(ParamStore& store, AdamState& opt, double lr, double beta1, double beta2,
                double weight_decay) {
  ++opt.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.t));
  for (const auto& name : store.names()) {
    ag::Var p = store.get(name);
    Tensor& m = opt.m.try_emplace(name, Tensor(p->value.shape())).first->second;
    Tensor& v = opt.v.try_emplace(name, Tensor(p->value.shape())).first->second;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad_alloc ? p->grad.at(i) : 0.0;
      m.at(i) = beta1 * m.at(i) + (1.0 - beta1) * g;
      v.at(i) = beta2 * v.at(i) + (1.0 - beta2) * g * g;
      const double m_hat = m.at(i) / bc1;
      const double v_hat = v.at(i) / bc2;
      p->value.at(i) -= lr * (m_hat / (std::sqrt(v_hat) + 1e-8) + weight_decay * p->value.at(i));
    }
    p->value.quantize_f32();
    m.quantize_f32();
    v.quantize_f32();
  }
}

namespace {

struct TrainItem {
  synth::WaferSample sample;
  std::string marks;
  std::vector<std::size_t> pixel_targets;  // row-major {0,1} per pixel
  bool defect = false;
  std::size_t defect_idx = 0;                      // into defect_labels
  std::map<std::string, std::string> slots;        // defect samples only
};

ag::Var mean_of(const std::vector<ag::Var>& terms) {
  if (terms.empty()) return ag::constant(Tensor({1}, 0.0));
  ag::Var sum = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sum = ag::add(sum, terms[i]);
  return ag::scale(sum, 1.0 / static_cast<double>(terms.size()));
}

void check_finite(double value, const char* term, std::size_t step) {
  if (!std::isfinite(value))
    throw NumericError(std::string("non-finite ") + term + " loss at step " +
                       std::to_string(step));
}

std::vector<std::size_t> mask_targets(const Tensor& mask) {
  std::vector<std::size_t> t(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) t[i] = mask.at(i) > 0.5 ? 1 : 0;
  return t;
}

}  // namespace

TrainResult train_model(FabGptModel& m, const synth::DatasetManifest& manifest,
                        const std::string& manifest_dir, const std::string& out_dir) {
  const TrainSettings& ts = m.cfg.train;
  if (manifest.train.empty()) throw InputError("train_model: empty train split");
  if (ts.total_steps == 0 && ts.epochs == 0)
    throw ConfigError("train_model: epochs must be at least 1");

  const auto causes = default_cause_table();
  const auto descriptions = default_description_table();
  std::vector<TrainItem> items;
  items.reserve(manifest.train.size());
  for (const auto& entry : manifest.train) {
    TrainItem it;
    it.sample = synth::load_sample(manifest_dir, entry);
    it.marks = synth::extract_text_marks(it.sample);
    it.pixel_targets = mask_targets(it.sample.mask);
    if (it.sample.label != synth::Label::good) {
      it.defect = true;
      const std::string name = synth::label_name(it.sample.label);
      for (std::size_t i = 0; i < m.defect_labels.size(); ++i)
        if (m.defect_labels[i] == name) it.defect_idx = i;
      it.slots = slots_for_sample(it.sample, causes, descriptions);
    }
    items.push_back(std::move(it));
  }

  // First defect sample seeds the expert prompts with real statistics.
  for (const auto& it : items)
    if (it.defect) {
      reinit_experts_from_guides(m, it.sample.image, it.marks);
      break;
    }

  const std::size_t per_epoch = (items.size() + ts.batch_size - 1) / ts.batch_size;
  const std::size_t total = ts.total_steps ? ts.total_steps : ts.epochs * per_epoch;
  const std::vector<char> tags = alternation_schedule(total);

  // Corpus-A templates grouped by category for the per-sample draw.
  std::map<std::string, std::vector<std::size_t>> by_category;
  for (std::size_t i = 0; i < m.corpora.corpus_a.size(); ++i)
    by_category[m.corpora.corpus_a[i].category].push_back(i);

  Rng order_rng(Rng::mix(m.cfg.seed, 0xA5));
  Rng qa_rng(Rng::mix(m.cfg.seed, 0xA6));
  std::vector<std::size_t> perm(items.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();  // forces a shuffle on the first draw
  auto next_item = [&]() -> TrainItem& {
    if (cursor == perm.size()) {
      for (std::size_t i = perm.size() - 1; i > 0; --i)
        std::swap(perm[i], perm[order_rng.uniform_int(i + 1)]);
      cursor = 0;
    }
    return items[perm[cursor++]];
  };

  std::ofstream log_file;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream cfg_file(std::filesystem::path(out_dir) / "run_config.json");
    cfg_file << config_to_json(m.cfg).dump(2) << "\n";
    log_file.open(std::filesystem::path(out_dir) / "train_log.jsonl");
    if (!log_file.good()) throw IoError("cannot write train log under " + out_dir);
  }

  const Tensor blank = blank_image(m.cfg);
  const std::vector<std::size_t> blank_targets(blank.size(), 0);
  AdamState opt;
  TrainResult result;
  result.total_steps = total;

  for (std::size_t step = 0; step < total; ++step) {
    const double lr = cosine_lr(step, total, ts.lr_init, ts.lr_final);
    m.store.zero_grads();
    std::vector<ag::Var> focals, dices, ce1s, ce2s;

    if (tags[step] == 'A') {
      for (std::size_t b = 0; b < ts.batch_size; ++b) {
        TrainItem& it = next_item();
        SampleForward f = forward_detection(m, it.sample.image, it.marks);
        focals.push_back(focal_loss(ag::pick_per_row(f.det.probs, it.pixel_targets),
                                    m.cfg.loss.gamma));
        dices.push_back(dice_loss(f.det.anomaly, it.sample.mask));
        if (!it.defect) continue;
        if (f.pm_valid) ce1s.push_back(cross_entropy_probs(f.pm.softmax_p, {it.defect_idx}));
        const auto& pool = by_category.at(m.defect_labels[it.defect_idx]);
        const CorpusEntry& entry =
            m.corpora.corpus_a[pool[qa_rng.uniform_int(pool.size())]];
        const std::string question = fill_template(entry.question_template, it.slots);
        const std::string answer = fill_template(entry.answer_template, it.slots);
        QaForward qf = forward_instruction(m, f, question, -1.0);
        ce2s.push_back(lm_loss(m.lm, qf.instruction, answer_ids(m, answer)));
      }
    } else {
      SampleForward f = forward_detection(m, blank, "");
      focals.push_back(focal_loss(ag::pick_per_row(f.det.probs, blank_targets),
                                  m.cfg.loss.gamma));
      dices.push_back(dice_loss(f.det.anomaly, blank));
      const double fg = ts.gate_on_corpus_b ? -1.0 : 0.0;
      for (std::size_t b = 0; b < ts.batch_size; ++b) {
        const CorpusEntry& entry =
            m.corpora.corpus_b[qa_rng.uniform_int(m.corpora.corpus_b.size())];
        QaForward qf = forward_instruction(m, f, entry.question_template, fg);
        ce2s.push_back(lm_loss(m.lm, qf.instruction, answer_ids(m, entry.answer_template)));
      }
    }

    const ag::Var focal = mean_of(focals);
    const ag::Var dice = mean_of(dices);
    const ag::Var ce1 = mean_of(ce1s);
    const ag::Var ce2 = mean_of(ce2s);

    TrainStepLog row;
    row.step = step;
    row.tag = tags[step];
    row.lr = lr;
    row.focal = focal->value.at(0);
    row.dice = dice->value.at(0);
    row.ce1 = ce1->value.at(0);
    row.ce2 = ce2->value.at(0);
    check_finite(row.focal, "focal", step);
    check_finite(row.dice, "dice", step);
    check_finite(row.ce1, "classification", step);
    check_finite(row.ce2, "language-model", step);

    const ag::Var loss = total_loss(focal, dice, ce1, ce2, m.cfg.loss);
    row.total = loss->value.at(0);
    check_finite(row.total, "total", step);

    ag::backward(loss);
    adamw_step(m.store, opt, lr, ts.beta1, ts.beta2, ts.weight_decay);

    if (log_file.is_open()) {
      nlohmann::json j = {{"step", row.step},   {"tag", std::string(1, row.tag)},
                          {"lr", row.lr},       {"focal", row.focal},
                          {"dice", row.dice},   {"ce1", row.ce1},
                          {"ce2", row.ce2},     {"total", row.total}};
      log_file << j.dump() << "\n";
    }
    result.log.push_back(row);
  }

  if (!out_dir.empty()) {
    result.checkpoint_path =
        (std::filesystem::path(out_dir) / "checkpoint.fabgpt").string();
    save_checkpoint(result.checkpoint_path, snapshot_training(m, opt, total));
  }
  return result;
}

Checkpoint snapshot_training(FabGptModel& m, const AdamState& opt, std::uint64_t step) {
  Checkpoint c;
  c.step = step;
  c.config = config_to_json(m.cfg);
  c.vocab_tokens = m.vocab.tokens();
  for (const auto& name : m.store.names()) c.tensors.emplace_back(name, m.store.get(name)->value);
  for (const auto& name : m.store.names()) {
    const auto it = opt.m.find(name);
    const Tensor zero(m.store.get(name)->value.shape());
    c.tensors.emplace_back("adam/m/" + name, it == opt.m.end() ? zero : it->second);
    const auto iv = opt.v.find(name);
    c.tensors.emplace_back("adam/v/" + name, iv == opt.v.end() ? zero : iv->second);
  }
  for (const auto& [name, t] : m.encoders.param_table()) c.tensors.emplace_back(name, *t);
  return c;
}

void restore_training(FabGptModel& m, AdamState& opt, const Checkpoint& c) {
  if (c.vocab_tokens != m.vocab.tokens())
    throw FormatError("checkpoint vocabulary does not match the model");
  std::map<std::string, const Tensor*> lookup;
  for (const auto& [name, t] : c.tensors) lookup[name] = &t;
  auto fetch = [&](const std::string& name, const std::vector<std::size_t>& shape) {
    const auto it = lookup.find(name);
    if (it == lookup.end()) throw FormatError("checkpoint missing tensor " + name);
    if (it->second->shape() != shape)
      throw FormatError("checkpoint tensor " + name + " has the wrong shape");
    return *it->second;
  };
  for (const auto& name : m.store.names()) {
    ag::Var p = m.store.get(name);
    p->value = fetch(name, p->value.shape());
    opt.m[name] = fetch("adam/m/" + name, p->value.shape());
    opt.v[name] = fetch("adam/v/" + name, p->value.shape());
  }
  for (auto& [name, t] : m.encoders.param_table()) *t = fetch(name, t->shape());
  opt.t = c.step;
}

}  // namespace fabgpt
