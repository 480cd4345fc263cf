// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <utility>

#include "fabgpt/errors.hpp"
#include "fabgpt/rng.hpp"

namespace fabgpt {

namespace {

// Component seed streams; stable across builds so checkpoints stay comparable.
enum : std::uint64_t {
  kSeedPm = 0x11,
  kSeedImgGuide = 0x12,
  kSeedTxtGuide = 0x13,
  kSeedImgExpert = 0x14,
  kSeedTxtExpert = 0x15,
  kSeedDetection = 0x16,
  kSeedModulation = 0x17,
  kSeedLm = 0x18,
};

Tensor random_guide(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor g({1, d});
  for (std::size_t j = 0; j < d; ++j) g.at(j) = rng.gaussian();
  g.quantize_f32();
  return g;
}

std::vector<std::string> defect_label_names() {
  const auto& names = synth::label_names();
  return {names.begin() + 1, names.end()};  // drop "good"
}

ag::Var unit_gate() { return ag::constant(Tensor({1}, 1.0)); }

}  // namespace

FabGptModel build_model(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  EncoderConfig ecfg = cfg.encoder;
  ecfg.image_height = cfg.generation.height;
  ecfg.image_width = cfg.generation.width;

  auto facts = load_facts(cfg.facts_file);
  auto defect = defect_label_names();
  Corpora corpora = build_corpora(defect, default_cause_table(), cfg.facts_file);
  Vocabulary vocab = build_qa_vocabulary(corpora, facts, {});
  FrozenEncoders encoders(ecfg, vocab);

  FabGptModel m{std::move(cfg),   std::move(vocab),    std::move(corpora),
                std::move(facts), std::move(encoders), {}, {}, {}, {}, {}, {}, {}, {}, {}};
  const auto& mc = m.cfg.model;
  const std::size_t d = ecfg.d_model;
  const std::uint64_t seed = m.cfg.seed;

  m.pm = PmParams::create(m.store, d, mc.d_pm, Rng::mix(seed, kSeedPm));
  if (m.cfg.ablation.use_experts) {
    m.img_expert = init_expert(m.store, "experts/img/prompts",
                               random_guide(d, Rng::mix(seed, kSeedImgGuide)), mc.n_experts,
                               Rng::mix(seed, kSeedImgExpert));
    m.txt_expert = init_expert(m.store, "experts/txt/prompts",
                               random_guide(d, Rng::mix(seed, kSeedTxtGuide)), mc.n_experts,
                               Rng::mix(seed, kSeedTxtExpert));
  }
  m.det = DetectionParams::create(m.store, d, Rng::mix(seed, kSeedDetection));
  m.mod = ModulationParams::create(m.store, d, mc.d_key, mc.d_llm, Rng::mix(seed, kSeedModulation));
  m.lm = ToyLM::create(m.store, LmConfig{mc.d_llm, mc.lm_blocks, mc.max_seq}, m.vocab.size(),
                       Rng::mix(seed, kSeedLm));

  std::vector<std::string> phrases;
  for (const auto& name : defect) phrases.push_back(synth::label_phrase(synth::label_from_name(name)));
  m.label_rows = m.encoders.encode_labels(phrases);
  m.defect_labels = std::move(defect);
  return m;
}

void reinit_experts_from_guides(FabGptModel& m, const Tensor& image, const std::string& marks) {
  if (!m.cfg.ablation.use_experts) return;
  auto reinit = [](PromptExpert& e, const Tensor& guide) {
    const std::size_t d = guide.cols();
    if (e.z.cols() != d) throw InputError("reinit_experts_from_guides: width mismatch");
    Tensor mean({d});
    for (std::size_t i = 0; i < guide.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) mean.at(j) += guide.at2(i, j);
    for (std::size_t j = 0; j < d; ++j) mean.at(j) /= static_cast<double>(guide.rows());
    Tensor init(e.z.shape());
    for (std::size_t i = 0; i < e.z.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) init.at2(i, j) = e.z.at2(i, j) * mean.at(j);
    init.quantize_f32();
    e.guide_snapshot = init;
    e.prompts->value = std::move(init);
  };
  reinit(m.img_expert, m.encoders.encode_image(image));
  reinit(m.txt_expert, m.encoders.encode_text(marks));
}

SampleForward forward_detection(FabGptModel& m, const Tensor& image, const std::string& marks) {
  SampleForward s;
  s.v_img_clip = m.encoders.encode_image(image);
  const Tensor v_txt_clip = m.encoders.encode_text(marks);

  ag::Var v_img, v_txt;
  if (m.cfg.ablation.use_pm) {
    s.pm = pm_predict(s.v_img_clip, m.label_rows, m.pm);
    s.pm_valid = true;
    auto scaled = apply_confidence(s.pm.p_n, s.v_img_clip, v_txt_clip);
    v_img = scaled.first;
    v_txt = scaled.second;
  } else {
    v_img = ag::constant(s.v_img_clip);
    v_txt = ag::constant(v_txt_clip);
  }

  if (m.cfg.ablation.use_experts) {
    s.t_img = expert_branch_forward(m.img_expert, v_img);
    s.t_txt = expert_branch_forward(m.txt_expert, v_txt);
    s.n_e = m.cfg.model.n_experts;
  } else {
    s.t_img = v_img;
    s.t_txt = v_txt;
    s.n_e = 0;
  }

  s.det = detect(s.t_img, s.t_txt, m.det, s.n_e, m.cfg.generation.height, m.cfg.generation.width);
  s.mask_tokens = project_mask(s.det.anomaly, m.det, m.grid());
  return s;
}

QaForward forward_instruction(FabGptModel& m, const SampleForward& s, const std::string& question,
                              double force_gate) {
  const ag::Var t_que = adapt_question_tokens(ag::constant(m.encoders.encode_text(question)), m.mod);
  const InstructionFormat format = m.cfg.ablation.instruction_format;

  ag::Var visual, mask_block;
  if (format == InstructionFormat::kBaseline) {
    visual = adapt_image_tokens(ag::constant(s.v_img_clip), m.mod);
    mask_block = adapt_image_tokens(s.t_img, m.mod);
  } else {
    ag::Var fused = s.t_img;
    if (m.cfg.ablation.use_qformer_stack) {
      auto self = bidirectional_self_attention(s.t_img, s.mask_tokens, m.mod);
      fused = cross_attention(self.f_im, s.t_txt, m.mod).f_imt;
    }
    visual = ffn_project(fused, m.mod);
    mask_block = adapt_mask_tokens(s.mask_tokens, m.mod);
  }

  QaForward out;
  if (force_gate >= 0.0) {
    out.gate = ag::constant(Tensor({1}, force_gate));
  } else if (format == InstructionFormat::kBaseline || !m.cfg.ablation.use_corrector) {
    out.gate = unit_gate();
  } else {
    out.gate = compute_gate(visual, t_que, m.mod).a;
  }
  out.gate_value = out.gate->value.at(0);
  out.instruction = assemble_instruction(out.gate, visual, mask_block, t_que, format);
  return out;
}

std::string answer_question(FabGptModel& m, const SampleForward& s, const std::string& question,
                            double force_gate, std::size_t max_len) {
  QaForward qf = forward_instruction(m, s, question, force_gate);
  return lm_answer(m.lm, m.vocab, qf.instruction, max_len);
}

Tensor blank_image(const RunConfig& cfg) {
  return Tensor({cfg.generation.height, cfg.generation.width});
}

std::vector<std::size_t> answer_ids(const FabGptModel& m, const std::string& answer) {
  std::vector<std::size_t> ids = m.vocab.encode(answer);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

namespace {

std::map<std::string, std::string> expected_for(Facet f,
                                                const std::map<std::string, std::string>& slots) {
  switch (f) {
    case Facet::presence: return {{"presence", "yes"}};
    case Facet::category: return {{"type", slots.at("type")}};
    case Facet::location: return {{"location", slots.at("location")}};
    case Facet::quantity: return {{"quantity", slots.at("quantity")}};
    case Facet::description: return {{"description", slots.at("description")}};
    case Facet::analysis: return {{"cause", slots.at("cause")}};
    case Facet::general: break;
  }
  throw InputError("expected_for: facet has no defect slots");
}

}  // namespace

EvalResult evaluate(FabGptModel& m, const synth::DatasetManifest& manifest,
                    const std::string& manifest_dir, const EvalOptions& opts) {
  struct Item {
    synth::WaferSample sample;
    Tensor map;           // anomaly map used for the metrics
    double score = 0.0;   // image-level score
    std::size_t pred = 0;
    bool pred_valid = false;
  };

  std::vector<Item> goods;
  std::map<std::string, std::vector<Item>> per_class;  // defect label -> items
  std::map<std::string, std::size_t> first_of_class;   // manifest-order representative
  std::vector<synth::WaferSample> reps;                // one defect sample per class

  for (const auto& entry : manifest.test) {
    Item it;
    it.sample = synth::load_sample(manifest_dir, entry);
    const std::string marks = synth::extract_text_marks(it.sample);
    if (opts.oracle_masks) {
      it.map = it.sample.mask;
    } else {
      SampleForward f = forward_detection(m, it.sample.image, marks);
      it.map = f.det.mask.anomaly_map;
      if (f.pm_valid) {
        it.pred = f.pm.predicted_label;
        it.pred_valid = true;
      }
    }
    it.score = image_score(it.map);
    const std::string name = synth::label_name(it.sample.label);
    if (it.sample.label == synth::Label::good) {
      goods.push_back(std::move(it));
    } else {
      if (first_of_class.count(name) == 0) {
        first_of_class[name] = per_class[name].size();
        reps.push_back(it.sample);
      }
      per_class[name].push_back(std::move(it));
    }
  }
  if (goods.empty() || per_class.empty())
    throw InputError("evaluate: test split needs both good and defect samples");

  EvalResult r;
  std::size_t pm_hits = 0, pm_total = 0;
  for (const auto& [name, items] : per_class) {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<Tensor> maps, masks;
    for (const auto& it : items) {
      scores.push_back(it.score);
      labels.push_back(1);
      maps.push_back(it.map);
      masks.push_back(it.sample.mask);
      if (it.pred_valid) {
        ++pm_total;
        if (m.defect_labels.at(it.pred) == name) ++pm_hits;
      }
    }
    for (const auto& g : goods) {
      scores.push_back(g.score);
      labels.push_back(0);
    }
    ClassMetrics cm;
    cm.image_auc = image_auc(scores, labels);
    cm.pixel_auc = pixel_auc(maps, masks);
    cm.pro = pro_score(maps, masks);
    cm.ap = average_precision(maps, masks);
    r.report.per_class[name] = cm;
  }
  fill_average(r.report);
  r.pm_accuracy = pm_total ? static_cast<double>(pm_hits) / static_cast<double>(pm_total) : 0.0;

  // Held-out defect questions against the first test image of each class,
  // then held-out general facts asked with those same defect images present.
  std::vector<GradedAnswer> graded;
  const auto causes = default_cause_table();
  const auto descriptions = default_description_table();
  std::vector<SampleForward> rep_fwd;
  for (const auto& rep : reps)
    rep_fwd.push_back(forward_detection(m, rep.image, synth::extract_text_marks(rep)));

  double gate_defect = 0.0;
  std::size_t n_defect_q = 0;
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const auto slots = slots_for_sample(reps[i], causes, descriptions);
    for (const auto& [facet, question] : held_out_defect_questions()) {
      QaForward qf = forward_instruction(m, rep_fwd[i], question, -1.0);
      const std::string ans = lm_answer(m.lm, m.vocab, qf.instruction, 16);
      graded.push_back({facet, grade_answer(ans, expected_for(facet, slots))});
      gate_defect += qf.gate_value;
      ++n_defect_q;
    }
  }

  double gate_unrelated = 0.0;
  std::size_t n_unrelated = 0;
  if (m.facts.size() < kCorpusBFacts + 20)
    throw ConfigError("evaluate: facts file needs 20 held-out entries");
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& fact = m.facts[kCorpusBFacts + i];
    const SampleForward& f = rep_fwd[i % rep_fwd.size()];
    QaForward qf = forward_instruction(m, f, fact.first, -1.0);
    const std::string ans = lm_answer(m.lm, m.vocab, qf.instruction, 16);
    graded.push_back({Facet::general, grade_answer(ans, {{"answer", fact.second}})});
    gate_unrelated += qf.gate_value;
    ++n_unrelated;
  }

  r.report.qa = qa_accuracy(graded);
  r.gate_mean_defect = n_defect_q ? gate_defect / static_cast<double>(n_defect_q) : 0.0;
  r.gate_mean_unrelated = n_unrelated ? gate_unrelated / static_cast<double>(n_unrelated) : 0.0;
  r.report.config_echo = config_to_json(m.cfg);
  r.report.checkpoint_id = opts.checkpoint_id;
  r.report.timestamp = opts.timestamp;
  return r;
}

nlohmann::json eval_result_to_json(const EvalResult& r) {
  nlohmann::json j = report_to_json(r.report);
  j["pm_accuracy"] = r.pm_accuracy;
  j["gate"] = {{"defect_questions", r.gate_mean_defect},
               {"unrelated_questions", r.gate_mean_unrelated}};
  return j;
}

}  // namespace fabgpt
