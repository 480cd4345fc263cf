// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/qa.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <queue>
#include <sstream>

#include "fabgpt/errors.hpp"
#include "fabgpt/objectives.hpp"
#include "fabgpt/rng.hpp"
#include "json.hpp"

namespace fabgpt {

using ag::Var;
using json = nlohmann::json;

const char* facet_name(Facet f) {
  switch (f) {
    case Facet::presence: return "presence";
    case Facet::category: return "category";
    case Facet::location: return "location";
    case Facet::quantity: return "quantity";
    case Facet::description: return "description";
    case Facet::analysis: return "analysis";
    case Facet::general: return "general";
  }
  return "general";
}

Facet facet_from_name(const std::string& name) {
  for (Facet f : {Facet::presence, Facet::category, Facet::location, Facet::quantity,
                  Facet::description, Facet::analysis, Facet::general})
    if (name == facet_name(f)) return f;
  throw FormatError("unknown facet name: " + name);
}

std::map<std::string, std::string> default_cause_table() {
  return {
      {"hole", "overetch or a resist bubble during patterning"},
      {"particle", "contamination or film flaking on the surface"},
      {"scratch", "handling damage or debris on the wafer chuck"},
      {"pattern_deformation", "litho defocus or film stress in the pattern"},
  };
}

std::map<std::string, std::string> default_description_table() {
  return {
      {"hole", "a dark rounded pit in the surface"},
      {"particle", "a bright raised blob on the surface"},
      {"scratch", "a thin elongated line across the surface"},
      {"pattern_deformation", "a warped region of the background pattern"},
  };
}

std::vector<std::pair<std::string, std::string>> load_facts(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open facts file: " + file.string());
  std::vector<std::pair<std::string, std::string>> facts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
      throw FormatError("facts line " + std::to_string(line_no) +
                        " is not question<TAB>answer");
    facts.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return facts;
}

namespace {

struct TemplateSpec {
  Facet facet;
  const char* question;
  const char* answer;
};

// 15 question templates per defect category: 3 presence, 3 category,
// 3 location, 2 quantity, 2 description, 2 analysis.
const TemplateSpec kDefectTemplates[15] = {
    {Facet::presence, "is there a defect in the image?", "yes, there is a {type}."},
    {Facet::presence, "does this wafer image contain any defect?", "yes, a {type} is present."},
    {Facet::presence, "is the wafer surface clean?", "no, the image shows a {type}."},
    {Facet::category, "what type of defect is shown?", "the defect is a {type}."},
    {Facet::category, "which defect class is visible in the image?", "it is a {type}."},
    {Facet::category, "identify the defect category.", "the category is {type}."},
    {Facet::location, "where is the defect located?", "the defect sits in the {location} region."},
    {Facet::location, "in which part of the image is the defect?", "it lies in the {location} area."},
    {Facet::location, "give the defect position on the grid.", "the position is {location}."},
    {Facet::quantity, "how many defect instances are present?", "there are {quantity} defect instances."},
    {Facet::quantity, "count the defects in the image.", "the count is {quantity}."},
    {Facet::description, "describe the defect appearance.", "the defect looks like {description}."},
    {Facet::description, "what does the defect look like?", "it appears as {description}."},
    {Facet::analysis, "what is the likely root cause of this defect?", "the likely cause is {cause}."},
    {Facet::analysis, "analyze why this defect occurred.", "it was probably caused by {cause}."},
};

const char* kGridNames[3][3] = {
    {"top-left", "top-center", "top-right"},
    {"middle-left", "center", "middle-right"},
    {"bottom-left", "bottom-center", "bottom-right"},
};

bool is_word_token(const std::string& t) {
  for (char c : t)
    if (!std::isalnum(static_cast<unsigned char>(c))) return false;
  return !t.empty();
}

// Lowercased word tokens with punctuation dropped.
std::vector<std::string> normalized_tokens(const std::string& text) {
  std::vector<std::string> out;
  for (auto& t : Vocabulary::tokenize(text))
    if (is_word_token(t)) out.push_back(std::move(t));
  return out;
}

bool contains_run(const std::vector<std::string>& haystack,
                  const std::vector<std::string>& needle) {
  if (needle.empty()) return true;
  if (needle.size() > haystack.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool hit = true;
    for (std::size_t j = 0; j < needle.size(); ++j)
      if (haystack[i + j] != needle[j]) {
        hit = false;
        break;
      }
    if (hit) return true;
  }
  return false;
}

}  // namespace

Corpora build_corpora(const std::vector<std::string>& defect_labels,
                      const std::map<std::string, std::string>& cause_table,
                      const std::filesystem::path& facts_file) {
  if (defect_labels.empty()) throw ConfigError("no defect labels for corpus construction");
  for (const auto& label : defect_labels)
    if (!cause_table.count(label)) throw ConfigError("cause table misses label: " + label);

  Corpora out;
  for (const auto& label : defect_labels)
    for (const TemplateSpec& spec : kDefectTemplates)
      out.corpus_a.push_back({spec.question, spec.answer, 'A', label, spec.facet});

  auto facts = load_facts(facts_file);
  if (facts.size() < kCorpusBFacts)
    throw ConfigError("facts file holds " + std::to_string(facts.size()) + " lines, need " +
                      std::to_string(kCorpusBFacts));
  for (std::size_t i = 0; i < kCorpusBFacts; ++i)
    out.corpus_b.push_back({facts[i].first, facts[i].second, 'B', "general", Facet::general});
  return out;
}

void save_corpus(const std::vector<CorpusEntry>& entries, const std::filesystem::path& file) {
  json doc = json::array();
  for (const auto& e : entries)
    doc.push_back({{"question_template", e.question_template},
                   {"answer_template", e.answer_template},
                   {"corpus_tag", std::string(1, e.corpus_tag)},
                   {"category", e.category},
                   {"facet", facet_name(e.facet)}});
  std::ofstream outf(file);
  if (!outf) throw IoError("cannot write corpus file: " + file.string());
  outf << doc.dump(2) << "\n";
}

std::vector<CorpusEntry> load_corpus(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open corpus file: " + file.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw FormatError("corpus file " + file.string() + ": " + e.what());
  }
  std::vector<CorpusEntry> entries;
  try {
    for (const auto& item : doc) {
      CorpusEntry e;
      e.question_template = item.at("question_template").get<std::string>();
      e.answer_template = item.at("answer_template").get<std::string>();
      const auto tag = item.at("corpus_tag").get<std::string>();
      if (tag != "A" && tag != "B") throw FormatError("corpus tag must be A or B");
      e.corpus_tag = tag[0];
      e.category = item.at("category").get<std::string>();
      e.facet = facet_from_name(item.at("facet").get<std::string>());
      entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError("corpus file " + file.string() + ": " + e.what());
  }
  return entries;
}

std::size_t count_mask_components(const Tensor& mask) {
  if (mask.rank() != 2) throw InputError("mask must be [H,W]");
  const std::size_t h = mask.rows(), w = mask.cols();
  std::vector<char> seen(h * w, 0);
  std::size_t components = 0;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (seen[start] || mask.at(start) <= 0.5) continue;
    ++components;
    std::queue<std::size_t> frontier;
    frontier.push(start);
    seen[start] = 1;
    while (!frontier.empty()) {
      const std::size_t idx = frontier.front();
      frontier.pop();
      const std::size_t y = idx / w, x = idx % w;
      const std::size_t neighbors[4][2] = {
          {y, x + 1}, {y, x == 0 ? w : x - 1}, {y + 1, x}, {y == 0 ? h : y - 1, x}};
      for (const auto& n : neighbors) {
        if (n[0] >= h || n[1] >= w) continue;
        const std::size_t ni = n[0] * w + n[1];
        if (!seen[ni] && mask.at(ni) > 0.5) {
          seen[ni] = 1;
          frontier.push(ni);
        }
      }
    }
  }
  return components;
}

std::string grid_cell_name(const Tensor& mask) {
  if (mask.rank() != 2) throw InputError("mask must be [H,W]");
  double sy = 0.0, sx = 0.0, n = 0.0;
  for (std::size_t y = 0; y < mask.rows(); ++y)
    for (std::size_t x = 0; x < mask.cols(); ++x)
      if (mask.at2(y, x) > 0.5) {
        sy += static_cast<double>(y);
        sx += static_cast<double>(x);
        n += 1.0;
      }
  if (n == 0.0) throw InputError("grid cell undefined for an empty mask");
  const auto third = [](double v, double extent) {
    const std::size_t k = static_cast<std::size_t>(3.0 * v / extent);
    return std::min<std::size_t>(k, 2);
  };
  return kGridNames[third(sy / n, static_cast<double>(mask.rows()))]
                   [third(sx / n, static_cast<double>(mask.cols()))];
}

std::string quantity_phrase(std::size_t n) {
  return n <= 3 ? std::to_string(n) : std::string("several");
}

std::map<std::string, std::string> slots_for_sample(
    const synth::WaferSample& sample, const std::map<std::string, std::string>& cause_table,
    const std::map<std::string, std::string>& description_table) {
  if (sample.label == synth::Label::good)
    throw InputError("slots are defined for defect samples only");
  const std::string& name = synth::label_name(sample.label);
  const auto cause = cause_table.find(name);
  const auto desc = description_table.find(name);
  if (cause == cause_table.end()) throw ConfigError("cause table misses label: " + name);
  if (desc == description_table.end())
    throw ConfigError("description table misses label: " + name);
  return {
      {"type", synth::label_phrase(sample.label)},
      {"location", grid_cell_name(sample.mask)},
      {"quantity", quantity_phrase(count_mask_components(sample.mask))},
      {"description", desc->second},
      {"cause", cause->second},
  };
}

std::string fill_template(const std::string& tmpl,
                          const std::map<std::string, std::string>& slots) {
  std::string out;
  out.reserve(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] != '{') {
      out += tmpl[i++];
      continue;
    }
    const std::size_t close = tmpl.find('}', i);
    if (close == std::string::npos) throw ConfigError("unterminated slot in template: " + tmpl);
    const std::string key = tmpl.substr(i + 1, close - i - 1);
    const auto it = slots.find(key);
    if (it == slots.end()) throw ConfigError("no value for slot {" + key + "}");
    out += it->second;
    i = close + 1;
  }
  return out;
}

std::map<std::string, std::string> expected_slots(
    const CorpusEntry& entry, const std::map<std::string, std::string>& slots) {
  const auto pick = [&](const char* key) {
    const auto it = slots.find(key);
    if (it == slots.end()) throw ConfigError(std::string("no value for slot {") + key + "}");
    return std::map<std::string, std::string>{{key, it->second}};
  };
  switch (entry.facet) {
    case Facet::presence: {
      // Polarity follows the template: "is the wafer surface clean?" is
      // correctly answered with "no" on a defect image.
      const auto tokens = normalized_tokens(entry.answer_template);
      const std::string head = tokens.empty() ? "yes" : tokens.front();
      return {{"presence", head == "no" ? "no" : "yes"}};
    }
    case Facet::category: return pick("type");
    case Facet::location: return pick("location");
    case Facet::quantity: return pick("quantity");
    case Facet::description: return pick("description");
    case Facet::analysis: return pick("cause");
    case Facet::general: return {{"answer", entry.answer_template}};
  }
  throw ConfigError("unreachable facet");
}

bool grade_answer(const std::string& answer,
                  const std::map<std::string, std::string>& expected) {
  if (expected.empty()) throw InputError("expected slots must be non-empty");
  const auto answer_tokens = normalized_tokens(answer);
  for (const auto& [key, value] : expected)
    if (!contains_run(answer_tokens, normalized_tokens(value))) return false;
  return true;
}

std::vector<char> alternation_schedule(std::size_t n_steps) {
  if (n_steps == 0) throw InputError("schedule needs at least one step");
  std::vector<char> tags(n_steps);
  for (std::size_t i = 0; i < n_steps; ++i) tags[i] = (i % 3 == 2) ? 'B' : 'A';
  return tags;
}

const std::vector<std::pair<Facet, std::string>>& held_out_defect_questions() {
  static const std::vector<std::pair<Facet, std::string>> questions = {
      {Facet::presence, "can you spot any defect on this wafer?"},
      {Facet::category, "name the defect type in this picture."},
      {Facet::location, "tell me where the defect appears."},
      {Facet::quantity, "how many separate defects can you find?"},
      {Facet::description, "give a short description of the defect."},
      {Facet::analysis, "explain the probable cause of the defect."},
  };
  return questions;
}

Vocabulary build_qa_vocabulary(const Corpora& corpora,
                               const std::vector<std::pair<std::string, std::string>>& facts,
                               const std::vector<std::string>& extra_texts) {
  std::vector<std::string> texts;
  for (const auto& e : corpora.corpus_a) {
    texts.push_back(e.question_template);
    texts.push_back(e.answer_template);
    texts.push_back(synth::label_phrase(synth::label_from_name(e.category)));
  }
  for (const auto& e : corpora.corpus_b) {
    texts.push_back(e.question_template);
    texts.push_back(e.answer_template);
  }
  for (const auto& [q, a] : facts) {
    texts.push_back(q);
    texts.push_back(a);
  }
  for (const auto& row : kGridNames)
    for (const char* cell : row) texts.emplace_back(cell);
  for (std::size_t n = 0; n <= 3; ++n) texts.push_back(quantity_phrase(n));
  texts.emplace_back("several");
  for (const auto& [label, cause] : default_cause_table()) texts.push_back(cause);
  for (const auto& [label, desc] : default_description_table()) texts.push_back(desc);
  for (const auto& [facet, q] : held_out_defect_questions()) texts.push_back(q);
  texts.emplace_back("yes no");
  texts.insert(texts.end(), extra_texts.begin(), extra_texts.end());
  return Vocabulary::build(texts);
}

namespace {

Tensor gaussian_init(std::vector<std::size_t> shape, double sigma, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = sigma * rng.gaussian();
  return t;
}

// Prefix rows attend over the whole prefix; answer rows attend to the prefix
// plus the causal answer history.
Tensor attention_bias(std::size_t total, std::size_t prefix) {
  Tensor bias({total, total}, -1e30);
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t limit = i < prefix ? prefix : i + 1;
    for (std::size_t j = 0; j < limit; ++j) bias.at2(i, j) = 0.0;
  }
  return bias;
}

Var lm_hidden(const ToyLM& lm, const Var& rows, const Tensor& bias) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(lm.cfg.d_llm));
  Var x = rows;
  for (const auto& b : lm.blocks) {
    Var h = ag::layer_norm_rows(x, b.ln1_g, b.ln1_b);
    Var att = ag::softmax_rows_masked(
        ag::scale(ag::matmul_nt(ag::matmul(h, b.wq), ag::matmul(h, b.wk)), scale), bias);
    x = ag::add(x, ag::matmul(ag::matmul(att, ag::matmul(h, b.wv)), b.wo));
    Var h2 = ag::layer_norm_rows(x, b.ln2_g, b.ln2_b);
    Var mid = ag::relu(ag::add_rowvec(ag::matmul(h2, b.mlp_w1), b.mlp_b1));
    x = ag::add(x, ag::add_rowvec(ag::matmul(mid, b.mlp_w2), b.mlp_b2));
  }
  return ag::layer_norm_rows(x, lm.lnf_g, lm.lnf_b);
}

// Embedded input rows: instruction prefix, then BOS and the answer tokens
// shifted right by one, all with positional terms.
Var lm_input_rows(const ToyLM& lm, const PromptInstruction& ins,
                  const std::vector<std::size_t>& answer_inputs) {
  const std::size_t prefix = ins.tokens->value.rows();
  const std::size_t total = prefix + answer_inputs.size();
  if (ins.tokens->value.cols() != lm.cfg.d_llm)
    throw InputError("instruction width does not match the language model");
  if (total > lm.cfg.max_seq)
    throw InputError("sequence length " + std::to_string(total) + " exceeds max_seq " +
                     std::to_string(lm.cfg.max_seq));
  for (std::size_t id : answer_inputs)
    if (id >= lm.vocab_size) throw InputError("token id " + std::to_string(id) + " out of range");
  Var rows = ag::concat_rows({ins.tokens, ag::embed_rows(lm.tok_emb, answer_inputs)});
  return ag::add(rows, ag::slice_rows(lm.pos_emb, 0, total));
}

}  // namespace

ToyLM ToyLM::create(ParamStore& store, const LmConfig& cfg, std::size_t vocab_size,
                    std::uint64_t seed) {
  if (cfg.d_llm == 0 || cfg.n_blocks == 0 || cfg.max_seq == 0)
    throw ConfigError("language model dimensions must be positive");
  if (vocab_size <= Vocabulary::kUnk) throw ConfigError("vocabulary too small");
  Rng rng(Rng::mix(seed, 0x117));
  const std::size_t d = cfg.d_llm;
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_hid = 1.0 / std::sqrt(static_cast<double>(4 * d));

  ToyLM lm;
  lm.cfg = cfg;
  lm.vocab_size = vocab_size;
  lm.tok_emb = store.add("lm/tok_emb", gaussian_init({vocab_size, d}, 0.1, rng));
  lm.pos_emb = store.add("lm/pos_emb", gaussian_init({cfg.max_seq, d}, 0.1, rng));
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string base = "lm/b" + std::to_string(i) + "/";
    Block b;
    b.ln1_g = store.add(base + "ln1_g", Tensor({d}, 1.0));
    b.ln1_b = store.add(base + "ln1_b", Tensor({d}, 0.0));
    b.wq = store.add(base + "wq", gaussian_init({d, d}, s_d, rng));
    b.wk = store.add(base + "wk", gaussian_init({d, d}, s_d, rng));
    b.wv = store.add(base + "wv", gaussian_init({d, d}, s_d, rng));
    b.wo = store.add(base + "wo", gaussian_init({d, d}, s_d, rng));
    b.ln2_g = store.add(base + "ln2_g", Tensor({d}, 1.0));
    b.ln2_b = store.add(base + "ln2_b", Tensor({d}, 0.0));
    b.mlp_w1 = store.add(base + "mlp_w1", gaussian_init({d, 4 * d}, s_d, rng));
    b.mlp_b1 = store.add(base + "mlp_b1", Tensor({4 * d}, 0.0));
    b.mlp_w2 = store.add(base + "mlp_w2", gaussian_init({4 * d, d}, s_hid, rng));
    b.mlp_b2 = store.add(base + "mlp_b2", Tensor({d}, 0.0));
    lm.blocks.push_back(std::move(b));
  }
  lm.lnf_g = store.add("lm/final/g", Tensor({d}, 1.0));
  lm.lnf_b = store.add("lm/final/b", Tensor({d}, 0.0));
  return lm;
}

ag::Var lm_answer_probs(const ToyLM& lm, const PromptInstruction& instruction,
                        const std::vector<std::size_t>& answer_ids) {
  if (answer_ids.empty()) throw InputError("answer must be non-empty");
  if (answer_ids.back() != Vocabulary::kEos) throw InputError("answer must end with <eos>");
  for (std::size_t id : answer_ids)
    if (id >= lm.vocab_size) throw InputError("token id " + std::to_string(id) + " out of range");

  std::vector<std::size_t> inputs;
  inputs.reserve(answer_ids.size());
  inputs.push_back(Vocabulary::kBos);
  inputs.insert(inputs.end(), answer_ids.begin(), answer_ids.end() - 1);

  const std::size_t prefix = instruction.tokens->value.rows();
  Var rows = lm_input_rows(lm, instruction, inputs);
  Var hidden = lm_hidden(lm, rows, attention_bias(prefix + inputs.size(), prefix));
  Var answer_rows = ag::slice_rows(hidden, prefix, prefix + inputs.size());
  return ag::softmax_rows(ag::matmul_nt(answer_rows, lm.tok_emb));
}

ag::Var lm_loss(const ToyLM& lm, const PromptInstruction& instruction,
                const std::vector<std::size_t>& answer_ids) {
  return cross_entropy_probs(lm_answer_probs(lm, instruction, answer_ids), answer_ids);
}

std::string lm_answer(const ToyLM& lm, const Vocabulary& vocab,
                      const PromptInstruction& instruction, std::size_t max_len) {
  std::vector<std::size_t> generated;
  while (generated.size() < max_len) {
    std::vector<std::size_t> probe = generated;
    probe.push_back(Vocabulary::kEos);
    Var probs = lm_answer_probs(lm, instruction, probe);
    const std::size_t last = probe.size() - 1;
    std::size_t best = 0;
    double best_p = -1.0;
    for (std::size_t v = 0; v < lm.vocab_size; ++v)
      if (probs->value.at2(last, v) > best_p) {
        best_p = probs->value.at2(last, v);
        best = v;
      }
    if (best == Vocabulary::kEos) break;
    generated.push_back(best);
  }
  return vocab.decode(generated);
}

}  // namespace fabgpt
