// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fabgpt/autograd.hpp"
#include "fabgpt/modulation.hpp"
#include "fabgpt/params.hpp"
#include "fabgpt/vocab.hpp"
#include "fabgpt/wafersynth.hpp"

namespace fabgpt {

enum class Facet {
  presence,
  category,
  location,
  quantity,
  description,
  analysis,
  general,
};

const char* facet_name(Facet f);
Facet facet_from_name(const std::string& name);

struct CorpusEntry {
  std::string question_template;  // may hold {type},{location},{quantity},{description},{cause}
  std::string answer_template;
  char corpus_tag = 'A';   // 'A' defect knowledge, 'B' general facts
  std::string category;    // defect label name, or "general" for corpus B
  Facet facet = Facet::general;
};

struct Corpora {
  std::vector<CorpusEntry> corpus_a;  // 15 templates per defect category
  std::vector<CorpusEntry> corpus_b;  // first kCorpusBFacts fact pairs
};

// Facts beyond this prefix are held out for the unrelated-question evaluation.
inline constexpr std::size_t kCorpusBFacts = 100;

// Root-cause and appearance answer strings, one per defect category.
std::map<std::string, std::string> default_cause_table();
std::map<std::string, std::string> default_description_table();

// One "question<TAB>answer" per line; blank lines skipped.
std::vector<std::pair<std::string, std::string>> load_facts(const std::filesystem::path& file);

Corpora build_corpora(const std::vector<std::string>& defect_labels,
                      const std::map<std::string, std::string>& cause_table,
                      const std::filesystem::path& facts_file);

void save_corpus(const std::vector<CorpusEntry>& entries, const std::filesystem::path& file);
std::vector<CorpusEntry> load_corpus(const std::filesystem::path& file);

// 4-connected component count of a binarized mask.
std::size_t count_mask_components(const Tensor& mask);

// Names the 3x3 grid cell holding the mask centroid, e.g. "top-left".
std::string grid_cell_name(const Tensor& mask);

// Counts above 3 collapse to "several"; the desk-scale quantity vocabulary.
std::string quantity_phrase(std::size_t n);

// Slot values resolvable from a defect sample: type, location, quantity,
// description, cause. Throws InputError on a defect-free mask.
std::map<std::string, std::string> slots_for_sample(
    const synth::WaferSample& sample, const std::map<std::string, std::string>& cause_table,
    const std::map<std::string, std::string>& description_table);

// Missing slot value raises ConfigError naming the slot.
std::string fill_template(const std::string& tmpl, const std::map<std::string, std::string>& slots);

// The grading targets for one entry answered on one sample's slot values.
std::map<std::string, std::string> expected_slots(const CorpusEntry& entry,
                                                  const std::map<std::string, std::string>& slots);

// Normalized containment: every expected value's token run must appear
// contiguously in the normalized answer.
bool grade_answer(const std::string& answer, const std::map<std::string, std::string>& expected);

// Repeating A,A,B pattern; n_steps must be >= 1.
std::vector<char> alternation_schedule(std::size_t n_steps);

// Unseen question phrasings, one per defect facet, for held-out evaluation.
const std::vector<std::pair<Facet, std::string>>& held_out_defect_questions();

// Word-level vocabulary over corpus texts, slot values, and extra phrasings.
Vocabulary build_qa_vocabulary(const Corpora& corpora,
                               const std::vector<std::pair<std::string, std::string>>& facts,
                               const std::vector<std::string>& extra_texts);

struct LmConfig {
  std::size_t d_llm = 64;
  std::size_t n_blocks = 2;
  std::size_t max_seq = 128;
};

// Tiny decoder-only language model. Instruction rows enter as a non-causal
// prefix; answer rows are causal. The output projection is the transpose of
// the token embedding table.
struct ToyLM {
  LmConfig cfg;
  std::size_t vocab_size = 0;
  ag::Var tok_emb;  // [V, D]
  ag::Var pos_emb;  // [max_seq, D]
  struct Block {
    ag::Var ln1_g, ln1_b;
    ag::Var wq, wk, wv, wo;      // [D, D]
    ag::Var ln2_g, ln2_b;
    ag::Var mlp_w1, mlp_b1;      // [D, 4D]
    ag::Var mlp_w2, mlp_b2;      // [4D, D]
  };
  std::vector<Block> blocks;
  ag::Var lnf_g, lnf_b;

  static ToyLM create(ParamStore& store, const LmConfig& cfg, std::size_t vocab_size,
                      std::uint64_t seed);
};

// Next-token distributions at every answer position: [n, V] rows, row k
// giving p(answer_ids[k] | prefix, answer_ids[0..k-1]). answer_ids must be
// non-empty, end with EOS, and stay within the vocabulary.
ag::Var lm_answer_probs(const ToyLM& lm, const PromptInstruction& instruction,
                        const std::vector<std::size_t>& answer_ids);

// Teacher-forced mean next-token cross-entropy over the answer positions.
ag::Var lm_loss(const ToyLM& lm, const PromptInstruction& instruction,
                const std::vector<std::size_t>& answer_ids);

// Greedy decode until EOS or max_len tokens; special tokens are dropped from
// the returned text.
std::string lm_answer(const ToyLM& lm, const Vocabulary& vocab,
                      const PromptInstruction& instruction, std::size_t max_len);

}  // namespace fabgpt
