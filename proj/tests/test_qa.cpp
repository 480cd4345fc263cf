// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "fabgpt/errors.hpp"
#include "fabgpt/qa.hpp"
#include "fabgpt/rng.hpp"
#include "json.hpp"

using namespace fabgpt;
using ag::Var;
namespace fs = std::filesystem;

namespace {

fs::path data_dir() { return fs::path(FABGPT_DATA_DIR); }
fs::path fixtures_dir() { return fs::path(FABGPT_FIXTURES_DIR); }

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double sigma = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = sigma * rng.gaussian();
  return t;
}

Corpora default_corpora() {
  std::vector<std::string> labels = {"hole", "particle", "scratch", "pattern_deformation"};
  return build_corpora(labels, default_cause_table(), data_dir() / "general_facts.txt");
}

PromptInstruction constant_instruction(const Tensor& rows) {
  PromptInstruction ins;
  ins.tokens = ag::constant(rows);
  const std::size_t n = rows.rows();
  ins.block_spans = {{{0, n}, {n, n}, {n, n}}};
  return ins;
}

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& content) {
    path = fs::temp_directory_path() / ("fabgpt_qa_test_" + std::to_string(::getpid()) + ".txt");
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::error_code ec; fs::remove(path, ec); }
};

}  // namespace

TEST_CASE("corpus construction yields 60 defect entries and 100 fact entries") {
  Corpora c = default_corpora();
  REQUIRE(c.corpus_a.size() == 60);
  REQUIRE(c.corpus_b.size() == 100);

  std::map<std::string, std::size_t> per_category;
  std::map<Facet, std::size_t> per_facet;
  for (const auto& e : c.corpus_a) {
    CHECK(e.corpus_tag == 'A');
    CHECK(e.category != "good");
    CHECK(e.category != "general");
    CHECK(e.facet != Facet::general);
    ++per_category[e.category];
    ++per_facet[e.facet];
  }
  for (const auto& [cat, n] : per_category) CHECK(n == 15);
  CHECK(per_facet[Facet::presence] == 12);
  CHECK(per_facet[Facet::category] == 12);
  CHECK(per_facet[Facet::location] == 12);
  CHECK(per_facet[Facet::quantity] == 8);
  CHECK(per_facet[Facet::description] == 8);
  CHECK(per_facet[Facet::analysis] == 8);

  for (const auto& e : c.corpus_b) {
    CHECK(e.corpus_tag == 'B');
    CHECK(e.facet == Facet::general);
    CHECK(e.category == "general");
    // No image dependence: no slot markers anywhere.
    CHECK(e.question_template.find('{') == std::string::npos);
    CHECK(e.answer_template.find('{') == std::string::npos);
  }
}

TEST_CASE("facts file carries 20 held-out paraphrases mirroring the first 20 answers") {
  auto facts = load_facts(data_dir() / "general_facts.txt");
  REQUIRE(facts.size() == 120);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(facts[100 + i].second == facts[i].second);
    CHECK(facts[100 + i].first != facts[i].first);
  }
}

TEST_CASE("facts parsing rejects malformed lines and short files") {
  TempFile bad("what color is the sky? no tab here\n");
  CHECK_THROWS_AS(load_facts(bad.path), FormatError);

  TempFile few("q one?\ta one.\nq two?\ta two.\n");
  std::vector<std::string> labels = {"hole"};
  std::map<std::string, std::string> causes = {{"hole", "overetch"}};
  CHECK_THROWS_AS(build_corpora(labels, causes, few.path), ConfigError);

  CHECK_THROWS_AS(build_corpora(labels, {}, few.path), ConfigError);
}

TEST_CASE("corpus entries round-trip through json") {
  Corpora c = default_corpora();
  const fs::path file =
      fs::temp_directory_path() / ("fabgpt_corpus_" + std::to_string(::getpid()) + ".json");
  save_corpus(c.corpus_a, file);
  auto loaded = load_corpus(file);
  REQUIRE(loaded.size() == c.corpus_a.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].question_template == c.corpus_a[i].question_template);
    CHECK(loaded[i].answer_template == c.corpus_a[i].answer_template);
    CHECK(loaded[i].corpus_tag == c.corpus_a[i].corpus_tag);
    CHECK(loaded[i].category == c.corpus_a[i].category);
    CHECK(loaded[i].facet == c.corpus_a[i].facet);
  }
  fs::remove(file);
}

TEST_CASE("component counting is 4-connected") {
  Tensor mask({6, 6}, 0.0);
  CHECK(count_mask_components(mask) == 0);

  // Two blobs touching only diagonally stay separate under 4-connectivity.
  mask.at2(1, 1) = 1.0;
  mask.at2(1, 2) = 1.0;
  mask.at2(2, 3) = 1.0;
  CHECK(count_mask_components(mask) == 2);

  // Bridge them and the count collapses.
  mask.at2(1, 3) = 1.0;
  CHECK(count_mask_components(mask) == 1);

  // A ring is one component.
  Tensor ring({8, 8}, 0.0);
  for (std::size_t i = 2; i <= 5; ++i) {
    ring.at2(2, i) = 1.0;
    ring.at2(5, i) = 1.0;
    ring.at2(i, 2) = 1.0;
    ring.at2(i, 5) = 1.0;
  }
  CHECK(count_mask_components(ring) == 1);
}

TEST_CASE("two particles in the top-left cell give quantity 2 and location top-left") {
  Tensor mask({64, 64}, 0.0);
  for (std::size_t y = 3; y < 6; ++y)
    for (std::size_t x = 3; x < 6; ++x) mask.at2(y, x) = 1.0;
  for (std::size_t y = 10; y < 13; ++y)
    for (std::size_t x = 12; x < 15; ++x) mask.at2(y, x) = 1.0;
  CHECK(count_mask_components(mask) == 2);
  CHECK(grid_cell_name(mask) == "top-left");
  CHECK(quantity_phrase(count_mask_components(mask)) == "2");
}

TEST_CASE("grid cells cover all nine names and the empty mask is rejected") {
  const char* names[3][3] = {{"top-left", "top-center", "top-right"},
                             {"middle-left", "center", "middle-right"},
                             {"bottom-left", "bottom-center", "bottom-right"}};
  for (std::size_t gy = 0; gy < 3; ++gy)
    for (std::size_t gx = 0; gx < 3; ++gx) {
      Tensor mask({9, 9}, 0.0);
      mask.at2(gy * 3 + 1, gx * 3 + 1) = 1.0;
      CHECK(grid_cell_name(mask) == names[gy][gx]);
    }
  CHECK_THROWS_AS(grid_cell_name(Tensor({4, 4}, 0.0)), InputError);
}

TEST_CASE("quantity phrase uses digits up to three then collapses") {
  CHECK(quantity_phrase(0) == "0");
  CHECK(quantity_phrase(1) == "1");
  CHECK(quantity_phrase(3) == "3");
  CHECK(quantity_phrase(4) == "several");
  CHECK(quantity_phrase(19) == "several");
}

TEST_CASE("slots resolve from a generated defect sample") {
  synth::GenConfig cfg;
  synth::WaferSample s = synth::generate_sample(7, synth::Label::particle, cfg);
  auto slots = slots_for_sample(s, default_cause_table(), default_description_table());
  CHECK(slots.at("type") == "particle");
  CHECK(slots.at("description") == "a bright raised blob on the surface");
  CHECK(slots.at("cause") == "contamination or film flaking on the surface");
  const std::set<std::string> cells = {"top-left",    "top-center",    "top-right",
                                       "middle-left", "center",        "middle-right",
                                       "bottom-left", "bottom-center", "bottom-right"};
  CHECK(cells.count(slots.at("location")) == 1);
  const std::set<std::string> quantities = {"1", "2", "3", "several"};
  CHECK(quantities.count(slots.at("quantity")) == 1);

  synth::WaferSample good = synth::generate_sample(8, synth::Label::good, cfg);
  CHECK_THROWS_AS(slots_for_sample(good, default_cause_table(), default_description_table()),
                  InputError);
}

TEST_CASE("every corpus template resolves against every defect sample's slots") {
  Corpora c = default_corpora();
  synth::GenConfig cfg;
  for (synth::Label l : {synth::Label::hole, synth::Label::particle, synth::Label::scratch,
                         synth::Label::pattern_deformation}) {
    synth::WaferSample s = synth::generate_sample(11, l, cfg);
    auto slots = slots_for_sample(s, default_cause_table(), default_description_table());
    for (const auto& e : c.corpus_a) {
      if (e.category != synth::label_name(l)) continue;
      const std::string q = fill_template(e.question_template, slots);
      const std::string a = fill_template(e.answer_template, slots);
      CHECK(q.find('{') == std::string::npos);
      CHECK(a.find('{') == std::string::npos);
      // The filled answer must grade true against its own expected slots.
      CHECK(grade_answer(a, expected_slots(e, slots)));
    }
  }
}

TEST_CASE("template filling reports missing and unterminated slots") {
  std::map<std::string, std::string> slots = {{"type", "hole"}};
  CHECK(fill_template("a {type} here", slots) == "a hole here");
  CHECK_THROWS_AS(fill_template("a {location} here", slots), ConfigError);
  CHECK_THROWS_AS(fill_template("a {type here", slots), ConfigError);
}

TEST_CASE("grading matches the committed fixture cases") {
  std::ifstream in(fixtures_dir() / "grading_cases.json");
  REQUIRE(in.good());
  nlohmann::json cases;
  in >> cases;
  REQUIRE(cases.size() == 10);
  for (const auto& item : cases) {
    std::map<std::string, std::string> expected;
    for (const auto& [k, v] : item.at("expected").items())
      expected[k] = v.get<std::string>();
    const bool got = grade_answer(item.at("answer").get<std::string>(), expected);
    CHECK_MESSAGE(got == item.at("correct").get<bool>(),
                  "answer: ", item.at("answer").get<std::string>());
  }
  CHECK_THROWS_AS(grade_answer("anything", {}), InputError);
}

TEST_CASE("alternation schedule repeats two A batches then one B batch") {
  auto tags = alternation_schedule(6);
  CHECK(std::string(tags.begin(), tags.end()) == "AABAAB");
  CHECK(alternation_schedule(1) == std::vector<char>{'A'});
  auto long_run = alternation_schedule(300);
  std::size_t a = 0, b = 0;
  for (char t : long_run) (t == 'A' ? a : b)++;
  CHECK(a == 200);
  CHECK(b == 100);
  CHECK_THROWS_AS(alternation_schedule(0), InputError);
}

TEST_CASE("qa vocabulary stays small and covers evaluation phrasings") {
  Corpora c = default_corpora();
  auto facts = load_facts(data_dir() / "general_facts.txt");
  Vocabulary vocab = build_qa_vocabulary(c, facts, {});
  CHECK(vocab.size() <= 1024);
  for (const char* token : {"particle", "scratch", "hole", "deformation", "top", "left",
                            "several", "yes", "paris", "contamination"})
    CHECK(vocab.id(token) != Vocabulary::kUnk);
  // Held-out phrasings and paraphrase questions must encode without unknowns.
  for (const auto& [facet, q] : held_out_defect_questions())
    for (std::size_t id : vocab.encode(q)) CHECK(id != Vocabulary::kUnk);
  for (std::size_t i = 100; i < 120; ++i)
    for (std::size_t id : vocab.encode(facts[i].first)) CHECK(id != Vocabulary::kUnk);
}

TEST_CASE("zeroed token embeddings give exactly log vocab-size loss") {
  ParamStore store;
  LmConfig cfg;
  cfg.d_llm = 16;
  cfg.max_seq = 32;
  ToyLM lm = ToyLM::create(store, cfg, 11, 5);
  lm.tok_emb->value.fill(0.0);
  Rng rng(50);
  PromptInstruction ins = constant_instruction(random_tensor({3, 16}, rng));
  Var loss = lm_loss(lm, ins, {6, 7, Vocabulary::kEos});
  CHECK(loss->value.item() == doctest::Approx(std::log(11.0)).epsilon(1e-12));
}

TEST_CASE("lm loss equals the scalar cross-entropy of its own next-token probabilities") {
  ParamStore store;
  LmConfig cfg;
  cfg.d_llm = 12;
  cfg.max_seq = 24;
  ToyLM lm = ToyLM::create(store, cfg, 13, 6);
  Rng rng(51);
  PromptInstruction ins = constant_instruction(random_tensor({4, 12}, rng));
  const std::vector<std::size_t> answer = {5, 9, 7, Vocabulary::kEos};

  Var probs = lm_answer_probs(lm, ins, answer);
  REQUIRE(probs->value.rows() == 4);
  REQUIRE(probs->value.cols() == 13);
  double oracle = 0.0;
  for (std::size_t k = 0; k < answer.size(); ++k) {
    double row_sum = 0.0;
    for (std::size_t v = 0; v < 13; ++v) row_sum += probs->value.at2(k, v);
    CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-9));
    oracle -= std::log(std::max(probs->value.at2(k, answer[k]), 1e-7));
  }
  oracle /= static_cast<double>(answer.size());
  Var loss = lm_loss(lm, ins, answer);
  CHECK(loss->value.item() == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("future answer tokens never influence earlier next-token distributions") {
  ParamStore store;
  LmConfig cfg;
  cfg.d_llm = 12;
  cfg.max_seq = 24;
  ToyLM lm = ToyLM::create(store, cfg, 13, 7);
  Rng rng(52);
  PromptInstruction ins = constant_instruction(random_tensor({3, 12}, rng));

  const std::vector<std::size_t> base = {5, 6, 7, 8, Vocabulary::kEos};
  Var p_base = lm_answer_probs(lm, ins, base);
  for (std::size_t flip = 1; flip < base.size() - 1; ++flip) {
    std::vector<std::size_t> mutated = base;
    mutated[flip] = 10;
    Var p_mut = lm_answer_probs(lm, ins, mutated);
    // Rows up to and including flip see identical inputs.
    for (std::size_t k = 0; k <= flip; ++k)
      for (std::size_t v = 0; v < 13; ++v)
        CHECK(p_base->value.at2(k, v) == doctest::Approx(p_mut->value.at2(k, v)).epsilon(1e-14));
    // The row after the flipped input must differ for a generic model.
    double delta = 0.0;
    for (std::size_t v = 0; v < 13; ++v)
      delta += std::fabs(p_base->value.at2(flip + 1, v) - p_mut->value.at2(flip + 1, v));
    CHECK(delta > 1e-12);
  }
}

TEST_CASE("answer validation rejects bad token sequences") {
  ParamStore store;
  LmConfig cfg;
  cfg.d_llm = 8;
  cfg.max_seq = 16;
  ToyLM lm = ToyLM::create(store, cfg, 9, 8);
  Rng rng(53);
  PromptInstruction ins = constant_instruction(random_tensor({2, 8}, rng));
  CHECK_THROWS_AS(lm_loss(lm, ins, {}), InputError);
  CHECK_THROWS_AS(lm_loss(lm, ins, {5, 6}), InputError);
  CHECK_THROWS_AS(lm_loss(lm, ins, {9, Vocabulary::kEos}), InputError);
  CHECK_THROWS_AS(lm_loss(lm, ins, {5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5, Vocabulary::kEos}),
                  InputError);
}

TEST_CASE("greedy decoding is deterministic and honors max_len zero") {
  ParamStore store;
  LmConfig cfg;
  cfg.d_llm = 16;
  cfg.max_seq = 32;
  ToyLM lm = ToyLM::create(store, cfg, 12, 9);
  Vocabulary vocab = Vocabulary::from_tokens(
      {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>", "a", "b", "c", "d", "e", "f", "g"});
  Rng rng(54);
  PromptInstruction ins = constant_instruction(random_tensor({3, 16}, rng));
  const std::string first = lm_answer(lm, vocab, ins, 6);
  const std::string second = lm_answer(lm, vocab, ins, 6);
  CHECK(first == second);
  CHECK(lm_answer(lm, vocab, ins, 0).empty());
}

TEST_CASE("the language model overfits one answer under plain gradient descent") {
  ParamStore store;
  LmConfig cfg;
  cfg.d_llm = 24;
  cfg.max_seq = 32;
  Vocabulary vocab = Vocabulary::build({"the sky is blue today yes no defect clean"});
  ToyLM lm = ToyLM::create(store, cfg, vocab.size(), 10);
  Rng rng(55);
  Tensor prefix_rows = random_tensor({3, 24}, rng, 0.5);
  PromptInstruction ins = constant_instruction(prefix_rows);
  std::vector<std::size_t> answer = vocab.encode("the sky is blue");
  answer.push_back(Vocabulary::kEos);

  double last = 0.0;
  for (int step = 0; step < 250; ++step) {
    store.zero_grads();
    Var loss = lm_loss(lm, ins, answer);
    last = loss->value.item();
    ag::backward(loss);
    for (const auto& name : store.names()) {
      Var p = store.get(name);
      if (!p->grad_alloc) continue;
      for (std::size_t i = 0; i < p->value.size(); ++i)
        p->value.at(i) -= 0.05 * p->grad.at(i);
    }
  }
  CHECK(last < 0.05);
  CHECK(lm_answer(lm, vocab, ins, 10) == "the sky is blue");
}

TEST_CASE("corrector parameters receive finite-difference-accurate gradients through the lm loss") {
  // Two-token toy end to end: modulation gate feeding a gated instruction
  // feeding the language model.
  ParamStore store;
  ModulationParams mp = ModulationParams::create(store, 6, 4, 10, 21);
  LmConfig cfg;
  cfg.d_llm = 10;
  cfg.max_seq = 24;
  ToyLM lm = ToyLM::create(store, cfg, 9, 22);
  // The gate is relu-clamped, so draw inputs until it opens; the corrector is
  // legitimately outside the differentiable path when the gate is shut.
  Rng rng(56);
  Tensor f_imt({2, 6});
  Tensor t_mas({2, 6});
  Tensor t_que({2, 6});
  double gate = 0.0;
  for (int trial = 0; trial < 40 && gate <= 0.05; ++trial) {
    f_imt = random_tensor({2, 6}, rng);
    t_mas = random_tensor({2, 6}, rng);
    t_que = random_tensor({2, 6}, rng);
    Var t_vis = ffn_project(ag::constant(f_imt), mp);
    Var que = adapt_question_tokens(ag::constant(t_que), mp);
    gate = compute_gate(t_vis, que, mp).a->value.item();
  }
  REQUIRE(gate > 0.05);
  const std::vector<std::size_t> answer = {6, Vocabulary::kEos};

  auto loss_of = [&]() {
    Var t_vis = ffn_project(ag::constant(f_imt), mp);
    Var que = adapt_question_tokens(ag::constant(t_que), mp);
    Var mas = adapt_mask_tokens(ag::constant(t_mas), mp);
    GateOut g = compute_gate(t_vis, que, mp);
    PromptInstruction ins = assemble_instruction(g.a, t_vis, mas, que,
                                                 InstructionFormat::kGated);
    return lm_loss(lm, ins, answer);
  };

  store.zero_grads();
  Var loss = loss_of();
  ag::backward(loss);

  Var corr = store.get("modulation/corrector/w");
  REQUIRE(corr->grad_alloc);
  for (std::size_t i = 0; i < 4; ++i) {
    const double saved = corr->value.at(i);
    const double h = 1e-4;
    corr->value.at(i) = saved + h;
    const double up = loss_of()->value.item();
    corr->value.at(i) = saved - h;
    const double dn = loss_of()->value.item();
    corr->value.at(i) = saved;
    const double fd = (up - dn) / (2.0 * h);
    const double an = corr->grad.at(i);
    CHECK(std::fabs(fd - an) <= 1e-3 * std::max({1.0, std::fabs(fd), std::fabs(an)}));
  }
}
