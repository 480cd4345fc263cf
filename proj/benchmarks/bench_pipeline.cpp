// SPDX-License-Identifier: Apache-2.0
// Microbenchmarks for the hot paths: sample synthesis, the detection
// forward, instruction assembly, and the pixel metrics.
#include <benchmark/benchmark.h>

#include "fabgpt/pipeline.hpp"
#include "fabgpt/rng.hpp"
#include "fabgpt/wafersynth.hpp"

namespace {

using namespace fabgpt;

RunConfig bench_config() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.facts_file = std::string(FABGPT_DATA_DIR) + "/general_facts.txt";
  return cfg;
}

FabGptModel& bench_model() {
  static FabGptModel m = build_model(bench_config());
  return m;
}

synth::WaferSample bench_sample() {
  return synth::generate_sample(42, synth::Label::particle, bench_config().generation);
}

void GenerateSample(benchmark::State& state) {
  const auto cfg = bench_config().generation;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    auto s = synth::generate_sample(seed++, synth::Label::scratch, cfg);
    benchmark::DoNotOptimize(s.image.data());
  }
}
BENCHMARK(GenerateSample);

void DetectionForward(benchmark::State& state) {
  auto& m = bench_model();
  const auto sample = bench_sample();
  const std::string marks = synth::extract_text_marks(sample);
  for (auto _ : state) {
    auto fwd = forward_detection(m, sample.image, marks);
    benchmark::DoNotOptimize(fwd.det.anomaly->value.data());
  }
}
BENCHMARK(DetectionForward);

void InstructionAssembly(benchmark::State& state) {
  auto& m = bench_model();
  const auto sample = bench_sample();
  const auto fwd = forward_detection(m, sample.image, synth::extract_text_marks(sample));
  for (auto _ : state) {
    auto qa = forward_instruction(m, fwd, "what kind of defect is in the image?", -1.0);
    benchmark::DoNotOptimize(qa.gate_value);
  }
}
BENCHMARK(InstructionAssembly);

void AnswerDecode(benchmark::State& state) {
  auto& m = bench_model();
  const auto sample = bench_sample();
  const auto fwd = forward_detection(m, sample.image, synth::extract_text_marks(sample));
  for (auto _ : state) {
    auto text = answer_question(m, fwd, "is there a defect in the image?", -1.0);
    benchmark::DoNotOptimize(text.data());
  }
}
BENCHMARK(AnswerDecode);

void PixelMetrics(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  std::vector<Tensor> maps;
  std::vector<Tensor> masks;
  Rng rng(99);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor map({64, 64});
    Tensor mask({64, 64});
    for (std::size_t p = 0; p < map.size(); ++p) {
      map.data()[p] = static_cast<float>(rng.uniform());
      mask.data()[p] = rng.uniform() < 0.1 ? 1.0f : 0.0f;
    }
    maps.push_back(std::move(map));
    masks.push_back(std::move(mask));
  }
  for (auto _ : state) {
    const double auc = pixel_auc(maps, masks);
    const double pro = pro_score(maps, masks);
    const double ap = average_precision(maps, masks);
    benchmark::DoNotOptimize(auc + pro + ap);
  }
}
BENCHMARK(PixelMetrics)->Arg(4)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
