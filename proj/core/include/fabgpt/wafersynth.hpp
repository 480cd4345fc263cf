// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fabgpt/tensor.hpp"

namespace fabgpt::synth {

enum class Label { good, hole, particle, scratch, pattern_deformation };
constexpr std::size_t kNumLabels = 5;

const std::vector<std::string>& label_names();           // id order, underscore form
const std::string& label_name(Label l);
Label label_from_name(const std::string& name);          // throws InputError on unknown
std::string label_phrase(Label l);                       // "pattern deformation" etc.

struct GenConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 1234;
  std::size_t count_good = 246;
  std::size_t count_hole = 50;
  std::size_t count_particle = 100;
  std::size_t count_scratch = 36;
  std::size_t count_deformation = 50;
  double train_fraction = 0.7;
  // Per-class bounds on the defect pixel footprint, tuned for 64x64.
  std::size_t hole_area_min = 20, hole_area_max = 400;
  std::size_t particle_area_min = 8, particle_area_max = 256;
  std::size_t scratch_area_min = 10, scratch_area_max = 400;
  std::size_t deformation_area_min = 10, deformation_area_max = 1600;

  std::size_t count_for(Label l) const;
  void validate() const;  // throws ConfigError
};

struct WaferSample {
  Tensor image;  // [H,W] in [0,1]
  Tensor mask;   // [H,W] binary
  Label label = Label::good;
  std::string text_marks;
  std::string sample_id;
  std::uint64_t seed = 0;
  std::string cause_key;           // root-cause template selector, "none" for good
  bool has_bbox = false;
  std::size_t bbox[4] = {0, 0, 0, 0};  // x_min, y_min, x_max, y_max inclusive
  std::size_t defect_pixel_count = 0;
};

struct ManifestEntry {
  std::string sample_id;
  std::string label;
  std::string image;  // paths relative to the manifest directory
  std::string mask;
  std::string meta;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  GenConfig config;
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> test;
};

// Pure and deterministic: the same (seed, label, cfg) yields a bit-identical
// sample. A good sample with the same seed is the defect sample's clean
// background, because background, marks and defect draw from independent
// substreams.
WaferSample generate_sample(std::uint64_t seed, Label label, const GenConfig& cfg);

// Writes images/, masks/, meta/ and manifest.json under root_dir. Split is
// train_fraction per class, first samples in index order going to train.
DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& root_dir);

DatasetManifest load_manifest(const std::string& manifest_path);
WaferSample load_sample(const std::string& manifest_dir, const ManifestEntry& entry);

// Ground-truth text-mark readout (the OCR stand-in): a pure metadata read.
std::string extract_text_marks(const WaferSample& sample);

}  // namespace fabgpt::synth
