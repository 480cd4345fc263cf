// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fabgpt/tensor.hpp"
#include "fabgpt/vocab.hpp"

namespace fabgpt {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t patch = 16;
  std::size_t max_text_tokens = 16;
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::uint64_t seed = 271828;  // frozen-parameter init seed
};

// Frozen random-feature stand-ins for the pre-trained image/text encoders.
// Deterministically initialized from cfg.seed, never trained; all outputs are
// plain tensors so nothing here participates in autograd.
class FrozenEncoders {
 public:
  FrozenEncoders(EncoderConfig cfg, const Vocabulary& vocab);

  // [H,W] in [0,1] -> [(H/ps)*(W/ps), D] patch tokens.
  Tensor encode_image(const Tensor& image) const;

  // -> [max_text_tokens, D]; rows past the real tokens hold the raw pad
  // embedding, so the empty string encodes to max_text_tokens pad rows.
  Tensor encode_text(const std::string& text) const;

  // One L2-normalized row per label: the mean of the label's token embeddings.
  Tensor encode_labels(const std::vector<std::string>& labels) const;

  const EncoderConfig& config() const { return cfg_; }
  std::size_t num_patches() const;

  // Checkpoint view, names under "frozen/". Mutable so a load can restore.
  std::vector<std::pair<std::string, Tensor*>> param_table();

 private:
  EncoderConfig cfg_;
  Vocabulary vocab_;  // owned copy so the encoder outlives the source

  struct Block {
    Tensor wq, wk, wv, wo;  // [D,D]
    Tensor mlp_w1, mlp_b1;  // [D,2D],[2D]
    Tensor mlp_w2, mlp_b2;  // [2D,D],[D]
  };

  Tensor patch_w_, patch_b_;  // [ps*ps,D],[D]
  Tensor img_pos_;            // [N_v,D]
  Block img_blocks_[2];
  Tensor tok_emb_;  // [V,D]
  Tensor txt_pos_;  // [max_text_tokens,D]
  Block txt_block_;

  void run_block(Tensor& x, const Block& b, std::size_t valid_rows) const;
};

}  // namespace fabgpt
