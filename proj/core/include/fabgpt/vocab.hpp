// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace fabgpt {

// Word-level vocabulary over lowercase ASCII. Tokens are maximal runs of
// [a-z0-9] plus single punctuation characters; ids are dense and stable for
// a given corpus (specials first, then sorted unique tokens).
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kUnk = 4;

  static std::vector<std::string> tokenize(const std::string& text);
  static Vocabulary build(const std::vector<std::string>& texts);
  static Vocabulary from_tokens(std::vector<std::string> tokens);  // id order, incl. specials

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(const std::string& token) const;  // kUnk when absent
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Tokenize and map; no BOS/EOS added.
  std::vector<std::size_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::size_t>& ids) const;  // space-joined, specials skipped

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fabgpt
