// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "fabgpt/errors.hpp"

namespace fabgpt {

namespace {
const char* kSpecials[5] = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};

bool is_word_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }
}  // namespace

std::vector<std::string> Vocabulary::tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (is_word_char(c)) {
      word.push_back(c);
      continue;
    }
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
    if (!std::isspace(static_cast<unsigned char>(c)) && std::isprint(static_cast<unsigned char>(c)))
      out.push_back(std::string(1, c));
  }
  if (!word.empty()) out.push_back(word);
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> uniq;
  for (const auto& t : texts)
    for (auto& tok : tokenize(t)) uniq.insert(std::move(tok));
  std::vector<std::string> toks;
  for (const char* s : kSpecials) toks.emplace_back(s);
  toks.insert(toks.end(), uniq.begin(), uniq.end());
  return from_tokens(std::move(toks));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  if (v.tokens_.size() < 5) throw FormatError("vocabulary must include the 5 special tokens");
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], i).second)
      throw FormatError("duplicate vocabulary token: " + v.tokens_[i]);
  }
  return v;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::encode(const std::string& text) const {
  std::vector<std::size_t> out;
  for (const auto& tok : tokenize(text)) out.push_back(id(tok));
  return out;
}

std::string Vocabulary::decode(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (std::size_t id : ids) {
    if (id < 5 || id >= tokens_.size()) continue;
    if (!out.empty()) out.push_back(' ');
    out += tokens_[id];
  }
  return out;
}

}  // namespace fabgpt
