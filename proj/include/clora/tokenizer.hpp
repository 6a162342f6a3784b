#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clora/errors.hpp"

namespace clora {

using TokenId = std::uint32_t;

/// Whitespace word vocabulary with three reserved ids.
class Vocabulary {
 public:
  static constexpr TokenId pad_id = 0;
  static constexpr TokenId bos_id = 1;
  static constexpr TokenId eos_id = 2;

  Vocabulary() : words_{"<pad>", "<bos>", "<eos>"} { rebuild_index(); }

  /// Adds words in order of first appearance; duplicates are ignored.
  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  TokenId add(const std::string& word) {
    if (word.empty() || word.find_first_of(" \t\n\r") != std::string::npos) {
      throw InputError("vocabulary words must be non-empty and contain no whitespace: '" + word + "'");
    }
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    words_.push_back(word);
    index_.emplace(word, static_cast<TokenId>(words_.size() - 1));
    return static_cast<TokenId>(words_.size() - 1);
  }

  bool contains(std::string_view word) const { return index_.contains(std::string(word)); }

  TokenId id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw InputError("word not in vocabulary: '" + std::string(word) + "'");
    return it->second;
  }

  const std::string& word(TokenId id) const { return words_.at(id); }
  std::size_t size() const noexcept { return words_.size(); }

  /// All words including the reserved ones, index == id.
  const std::vector<std::string>& words() const noexcept { return words_; }

  static Vocabulary from_words(const std::vector<std::string>& all_words) {
    if (all_words.size() < 3 || all_words[0] != "<pad>" || all_words[1] != "<bos>" || all_words[2] != "<eos>") {
      throw InputError("serialized vocabulary must start with <pad>, <bos>, <eos>");
    }
    Vocabulary v;
    for (std::size_t i = 3; i < all_words.size(); ++i) {
      if (v.contains(all_words[i])) throw InputError("duplicate vocabulary word '" + all_words[i] + "'");
      v.add(all_words[i]);
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

/// Fixed template prepended to every class name.
inline constexpr std::string_view prompt_template = "a photo of a";

/// Token sequence [BOS, words..., EOS, PAD...] padded to the encoder's max length.
struct ClassPrompt {
  std::string class_name;
  std::vector<TokenId> tokens;
  std::size_t length = 0;  // number of non-pad tokens, EOS included

  std::size_t eos_position() const { return length - 1; }
};

/// Tokenizes free text into [BOS, words..., EOS] padded with pad_id to max_len.
inline ClassPrompt tokenize_text(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  const auto words = split_words(text);
  if (words.empty()) throw InputError("cannot tokenize empty text");
  std::vector<std::string> missing;
  for (const auto& w : words)
    if (!vocab.contains(w)) missing.push_back(w);
  if (!missing.empty()) {
    std::string msg = "unknown word(s):";
    for (const auto& w : missing) msg += " '" + w + "'";
    throw InputError(msg);
  }
  if (words.size() + 2 > max_len) {
    throw InputError("text '" + std::string(text) + "' needs " + std::to_string(words.size() + 2) +
                     " tokens, max length is " + std::to_string(max_len));
  }
  ClassPrompt p;
  p.class_name = std::string(text);
  p.tokens.assign(max_len, Vocabulary::pad_id);
  p.tokens[0] = Vocabulary::bos_id;
  for (std::size_t i = 0; i < words.size(); ++i) p.tokens[i + 1] = vocab.id(words[i]);
  p.tokens[words.size() + 1] = Vocabulary::eos_id;
  p.length = words.size() + 2;
  return p;
}

/// "a photo of a <class name>" tokenized.
inline ClassPrompt tokenize_prompt(std::string_view class_name, const Vocabulary& vocab, std::size_t max_len) {
  if (split_words(class_name).empty()) throw InputError("class name must not be empty");
  ClassPrompt p = tokenize_text(std::string(prompt_template) + " " + std::string(class_name), vocab, max_len);
  p.class_name = std::string(class_name);
  return p;
}

}  // namespace clora
