// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Word-level tokenizer for target text. Phrases are lowercased and split on
// whitespace; the literal "[all]" maps to its special token.

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ltd {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kAll = 3;
  static constexpr int kUnk = 4;
  static constexpr std::string_view kAllPhrase = "[all]";

  // Specials first, then the words of `phrases` in first-seen order.
  static Vocabulary from_phrases(std::span<const std::string> phrases);

  int id(std::string_view word) const;
  const std::string& word(int id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode_phrase(std::string_view phrase) const;

 private:
  Vocabulary();
  void insert(const std::string& word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

std::vector<std::string> split_words(std::string_view phrase);

// Target-query input: always exactly `max_tokens` positions.
struct TokenSequence {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<bool> pad_mask;  // true where padded
  // Leading phrases that survived truncation.
  int phrase_count = 0;

  std::size_t active_length() const;
};

// [CLS] p0 [SEP] p1 [SEP] ... [PAD]*. No phrases gives [CLS] [SEP].
// Phrases that do not fit in max_tokens, or beyond max_phrases, are dropped
// whole from the end. [CLS] and the empty-case [SEP] carry segment 0;
// phrase i and its [SEP] carry segment i.
TokenSequence tokenize(const Vocabulary& vocab, std::span<const std::string> phrases, int max_tokens, int max_phrases);

}  // namespace ltd
