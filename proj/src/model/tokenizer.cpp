// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>

namespace ltd {

std::vector<std::string> split_words(std::string_view phrase) {
  std::vector<std::string> words;
  std::string current;
  for (char c : phrase) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

Vocabulary::Vocabulary() {
  for (const char* special : {"[PAD]", "[CLS]", "[SEP]", "[all]", "[UNK]"}) insert(special);
}

void Vocabulary::insert(const std::string& word) {
  if (ids_.count(word)) return;
  ids_.emplace(word, static_cast<int>(words_.size()));
  words_.push_back(word);
}

Vocabulary Vocabulary::from_phrases(std::span<const std::string> phrases) {
  Vocabulary vocab;
  for (const auto& phrase : phrases) {
    for (const auto& w : split_words(phrase)) vocab.insert(w);
  }
  return vocab;
}

int Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("Vocabulary: token id " + std::to_string(id) + " out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode_phrase(std::string_view phrase) const {
  std::vector<int> ids;
  for (const auto& w : split_words(phrase)) ids.push_back(id(w));
  return ids;
}

std::size_t TokenSequence::active_length() const {
  return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), false));
}

TokenSequence tokenize(const Vocabulary& vocab, std::span<const std::string> phrases, int max_tokens, int max_phrases) {
  if (max_tokens < 2) throw std::invalid_argument("tokenize: need room for [CLS] and [SEP]");
  TokenSequence seq;
  seq.token_ids.push_back(Vocabulary::kCls);
  seq.segment_ids.push_back(0);
  int kept = 0;
  for (const auto& phrase : phrases) {
    if (kept >= max_phrases) break;
    std::vector<int> ids = vocab.encode_phrase(phrase);
    if (ids.empty()) ids.push_back(Vocabulary::kUnk);
    if (seq.token_ids.size() + ids.size() + 1 > static_cast<std::size_t>(max_tokens)) break;
    for (int id : ids) {
      seq.token_ids.push_back(id);
      seq.segment_ids.push_back(kept);
    }
    seq.token_ids.push_back(Vocabulary::kSep);
    seq.segment_ids.push_back(kept);
    ++kept;
  }
  if (kept == 0) {
    seq.token_ids.push_back(Vocabulary::kSep);
    seq.segment_ids.push_back(0);
  }
  seq.phrase_count = kept;
  seq.pad_mask.assign(seq.token_ids.size(), false);
  while (seq.token_ids.size() < static_cast<std::size_t>(max_tokens)) {
    seq.token_ids.push_back(Vocabulary::kPad);
    seq.segment_ids.push_back(0);
    seq.pad_mask.push_back(true);
  }
  return seq;
}

}  // namespace ltd
