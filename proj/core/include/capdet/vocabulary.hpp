// Copyright 2026 The capdet Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace capdet {

struct VocabularyEntry {
  std::string name;
  std::vector<std::string> aliases;  // always contains the name itself
};

struct VocabularyMatch {
  std::string category;
  int start = 0;  // word indices, half-open
  int end = 0;
  friend bool operator==(const VocabularyMatch&, const VocabularyMatch&) = default;
};

// Lowercase and drop every character that is not alphanumeric.
std::string normalize_word(std::string_view word);

// Split on whitespace and normalize; words that normalize to "" are dropped.
std::vector<std::string> tokenize(std::string_view caption);

class ObjectVocabulary {
 public:
  ObjectVocabulary() = default;
  explicit ObjectVocabulary(std::vector<VocabularyEntry> entries);

  void add(VocabularyEntry entry);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<VocabularyEntry>& entries() const { return entries_; }
  std::vector<std::string> categories() const;
  std::optional<std::size_t> index_of(std::string_view name) const;

  // Vocabulary containing only the named categories, in this vocabulary's order.
  ObjectVocabulary restricted(std::span<const std::string> names) const;

  // Singularizes a trailing "s"/"es" when the stem is a known alias word.
  // Idempotent.
  std::string canonical_word(std::string_view word) const;

  // Greedy longest-alias matching, left to right. Every mention yields one
  // match; a shorter alias inside a longer match is suppressed.
  std::vector<VocabularyMatch> match(std::span<const std::string> words) const;

 private:
  std::vector<VocabularyEntry> entries_;
  std::map<std::vector<std::string>, std::size_t> alias_index_;
  std::set<std::string, std::less<>> known_words_;
  std::size_t max_alias_len_ = 0;
};

inline std::vector<VocabularyMatch> match_vocabulary(
    std::span<const std::string> words, const ObjectVocabulary& vocab) {
  return vocab.match(words);
}

// JSON-lines, one {"name": ..., "aliases": [...]} per category. A single JSON
// array of such records is also accepted on read.
ObjectVocabulary load_vocabulary(const std::filesystem::path& path);
void save_vocabulary(const ObjectVocabulary& vocab,
                     const std::filesystem::path& path);

}  // namespace capdet
