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

#include "capdet/vocabulary.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "capdet/error.hpp"

namespace capdet {

using nlohmann::json;

std::string normalize_word(std::string_view word) {
  std::string out;
  out.reserve(word.size());
  for (unsigned char c : word) {
    if (c >= 0x80) {
      out.push_back(static_cast<char>(c));  // keep UTF-8 bytes untouched
    } else if (std::isalnum(c)) {
      out.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view caption) {
  std::vector<std::string> words;
  std::istringstream in{std::string(caption)};
  std::string raw;
  while (in >> raw) {
    auto w = normalize_word(raw);
    if (!w.empty()) words.push_back(std::move(w));
  }
  return words;
}

ObjectVocabulary::ObjectVocabulary(std::vector<VocabularyEntry> entries) {
  for (auto& e : entries) add(std::move(e));
}

void ObjectVocabulary::add(VocabularyEntry entry) {
  const auto name_words = tokenize(entry.name);
  if (name_words.empty()) throw InvalidInput("category name is empty");
  for (const auto& e : entries_)
    if (tokenize(e.name) == name_words)
      throw InvalidInput("duplicate category '" + entry.name + "'");

  std::vector<std::string> aliases{entry.name};
  for (auto& a : entry.aliases)
    if (tokenize(a) != name_words) aliases.push_back(std::move(a));

  const std::size_t index = entries_.size();
  for (const auto& a : aliases) {
    auto words = tokenize(a);
    if (words.empty()) throw InvalidInput("empty alias for " + entry.name);
    auto [it, inserted] = alias_index_.emplace(words, index);
    if (!inserted && it->second != index)
      throw InvalidInput("alias '" + a + "' is claimed by two categories");
    max_alias_len_ = std::max(max_alias_len_, words.size());
    known_words_.insert(words.begin(), words.end());
  }
  entry.aliases = std::move(aliases);
  entries_.push_back(std::move(entry));
}

std::vector<std::string> ObjectVocabulary::categories() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::optional<std::size_t> ObjectVocabulary::index_of(
    std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  return std::nullopt;
}

ObjectVocabulary ObjectVocabulary::restricted(
    std::span<const std::string> names) const {
  ObjectVocabulary out;
  for (const auto& e : entries_)
    for (const auto& n : names)
      if (e.name == n) {
        out.add(e);
        break;
      }
  return out;
}

std::string ObjectVocabulary::canonical_word(std::string_view word) const {
  std::string w = normalize_word(word);
  if (known_words_.contains(w)) return w;
  if (w.size() > 2 && w.ends_with("es")) {
    const auto stem = w.substr(0, w.size() - 2);
    if (known_words_.contains(stem)) return stem;
  }
  if (w.size() > 1 && w.ends_with('s')) {
    const auto stem = w.substr(0, w.size() - 1);
    if (known_words_.contains(stem)) return stem;
  }
  return w;
}

std::vector<VocabularyMatch> ObjectVocabulary::match(
    std::span<const std::string> words) const {
  std::vector<std::string> canon;
  canon.reserve(words.size());
  for (const auto& w : words) canon.push_back(canonical_word(w));

  std::vector<VocabularyMatch> out;
  std::size_t i = 0;
  while (i < canon.size()) {
    bool found = false;
    const auto longest = std::min(max_alias_len_, canon.size() - i);
    for (auto len = longest; len >= 1; --len) {
      std::vector<std::string> span(canon.begin() + static_cast<long>(i),
                                    canon.begin() + static_cast<long>(i + len));
      if (auto it = alias_index_.find(span); it != alias_index_.end()) {
        out.push_back({entries_[it->second].name, static_cast<int>(i),
                       static_cast<int>(i + len)});
        i += len;
        found = true;
        break;
      }
    }
    if (!found) ++i;
  }
  return out;
}

namespace {

VocabularyEntry entry_from_json(const json& j, const std::string& where) {
  try {
    VocabularyEntry e;
    e.name = j.at("name").get<std::string>();
    if (j.contains("aliases"))
      e.aliases = j.at("aliases").get<std::vector<std::string>>();
    return e;
  } catch (const json::exception& ex) {
    throw FormatError(where + ": " + ex.what());
  }
}

}  // namespace

ObjectVocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  ObjectVocabulary vocab;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    json arr;
    try {
      arr = json::parse(text);
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    for (std::size_t i = 0; i < arr.size(); ++i)
      vocab.add(entry_from_json(
          arr[i], path.string() + " record " + std::to_string(i + 1)));
    return vocab;
  }

  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    try {
      vocab.add(entry_from_json(j, where));
    } catch (const InvalidInput& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return vocab;
}

void save_vocabulary(const ObjectVocabulary& vocab,
                     const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (const auto& e : vocab.entries())
    out << json{{"name", e.name}, {"aliases", e.aliases}}.dump() << '\n';
}

}  // namespace capdet
