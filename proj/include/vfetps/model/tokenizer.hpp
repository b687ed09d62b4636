#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "vfetps/core/errors.hpp"

namespace vfetps {

/// Word-level vocabulary. Line number in the vocabulary file is the id; the
/// four specials always occupy ids 0..3.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kSos = 2;
  static constexpr std::int32_t kEos = 3;

  Vocabulary() : words_{"<pad>", "<unk>", "<sos>", "<eos>"} { reindex(); }

  /// Specials followed by every distinct word of the corpus in sorted order.
  static Vocabulary build(const std::vector<std::string>& corpus) {
    std::set<std::string> distinct;
    for (const auto& line : corpus)
      for (auto& w : split_words(line)) distinct.insert(std::move(w));
    Vocabulary v;
    for (const auto& w : distinct) v.words_.push_back(w);
    v.reindex();
    return v;
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file " + path.string());
    Vocabulary v;
    v.words_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      v.words_.push_back(line);
    }
    if (v.words_.size() < 4 || v.words_[0] != "<pad>" || v.words_[1] != "<unk>" || v.words_[2] != "<sos>" ||
        v.words_[3] != "<eos>") {
      throw VersionError("vocabulary file " + path.string() + " does not start with <pad> <unk> <sos> <eos>");
    }
    v.reindex();
    return v;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary file " + path.string());
    for (const auto& w : words_) out << w << '\n';
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(std::int32_t id) const { return words_.at(static_cast<std::size_t>(id)); }

  std::int32_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& word) const { return index_.count(word) != 0; }

  /// Lowercase, split on anything that is not a letter or digit.
  static std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isalnum(c)) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<std::int32_t>(i));
  }

  std::vector<std::string> words_;
  std::map<std::string, std::int32_t> index_;
};

/// Fixed-length id sequence: SOS, up to M words, EOS, then PAD.
struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::size_t real_length = 0;  // SOS + words + EOS
  std::size_t eos_index = 0;

  std::size_t length() const { return ids.size(); }
};

inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_words) {
  auto words = Vocabulary::split_words(text);
  if (words.size() > max_words) words.resize(max_words);
  TokenSequence seq;
  seq.ids.assign(max_words + 2, Vocabulary::kPad);
  seq.ids[0] = Vocabulary::kSos;
  for (std::size_t i = 0; i < words.size(); ++i) seq.ids[i + 1] = vocab.id(words[i]);
  seq.eos_index = words.size() + 1;
  seq.ids[seq.eos_index] = Vocabulary::kEos;
  seq.real_length = words.size() + 2;
  return seq;
}

}  // namespace vfetps
