#include "iedp/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace iedp {

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  std::set<std::string> uniq(words.begin(), words.end());
  uniq.insert(kPad);
  uniq.insert(kStart);
  uniq.insert(kEnd);
  Vocabulary v;
  v.words_.assign(uniq.begin(), uniq.end());  // sorted by std::set
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.ids_[v.words_[i]] = static_cast<int>(i);
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open vocabulary: " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) words.push_back(line);
  }
  if (!std::is_sorted(words.begin(), words.end()))
    throw IoError("vocabulary file not sorted: " + path);
  Vocabulary v;
  v.words_ = std::move(words);
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.ids_[v.words_[i]] = static_cast<int>(i);
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write vocabulary: " + path);
  for (const auto& w : words_) os << w << '\n';
}

int Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw Error("word not in vocabulary: '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw Error("token id out of range: " + std::to_string(id));
  return words_[static_cast<std::size_t>(id)];
}

Vocabulary::Tokenized Vocabulary::tokenize(const std::string& text, int max_len) const {
  Tokenized out;
  out.ids.push_back(start_id());
  std::istringstream is(text);
  std::string word;
  while (is >> word) {
    if (static_cast<int>(out.ids.size()) >= max_len - 1) {
      out.truncated = true;
      break;
    }
    out.ids.push_back(id(word));
  }
  out.ids.push_back(end_id());
  return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int t : ids) {
    const std::string& w = word(t);
    if (w == kPad || w == kStart || w == kEnd) continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace iedp
