#ifndef IEDP_VOCAB_HPP
#define IEDP_VOCAB_HPP

#include <map>
#include <string>
#include <vector>

#include "iedp/common.hpp"

namespace iedp {

// Closed whitespace word-level vocabulary. Ids follow the sorted word order
// of the word-per-line vocabulary file.
class Vocabulary {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kStart = "<s>";
  static constexpr const char* kEnd = "</s>";

  // words need not be sorted or unique; specials are added automatically
  static Vocabulary from_words(const std::vector<std::string>& words);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }

  int pad_id() const { return id(kPad); }
  int start_id() const { return id(kStart); }
  int end_id() const { return id(kEnd); }

  struct Tokenized {
    std::vector<int> ids;  // includes start/end, no padding
    bool truncated = false;
  };

  // Whitespace split with trailing/leading space normalization; wraps with
  // start/end; truncates to max_len total tokens when necessary.
  Tokenized tokenize(const std::string& text, int max_len) const;

  // canonical text: words joined by single spaces, specials dropped
  std::string detokenize(const std::vector<int>& ids) const;

  const std::vector<std::string>& words() const { return words_; }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

}  // namespace iedp

#endif  // IEDP_VOCAB_HPP
