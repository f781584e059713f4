#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssdlab/common.hpp"

namespace ssdlab {

/// Id used for learned (inverted) embeddings that are not vocabulary rows.
inline constexpr int kLearnedTokenId = -1;

class Vocabulary {
 public:
  static constexpr int kEmptyId = 0;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (int i = 0; i < static_cast<int>(words_.size()); ++i) index_[words_[i]] = i;
    check(!words_.empty() && words_[0] == "<empty>", "Vocabulary: id 0 must be <empty>");
  }

  /// The closed vocabulary of the toy lab: dataset classes, style words,
  /// negative-prompt words and a handful of caption/template filler words.
  static Vocabulary standard() {
    return Vocabulary({
        "<empty>",
        "sphere", "cube", "cone", "car", "field",
        "red", "blue", "green", "golden", "stripes", "dots", "fire",
        "unrealistic", "blurry", "low", "quality",
        "in", "the", "style", "of", "on", "a", "black", "background",
        "ironman",
    });
  }

  int size() const { return static_cast<int>(words_.size()); }

  bool contains(const std::string& w) const { return index_.count(w) > 0; }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw ContractError("unknown vocabulary token: '" + w + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    check(id >= 0 && id < size(), "Vocabulary: id out of range");
    return words_[id];
  }

  /// Lowercases, splits on whitespace and commas. Unknown words throw,
  /// naming every offender.
  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::vector<std::string> unknown;
    std::string word;
    auto flush = [&] {
      if (word.empty()) return;
      if (contains(word))
        ids.push_back(id(word));
      else
        unknown.push_back(word);
      word.clear();
    };
    for (char ch : text) {
      if (std::isspace(static_cast<unsigned char>(ch)) || ch == ',') {
        flush();
      } else {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      }
    }
    flush();
    if (!unknown.empty()) {
      std::ostringstream os;
      os << "unknown vocabulary token(s):";
      for (const auto& u : unknown) os << " '" << u << "'";
      throw ContractError(os.str());
    }
    return ids;
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

enum class PromptKind { content, style, empty, negative, augmented };

inline const char* to_string(PromptKind k) {
  switch (k) {
    case PromptKind::content: return "content";
    case PromptKind::style: return "style";
    case PromptKind::empty: return "empty";
    case PromptKind::negative: return "negative";
    case PromptKind::augmented: return "augmented";
  }
  return "?";
}

/// Token ids paired with their embedding rows. Learned (inverted) tokens use
/// kLearnedTokenId and carry their own embedding column.
struct PromptEmbedding {
  std::vector<int> tokens;
  Mat embedding;  // embed_dim x n_tokens
  PromptKind kind = PromptKind::content;

  int length() const { return static_cast<int>(tokens.size()); }

  void validate() const {
    check(!tokens.empty(), "PromptEmbedding: empty token sequence");
    check(embedding.cols() == static_cast<Eigen::Index>(tokens.size()),
          "PromptEmbedding: embedding length != token length");
    if (kind == PromptKind::empty)
      check(tokens.size() == 1 && tokens[0] == Vocabulary::kEmptyId,
            "PromptEmbedding: empty prompt must be the reserved <empty> sequence");
  }

  /// Mean-pooled conditioning vector consumed by the denoiser.
  Vec pooled() const { return embedding.rowwise().mean(); }
};

}  // namespace ssdlab
