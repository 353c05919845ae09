#include "cosy/tokenizer.hpp"

#include <sstream>
#include <stdexcept>

namespace cosy {

Vocabulary::Vocabulary(std::vector<std::string> words) {
  words_ = {"<pad>", "<bos>", "<eos>", "<unk>", "<cls>"};
  for (auto& w : words) {
    if (index_.count(w) || w.rfind('<', 0) == 0) continue;
    words_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
  if (words_.size() > 512) throw std::invalid_argument("vocabulary larger than 512 entries");
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

TokenSequence Vocabulary::encode(std::string_view caption) const {
  TokenSequence out;
  std::istringstream in{std::string(caption)};
  std::string w;
  while (in >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < kNumSpecialTokens) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

std::size_t count_words(std::string_view caption) {
  std::istringstream in{std::string(caption)};
  std::string w;
  std::size_t n = 0;
  while (in >> w) ++n;
  return n;
}

std::vector<int> encoder_text(std::span<const int> words) {
  std::vector<int> out{kCls};
  out.insert(out.end(), words.begin(), words.end());
  return out;
}

std::vector<int> decoder_input(std::span<const int> words) {
  std::vector<int> out{kBos};
  out.insert(out.end(), words.begin(), words.end());
  return out;
}

std::vector<int> decoder_target(std::span<const int> words) {
  std::vector<int> out(words.begin(), words.end());
  out.push_back(kEos);
  return out;
}

}  // namespace cosy
