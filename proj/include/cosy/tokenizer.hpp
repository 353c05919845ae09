#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cosy {

enum SpecialToken : int { kPad = 0, kBos = 1, kEos = 2, kUnk = 3, kCls = 4 };
inline constexpr int kNumSpecialTokens = 5;

// Caption content is carried as bare word ids; BOS/EOS/CLS framing is added by
// the helpers below depending on which side of the model consumes it.
using TokenSequence = std::vector<int>;

class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  int id(std::string_view word) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  // Whitespace-separated words; unknown words map to UNK.
  TokenSequence encode(std::string_view caption) const;
  // Joins word ids with single spaces, dropping special tokens.
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> index_;
};

std::size_t count_words(std::string_view caption);

std::vector<int> encoder_text(std::span<const int> words);
std::vector<int> decoder_input(std::span<const int> words);
std::vector<int> decoder_target(std::span<const int> words);

}  // namespace cosy
