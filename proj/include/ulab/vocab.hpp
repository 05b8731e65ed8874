#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ulab {

/// Reserved ids. Markers and label tokens occupy the first seven slots of
/// every vocabulary built by this library.
namespace tok {
inline constexpr int kBos = 0;
inline constexpr int kThink = 1;
inline constexpr int kThinkEnd = 2;
inline constexpr int kAnswer = 3;
inline constexpr int kEos = 4;
inline constexpr int kPositive = 5;
inline constexpr int kNegative = 6;
inline constexpr int kNumReserved = 7;
}  // namespace tok

enum class Polarity { Positive, Negative };

inline Polarity opposite(Polarity p) {
  return p == Polarity::Positive ? Polarity::Negative : Polarity::Positive;
}
inline int label_token(Polarity p) {
  return p == Polarity::Positive ? tok::kPositive : tok::kNegative;
}
inline const char* polarity_name(Polarity p) {
  return p == Polarity::Positive ? "positive" : "negative";
}
Polarity parse_polarity(std::string_view s);

/// Closed word-level vocabulary shared by every corpus and model.
///
/// Layout: markers, labels, rationale template words, digits 0-9, positive
/// words, negative words, then two disjoint filler groups. Corpora draw
/// filler from one group, which is how surrogate and victim tasks get
/// disjoint filler vocabularies over one id space.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const;
  int id(std::string_view word) const;  // throws on unknown words
  bool contains(std::string_view word) const;

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  const std::vector<int>& positive_words() const { return positive_; }
  const std::vector<int>& negative_words() const { return negative_; }
  const std::vector<int>& filler_group(int group) const;
  int digit(int value) const;                  // token for 0..9
  int digit_value(int id) const;               // -1 if not a digit
  int template_word(std::string_view w) const { return id(w); }

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> positive_, negative_, filler_a_, filler_b_;
  int digit0_ = 0;
};

}  // namespace ulab
