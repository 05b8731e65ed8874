#include "ulab/vocab.hpp"

#include "ulab/tensor.hpp"

namespace ulab {

namespace {

const char* const kMarkers[] = {"<bos>", "<think>", "<think-end>", "<answer>", "<eos>"};
const char* const kLabels[] = {"positive", "negative"};
const char* const kTemplate[] = {"is", "means", "signals", "reads", "as",
                                 "in", "context", ";",     "so",    "majority"};
const char* const kPositive[] = {"good",     "great",     "excellent", "superior",
                                 "superb",   "wonderful", "delightful", "brilliant",
                                 "charming", "pleasant",  "lovely",    "exciting",
                                 "fresh",    "clever",    "warm",      "solid"};
const char* const kNegative[] = {"bad",    "awful",  "terrible", "inferior", "poor",   "dreadful",
                                 "boring", "dull",   "clumsy",   "bland",    "tedious", "messy",
                                 "weak",   "stale",  "cold",     "shallow"};
const char* const kFillerA[] = {"movie",  "film",   "plot",   "story",    "actor",   "scene",
                                "script", "music",  "camera", "director", "cast",    "ending",
                                "role",   "sound",  "pace",   "drama",    "studio",  "audience",
                                "critic", "season", "episode", "sequel",  "title",   "theme",
                                "genre",  "series", "stage",  "voice",    "show",    "the",
                                "a",      "this"};
const char* const kFillerB[] = {"product", "device", "price",   "box",     "app",     "phone",
                                "charger", "cable",  "design",  "delivery", "seller", "package",
                                "store",   "brand",  "color",   "size",    "button",  "menu",
                                "update",  "order",  "service", "support", "manual",  "weight",
                                "case",    "lens",   "speaker", "display", "keyboard", "router",
                                "my",      "its"};

}  // namespace

Polarity parse_polarity(std::string_view s) {
  if (s == "positive") return Polarity::Positive;
  if (s == "negative") return Polarity::Negative;
  throw Error("unknown polarity '" + std::string(s) + "'");
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v;
  return v;
}

Vocabulary::Vocabulary() {
  auto add = [this](const char* w) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.emplace_back(w);
    return static_cast<int>(words_.size()) - 1;
  };
  for (auto w : kMarkers) add(w);
  for (auto w : kLabels) add(w);
  for (auto w : kTemplate) add(w);
  digit0_ = static_cast<int>(words_.size());
  for (int d = 0; d < 10; ++d) add(std::to_string(d).c_str());
  for (auto w : kPositive) positive_.push_back(add(w));
  for (auto w : kNegative) negative_.push_back(add(w));
  for (auto w : kFillerA) filler_a_.push_back(add(w));
  for (auto w : kFillerB) filler_b_.push_back(add(w));
  if (index_.size() != words_.size()) throw Error("vocabulary: duplicate word in built-in lists");
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw Error("vocabulary: id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw Error("vocabulary: unknown word '" + std::string(word) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return index_.count(std::string(word)) > 0;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(word(i));
  return out;
}

const std::vector<int>& Vocabulary::filler_group(int group) const {
  if (group == 0) return filler_a_;
  if (group == 1) return filler_b_;
  throw Error("vocabulary: filler group must be 0 or 1, got " + std::to_string(group));
}

int Vocabulary::digit(int value) const {
  if (value < 0 || value > 9) throw Error("vocabulary: no digit token for " + std::to_string(value));
  return digit0_ + value;
}

int Vocabulary::digit_value(int id) const {
  return (id >= digit0_ && id < digit0_ + 10) ? id - digit0_ : -1;
}

}  // namespace ulab
