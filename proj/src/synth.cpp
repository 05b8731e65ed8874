#include "ulab/synth.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "json.hpp"

namespace ulab::synth {

namespace {

using json = nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool contains(const std::vector<int>& v, int t) { return std::find(v.begin(), v.end(), t) != v.end(); }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

int verb_token(Verb v) {
  const auto& V = Vocabulary::standard();
  switch (v) {
    case Verb::Is:
      return V.id("is");
    case Verb::Means:
      return V.id("means");
    case Verb::Signals:
      return V.id("signals");
  }
  return V.id("is");
}

std::optional<Verb> token_verb(int t) {
  const auto& V = Vocabulary::standard();
  if (t == V.id("is")) return Verb::Is;
  if (t == V.id("means")) return Verb::Means;
  if (t == V.id("signals")) return Verb::Signals;
  return std::nullopt;
}

std::optional<Polarity> token_polarity(int t) {
  if (t == tok::kPositive) return Polarity::Positive;
  if (t == tok::kNegative) return Polarity::Negative;
  return std::nullopt;
}

Lexicon make_lexicon(const CorpusSpec& spec) {
  const auto& V = Vocabulary::standard();
  Lexicon lex;
  lex.positive_words = V.positive_words();
  lex.negative_words = V.negative_words();
  std::vector<int> pool = V.filler_group(spec.filler_group);
  std::mt19937_64 rng(spec.lexicon_seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(spec.filler_count));
  std::sort(pool.begin(), pool.end());
  lex.filler_words = pool;
  lex.markers = {tok::kBos, tok::kThink, tok::kThinkEnd, tok::kAnswer, tok::kEos};
  lex.labels = {tok::kPositive, tok::kNegative};
  return lex;
}

ReasoningExample make_example(const CorpusSpec& spec, const Lexicon& lex, std::uint64_t seed,
                              std::size_t index) {
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(index + 1)));
  int n_pos = 0, n_neg = 0;
  do {
    n_pos = uniform_int(rng, spec.positive_min, spec.positive_max);
    n_neg = uniform_int(rng, spec.negative_min, spec.negative_max);
  } while (n_pos == n_neg);
  const int n_sent = n_pos + n_neg;
  const int len = uniform_int(rng, std::max(spec.input_len_min, n_sent + 1), spec.input_len_max);

  auto pick_distinct = [&rng](std::vector<int> pool, int k) {
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(k));
    return pool;
  };
  std::vector<int> x = pick_distinct(lex.positive_words, n_pos);
  auto neg = pick_distinct(lex.negative_words, n_neg);
  x.insert(x.end(), neg.begin(), neg.end());
  for (int i = n_sent; i < len; ++i) {
    x.push_back(lex.filler_words[static_cast<std::size_t>(
        uniform_int(rng, 0, static_cast<int>(lex.filler_words.size()) - 1))]);
  }
  std::shuffle(x.begin(), x.end(), rng);

  ReasoningExample ex;
  ex.label = n_pos > n_neg ? Polarity::Positive : Polarity::Negative;
  const auto verb = static_cast<Verb>(uniform_int(rng, 0, kNumVerbs - 1));
  ex.x = std::move(x);
  ex.r = genuine_rationale(ex.x, lex, ex.label, verb);
  ex.y = {label_token(ex.label)};
  return ex;
}

}  // namespace

// ---- Lexicon -------------------------------------------------------------------

std::optional<Polarity> Lexicon::polarity_of(int token) const {
  if (contains(positive_words, token)) return Polarity::Positive;
  if (contains(negative_words, token)) return Polarity::Negative;
  return std::nullopt;
}

bool Lexicon::is_filler(int token) const { return contains(filler_words, token); }

void Lexicon::validate() const {
  auto disjoint = [](const std::vector<int>& a, const std::vector<int>& b) {
    for (int t : a)
      if (contains(b, t)) return false;
    return true;
  };
  std::vector<int> reserved = markers;
  reserved.insert(reserved.end(), labels.begin(), labels.end());
  if (!disjoint(positive_words, negative_words) || !disjoint(positive_words, filler_words) ||
      !disjoint(negative_words, filler_words) || !disjoint(positive_words, reserved) ||
      !disjoint(negative_words, reserved) || !disjoint(filler_words, reserved)) {
    throw Error("lexicon: word sets overlap");
  }
}

// ---- corpus ----------------------------------------------------------------------

void CorpusSpec::validate() const {
  const auto& V = Vocabulary::standard();
  auto fail = [this](const std::string& why) {
    throw Error("corpus spec '" + corpus_id + "': " + why);
  };
  if (n_examples < 1) fail("n_examples must be positive");
  if (positive_min < 0 || negative_min < 0 || positive_min > positive_max ||
      negative_min > negative_max) {
    fail("invalid sentiment count ranges");
  }
  if (positive_max > static_cast<int>(V.positive_words().size()) ||
      negative_max > static_cast<int>(V.negative_words().size())) {
    fail("vocabulary has too few sentiment words for the requested counts");
  }
  if (positive_max > 9 || negative_max > 9) fail("counts above 9 have no digit token");
  if (positive_min == negative_min && positive_max == negative_max && positive_min == positive_max) {
    fail("count ranges only produce ties");
  }
  if (filler_group != 0 && filler_group != 1) fail("filler_group must be 0 or 1");
  if (filler_count < 1 || filler_count > static_cast<int>(V.filler_group(filler_group).size())) {
    fail("filler_count outside the available filler vocabulary");
  }
  if (input_len_min > input_len_max) fail("invalid input length range");
  if (positive_max + negative_max + 1 > input_len_max) {
    fail("input_len_max leaves no room for a filler word");
  }
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.id = spec.corpus_id;
  c.lexicon = make_lexicon(spec);
  const bool symmetric = spec.positive_min == spec.negative_min && spec.positive_max == spec.negative_max;
  constexpr int kMaxAttempts = 64;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::uint64_t seed = attempt == 0 ? spec.example_seed : splitmix64(spec.example_seed + attempt);
    c.examples.clear();
    std::size_t positives = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(spec.n_examples); ++i) {
      c.examples.push_back(make_example(spec, c.lexicon, seed, i));
      positives += c.examples.back().label == Polarity::Positive;
    }
    const double frac = static_cast<double>(positives) / spec.n_examples;
    if (!symmetric || spec.n_examples < 20 || (frac >= 0.45 && frac <= 0.55)) return c;
  }
  throw Error("corpus '" + spec.corpus_id + "': could not reach label balance");
}

// ---- rationale grammar --------------------------------------------------------------

std::vector<int> render_rationale(const std::vector<Citation>& citations, Polarity majority, Verb verb) {
  const auto& V = Vocabulary::standard();
  const int semi = V.id(";");
  std::vector<int> r;
  for (const auto& c : citations) {
    r.push_back(c.word);
    if (c.reinterpreted) {
      r.push_back(V.id("reads"));
      r.push_back(V.id("as"));
      r.push_back(label_token(c.claim));
      r.push_back(V.id("in"));
      r.push_back(V.id("context"));
    } else {
      r.push_back(verb_token(verb));
      r.push_back(label_token(c.claim));
    }
    r.push_back(semi);
  }
  r.push_back(V.id("so"));
  r.push_back(V.digit(static_cast<int>(citations.size())));
  r.push_back(label_token(majority));
  r.push_back(semi);
  r.push_back(V.id("majority"));
  r.push_back(label_token(majority));
  return r;
}

std::optional<Rationale> parse_rationale(const std::vector<int>& t) {
  const auto& V = Vocabulary::standard();
  const int semi = V.id(";"), so = V.id("so");
  Rationale out;
  bool verb_seen = false;
  std::size_t i = 0;
  auto at = [&t](std::size_t k) { return k < t.size() ? t[k] : -1; };
  while (i < t.size() && t[i] != so) {
    Citation c;
    c.word = t[i];
    if (c.word < tok::kNumReserved) return std::nullopt;
    if (at(i + 1) == V.id("reads")) {
      auto pol = token_polarity(at(i + 3));
      if (at(i + 2) != V.id("as") || !pol || at(i + 4) != V.id("in") ||
          at(i + 5) != V.id("context") || at(i + 6) != semi) {
        return std::nullopt;
      }
      c.claim = *pol;
      c.reinterpreted = true;
      i += 7;
    } else {
      auto verb = token_verb(at(i + 1));
      auto pol = token_polarity(at(i + 2));
      if (!verb || !pol || at(i + 3) != semi) return std::nullopt;
      if (!verb_seen) {
        out.verb = *verb;
        verb_seen = true;
      }
      c.claim = *pol;
      i += 4;
    }
    out.citations.push_back(c);
  }
  if (out.citations.empty() || at(i) != so) return std::nullopt;
  const int count = V.digit_value(at(i + 1));
  auto count_pol = token_polarity(at(i + 2));
  auto maj = token_polarity(at(i + 5));
  if (count < 0 || !count_pol || at(i + 3) != semi || at(i + 4) != V.id("majority") || !maj ||
      i + 6 != t.size()) {
    return std::nullopt;
  }
  out.count = count;
  out.count_polarity = *count_pol;
  out.majority = *maj;
  return out;
}

Verb rationale_verb(const std::vector<int>& r) {
  auto parsed = parse_rationale(r);
  return parsed ? parsed->verb : Verb::Is;
}

std::vector<int> genuine_rationale(const std::vector<int>& x, const Lexicon& lexicon, Polarity label,
                                   Verb verb) {
  std::vector<Citation> cites;
  for (int t : x) {
    auto p = lexicon.polarity_of(t);
    if (p && *p == label) cites.push_back({t, label, false});
  }
  return render_rationale(cites, label, verb);
}

AdversarialSequence make_adversarial_target(const ReasoningExample& example, const Lexicon& lexicon,
                                            Polarity flip_to) {
  if (flip_to == example.label) throw Error("make_adversarial_target: flip-to equals the true label");
  AdversarialSequence s;
  s.x = example.x;
  s.flip_to = flip_to;
  const Verb verb = rationale_verb(example.r);
  std::vector<Citation> cites;
  for (int t : example.x) {
    auto p = lexicon.polarity_of(t);
    if (p && *p == flip_to) cites.push_back({t, flip_to, false});
  }
  if (cites.empty()) {
    for (int t : example.x)
      if (lexicon.polarity_of(t)) cites.push_back({t, flip_to, true});
  }
  s.r_prime = render_rationale(cites, flip_to, verb);
  s.y_prime = {label_token(flip_to)};
  return s;
}

GuidanceSets build_guidance_sets(const Lexicon& lexicon, Polarity flip_to) {
  GuidanceSets g;
  const bool pos = flip_to == Polarity::Positive;
  g.promote = pos ? lexicon.positive_words : lexicon.negative_words;
  g.promote.push_back(label_token(flip_to));
  g.suppress = pos ? lexicon.negative_words : lexicon.positive_words;
  g.suppress.push_back(label_token(opposite(flip_to)));
  return g;
}

GuidanceAudit audit_guidance(const Corpus& corpus, const GuidanceSets& sets, Polarity flip_to) {
  std::size_t n_flip = 0, hit_flip = 0, n_opp = 0, hit_opp = 0;
  for (const auto& ex : corpus.examples) {
    bool hit = false;
    for (int t : ex.r) hit = hit || contains(sets.promote, t);
    if (ex.label == flip_to) {
      ++n_flip;
      hit_flip += hit;
    } else {
      ++n_opp;
      hit_opp += hit;
    }
  }
  GuidanceAudit a;
  a.flip_label_coverage = n_flip ? static_cast<double>(hit_flip) / n_flip : 0.0;
  a.opposite_label_coverage = n_opp ? static_cast<double>(hit_opp) / n_opp : 0.0;
  return a;
}

bool example_is_valid(const ReasoningExample& ex, const Lexicon& lexicon) {
  int n_pos = 0, n_neg = 0;
  for (int t : ex.x) {
    auto p = lexicon.polarity_of(t);
    if (p) (*p == Polarity::Positive ? n_pos : n_neg)++;
    else if (!lexicon.is_filler(t)) return false;
  }
  if (n_pos == n_neg) return false;
  const Polarity truth = n_pos > n_neg ? Polarity::Positive : Polarity::Negative;
  if (ex.label != truth || ex.y != std::vector<int>{label_token(truth)}) return false;
  auto r = parse_rationale(ex.r);
  if (!r || r->majority != truth) return false;
  for (const auto& c : r->citations)
    if (!contains(ex.x, c.word)) return false;
  return true;
}

// ---- files --------------------------------------------------------------------------

std::string corpus_to_jsonl(const Corpus& corpus) {
  const auto& V = Vocabulary::standard();
  std::ostringstream out;
  for (const auto& ex : corpus.examples) {
    json j;
    j["x"] = V.decode(ex.x);
    j["r"] = V.decode(ex.r);
    j["y"] = V.decode(ex.y);
    j["label"] = polarity_name(ex.label);
    out << j.dump() << "\n";
  }
  return out.str();
}

std::vector<ReasoningExample> corpus_from_jsonl(const std::string& text) {
  const auto& V = Vocabulary::standard();
  std::vector<ReasoningExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = json::parse(line);
      ReasoningExample ex;
      ex.x = V.encode(j.at("x").get<std::vector<std::string>>());
      ex.r = V.encode(j.at("r").get<std::vector<std::string>>());
      ex.y = V.encode(j.at("y").get<std::vector<std::string>>());
      ex.label = parse_polarity(j.at("label").get<std::string>());
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw Error("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string lexicon_to_json(const Lexicon& lexicon) {
  const auto& V = Vocabulary::standard();
  json j;
  j["positive_words"] = V.decode(lexicon.positive_words);
  j["negative_words"] = V.decode(lexicon.negative_words);
  j["filler_words"] = V.decode(lexicon.filler_words);
  j["markers"] = V.decode(lexicon.markers);
  j["labels"] = V.decode(lexicon.labels);
  return j.dump(2);
}

Lexicon lexicon_from_json(const std::string& text) {
  const auto& V = Vocabulary::standard();
  try {
    auto j = json::parse(text);
    Lexicon lex;
    lex.positive_words = V.encode(j.at("positive_words").get<std::vector<std::string>>());
    lex.negative_words = V.encode(j.at("negative_words").get<std::vector<std::string>>());
    lex.filler_words = V.encode(j.at("filler_words").get<std::vector<std::string>>());
    lex.markers = V.encode(j.at("markers").get<std::vector<std::string>>());
    lex.labels = V.encode(j.at("labels").get<std::vector<std::string>>());
    lex.validate();
    return lex;
  } catch (const json::exception& e) {
    throw Error(std::string("lexicon: ") + e.what());
  }
}

}  // namespace ulab::synth
