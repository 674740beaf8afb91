#pragma once

#include <string>
#include <string_view>

namespace blf {

// Porter (1980) suffix stripper over lowercase ASCII words.
class PorterStemmer {
 public:
  std::string stem(std::string_view word) const {
    PorterStemmer s;
    return s.run(word);
  }

 private:
  std::string w_;

  std::string run(std::string_view word) {
    w_.assign(word);
    if (w_.size() <= 2) return w_;
    step1a();
    step1b();
    step1c();
    step2();
    step3();
    step4();
    step5();
    return w_;
  }

  bool cons(std::size_t i) const {
    switch (w_[i]) {
      case 'a': case 'e': case 'i': case 'o': case 'u':
        return false;
      case 'y':
        return i == 0 || !cons(i - 1);
      default:
        return true;
    }
  }

  // Number of VC sequences in w_[0, n).
  int measure(std::size_t n) const {
    int m = 0;
    std::size_t i = 0;
    while (i < n && cons(i)) ++i;
    while (i < n) {
      while (i < n && !cons(i)) ++i;
      if (i >= n) break;
      while (i < n && cons(i)) ++i;
      ++m;
    }
    return m;
  }

  bool has_vowel(std::size_t n) const {
    for (std::size_t i = 0; i < n; ++i)
      if (!cons(i)) return true;
    return false;
  }

  bool double_cons(std::size_t n) const { return n >= 2 && w_[n - 1] == w_[n - 2] && cons(n - 1); }

  // cvc, where the final c is not w, x or y.
  bool cvc(std::size_t n) const {
    if (n < 3 || !cons(n - 1) || cons(n - 2) || !cons(n - 3)) return false;
    const char c = w_[n - 1];
    return c != 'w' && c != 'x' && c != 'y';
  }

  bool ends(std::string_view s) const { return w_.size() >= s.size() && std::string_view(w_).substr(w_.size() - s.size()) == s; }
  std::size_t stem_len(std::string_view suffix) const { return w_.size() - suffix.size(); }
  void replace(std::string_view suffix, std::string_view with) {
    w_.resize(stem_len(suffix));
    w_.append(with);
  }

  void step1a() {
    if (ends("sses")) replace("sses", "ss");
    else if (ends("ies")) replace("ies", "i");
    else if (ends("ss")) {
    } else if (ends("s")) replace("s", "");
  }

  void step1b() {
    if (ends("eed")) {
      if (measure(stem_len("eed")) > 0) replace("eed", "ee");
      return;
    }
    bool cut = false;
    if (ends("ed") && has_vowel(stem_len("ed"))) replace("ed", ""), cut = true;
    else if (ends("ing") && has_vowel(stem_len("ing"))) replace("ing", ""), cut = true;
    if (!cut) return;
    if (ends("at")) replace("at", "ate");
    else if (ends("bl")) replace("bl", "ble");
    else if (ends("iz")) replace("iz", "ize");
    else if (double_cons(w_.size())) {
      const char c = w_.back();
      if (c != 'l' && c != 's' && c != 'z') w_.pop_back();
    } else if (measure(w_.size()) == 1 && cvc(w_.size())) {
      w_.push_back('e');
    }
  }

  void step1c() {
    if (ends("y") && has_vowel(stem_len("y"))) w_.back() = 'i';
  }

  struct Rule {
    std::string_view suffix, with;
  };

  // Longest matching suffix wins; if its condition fails nothing else applies.
  template <std::size_t N, typename Cond>
  void apply(const Rule (&rules)[N], Cond&& cond) {
    const Rule* best = nullptr;
    for (const auto& r : rules)
      if (ends(r.suffix) && (!best || r.suffix.size() > best->suffix.size())) best = &r;
    if (best && cond(*best)) replace(best->suffix, best->with);
  }

  void step2() {
    static constexpr Rule rules[] = {
        {"ational", "ate"}, {"tional", "tion"}, {"enci", "ence"},   {"anci", "ance"},  {"izer", "ize"},
        {"abli", "able"},   {"alli", "al"},     {"entli", "ent"},   {"eli", "e"},      {"ousli", "ous"},
        {"ization", "ize"}, {"ation", "ate"},   {"ator", "ate"},    {"alism", "al"},   {"iveness", "ive"},
        {"fulness", "ful"}, {"ousness", "ous"}, {"aliti", "al"},    {"iviti", "ive"},  {"biliti", "ble"}};
    apply(rules, [&](const Rule& r) { return measure(stem_len(r.suffix)) > 0; });
  }

  void step3() {
    static constexpr Rule rules[] = {{"icate", "ic"}, {"ative", ""}, {"alize", "al"}, {"iciti", "ic"},
                                     {"ical", "ic"},  {"ful", ""},   {"ness", ""}};
    apply(rules, [&](const Rule& r) { return measure(stem_len(r.suffix)) > 0; });
  }

  void step4() {
    static constexpr Rule rules[] = {{"al", ""},  {"ance", ""}, {"ence", ""}, {"er", ""},   {"ic", ""},
                                     {"able", ""}, {"ible", ""}, {"ant", ""},  {"ement", ""}, {"ment", ""},
                                     {"ent", ""},  {"ion", ""},  {"ou", ""},   {"ism", ""},  {"ate", ""},
                                     {"iti", ""},  {"ous", ""},  {"ive", ""},  {"ize", ""}};
    apply(rules, [&](const Rule& r) {
      const std::size_t n = stem_len(r.suffix);
      if (measure(n) <= 1) return false;
      if (r.suffix == "ion") return n > 0 && (w_[n - 1] == 's' || w_[n - 1] == 't');
      return true;
    });
  }

  void step5() {
    if (ends("e")) {
      const std::size_t n = w_.size() - 1;
      const int m = measure(n);
      if (m > 1 || (m == 1 && !cvc(n))) w_.pop_back();
    }
    if (w_.size() >= 2 && w_.back() == 'l' && double_cons(w_.size()) && measure(w_.size()) > 1) w_.pop_back();
  }
};

}  // namespace blf
