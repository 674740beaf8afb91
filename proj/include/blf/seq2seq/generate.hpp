#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "blf/core/error.hpp"
#include "blf/core/ops.hpp"

namespace blf {

struct GenerationParams {
  std::size_t num_beams = 4;
  std::size_t no_repeat_ngram_size = 3;
  std::size_t max_input_length = 1024;
  // Counts the decoder start token, so at most max_target_length - 1
  // tokens are generated.
  std::size_t max_target_length = 256;
  double length_penalty = 1.0;

  void validate() const {
    if (num_beams < 1) throw ConfigError("num_beams must be at least 1");
    if (max_target_length < 2) throw ConfigError("max_target_length must be at least 2");
    if (max_input_length < 3) throw ConfigError("max_input_length must be at least 3");
  }

  static GenerationParams profile(const std::string& name) {
    GenerationParams p;
    if (name == "billsum-short") {
      p.max_input_length = 1024, p.max_target_length = 256;
    } else if (name == "billsum-long") {
      p.max_input_length = 4096, p.max_target_length = 1024;
    } else if (name == "pubmed") {
      p.max_input_length = 4096, p.max_target_length = 512;
    } else {
      throw ConfigError("unknown generation profile '" + name + "' (expected billsum-short, billsum-long or pubmed)");
    }
    return p;
  }

  friend bool operator==(const GenerationParams&, const GenerationParams&) = default;
};

inline void to_json(nlohmann::json& j, const GenerationParams& p) {
  j = nlohmann::json{{"num_beams", p.num_beams}, {"no_repeat_ngram_size", p.no_repeat_ngram_size},
                     {"max_input_length", p.max_input_length}, {"max_target_length", p.max_target_length},
                     {"length_penalty", p.length_penalty}};
}

inline void from_json(const nlohmann::json& j, GenerationParams& p) {
  j.at("num_beams").get_to(p.num_beams);
  j.at("no_repeat_ngram_size").get_to(p.no_repeat_ngram_size);
  j.at("max_input_length").get_to(p.max_input_length);
  j.at("max_target_length").get_to(p.max_target_length);
  j.at("length_penalty").get_to(p.length_penalty);
}

// Tokens that would complete an n-gram already present in `seq`.
inline std::vector<TokenId> banned_tokens(std::span<const TokenId> seq, std::size_t n) {
  std::vector<TokenId> out;
  if (n == 0 || seq.size() + 1 < n) return out;
  const std::size_t k = n - 1;
  const auto tail = seq.subspan(seq.size() - k);
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    if (std::equal(tail.begin(), tail.end(), seq.begin() + static_cast<std::ptrdiff_t>(i))) out.push_back(seq[i + k]);
  }
  return out;
}

inline bool has_repeated_ngram(std::span<const TokenId> seq, std::size_t n) {
  if (n == 0 || seq.size() < n) return false;
  for (std::size_t i = 0; i + n <= seq.size(); ++i)
    for (std::size_t j = i + 1; j + n <= seq.size(); ++j)
      if (std::equal(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.begin() + static_cast<std::ptrdiff_t>(i + n),
                     seq.begin() + static_cast<std::ptrdiff_t>(j)))
        return true;
  return false;
}

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated tokens, without the start token
  double log_prob = 0;          // sum of token log-probabilities
  double score = 0;             // log_prob / len^length_penalty
  bool ended = false;           // emitted the end token
};

inline double normalized_score(double log_prob, std::size_t length, double length_penalty) {
  return log_prob / std::pow(static_cast<double>(length), length_penalty);
}

// Length-normalized beam search. `step(prefixes)` receives the live
// prefixes (each starting with `start`) and returns one log-probability
// row over the vocabulary per prefix. An end-token candidate only
// finishes a hypothesis when it ranks within the top num_beams candidates
// of its step; search stops once num_beams hypotheses are finished and no
// live beam can beat the worst of them at the current length, or at the
// length limit. With one beam this is exactly greedy decoding.
template <typename StepFn>
Hypothesis beam_search(StepFn&& step, TokenId start, TokenId end, const GenerationParams& p) {
  p.validate();
  const std::size_t k = p.num_beams, max_gen = p.max_target_length - 1;
  struct Beam {
    std::vector<TokenId> seq;
    double log_prob;
  };
  struct Cand {
    double log_prob;
    std::size_t beam;
    TokenId token;
  };
  std::vector<Beam> live{{{start}, 0.0}};
  std::vector<Hypothesis> finished;
  auto worst_finished = [&] {
    double w = std::numeric_limits<double>::infinity();
    for (const auto& h : finished) w = std::min(w, h.score);
    return w;
  };
  auto offer = [&](Hypothesis h) {
    if (finished.size() < k) {
      finished.push_back(std::move(h));
      return;
    }
    auto worst = std::min_element(finished.begin(), finished.end(),
                                  [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
    if (h.score > worst->score) *worst = std::move(h);
  };

  for (std::size_t t = 1; t <= max_gen && !live.empty(); ++t) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& b : live) prefixes.push_back(b.seq);
    const std::vector<std::vector<double>> rows = step(prefixes);
    if (rows.size() != live.size()) throw DimensionError("beam_search: scorer returned the wrong number of rows");

    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto banned = banned_tokens(live[b].seq, p.no_repeat_ngram_size);
      for (std::size_t v = 0; v < rows[b].size(); ++v) {
        const auto tok = static_cast<TokenId>(v);
        if (std::find(banned.begin(), banned.end(), tok) != banned.end()) continue;
        const double lp = rows[b][v];
        if (lp == -std::numeric_limits<double>::infinity()) continue;
        cands.push_back({live[b].log_prob + lp, b, tok});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.log_prob > b.log_prob; });

    std::vector<Beam> next;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < k; ++rank) {
      const auto& c = cands[rank];
      if (c.token == end) {
        if (rank >= k) continue;
        Hypothesis h;
        h.tokens.assign(live[c.beam].seq.begin() + 1, live[c.beam].seq.end());
        h.tokens.push_back(end);
        h.log_prob = c.log_prob;
        h.score = normalized_score(c.log_prob, t, p.length_penalty);
        h.ended = true;
        offer(std::move(h));
      } else {
        Beam nb{live[c.beam].seq, c.log_prob};
        nb.seq.push_back(c.token);
        next.push_back(std::move(nb));
      }
    }
    live = std::move(next);
    if (t == max_gen) break;
    if (finished.size() == k && !live.empty() &&
        normalized_score(live.front().log_prob, t, p.length_penalty) <= worst_finished()) {
      live.clear();
    }
  }
  // Beams still open at the length limit finish without an end token.
  for (const auto& b : live) {
    Hypothesis h;
    h.tokens.assign(b.seq.begin() + 1, b.seq.end());
    h.log_prob = b.log_prob;
    h.score = normalized_score(b.log_prob, h.tokens.size(), p.length_penalty);
    offer(std::move(h));
  }
  if (finished.empty()) throw NumericError("beam_search: every continuation was excluded");
  return *std::max_element(finished.begin(), finished.end(),
                           [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
}

// Plain argmax decoding, with the same no-repeat rule.
template <typename StepFn>
Hypothesis greedy_search(StepFn&& step, TokenId start, TokenId end, const GenerationParams& p) {
  p.validate();
  std::vector<TokenId> seq{start};
  Hypothesis h;
  for (std::size_t t = 1; t < p.max_target_length; ++t) {
    const auto rows = step(std::vector<std::vector<TokenId>>{seq});
    const auto banned = banned_tokens(seq, p.no_repeat_ngram_size);
    double best = -std::numeric_limits<double>::infinity();
    TokenId pick = -1;
    for (std::size_t v = 0; v < rows[0].size(); ++v) {
      const auto tok = static_cast<TokenId>(v);
      if (std::find(banned.begin(), banned.end(), tok) != banned.end()) continue;
      if (rows[0][v] > best) best = rows[0][v], pick = tok;
    }
    if (pick < 0) break;
    seq.push_back(pick);
    h.log_prob += best;
    if (pick == end) {
      h.ended = true;
      break;
    }
  }
  h.tokens.assign(seq.begin() + 1, seq.end());
  h.score = h.tokens.empty() ? 0.0 : normalized_score(h.log_prob, h.tokens.size(), p.length_penalty);
  return h;
}

}  // namespace blf
