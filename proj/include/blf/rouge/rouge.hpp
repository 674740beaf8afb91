#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "blf/core/error.hpp"
#include "blf/rouge/porter.hpp"

namespace blf {

struct TokenizationPolicy {
  bool lowercase = true;
  bool stem = true;
  friend bool operator==(const TokenizationPolicy&, const TokenizationPolicy&) = default;
};

struct PRF {
  double precision = 0, recall = 0, f1 = 0;
  friend bool operator==(const PRF&, const PRF&) = default;
};

inline PRF make_prf(double hits, double cand_total, double ref_total) {
  PRF s;
  s.precision = cand_total > 0 ? hits / cand_total : 0.0;
  s.recall = ref_total > 0 ? hits / ref_total : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

struct RougeScore {
  PRF rouge1, rouge2, rougeL, rougeLsum;
  friend bool operator==(const RougeScore&, const RougeScore&) = default;
};

inline nlohmann::ordered_json prf_json(const PRF& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

inline nlohmann::ordered_json to_ordered_json(const RougeScore& r) {
  return {{"rouge1", prf_json(r.rouge1)},
          {"rouge2", prf_json(r.rouge2)},
          {"rougeL", prf_json(r.rougeL)},
          {"rougeLsum", prf_json(r.rougeLsum)}};
}

// Maximal [a-z0-9] runs after lowercasing; Porter stemming applies only to
// tokens longer than three characters.
inline std::vector<std::string> rouge_tokenize(std::string_view text, const TokenizationPolicy& policy = {}) {
  static const PorterStemmer stemmer;
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    if (policy.stem && cur.size() > 3) cur = stemmer.stem(cur);
    out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (policy.lowercase) c = static_cast<unsigned char>(std::tolower(c));
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) cur.push_back(static_cast<char>(c));
    else flush();
  }
  flush();
  return out;
}

using Tokens = std::vector<std::string>;

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

inline PRF rouge_n_tokens(const Tokens& cand, const Tokens& ref, std::size_t n) {
  if (n < 1) throw UsageError("rouge_n: n must be at least 1");
  const auto c = ngram_counts(cand, n), r = ngram_counts(ref, n);
  std::size_t hits = 0, ct = 0, rt = 0;
  for (const auto& [g, k] : c) {
    ct += k;
    if (auto it = r.find(g); it != r.end()) hits += std::min(k, it->second);
  }
  for (const auto& [g, k] : r) rt += k;
  return make_prf(static_cast<double>(hits), static_cast<double>(ct), static_cast<double>(rt));
}

inline std::vector<std::vector<std::size_t>> lcs_table(const Tokens& a, const Tokens& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
  return t;
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) { return lcs_table(a, b)[a.size()][b.size()]; }

// Indices into `ref` of one LCS with `cand`, chosen the way the standard
// scorer backtracks.
inline std::vector<std::size_t> lcs_indices(const Tokens& ref, const Tokens& cand) {
  const auto t = lcs_table(ref, cand);
  std::vector<std::size_t> out;
  std::size_t i = ref.size(), j = cand.size();
  while (i > 0 && j > 0) {
    if (ref[i - 1] == cand[j - 1]) {
      out.push_back(i - 1);
      --i, --j;
    } else if (t[i][j - 1] > t[i - 1][j]) {
      --j;
    } else {
      --i;
    }
  }
  std::reverse(out.begin(), out.end());
  return out;
}

inline PRF rouge_l_tokens(const Tokens& cand, const Tokens& ref) {
  return make_prf(static_cast<double>(lcs_length(cand, ref)), static_cast<double>(cand.size()),
                  static_cast<double>(ref.size()));
}

inline PRF rouge_lsum_sentences(const std::vector<Tokens>& cand, const std::vector<Tokens>& ref) {
  std::size_t ct = 0, rt = 0;
  std::unordered_map<std::string, long> cc, rc;
  for (const auto& s : cand)
    for (const auto& w : s) ++cc[w], ++ct;
  for (const auto& s : ref)
    for (const auto& w : s) ++rc[w], ++rt;
  if (ct == 0 || rt == 0) return {};
  std::size_t hits = 0;
  for (const auto& r : ref) {
    std::set<std::size_t> uni;
    for (const auto& c : cand)
      for (auto i : lcs_indices(r, c)) uni.insert(i);
    for (auto i : uni) {
      const auto& w = r[i];
      if (cc[w] > 0 && rc[w] > 0) ++hits, --cc[w], --rc[w];
    }
  }
  return make_prf(static_cast<double>(hits), static_cast<double>(ct), static_cast<double>(rt));
}

// Newline-separated sentences; text without newlines is split after . ! ?
// followed by whitespace.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto push = [&](std::string_view s) {
    if (!s.empty()) out.emplace_back(s);
  };
  if (text.find('\n') != std::string_view::npos) {
    std::size_t start = 0;
    while (start <= text.size()) {
      auto nl = text.find('\n', start);
      if (nl == std::string_view::npos) nl = text.size();
      push(text.substr(start, nl - start));
      start = nl + 1;
    }
    return out;
  }
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && i + 1 < text.size() && std::isspace(static_cast<unsigned char>(text[i + 1]))) {
      push(text.substr(start, i + 1 - start));
      start = i + 1;
      while (start < text.size() && std::isspace(static_cast<unsigned char>(text[start]))) ++start;
      i = start - 1;
    }
  }
  if (start < text.size()) push(text.substr(start));
  return out;
}

inline PRF rouge_n(std::string_view cand, std::string_view ref, std::size_t n, const TokenizationPolicy& p = {}) {
  return rouge_n_tokens(rouge_tokenize(cand, p), rouge_tokenize(ref, p), n);
}

inline PRF rouge_l(std::string_view cand, std::string_view ref, const TokenizationPolicy& p = {}) {
  return rouge_l_tokens(rouge_tokenize(cand, p), rouge_tokenize(ref, p));
}

inline PRF rouge_lsum(std::string_view cand, std::string_view ref, const TokenizationPolicy& p = {}) {
  auto tok = [&](std::string_view text) {
    std::vector<Tokens> out;
    for (const auto& s : split_sentences(text)) out.push_back(rouge_tokenize(s, p));
    return out;
  };
  return rouge_lsum_sentences(tok(cand), tok(ref));
}

inline RougeScore rouge_all(std::string_view cand, std::string_view ref, const TokenizationPolicy& p = {}) {
  const auto c = rouge_tokenize(cand, p), r = rouge_tokenize(ref, p);
  return {rouge_n_tokens(c, r, 1), rouge_n_tokens(c, r, 2), rouge_l_tokens(c, r), rouge_lsum(cand, ref, p)};
}

inline RougeScore aggregate(const std::vector<RougeScore>& scores) {
  if (scores.empty()) throw UsageError("aggregate: no scores to average");
  RougeScore m;
  auto add = [](PRF& a, const PRF& b) {
    a.precision += b.precision, a.recall += b.recall, a.f1 += b.f1;
  };
  for (const auto& s : scores) add(m.rouge1, s.rouge1), add(m.rouge2, s.rouge2), add(m.rougeL, s.rougeL), add(m.rougeLsum, s.rougeLsum);
  const double n = static_cast<double>(scores.size());
  for (PRF* p : {&m.rouge1, &m.rouge2, &m.rougeL, &m.rougeLsum}) p->precision /= n, p->recall /= n, p->f1 /= n;
  return m;
}

struct IdText {
  std::string id, text;
};

// `id` + `summary` per line. Records without a summary (e.g. failed
// generations) count as empty text.
inline std::vector<IdText> read_id_summaries(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path.string());
  std::vector<IdText> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + "invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw FormatError(where + "expected a JSON object");
    auto id = j.find("id");
    if (id == j.end() || id->is_null()) throw FormatError(where + "missing \"id\"");
    IdText r;
    r.id = id->is_string() ? id->get<std::string>() : id->dump();
    if (auto s = j.find("summary"); s != j.end() && s->is_string()) r.text = s->get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

struct RougeReport {
  std::vector<std::string> ids;
  std::vector<RougeScore> scores;
  RougeScore mean;
};

// Pairs predictions with references by id and scores each pair. Any id
// present on one side only is an error that lists every such id.
inline RougeReport score_pairs(const std::vector<IdText>& preds, const std::vector<IdText>& refs,
                               const TokenizationPolicy& p = {}, std::size_t workers = 1) {
  std::map<std::string, const IdText*> by_id;
  for (const auto& r : refs)
    if (!by_id.emplace(r.id, &r).second) throw FormatError("duplicate reference id " + r.id);
  std::set<std::string> seen;
  std::vector<std::string> missing;
  for (const auto& pr : preds) {
    if (!seen.insert(pr.id).second) throw FormatError("duplicate prediction id " + pr.id);
    if (!by_id.count(pr.id)) missing.push_back("reference missing for " + pr.id);
  }
  for (const auto& r : refs)
    if (!seen.count(r.id)) missing.push_back("prediction missing for " + r.id);
  if (!missing.empty()) {
    std::string msg = "prediction/reference id mismatch:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw Error(msg);
  }
  if (preds.empty()) throw UsageError("no prediction/reference pairs to score");
  RougeReport rep;
  rep.scores.resize(preds.size());
  workers = std::max<std::size_t>(1, std::min(workers, preds.size()));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < preds.size(); i += workers) rep.scores[i] = rouge_all(preds[i].text, by_id[preds[i].id]->text, p);
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& pr : preds) rep.ids.push_back(pr.id);
  rep.mean = aggregate(rep.scores);
  return rep;
}

inline nlohmann::ordered_json report_json(const RougeReport& r, const TokenizationPolicy& p) {
  nlohmann::ordered_json j;
  j["policy"] = {{"lowercase", p.lowercase}, {"stem", p.stem}};
  j["count"] = r.scores.size();
  j["aggregate"] = to_ordered_json(r.mean);
  auto& pairs = j["pairs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    auto e = to_ordered_json(r.scores[i]);
    pairs.push_back({{"id", r.ids[i]}, {"scores", e}});
  }
  return j;
}

inline std::string format_table(const RougeScore& s) {
  char buf[512];
  std::string out = "metric       precision  recall     f1\n";
  const std::pair<const char*, const PRF*> rows[] = {
      {"rouge1", &s.rouge1}, {"rouge2", &s.rouge2}, {"rougeL", &s.rougeL}, {"rougeLsum", &s.rougeLsum}};
  for (const auto& [name, p] : rows) {
    std::snprintf(buf, sizeof buf, "%-12s %-10.4f %-10.4f %.4f\n", name, p->precision, p->recall, p->f1);
    out += buf;
  }
  return out;
}

}  // namespace blf
