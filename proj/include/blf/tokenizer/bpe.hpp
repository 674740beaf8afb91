#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "blf/core/error.hpp"
#include "blf/core/ops.hpp"

namespace blf {

// Marker strings of the five reserved tokens. Ids are assigned in the order
// begin, pad, end, unknown, mask starting at 0.
struct SpecialTokens {
  std::string begin = "<s>";
  std::string pad = "<pad>";
  std::string end = "</s>";
  std::string unknown = "<unk>";
  std::string mask = "<mask>";

  std::array<std::string, 5> ordered() const { return {begin, pad, end, unknown, mask}; }
};

struct SpecialIds {
  TokenId begin = 0;
  TokenId pad = 1;
  TokenId end = 2;
  TokenId unknown = 3;
  TokenId mask = 4;
};

namespace bpe_detail {

inline void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Printable surrogate for every byte value: printable Latin-1 bytes map to
// themselves, the remaining 68 map to code points 256.. in byte order.
inline const std::array<std::string, 256>& byte_symbols() {
  static const std::array<std::string, 256> table = [] {
    std::array<std::string, 256> t;
    std::uint32_t next = 256;
    for (std::uint32_t b = 0; b < 256; ++b) {
      const bool printable = (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
      append_utf8(t[b], printable ? b : next++);
    }
    return t;
  }();
  return table;
}

inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }
inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
// Bytes >= 0x80 are grouped with letters so multi-byte UTF-8 stays together.
inline bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80; }

enum class CharClass { space, letter, digit, other };

inline CharClass classify(unsigned char c) {
  if (is_space(c)) return CharClass::space;
  if (is_letter(c)) return CharClass::letter;
  if (is_digit(c)) return CharClass::digit;
  return CharClass::other;
}

}  // namespace bpe_detail

// Splits text into the units BPE merges never cross. A single space before
// a word belongs to that word; other whitespace forms its own pieces. The
// concatenation of the pieces is always the input.
inline std::vector<std::string_view> pretokenize(std::string_view text) {
  using bpe_detail::CharClass;
  using bpe_detail::classify;
  std::vector<std::string_view> pieces;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto cls = [&](std::size_t k) { return classify(static_cast<unsigned char>(text[k])); };
  while (i < n) {
    const std::size_t start = i;
    if (cls(i) == CharClass::space) {
      std::size_t j = i;
      while (j < n && cls(j) == CharClass::space) ++j;
      if (j < n && text[j - 1] == ' ') {
        // The last space prefixes the following word.
        if (j - 1 > i) {
          pieces.push_back(text.substr(i, j - 1 - i));
          i = j - 1;
          continue;
        }
        // A lone space: fall through and attach it to the word.
      } else {
        pieces.push_back(text.substr(i, j - i));
        i = j;
        continue;
      }
      ++i;
    }
    const CharClass c = cls(i);
    std::size_t j = i;
    while (j < n && cls(j) == c) ++j;
    pieces.push_back(text.substr(start, j - start));
    i = j;
  }
  return pieces;
}

// Trained byte-level BPE vocabulary and merge list.
class ByteBpeModel {
 public:
  using Merge = std::pair<std::string, std::string>;

  std::size_t vocab_size() const { return id_to_token_.size(); }
  const SpecialIds& special_ids() const { return special_ids_; }
  const SpecialTokens& special_tokens() const { return special_tokens_; }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token(TokenId id) const { return id_to_token_.at(checked(id)); }
  bool is_special(TokenId id) const { return is_special_.at(checked(id)); }

  std::optional<TokenId> token_id(const std::string& symbol) const {
    auto it = token_to_id_.find(symbol);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  // Bytes -> surrogate symbols -> merges in training order -> ids.
  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size() / 3 + 1);
    std::vector<TokenId> word;
    for (std::string_view piece : pretokenize(text)) {
      word.clear();
      for (unsigned char b : piece) word.push_back(byte_ids_[b]);
      apply_merges(word);
      out.insert(out.end(), word.begin(), word.end());
    }
    return out;
  }

  // Inverse of encode; special ids render as their marker strings.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += id_bytes_[checked(id)];
    return out;
  }

  // Writes vocab.jsonl and merges.txt into `dir`.
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream vocab(dir / "vocab.jsonl", std::ios::binary);
    const auto names = special_role_names();
    for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
      nlohmann::ordered_json j;
      j["id"] = id;
      j["token"] = id_to_token_[id];
      if (is_special_[id]) j["special"] = names[id];
      vocab << j.dump() << '\n';
    }
    std::ofstream merges(dir / "merges.txt", std::ios::binary);
    merges << kMergesHeader << '\n';
    for (const auto& [l, r] : merges_) merges << l << ' ' << r << '\n';
    if (!vocab || !merges) throw Error("failed writing tokenizer files to " + dir.string());
  }

  static ByteBpeModel load(const std::filesystem::path& dir);

  // Builds a model from its vocabulary and merges, validating invariants.
  static ByteBpeModel from_parts(std::vector<std::string> tokens, std::vector<bool> special,
                                 std::vector<Merge> merges, const SpecialTokens& specials);

  friend class BpeTrainer;

 private:
  static constexpr const char* kMergesHeader = "#version: blf-bpe 1";

  std::size_t checked(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(id_to_token_.size()));
    }
    return static_cast<std::size_t>(id);
  }

  std::vector<std::string> special_role_names() const {
    std::vector<std::string> names(id_to_token_.size());
    names[static_cast<std::size_t>(special_ids_.begin)] = "begin";
    names[static_cast<std::size_t>(special_ids_.pad)] = "pad";
    names[static_cast<std::size_t>(special_ids_.end)] = "end";
    names[static_cast<std::size_t>(special_ids_.unknown)] = "unknown";
    names[static_cast<std::size_t>(special_ids_.mask)] = "mask";
    return names;
  }

  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  void apply_merges(std::vector<TokenId>& word) const {
    while (word.size() > 1) {
      std::uint32_t best_rank = UINT32_MAX;
      TokenId best_out = -1;
      std::uint64_t best_key = 0;
      for (std::size_t i = 0; i + 1 < word.size(); ++i) {
        auto it = merge_rank_.find(pair_key(word[i], word[i + 1]));
        if (it != merge_rank_.end() && it->second.first < best_rank) {
          best_rank = it->second.first;
          best_out = it->second.second;
          best_key = it->first;
        }
      }
      if (best_out < 0) return;
      std::size_t w = 0;
      for (std::size_t i = 0; i < word.size();) {
        if (i + 1 < word.size() && pair_key(word[i], word[i + 1]) == best_key) {
          word[w++] = best_out;
          i += 2;
        } else {
          word[w++] = word[i++];
        }
      }
      word.resize(w);
    }
  }

  void rebuild_indexes();

  SpecialTokens special_tokens_;
  SpecialIds special_ids_;
  std::vector<std::string> id_to_token_;
  std::vector<bool> is_special_;
  std::unordered_map<std::string, TokenId> token_to_id_;  // non-special symbols only
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, TokenId>> merge_rank_;
  std::array<TokenId, 256> byte_ids_{};
  std::vector<std::string> id_bytes_;
};

inline void ByteBpeModel::rebuild_indexes() {
  const auto& symbols = bpe_detail::byte_symbols();
  std::unordered_map<std::string, unsigned char> symbol_byte;
  for (std::size_t b = 0; b < 256; ++b) symbol_byte.emplace(symbols[b], static_cast<unsigned char>(b));

  token_to_id_.clear();
  for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
    if (is_special_[id]) continue;
    if (!token_to_id_.emplace(id_to_token_[id], static_cast<TokenId>(id)).second) {
      throw FormatError("duplicate token '" + id_to_token_[id] + "' at id " + std::to_string(id));
    }
  }
  for (std::size_t b = 0; b < 256; ++b) {
    auto it = token_to_id_.find(symbols[b]);
    if (it == token_to_id_.end()) throw FormatError("vocabulary lacks byte symbol for byte " + std::to_string(b));
    byte_ids_[b] = it->second;
  }

  // Bytes of every token, by walking its UTF-8 surrogate symbols.
  id_bytes_.assign(id_to_token_.size(), {});
  for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
    const std::string& tok = id_to_token_[id];
    if (is_special_[id]) {
      id_bytes_[id] = tok;
      continue;
    }
    std::string bytes;
    for (std::size_t i = 0; i < tok.size();) {
      const unsigned char lead = static_cast<unsigned char>(tok[i]);
      const std::size_t len = lead < 0x80 ? 1 : (lead >> 5) == 0x6 ? 2 : (lead >> 4) == 0xE ? 3 : 4;
      auto it = symbol_byte.find(tok.substr(i, len));
      if (it == symbol_byte.end()) {
        throw FormatError("token '" + tok + "' (id " + std::to_string(id) + ") is not made of byte symbols");
      }
      bytes.push_back(static_cast<char>(it->second));
      i += len;
    }
    id_bytes_[id] = std::move(bytes);
  }

  merge_rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& [l, rr] = merges_[r];
    auto li = token_to_id_.find(l), ri = token_to_id_.find(rr), oi = token_to_id_.find(l + rr);
    if (li == token_to_id_.end() || ri == token_to_id_.end() || oi == token_to_id_.end()) {
      throw FormatError("merge " + std::to_string(r + 1) + " '" + l + " " + rr + "' references unknown symbols");
    }
    merge_rank_.emplace(pair_key(li->second, ri->second), std::make_pair(static_cast<std::uint32_t>(r), oi->second));
  }
}

inline ByteBpeModel ByteBpeModel::from_parts(std::vector<std::string> tokens, std::vector<bool> special,
                                             std::vector<Merge> merges, const SpecialTokens& specials) {
  ByteBpeModel m;
  m.special_tokens_ = specials;
  m.id_to_token_ = std::move(tokens);
  m.is_special_ = std::move(special);
  m.merges_ = std::move(merges);
  const auto names = specials.ordered();
  std::array<TokenId, 5> ids{-1, -1, -1, -1, -1};
  for (std::size_t id = 0; id < m.id_to_token_.size(); ++id) {
    if (!m.is_special_[id]) continue;
    for (std::size_t k = 0; k < 5; ++k) {
      if (m.id_to_token_[id] == names[k]) ids[k] = static_cast<TokenId>(id);
    }
  }
  for (std::size_t k = 0; k < 5; ++k) {
    if (ids[k] < 0) throw FormatError("special token '" + names[k] + "' missing from vocabulary");
  }
  m.special_ids_ = {ids[0], ids[1], ids[2], ids[3], ids[4]};
  m.rebuild_indexes();
  return m;
}

inline ByteBpeModel ByteBpeModel::load(const std::filesystem::path& dir) {
  std::ifstream vocab(dir / "vocab.jsonl", std::ios::binary);
  if (!vocab) throw FormatError("cannot open " + (dir / "vocab.jsonl").string());
  std::vector<std::string> tokens;
  std::vector<bool> special;
  SpecialTokens specials;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(vocab, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto where = [&] { return (dir / "vocab.jsonl").string() + ":" + std::to_string(line_no) + ": "; };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where() + "invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("token") || !j["id"].is_number_integer() ||
        !j["token"].is_string()) {
      throw FormatError(where() + "expected {\"id\": int, \"token\": str}");
    }
    if (j["id"].get<std::int64_t>() != static_cast<std::int64_t>(tokens.size())) {
      throw FormatError(where() + "ids must be dense and ascending, expected " + std::to_string(tokens.size()));
    }
    tokens.push_back(j["token"].get<std::string>());
    const bool is_sp = j.contains("special");
    special.push_back(is_sp);
    if (is_sp) {
      const std::string role = j["special"].get<std::string>();
      std::string* slot = role == "begin"     ? &specials.begin
                          : role == "pad"     ? &specials.pad
                          : role == "end"     ? &specials.end
                          : role == "unknown" ? &specials.unknown
                          : role == "mask"    ? &specials.mask
                                              : nullptr;
      if (!slot) throw FormatError(where() + "unknown special role '" + role + "'");
      *slot = tokens.back();
    }
  }

  std::ifstream mf(dir / "merges.txt", std::ios::binary);
  if (!mf) throw FormatError("cannot open " + (dir / "merges.txt").string());
  std::vector<Merge> merges;
  line_no = 0;
  while (std::getline(mf, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("#version", 0) == 0) continue;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() || line.find(' ', sp + 1) != std::string::npos) {
      throw FormatError((dir / "merges.txt").string() + ":" + std::to_string(line_no) +
                        ": expected '<left> <right>'");
    }
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return from_parts(std::move(tokens), std::move(special), std::move(merges), specials);
}

// Greedy BPE trainer. Feed documents with add_text(), then train().
// The globally most frequent adjacent pair is merged each round; equal
// counts are resolved by the lexicographically smallest (left, right)
// symbol pair.
class BpeTrainer {
 public:
  explicit BpeTrainer(SpecialTokens specials = {}) : specials_(std::move(specials)) {}

  void add_text(std::string_view text) {
    for (std::string_view piece : pretokenize(text)) ++word_counts_[std::string(piece)];
    total_bytes_ += text.size();
  }

  std::size_t bytes_seen() const { return total_bytes_; }

  ByteBpeModel train(std::size_t vocab_size) const {
    constexpr std::size_t kSpecials = 5;
    if (total_bytes_ == 0) throw UsageError("cannot train a tokenizer on an empty corpus");
    if (vocab_size <= 256 + kSpecials) {
      throw UsageError("vocab_size must exceed " + std::to_string(256 + kSpecials));
    }

    std::vector<std::string> tokens;
    std::vector<bool> special;
    for (const auto& s : specials_.ordered()) {
      tokens.push_back(s);
      special.push_back(true);
    }
    const auto& symbols = bpe_detail::byte_symbols();
    std::unordered_map<std::string, TokenId> ids;
    for (std::size_t b = 0; b < 256; ++b) {
      ids.emplace(symbols[b], static_cast<TokenId>(tokens.size()));
      tokens.push_back(symbols[b]);
      special.push_back(false);
    }

    // Words in sorted order so that every container below is built
    // deterministically.
    std::vector<std::pair<std::string, std::uint64_t>> sorted(word_counts_.begin(), word_counts_.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::vector<TokenId>> words;
    std::vector<std::uint64_t> freq;
    words.reserve(sorted.size());
    for (const auto& [w, c] : sorted) {
      std::vector<TokenId> syms;
      for (unsigned char b : w) syms.push_back(static_cast<TokenId>(kSpecials + b));
      words.push_back(std::move(syms));
      freq.push_back(c);
    }

    std::unordered_map<std::uint64_t, std::int64_t> counts;
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
    for (std::uint32_t w = 0; w < words.size(); ++w) {
      const auto& s = words[w];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const auto k = key(s[i], s[i + 1]);
        counts[k] += static_cast<std::int64_t>(freq[w]);
        auto& list = where[k];
        if (list.empty() || list.back() != w) list.push_back(w);
      }
    }

    // Max-heap on (count, reverse lexicographic pair); stale entries are
    // skipped when popped.
    struct Entry {
      std::int64_t count;
      std::uint64_t pair;
    };
    auto less = [&tokens](const Entry& a, const Entry& b) {
      if (a.count != b.count) return a.count < b.count;
      const auto& al = tokens[static_cast<std::size_t>(a.pair >> 32)];
      const auto& bl = tokens[static_cast<std::size_t>(b.pair >> 32)];
      if (al != bl) return al > bl;
      return tokens[static_cast<std::size_t>(a.pair & 0xffffffffu)] > tokens[static_cast<std::size_t>(b.pair & 0xffffffffu)];
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(less)> heap(less);
    {
      std::vector<std::pair<std::uint64_t, std::int64_t>> init(counts.begin(), counts.end());
      std::sort(init.begin(), init.end());
      for (const auto& [k, c] : init) heap.push({c, k});
    }

    std::vector<ByteBpeModel::Merge> merges;
    std::unordered_map<std::uint64_t, std::int64_t> delta;
    while (tokens.size() < vocab_size && !heap.empty()) {
      const Entry top = heap.top();
      heap.pop();
      auto cit = counts.find(top.pair);
      if (cit == counts.end() || cit->second != top.count) continue;
      if (top.count < 2) break;  // no pair repeats any more

      const TokenId left = static_cast<TokenId>(top.pair >> 32);
      const TokenId right = static_cast<TokenId>(top.pair & 0xffffffffu);
      std::string merged = tokens[static_cast<std::size_t>(left)] + tokens[static_cast<std::size_t>(right)];
      TokenId out;
      if (auto it = ids.find(merged); it != ids.end()) {
        out = it->second;
      } else {
        out = static_cast<TokenId>(tokens.size());
        ids.emplace(merged, out);
        tokens.push_back(merged);
        special.push_back(false);
      }
      merges.emplace_back(tokens[static_cast<std::size_t>(left)], tokens[static_cast<std::size_t>(right)]);

      delta.clear();
      std::vector<std::uint32_t> affected = std::move(where[top.pair]);
      where.erase(top.pair);
      for (std::uint32_t w : affected) {
        auto& s = words[w];
        bool present = false;
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
          if (s[i] == left && s[i + 1] == right) {
            present = true;
            break;
          }
        }
        if (!present) continue;
        const auto f = static_cast<std::int64_t>(freq[w]);
        for (std::size_t i = 0; i + 1 < s.size(); ++i) delta[key(s[i], s[i + 1])] -= f;
        std::size_t o = 0;
        for (std::size_t i = 0; i < s.size();) {
          if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
            s[o++] = out;
            i += 2;
          } else {
            s[o++] = s[i++];
          }
        }
        s.resize(o);
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
          const auto k = key(s[i], s[i + 1]);
          delta[k] += f;
          auto& list = where[k];
          if (list.empty() || list.back() != w) list.push_back(w);
        }
      }
      std::vector<std::pair<std::uint64_t, std::int64_t>> changed(delta.begin(), delta.end());
      std::sort(changed.begin(), changed.end());
      for (const auto& [k, d] : changed) {
        if (d == 0) continue;
        auto& c = counts[k];
        c += d;
        if (c <= 0) {
          counts.erase(k);
        } else {
          heap.push({c, k});
        }
      }
    }
    return ByteBpeModel::from_parts(std::move(tokens), std::move(special), std::move(merges), specials_);
  }

 private:
  static std::uint64_t key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  SpecialTokens specials_;
  std::unordered_map<std::string, std::uint64_t> word_counts_;
  std::size_t total_bytes_ = 0;
};

// Convenience wrapper over BpeTrainer for an in-memory corpus.
inline ByteBpeModel train_tokenizer(std::span<const std::string> corpus, std::size_t vocab_size,
                                    const SpecialTokens& specials = {}) {
  BpeTrainer trainer(specials);
  for (const auto& doc : corpus) trainer.add_text(doc);
  return trainer.train(vocab_size);
}

// Number of Unicode code points in a UTF-8 string (continuation bytes are
// not counted).
inline std::size_t count_code_points(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

}  // namespace blf
