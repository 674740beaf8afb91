#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "blf/core/rng.hpp"
#include "blf/tokenizer/bpe.hpp"

using namespace blf;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kBase = 256 + 5;

// Recount-everything reference trainer: every round rescans all words.
std::vector<ByteBpeModel::Merge> brute_force_merges(const std::vector<std::string>& corpus, std::size_t rounds) {
  const auto& sym = bpe_detail::byte_symbols();
  std::map<std::string, int> wc;
  for (const auto& doc : corpus)
    for (auto p : pretokenize(doc)) ++wc[std::string(p)];
  std::vector<std::pair<std::vector<std::string>, int>> words;
  for (const auto& [w, c] : wc) {
    std::vector<std::string> s;
    for (unsigned char b : w) s.push_back(sym[b]);
    words.emplace_back(s, c);
  }
  std::vector<ByteBpeModel::Merge> merges;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const auto& [s, c] : words)
      for (std::size_t i = 0; i + 1 < s.size(); ++i) counts[{s[i], s[i + 1]}] += c;
    std::pair<std::string, std::string> best;
    int best_c = 0;
    for (const auto& [p, c] : counts)  // std::map iterates in lexicographic order
      if (c > best_c) best = p, best_c = c;
    if (best_c < 2) break;
    merges.push_back(best);
    for (auto& [s, c] : words) {
      std::vector<std::string> o;
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          o.push_back(s[i] + s[i + 1]);
          i += 2;
        } else {
          o.push_back(s[i++]);
        }
      }
      s = o;
    }
  }
  return merges;
}

std::string random_bytes(Rng& rng, std::size_t max_len) {
  std::string s(rng.below(max_len + 1), '\0');
  for (auto& c : s) c = static_cast<char>(rng.below(256));
  return s;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("blf_tok_" + name);
  fs::remove_all(p);
  return p;
}

ByteBpeModel small_model() {
  std::vector<std::string> corpus{
      "The court held that the contract was void. The court also held that damages were owed.",
      "Section 12(b) of the Act applies to all contracts entered after 1998.",
      "The defendant appealed; the court of appeals affirmed the judgment."};
  return train_tokenizer(corpus, kBase + 60);
}

}  // namespace

TEST(Pretokenize, PiecesConcatenateToInput) {
  Rng rng(4);
  for (int i = 0; i < 300; ++i) {
    std::string s = random_bytes(rng, 40);
    std::string joined;
    for (auto p : pretokenize(s)) joined += p;
    EXPECT_EQ(joined, s);
  }
  auto p = pretokenize("Hello  world\n\nfoo 42!");
  std::vector<std::string> got(p.begin(), p.end());
  EXPECT_EQ(got, (std::vector<std::string>{"Hello", " ", " world", "\n\n", "foo", " 42", "!"}));
}

TEST(ByteMap, IsABijectionOntoPrintableSymbols) {
  const auto& sym = bpe_detail::byte_symbols();
  std::set<std::string> seen(sym.begin(), sym.end());
  EXPECT_EQ(seen.size(), 256u);
  for (const auto& s : sym) {
    EXPECT_FALSE(s.empty());
    EXPECT_EQ(s.find(' '), std::string::npos);
  }
}

TEST(Train, OnlyPairIsMergedFirst) {
  auto m = train_tokenizer(std::vector<std::string>{"aaaa"}, kBase + 2);
  ASSERT_GE(m.merges().size(), 1u);
  EXPECT_EQ(m.merges()[0], (ByteBpeModel::Merge{"a", "a"}));
  // "aa aa" occurs once, so no second merge happens.
  EXPECT_EQ(m.merges().size(), 1u);
  EXPECT_EQ(m.encode("aaaa"), (std::vector<TokenId>{*m.token_id("aa"), *m.token_id("aa")}));
}

TEST(Train, MergeOrderMatchesBruteForce) {
  std::vector<std::string> corpus{"abab abab"};
  auto m = train_tokenizer(corpus, kBase + 10);
  EXPECT_EQ(m.merges(), brute_force_merges(corpus, 10));

  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> docs;
    for (int d = 0; d < 5; ++d) {
      std::string s;
      for (int w = 0; w < 30; ++w) {
        if (w) s += ' ';
        for (std::uint64_t k = 0, n = 1 + rng.below(6); k < n; ++k) s += static_cast<char>('a' + rng.below(4));
      }
      docs.push_back(s);
    }
    auto model = train_tokenizer(docs, kBase + 40);
    const auto expect = brute_force_merges(docs, model.merges().size());
    ASSERT_EQ(model.merges().size(), expect.size()) << "trial " << trial;
    for (std::size_t i = 0; i < expect.size(); ++i) {
      ASSERT_EQ(model.merges()[i], expect[i]) << "trial " << trial << " merge " << i;
    }
  }
}

TEST(Train, RejectsEmptyCorpusAndTinyBudget) {
  EXPECT_THROW(train_tokenizer(std::vector<std::string>{}, 1000), UsageError);
  EXPECT_THROW(train_tokenizer(std::vector<std::string>{""}, 1000), UsageError);
  EXPECT_THROW(train_tokenizer(std::vector<std::string>{"abc"}, kBase), UsageError);
}

TEST(Train, StopsWhenNoPairRepeats) {
  auto m = train_tokenizer(std::vector<std::string>{"abcdef"}, 1000);
  EXPECT_TRUE(m.merges().empty());
  EXPECT_EQ(m.vocab_size(), kBase);
}

TEST(Train, ReachesFullSixtyFourKVocabulary) {
  // Pseudo-words repeated twice give enough repeating pairs to fill 64K.
  Rng rng(64);
  std::string doc;
  for (int w = 0; w < 120000; ++w) {
    std::string word;
    for (std::uint64_t k = 0, n = 4 + rng.below(8); k < n; ++k) word += static_cast<char>('a' + rng.below(26));
    doc += ' ' + word + ' ' + word;
  }
  BpeTrainer trainer;
  trainer.add_text(doc);
  auto m = trainer.train(64000);
  EXPECT_EQ(m.vocab_size(), 64000u);
}

TEST(Train, Deterministic) {
  std::vector<std::string> corpus{"the cat and the hat", "that hat is the cat's hat"};
  auto a = train_tokenizer(corpus, kBase + 30);
  auto b = train_tokenizer(corpus, kBase + 30);
  EXPECT_EQ(a.merges(), b.merges());
  ASSERT_EQ(a.vocab_size(), b.vocab_size());
  for (TokenId i = 0; i < static_cast<TokenId>(a.vocab_size()); ++i) EXPECT_EQ(a.token(i), b.token(i));
}

TEST(ModelInvariants, DenseIdsMergesInVocabDistinctSpecials) {
  auto m = small_model();
  const auto& sp = m.special_ids();
  std::set<TokenId> specials{sp.begin, sp.pad, sp.end, sp.unknown, sp.mask};
  EXPECT_EQ(specials.size(), 5u);
  for (TokenId id : specials) EXPECT_TRUE(m.is_special(id));
  for (const auto& [l, r] : m.merges()) {
    auto out = m.token_id(l + r);
    ASSERT_TRUE(out.has_value());
    EXPECT_FALSE(m.is_special(*out));
  }
  // Encoding never produces a special id.
  for (TokenId id : m.encode("<s> <mask> </s> plain text")) EXPECT_FALSE(m.is_special(id));
}

TEST(Codec, EmptyStrings) {
  auto m = small_model();
  EXPECT_TRUE(m.encode("").empty());
  EXPECT_EQ(m.decode(std::vector<TokenId>{}), "");
}

TEST(Codec, LosslessOnUnicodeAndNul) {
  auto m = small_model();
  const std::string s = std::string("caf\xc3\xa9 \xf0\x9f\x98\x80 emoji") + '\0' + "nul\ttab\r\n  end";
  EXPECT_EQ(m.decode(m.encode(s)), s);
}

TEST(Codec, LosslessOnThousandRandomByteStrings) {
  auto m = small_model();
  Rng rng(1000);
  for (int i = 0; i < 1000; ++i) {
    const std::string s = random_bytes(rng, 64);
    ASSERT_EQ(m.decode(m.encode(s)), s) << "case " << i;
  }
}

TEST(Codec, DecodeThenEncodeOnRandomNonSpecialIds) {
  // A re-encoding may segment differently, but it must spell the same bytes.
  auto m = small_model();
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    std::vector<TokenId> ids;
    for (int k = 0; k < 10; ++k) ids.push_back(static_cast<TokenId>(5 + rng.below(m.vocab_size() - 5)));
    const std::string text = m.decode(ids);
    EXPECT_EQ(m.decode(m.encode(text)), text);
  }
}

TEST(Codec, SpecialIdsRenderAsMarkers) {
  auto m = small_model();
  const auto& sp = m.special_ids();
  EXPECT_EQ(m.decode(std::vector<TokenId>{sp.begin, sp.mask, sp.end}), "<s><mask></s>");
}

TEST(Codec, OutOfRangeIdIsRangeError) {
  auto m = small_model();
  EXPECT_THROW(m.decode(std::vector<TokenId>{static_cast<TokenId>(m.vocab_size())}), RangeError);
  EXPECT_THROW(m.decode(std::vector<TokenId>{-1}), RangeError);
}

TEST(Persistence, SaveLoadIsFunctionallyIdentical) {
  auto m = small_model();
  auto dir = temp_dir("roundtrip");
  m.save(dir);
  auto l = ByteBpeModel::load(dir);
  EXPECT_EQ(l.vocab_size(), m.vocab_size());
  EXPECT_EQ(l.merges(), m.merges());
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const std::string s = random_bytes(rng, 50);
    EXPECT_EQ(l.encode(s), m.encode(s));
  }
  const std::string legal = "The court of appeals affirmed the contract judgment.";
  EXPECT_EQ(l.encode(legal), m.encode(legal));

  // Saving again is byte-identical.
  auto dir2 = temp_dir("roundtrip2");
  l.save(dir2);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  EXPECT_EQ(slurp(dir / "vocab.jsonl"), slurp(dir2 / "vocab.jsonl"));
  EXPECT_EQ(slurp(dir / "merges.txt"), slurp(dir2 / "merges.txt"));
}

TEST(Persistence, MalformedFilesReportLineNumbers) {
  auto m = small_model();
  auto dir = temp_dir("malformed");
  m.save(dir);
  {
    std::ifstream in(dir / "vocab.jsonl");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string content = ss.str();
    // Corrupt the third line.
    std::size_t pos = 0;
    for (int i = 0; i < 2; ++i) pos = content.find('\n', pos) + 1;
    content.insert(pos, "{not json");
    std::ofstream(dir / "vocab.jsonl", std::ios::binary) << content;
  }
  try {
    ByteBpeModel::load(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("vocab.jsonl:3"), std::string::npos) << e.what();
  }

  m.save(dir);
  {
    std::ofstream out(dir / "merges.txt", std::ios::app);
    out << "broken-line-without-space\n";
  }
  try {
    ByteBpeModel::load(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string expect = "merges.txt:" + std::to_string(m.merges().size() + 2);
    EXPECT_NE(std::string(e.what()).find(expect), std::string::npos) << e.what();
  }
}
