#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "blf/rouge/rouge.hpp"
#include "rouge_oracle.hpp"

using namespace blf;

namespace {

void expect_same(const PRF& got, const oracle::Prf& want) {
  EXPECT_EQ(got.precision, want.p);
  EXPECT_EQ(got.recall, want.r);
  EXPECT_EQ(got.f1, want.f);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("blf_rouge_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Porter, ClassicVectors) {
  const std::pair<const char*, const char*> cases[] = {
      {"caresses", "caress"},    {"ponies", "poni"},        {"ties", "ti"},           {"caress", "caress"},
      {"cats", "cat"},           {"feed", "feed"},          {"agreed", "agre"},       {"plastered", "plaster"},
      {"bled", "bled"},          {"motoring", "motor"},     {"sing", "sing"},         {"conflated", "conflat"},
      {"troubled", "troubl"},    {"sized", "size"},         {"hopping", "hop"},       {"tanned", "tan"},
      {"falling", "fall"},       {"hissing", "hiss"},       {"fizzed", "fizz"},       {"failing", "fail"},
      {"filing", "file"},        {"happy", "happi"},        {"sky", "sky"},           {"relational", "relat"},
      {"conditional", "condit"}, {"rational", "ration"},    {"valenci", "valenc"},    {"digitizer", "digit"},
      {"vietnamization", "vietnam"}, {"predication", "predic"}, {"operator", "oper"}, {"feudalism", "feudal"},
      {"decisiveness", "decis"}, {"hopefulness", "hope"},   {"callousness", "callous"}, {"formaliti", "formal"},
      {"sensitiviti", "sensit"}, {"sensibiliti", "sensibl"}, {"triplicate", "triplic"}, {"formative", "form"},
      {"formalize", "formal"},   {"electriciti", "electr"}, {"electrical", "electr"}, {"hopeful", "hope"},
      {"goodness", "good"},      {"revival", "reviv"},      {"allowance", "allow"},   {"inference", "infer"},
      {"airliner", "airlin"},    {"gyroscopic", "gyroscop"}, {"adjustable", "adjust"}, {"defensible", "defens"},
      {"irritant", "irrit"},     {"replacement", "replac"}, {"adjustment", "adjust"}, {"dependent", "depend"},
      {"adoption", "adopt"},     {"homologou", "homolog"},  {"communism", "commun"},  {"activate", "activ"},
      {"angulariti", "angular"}, {"homologous", "homolog"}, {"effective", "effect"},  {"bowdlerize", "bowdler"},
      {"probate", "probat"},     {"rate", "rate"},          {"cease", "ceas"},        {"controll", "control"},
      {"roll", "roll"},          {"generalizations", "gener"}, {"oscillators", "oscil"}};
  PorterStemmer s;
  for (const auto& [in, out] : cases) EXPECT_EQ(s.stem(in), out) << in;
}

TEST(RougeTokenize, Policy) {
  EXPECT_EQ(rouge_tokenize("The CATS, ran-fast!! 42x"), (Tokens{"the", "cat", "ran", "fast", "42x"}));
  EXPECT_EQ(rouge_tokenize("Running dogs", {true, false}), (Tokens{"running", "dogs"}));
  EXPECT_EQ(rouge_tokenize("ABC", {false, false}), (Tokens{}));  // uppercase is not alphanumeric here
  EXPECT_EQ(rouge_tokenize("caf\xc3\xa9 bar"), (Tokens{"caf", "bar"}));
  // Three-letter tokens are never stemmed.
  EXPECT_EQ(rouge_tokenize("ies"), (Tokens{"ies"}));
}

TEST(RougeN, HandCounted) {
  auto u = rouge_n("the cat sat", "the cat ran", 1);
  EXPECT_DOUBLE_EQ(u.precision, 2.0 / 3);
  EXPECT_DOUBLE_EQ(u.recall, 2.0 / 3);
  EXPECT_DOUBLE_EQ(u.f1, 2.0 / 3);
  auto b = rouge_n("the cat sat", "the cat ran", 2);
  EXPECT_DOUBLE_EQ(b.f1, 0.5);
  EXPECT_EQ(rouge_n("alpha beta", "gamma delta", 1).f1, 0.0);
  EXPECT_EQ(rouge_n("", "x y", 1), PRF{});
  EXPECT_EQ(rouge_n("x y", "", 2), PRF{});
  for (std::size_t n = 1; n <= 4; ++n) EXPECT_EQ(rouge_n("w x y z", "w x y z", n).f1, 1.0);
  // Clipping: a repeated candidate token only matches as often as the reference has it.
  auto c = rouge_n("the the the", "the cat", 1);
  EXPECT_DOUBLE_EQ(c.precision, 1.0 / 3);
  EXPECT_DOUBLE_EQ(c.recall, 0.5);
  EXPECT_THROW(rouge_n("a", "a", 0), UsageError);
}

TEST(RougeL, Basics) {
  EXPECT_EQ(rouge_l("a c", "a b c d").precision, 1.0);
  EXPECT_DOUBLE_EQ(rouge_l("e d c b a", "a b c d e").f1, 0.2);
  EXPECT_EQ(rouge_l("", "a").f1, 0.0);
}

TEST(RougeOracle, NgramAndLcsRandomPairs) {
  Rng rng(7, "rouge");
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = oracle::random_tokens(rng, 30, 1 + rng.below(8));
    const auto r = oracle::random_tokens(rng, 30, 1 + rng.below(8));
    expect_same(rouge_n_tokens(c, r, 1), oracle::rouge_n(c, r, 1));
    expect_same(rouge_n_tokens(c, r, 2), oracle::rouge_n(c, r, 2));
    const auto l = oracle::lcs_memo(c, r);
    EXPECT_EQ(lcs_length(c, r), l);
    expect_same(rouge_l_tokens(c, r), oracle::prf(static_cast<double>(l), static_cast<double>(c.size()),
                                                  static_cast<double>(r.size())));
  }
}

TEST(RougeOracle, ShortPairsAgainstSubsetEnumeration) {
  Rng rng(8, "rouge");
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = oracle::random_tokens(rng, 12, 1 + rng.below(5));
    const auto r = oracle::random_tokens(rng, 12, 1 + rng.below(5));
    EXPECT_EQ(lcs_length(c, r), oracle::lcs_exhaustive(c, r));
    // The backtracked indices spell a common subsequence of maximal length.
    const auto idx = lcs_indices(r, c);
    EXPECT_EQ(idx.size(), oracle::lcs_exhaustive(r, c));
    oracle::Tokens s;
    for (auto i : idx) s.push_back(r[i]);
    EXPECT_TRUE(oracle::is_subsequence(s, c));
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  }
}

TEST(RougeOracle, LsumRandomPairs) {
  Rng rng(9, "rouge");
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t v = 2 + rng.below(4);
    const auto c = oracle::random_sentences(rng, 3, 8, v);
    const auto r = oracle::random_sentences(rng, 3, 8, v);
    expect_same(rouge_lsum_sentences(c, r), oracle::rouge_lsum(c, r));
    expect_same(rouge_lsum(oracle::join(c), oracle::join(r)), oracle::rouge_lsum(c, r));
  }
}

TEST(RougeLsum, TwoByTwoConstructed) {
  // Reference sentence 1 takes "a b" from one candidate and "c" from the other.
  const std::string cand = "a b x\nc y", ref = "a b c\nz";
  const auto s = rouge_lsum(cand, ref);
  EXPECT_DOUBLE_EQ(s.recall, 3.0 / 4);
  EXPECT_DOUBLE_EQ(s.precision, 3.0 / 5);
  // Whole-text LCS would be the same here, but not when order is split.
  const auto swapped = rouge_lsum("c y\na b x", ref);
  EXPECT_DOUBLE_EQ(swapped.recall, 3.0 / 4);
  EXPECT_LT(rouge_l("c y\na b x", ref).recall, swapped.recall);
}

TEST(RougeLsum, DegenerateCases) {
  Rng rng(10, "rouge");
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = oracle::random_tokens(rng, 15, 3), r = oracle::random_tokens(rng, 15, 3);
    const std::string cs = oracle::join({c}), rs = oracle::join({r});
    EXPECT_EQ(rouge_lsum(cs, rs), rouge_l(cs, rs));
  }
  EXPECT_EQ(rouge_lsum("b a", "a b"), rouge_l("b a", "a b"));
  EXPECT_EQ(rouge_lsum("one two.\nthree four five.", "one two.\nthree four five.").f1, 1.0);
  EXPECT_EQ(rouge_lsum("", "x").f1, 0.0);
}

TEST(RougeLsum, SentenceSplitFallback) {
  EXPECT_EQ(split_sentences("First one. Second one! Third? yes"),
            (std::vector<std::string>{"First one.", "Second one!", "Third?", "yes"}));
  EXPECT_EQ(split_sentences("v1.2 is out"), (std::vector<std::string>{"v1.2 is out"}));
  EXPECT_EQ(split_sentences("a\n\nb. c"), (std::vector<std::string>{"a", "b. c"}));
}

TEST(RougeProperties, SymmetryAndBounds) {
  Rng rng(11, "rouge");
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = oracle::random_tokens(rng, 20, 4), r = oracle::random_tokens(rng, 20, 4);
    for (const auto& [ab, ba] : {std::pair{rouge_n_tokens(c, r, 1), rouge_n_tokens(r, c, 1)},
                                 std::pair{rouge_n_tokens(c, r, 2), rouge_n_tokens(r, c, 2)},
                                 std::pair{rouge_l_tokens(c, r), rouge_l_tokens(r, c)}}) {
      EXPECT_EQ(ab.precision, ba.recall);
      EXPECT_EQ(ab.recall, ba.precision);
      EXPECT_DOUBLE_EQ(ab.f1, ba.f1);
    }
    const auto s = rouge_all(oracle::join({c}), oracle::join({r}));
    for (const PRF* p : {&s.rouge1, &s.rouge2, &s.rougeL, &s.rougeLsum}) {
      for (double x : {p->precision, p->recall, p->f1}) EXPECT_TRUE(x >= 0 && x <= 1);
      EXPECT_LE(p->f1, std::max(p->precision, p->recall) + 1e-15);
    }
  }
}

TEST(RougeAggregate, Means) {
  RougeScore a, b;
  a.rouge1.f1 = 0.2, b.rouge1.f1 = 0.4;
  EXPECT_DOUBLE_EQ(aggregate({a, b}).rouge1.f1, 0.3);
  EXPECT_EQ(aggregate({a}), a);
  EXPECT_DOUBLE_EQ(aggregate({a, b, a, b}).rouge1.f1, aggregate({a, b}).rouge1.f1);
  EXPECT_THROW(aggregate({}), UsageError);
}

TEST(RougeFiles, PairsById) {
  const auto d = temp_dir("pairs");
  {
    std::ofstream(d / "pred.jsonl") << R"({"id":"b","summary":"the cat ran"})" "\n"
                                    << R"({"id":"a","summary":"hello world"})" "\n"
                                    << R"({"id":"c","error":"boom"})" "\n";
    std::ofstream(d / "ref.jsonl") << R"({"id":"a","text":"t","summary":"hello world"})" "\n"
                                   << R"({"id":"b","text":"t","summary":"the cat sat"})" "\n"
                                   << R"({"id":"c","text":"t","summary":"x"})" "\n";
  }
  const auto rep = score_pairs(read_id_summaries(d / "pred.jsonl"), read_id_summaries(d / "ref.jsonl"), {}, 2);
  ASSERT_EQ(rep.ids, (std::vector<std::string>{"b", "a", "c"}));
  EXPECT_DOUBLE_EQ(rep.scores[0].rouge1.f1, 2.0 / 3);
  EXPECT_EQ(rep.scores[1].rouge1.f1, 1.0);
  EXPECT_EQ(rep.scores[2].rouge1.f1, 0.0);
  EXPECT_DOUBLE_EQ(rep.mean.rouge1.f1, (2.0 / 3 + 1.0) / 3);
  const auto j = report_json(rep, {});
  EXPECT_EQ(j["count"], 3);
  EXPECT_EQ(j["pairs"][1]["id"], "a");

  std::ofstream(d / "ref2.jsonl") << R"({"id":"a","summary":"x"})" "\n" << R"({"id":"z","summary":"y"})" "\n";
  try {
    score_pairs(read_id_summaries(d / "pred.jsonl"), read_id_summaries(d / "ref2.jsonl"));
    FAIL() << "expected a mismatch error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("reference missing for b"), std::string::npos);
    EXPECT_NE(msg.find("reference missing for c"), std::string::npos);
    EXPECT_NE(msg.find("prediction missing for z"), std::string::npos);
  }
}
