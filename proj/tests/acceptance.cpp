// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,6,10] [--workdir DIR]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "attention_oracle.hpp"
#include "beam_oracle.hpp"
#include "blf/cli/cli.hpp"
#include "gradcheck.hpp"
#include "rouge_oracle.hpp"
#include "synthetic.hpp"

using namespace blf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work;

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

int run_cli(std::vector<std::string> args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run_cli(args, o, e);
  if (out) *out = o.str();
  if (code != 0) std::cerr << "  [cli " << args[0] << " exited " << code << "] " << e.str();
  return code;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = io::read_file(e.path());
  return m;
}

fs::path fresh(const std::string& name) {
  auto d = g_work / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---- 1: sliding-window attention vs dense masked oracle ----

Outcome criterion1() {
  Rng rng(1, "acceptance-attention");
  double worst = 0;
  for (int c = 0; c < 200; ++c) {
    const std::size_t L = 1 + rng.below(64);
    const std::size_t window = std::size_t{2} << rng.below(3);
    const std::size_t heads = 1 + rng.below(3);
    const std::size_t batch = 1 + rng.below(2);
    const double p_global = 0.2 * rng.uniform(), p_pad = 0.3 * rng.uniform();
    worst = std::max(worst, attn_oracle::random_equivalence_case<float>(rng, L, window, heads, batch, p_global, p_pad));
  }
  return {worst <= 1e-5, "200 cases, max abs diff " + fmt(worst)};
}

// ---- 2: finite-difference gradient checks ----

Outcome criterion2() {
  using blf::testing::grad_check;
  using blf::testing::probe;
  Rng rng(2, "acceptance-grad");
  auto param = [&](const std::string& n, Shape s, double sd = 1.0) {
    return Parameter<double>(n, blf::testing::random_tensor(std::move(s), rng, sd));
  };
  std::vector<std::pair<std::string, blf::testing::GradCheckResult>> results;
  auto a = param("a", {3, 4}), b = param("b", {3, 4}), bias = param("bias", {4});
  results.emplace_back("add", grad_check({a, b}, [&] { return probe(add<double>(a, b)); }));
  results.emplace_back("sub", grad_check({a, b}, [&] { return probe(sub<double>(a, b)); }));
  results.emplace_back("mul", grad_check({a, b}, [&] { return probe(mul<double>(a, b)); }));
  results.emplace_back("scale", grad_check({a}, [&] { return probe(scale<double>(a, 0.7)); }));
  results.emplace_back("add_bias", grad_check({a, bias}, [&] { return probe(add_bias<double>(a, bias)); }));
  auto m1 = param("m1", {3, 5}), m2 = param("m2", {5, 4}), m3 = param("m3", {6, 5});
  results.emplace_back("matmul", grad_check({m1, m2}, [&] { return probe(matmul<double>(m1, m2)); }));
  results.emplace_back("matmul_bt", grad_check({m1, m3}, [&] { return probe(matmul_bt<double>(m1, m3)); }));
  auto x = param("x", {4, 6}, 2.0);
  results.emplace_back("gelu", grad_check({x}, [&] { return probe(gelu<double>(x)); }));
  results.emplace_back("tanh", grad_check({x}, [&] { return probe(blf::tanh<double>(x)); }));
  auto x3 = param("x3", {2, 3, 4}, 2.0);
  for (std::size_t axis = 0; axis < 3; ++axis)
    results.emplace_back("softmax/" + std::to_string(axis), grad_check({x3}, [&] { return probe(softmax<double>(x3, axis)); }));
  auto g = param("gain", {6}), bb = param("beta", {6});
  results.emplace_back("layer_norm", grad_check({x, g, bb}, [&] { return probe(layer_norm<double>(x, g, bb, 1e-5)); }));
  results.emplace_back("sum", grad_check({x}, [&] { return sum<double>(mul<double>(x, x)); }));
  results.emplace_back("mean", grad_check({x}, [&] { return mean<double>(mul<double>(x, x)); }));
  results.emplace_back("reshape", grad_check({x}, [&] { return probe(reshape<double>(x, Shape{3, 8})); }));
  auto table = param("table", {6, 3});
  const std::vector<TokenId> ids{0, 5, 5, 2};
  const std::vector<std::size_t> rows{3, 1, 3};
  results.emplace_back("embedding", grad_check({table}, [&] { return probe(embedding<double>(table, ids)); }));
  results.emplace_back("gather_rows", grad_check({table}, [&] { return probe(gather_rows<double>(table, rows)); }));
  results.emplace_back("dropout", grad_check({x}, [&] {
                         Rng fixed(77);
                         return probe(dropout<double>(x, 0.3, fixed));
                       }));
  auto logits = param("logits", {5, 6}, 2.0);
  const std::vector<TokenId> t{1, kIgnoreLabel, 5, 0, 2};
  results.emplace_back("cross_entropy", grad_check({logits}, [&] { return cross_entropy<double>(logits, t); }));
  std::vector<double> y(30);
  for (auto& v : y) v = rng.bernoulli(0.5);
  std::vector<std::uint8_t> ignore(30, 0);
  ignore[3] = ignore[17] = 1;
  results.emplace_back("bce_with_logits",
                       grad_check({logits}, [&] { return binary_cross_entropy_with_logits<double>(logits, y, ignore); }));
  {
    const std::size_t L = 9, H = 4;
    std::vector<TokenRole> roles(L, TokenRole::local);
    roles[0] = TokenRole::global, roles[8] = TokenRole::padding;
    auto mk = [&](const char* n) { return param(n, {L, H}); };
    auto q = mk("q"), k = mk("k"), v = mk("v"), gq = mk("gq"), gk = mk("gk"), gv = mk("gv");
    results.emplace_back("sliding_window_attention", grad_check({q, k, v, gq, gk, gv}, [&] {
                           GlobalProjections<double> gp{gq, gk, gv};
                           return probe(sliding_window_attention<double>(q, k, v, {1, L, 2}, 4, roles, &gp));
                         }));
    std::vector<std::uint8_t> valid(L, 1);
    valid[7] = 0;
    results.emplace_back("masked_attention", grad_check({q, k, v}, [&] {
                           return probe(masked_attention<double>(q, k, v, 1, 2, L, L, valid, true));
                         }));
  }
  {
    EncoderConfig c{7, 4, 2, 2, 6, 2, 6, 0.0};
    Rng init(8);
    Encoder<double> enc(c, init);
    for (auto& p : enc.parameters()) {
      auto pp = p;
      if (pp.value().rank() == 2)
        for (auto& v : pp.value_mut().data()) v = init.normal(0.0, 0.5);
    }
    const std::vector<TokenId> eids{1, 2, 3, 4, 5, 6, 0, 1, 2, 3, 0, 0};
    const auto roles = make_roles(eids, 2, 0, true);
    results.emplace_back("encoder(2 layers)", grad_check(enc.parameters(), [&] { return mean(enc.forward(eids, 2, roles)); }));
  }
  double worst = 0;
  std::string where;
  for (const auto& [name, r] : results) {
    if (r.checked == 0) return {false, name + " checked no entries"};
    if (r.max_rel_error > worst) worst = r.max_rel_error, where = name + " " + r.worst;
  }
  return {worst <= 1e-3, std::to_string(results.size()) + " checks, max rel error " + fmt(worst) +
                             (where.empty() ? "" : " (" + where.substr(0, where.find(' ')) + ")")};
}

// ---- 3: parameter-count anchors ----

Outcome criterion3() {
  const double small = static_cast<double>(count_parameters(EncoderConfig::preset("small")));
  const double base = static_cast<double>(count_parameters(EncoderConfig::preset("base")));
  // token 4x2 + position 4x2; per layer 2 norms 8, q/k/v/o 24, global q/k/v 18,
  // ffn 12; final norm 4.
  const EncoderConfig micro{4, 2, 1, 1, 2, 2, 4, 0.0};
  const bool micro_ok = count_parameters(micro) == 16 + 62 + 4;
  const bool ok = std::abs(small - 29e6) <= 0.05 * 29e6 && std::abs(base - 159e6) <= 0.05 * 159e6 && micro_ok;
  return {ok, "small " + fmt(small / 1e6) + "M, base " + fmt(base / 1e6) + "M, micro " +
                  std::to_string(count_parameters(micro)) + "/82"};
}

// ---- 4: RTD batch statistics ----

Outcome criterion4() {
  Rng rng(4, "acceptance-mask");
  std::vector<TokenId> ids(20000);
  for (auto& t : ids) t = static_cast<TokenId>(5 + rng.below(200));
  const auto m = mask_tokens(ids, 0.25, rng);
  const double frac = static_cast<double>(std::count(m.masked_positions.begin(), m.masked_positions.end(), 1)) / 20000.0;
  bool ok = frac >= 0.24 && frac <= 0.26;

  std::size_t violations = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    RtdConfig cfg;
    cfg.discriminator = EncoderConfig{40, 16, 1, 2, 32, 4, 16, 0.0};
    cfg.depth_divisor = 1;
    cfg.batch_size = 2;
    cfg.seed = seed;
    cfg.optimizer = AdamWConfig{{1e-3, 5, 50}};
    PretrainState<float> st(cfg);
    Rng r(seed, "ids");
    std::vector<TokenId> b(32);
    for (auto& t : b) t = r.bernoulli(0.1) ? 1 : static_cast<TokenId>(5 + r.below(35));
    b[3] = 0, b[17] = 2;
    RtdBatch batch;
    const auto res = pretrain_step(st, b, 2, &batch);
    std::size_t replaced = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const bool masked = batch.masked_positions[i];
      if (!masked && (batch.corrupted_ids[i] != b[i] || batch.generator_input[i] != b[i] || batch.disc_labels[i])) ++violations;
      if (masked && (batch.generator_input[i] != 4 || is_special_id(b[i], {}))) ++violations;
      if (batch.disc_labels[i] != (masked && batch.corrupted_ids[i] != b[i])) ++violations;
      if (batch.padding_mask[i] != (b[i] == 1)) ++violations;
      replaced += batch.disc_labels[i];
    }
    if (replaced != res.replaced || batch.original_ids != b) ++violations;
  }
  ok = ok && violations == 0;
  return {ok, "masked fraction " + fmt(frac) + " over 20000 positions; " + std::to_string(violations) +
                  " invariant violations over 100 seeds"};
}

// ---- 5: loss composition ----

Outcome criterion5() {
  Rng rng(5, "acceptance-loss");
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double gsum = rng.uniform() * 20, dsum = rng.uniform() * 2;
    const auto total = rtd_loss(constant(Tensor<double>::scalar(gsum)), constant(Tensor<double>::scalar(dsum))).item();
    worst = std::max(worst, std::abs(total - (gsum + 50 * dsum)) / std::max(1.0, std::abs(gsum + 50 * dsum)));
  }
  return {worst <= 1e-12, "1000 random pairs, max rel deviation " + fmt(worst)};
}

// ---- 6: training dynamics (tiny preset, 500 steps) ----

struct TinyRun {
  fs::path dir, tok, data, pre;
  std::vector<nlohmann::json> metrics;
};

const TinyRun& tiny_pretrain() {
  static const TinyRun run = [] {
    TinyRun r;
    r.dir = fresh("tiny");
    r.tok = r.dir / "tok";
    r.data = r.dir / "data";
    r.pre = r.dir / "pretrain";
    synth::write_corpus(r.dir / "corpus.jsonl", 6, 1'000'000);
    if (run_cli({"train-tokenizer", "--input", (r.dir / "corpus.jsonl").string(), "--out", r.tok.string(),
                 "--vocab-size", "1000"}) ||
        run_cli({"prepare-data", "--input", (r.dir / "corpus.jsonl").string(), "--tokenizer", r.tok.string(), "--out",
                 r.data.string(), "--seq-len", "128", "--validation-size", "100", "--seed", "6"}) ||
        run_cli({"pretrain", "--data", r.data.string(), "--tokenizer", r.tok.string(), "--out", r.pre.string(),
                 "--preset", "tiny", "--steps", "500", "--batch-size", "8", "--lr", "1e-3", "--warmup-steps", "50",
                 "--total-steps", "500", "--checkpoint-every", "500", "--seed", "6"})) {
      return r;
    }
    std::istringstream in(io::read_file(r.pre / "metrics.jsonl"));
    std::string line;
    while (std::getline(in, line)) r.metrics.push_back(nlohmann::json::parse(line));
    return r;
  }();
  return run;
}

Outcome criterion6() {
  const auto& r = tiny_pretrain();
  if (r.metrics.size() != 500) return {false, "pretraining produced " + std::to_string(r.metrics.size()) + " steps"};
  auto mean_of = [&](std::size_t from, std::size_t to, const char* key) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += r.metrics[i][key].get<double>();
    return s / static_cast<double>(to - from);
  };
  const double early = mean_of(9, 60, "total"), late = mean_of(450, 500, "total");
  // Over the last 50 steps: discriminator accuracy against always answering
  // "original", and recall on the replaced positions.
  double acc = 0, baseline = 0, replaced = 0, caught = 0;
  for (std::size_t i = 450; i < 500; ++i) {
    const auto& m = r.metrics[i];
    const double tokens = m["tokens"].get<double>();
    acc += m["disc_accuracy"].get<double>() * tokens;
    baseline += tokens - m["replaced"].get<double>();
    replaced += m["replaced"].get<double>();
    caught += m["replaced_correct"].get<double>();
    (void)tokens;
  }
  double tokens = 0;
  for (std::size_t i = 450; i < 500; ++i) tokens += r.metrics[i]["tokens"].get<double>();
  acc /= tokens, baseline /= tokens;
  const bool a = late <= 0.8 * early, b = acc > baseline;
  return {a && b, "(a) loss steps 10-60 " + fmt(early) + " -> last 50 " + fmt(late) + " (ratio " + fmt(late / early, 3) +
                      "); (b) disc accuracy " + fmt(acc) + " vs all-original " + fmt(baseline) + ", replaced recall " +
                      fmt(replaced > 0 ? caught / replaced : 0.0, 3)};
}

// ---- 7: ROUGE oracle equivalence ----

Outcome criterion7() {
  Rng rng(7, "acceptance-rouge");
  std::size_t mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    const auto c = oracle::random_tokens(rng, 30, 2 + rng.below(7)), t = oracle::random_tokens(rng, 30, 2 + rng.below(7));
    for (std::size_t n : {1, 2}) {
      const auto got = rouge_n_tokens(c, t, n);
      const auto want = oracle::rouge_n(c, t, n);
      mismatches += got.precision != want.p || got.recall != want.r || got.f1 != want.f;
    }
  }
  for (int i = 0; i < 100; ++i) {
    const auto c = oracle::random_tokens(rng, 30, 2 + rng.below(7)), t = oracle::random_tokens(rng, 30, 2 + rng.below(7));
    const auto got = rouge_l_tokens(c, t);
    const auto want = oracle::prf(static_cast<double>(oracle::lcs_memo(c, t)), static_cast<double>(c.size()),
                                  static_cast<double>(t.size()));
    mismatches += got.precision != want.p || got.recall != want.r || got.f1 != want.f;
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t v = 2 + rng.below(4);
    const auto c = oracle::random_sentences(rng, 3, 8, v), t = oracle::random_sentences(rng, 3, 8, v);
    const auto got = rouge_lsum(oracle::join(c), oracle::join(t));
    const auto want = oracle::rouge_lsum(c, t);
    mismatches += got.precision != want.p || got.recall != want.r || got.f1 != want.f;
  }
  return {mismatches == 0, "100 pairs each for ROUGE-1/2/L/Lsum, " + std::to_string(mismatches) + " mismatches"};
}

// ---- 8: beam search ----

Outcome criterion8() {
  using beam_oracle::ToyModel;
  std::size_t greedy_bad = 0, exhaustive_bad = 0, repeat_bad = 0, exhaustive_cases = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ToyModel m{5000 + seed, 6 + seed % 15, 1.5};
    GenerationParams p;
    p.num_beams = 1, p.max_target_length = 14, p.no_repeat_ngram_size = 0;
    const auto b = beam_search(m, 0, 2, p), g = greedy_search(m, 0, 2, p);
    greedy_bad += b.tokens != g.tokens;
  }
  for (double scale : {0.3, 1.0, 3.0}) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      ToyModel m{7000 + seed, 3, scale};
      GenerationParams p;
      p.num_beams = 4, p.max_target_length = 5;
      p.no_repeat_ngram_size = seed % 2 ? 3 : 0;
      ++exhaustive_cases;
      exhaustive_bad += beam_search(m, 0, 0, p).tokens != beam_oracle::exhaustive(m, 0, 0, p).tokens;
    }
  }
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ToyModel m{9000 + seed, 4 + seed % 3, 4.0};
    GenerationParams p;
    p.num_beams = 1 + seed % 4, p.max_target_length = 30, p.no_repeat_ngram_size = 3;
    const auto h = beam_search(m, 0, 3, p);
    std::vector<TokenId> seq{0};
    seq.insert(seq.end(), h.tokens.begin(), h.tokens.end());
    repeat_bad += has_repeated_ngram(seq, 3);
  }
  return {greedy_bad == 0 && exhaustive_bad == 0 && repeat_bad == 0,
          "(a) beams=1 vs greedy: " + std::to_string(greedy_bad) + "/50 differ; (b) exhaustive: " +
              std::to_string(exhaustive_bad) + "/" + std::to_string(exhaustive_cases) + " differ; (c) repeated trigrams: " +
              std::to_string(repeat_bad) + "/200"};
}

// ---- 9: conservation, round trip, CLI determinism ----

Outcome criterion9() {
  const auto d = fresh("c9");
  std::string detail;
  bool ok = true;
  // Conservation on 10K documents, recounted independently.
  synth::write_corpus(d / "docs.jsonl", 9, 0, 10000);
  if (run_cli({"train-tokenizer", "--input", (d / "docs.jsonl").string(), "--out", (d / "tok").string(), "--vocab-size", "600"}) ||
      run_cli({"prepare-data", "--input", (d / "docs.jsonl").string(), "--tokenizer", (d / "tok").string(), "--out",
               (d / "data").string(), "--seq-len", "256", "--validation-size", "10", "--workers", "4"})) {
    return {false, "pipeline commands failed"};
  }
  const auto man = nlohmann::json::parse(io::read_file(d / "data" / "manifest.json"));
  const auto tok = ByteBpeModel::load(d / "tok");
  std::size_t stream = 0, chunks = 0, in_batch = 0, batch_stream = 0, docs = 0;
  JsonlDocumentReader reader(d / "docs.jsonl");
  while (auto rec = reader.next()) {
    ++docs;
    batch_stream += tok.encode(rec->text).size() + 1;
    if (++in_batch == 1000) chunks += batch_stream / 256, stream += batch_stream, batch_stream = 0, in_batch = 0;
  }
  chunks += batch_stream / 256, stream += batch_stream;
  const auto tr = read_chunk_file(d / "data" / "train.chunks"), va = read_chunk_file(d / "data" / "validation.chunks");
  const bool conserved = man["conservation"].get<bool>() && man["stream_tokens"] == stream && man["chunks"] == chunks &&
                         man["emitted_tokens"].get<std::size_t>() + man["dropped_tokens"].get<std::size_t>() == stream &&
                         (tr.size() + va.size()) * 256 == man["emitted_tokens"].get<std::size_t>() && docs == 10000;
  ok &= conserved;
  detail += std::string("conservation ") + (conserved ? "holds" : "FAILS") + " (" + std::to_string(docs) + " docs, " +
            std::to_string(stream) + " tokens, " + std::to_string(chunks) + " chunks)";

  // Round trip on random byte strings.
  Rng rng(9, "acceptance-bytes");
  std::size_t lossy = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string s(rng.below(200), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    lossy += tok.decode(tok.encode(s)) != s;
  }
  ok &= lossy == 0;
  detail += "; round trip " + std::to_string(1000 - lossy) + "/1000 lossless";

  // Every command twice, outputs compared byte for byte.
  const auto& t = tiny_pretrain();
  const auto texts = synth::copy_texts(19, 10, 3, 6, 8);
  synth::write_pairs(d / "train.jsonl", {texts.begin(), texts.begin() + 6}, {texts.begin(), texts.begin() + 6}, "tr");
  synth::write_pairs(d / "val.jsonl", {texts.begin() + 6, texts.end()}, {texts.begin() + 6, texts.end()}, "va");
  const std::string small_corpus = (d / "small.jsonl").string();
  synth::write_corpus(small_corpus, 10, 20000);
  struct Cmd {
    std::string name;
    std::vector<std::string> args;
    fs::path output;  // file or directory compared after each run
  };
  const auto w = d / "det";
  const std::vector<Cmd> cmds{
      {"train-tokenizer", {"train-tokenizer", "--input", small_corpus, "--out", (w / "tok").string(), "--vocab-size", "300"}, w / "tok"},
      {"prepare-data", {"prepare-data", "--input", small_corpus, "--tokenizer", t.tok.string(), "--out", (w / "data").string(),
                        "--seq-len", "64", "--validation-size", "3", "--seed", "2"}, w / "data"},
      {"pretrain", {"pretrain", "--data", t.data.string(), "--tokenizer", t.tok.string(), "--out", (w / "pre").string(),
                    "--preset", "tiny", "--steps", "3", "--batch-size", "2", "--dropout", "0.1", "--seed", "4"}, w / "pre"},
      {"finetune", {"finetune", "--train", (d / "train.jsonl").string(), "--validation", (d / "val.jsonl").string(),
                    "--tokenizer", t.tok.string(), "--encoder", t.pre.string(), "--out", (w / "ft").string(),
                    "--decoder-preset", "tiny", "--max-input-length", "32", "--max-target-length", "16",
                    "--batch-size", "2", "--lr", "1e-3", "--max-epochs", "2", "--dropout", "0.1", "--seed", "4"}, w / "ft"},
      {"generate", {"generate", "--model", (w / "ft").string(), "--tokenizer", t.tok.string(), "--input",
                    (d / "val.jsonl").string(), "--output", (w / "gen" / "pred.jsonl").string(), "--max-input-length",
                    "32", "--max-target-length", "10", "--workers", "2"}, w / "gen"},
      {"rouge", {"rouge", "--predictions", (w / "gen" / "pred.jsonl").string(), "--references",
                 (d / "val.jsonl").string(), "--out", (w / "rouge" / "report.json").string()}, w / "rouge"},
      {"inspect", {"inspect", "--path", (w / "ft").string()}, {}},
  };
  fs::create_directories(w);
  std::vector<std::string> differing;
  for (const auto& c : cmds) {
    std::string out1, out2;
    std::map<std::string, std::string> s1, s2;
    if (!c.output.empty()) fs::remove_all(c.output);
    const int r1 = run_cli(c.args, &out1);
    if (!c.output.empty()) s1 = snapshot(c.output), fs::remove_all(c.output);
    const int r2 = run_cli(c.args, &out2);
    if (!c.output.empty()) s2 = snapshot(c.output);
    if (r1 != 0 || r2 != 0 || out1 != out2 || s1 != s2) differing.push_back(c.name);
  }
  ok &= differing.empty();
  detail += "; CLI reruns: " + (differing.empty() ? std::string("7/7 byte-identical") : "differ for");
  for (const auto& n : differing) detail += " " + n;
  return {ok, detail};
}

// ---- 10: copy-task fine-tuning end to end ----

Outcome criterion10() {
  const auto& t = tiny_pretrain();
  if (t.metrics.empty()) return {false, "tiny pretraining unavailable"};
  const auto d = fresh("c10");
  // 50 training pairs, 10 for early stopping, 10 held out; summary == first sentence.
  const auto p = synth::first_sentence_pairs(10, 70);
  auto part = [&](std::size_t a, std::size_t b) {
    return std::pair{std::vector<std::string>(p.texts.begin() + a, p.texts.begin() + b),
                     std::vector<std::string>(p.summaries.begin() + a, p.summaries.begin() + b)};
  };
  const auto [train_t, train_s] = part(0, 50);
  const auto [val_t, val_s] = part(50, 60);
  const auto [test_t, test_s] = part(60, 70);
  synth::write_pairs(d / "train.jsonl", train_t, train_s, "train");
  synth::write_pairs(d / "val.jsonl", val_t, val_s, "val");
  synth::write_pairs(d / "test.jsonl", test_t, test_s, "test");
  std::string log;
  if (run_cli({"finetune", "--train", (d / "train.jsonl").string(), "--validation", (d / "val.jsonl").string(),
               "--tokenizer", t.tok.string(), "--encoder", t.pre.string(), "--out", (d / "ft").string(),
               "--decoder-preset", "tiny", "--max-input-length", "64", "--max-target-length", "32", "--batch-size", "2",
               "--lr", "1e-3", "--warmup-steps", "25", "--max-epochs", "30", "--patience", "30", "--dropout", "0",
               "--seed", "10"},
              &log) ||
      run_cli({"generate", "--model", (d / "ft").string(), "--tokenizer", t.tok.string(), "--input",
               (d / "test.jsonl").string(), "--output", (d / "pred.jsonl").string(), "--max-input-length", "64",
               "--max-target-length", "32"}) ||
      run_cli({"rouge", "--predictions", (d / "pred.jsonl").string(), "--references", (d / "test.jsonl").string(),
               "--out", (d / "rouge.json").string()})) {
    return {false, "a pipeline command failed"};
  }
  const auto res = nlohmann::json::parse(io::read_file(d / "ft" / "result.json"));
  const auto rep = nlohmann::json::parse(io::read_file(d / "rouge.json"));
  const double r1 = rep["aggregate"]["rouge1"]["f1"].get<double>();
  return {r1 >= 0.8, "held-out ROUGE-1 F1 " + fmt(r1) + " (ROUGE-L " + fmt(rep["aggregate"]["rougeL"]["f1"].get<double>()) +
                         ") after " + std::to_string(res["epochs"].get<int>()) + " epochs, best epoch " +
                         std::to_string(res["best_epoch"].get<int>())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string workdir = (fs::temp_directory_path() / "blf_acceptance").string();
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--workdir", workdir, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  g_work = workdir;
  fs::create_directories(g_work);

  const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, criterion9, criterion10};
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << " [" << fmt(secs, 3)
              << "s]" << std::endl;
    all &= o.pass;
  }
  return all ? 0 : 1;
}
