#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/io.hpp"
#include "blf/core/ops.hpp"
#include "blf/core/optim.hpp"
#include "blf/core/rng.hpp"
#include "blf/seq2seq/generate.hpp"
#include "blf/seq2seq/model.hpp"
#include "blf/tokenizer/bpe.hpp"

namespace blf {

struct Seq2SeqRecord {
  std::string id;
  std::string text;
  std::string summary;
};

// Reads `{"id"?, "text", "summary"}` lines. With `require_summary` both
// text and summary must be non-empty strings.
inline std::vector<Seq2SeqRecord> read_seq2seq_jsonl(const std::filesystem::path& path, bool require_summary) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open input " + path.string());
  std::vector<Seq2SeqRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fail = [&](const std::string& msg) { return FormatError(path.string() + ":" + std::to_string(line_no) + ": " + msg); };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    Seq2SeqRecord r;
    auto text = j.find("text");
    if (text == j.end() || !text->is_string()) throw fail("missing string field \"text\"");
    r.text = text->get<std::string>();
    if (auto s = j.find("summary"); s != j.end() && s->is_string()) r.summary = s->get<std::string>();
    if (require_summary && (r.text.empty() || r.summary.empty())) throw fail("empty text or summary");
    if (auto id = j.find("id"); id != j.end() && !id->is_null()) {
      r.id = id->is_string() ? id->get<std::string>() : id->dump();
    } else {
      r.id = "line-" + std::to_string(line_no);
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct Seq2SeqExample {
  std::vector<TokenId> input;   // <s> text </s>, truncated
  std::vector<TokenId> labels;  // summary </s>, truncated
};

inline std::vector<TokenId> encode_source(const ByteBpeModel& tok, const std::string& text, std::size_t max_input) {
  const auto& sp = tok.special_ids();
  auto ids = tok.encode(text);
  if (max_input < 3) throw ConfigError("max_input_length must be at least 3");
  if (ids.size() > max_input - 2) ids.resize(max_input - 2);
  ids.insert(ids.begin(), sp.begin);
  ids.push_back(sp.end);
  return ids;
}

inline Seq2SeqExample encode_example(const ByteBpeModel& tok, const Seq2SeqRecord& r, const GenerationParams& p) {
  Seq2SeqExample e;
  e.input = encode_source(tok, r.text, p.max_input_length);
  e.labels = tok.encode(r.summary);
  // The decoder sequence is <s> + labels[:-1], which must fit in
  // max_target_length positions.
  if (e.labels.size() > p.max_target_length - 2) e.labels.resize(p.max_target_length - 2);
  e.labels.push_back(tok.special_ids().end);
  return e;
}

struct Seq2SeqBatch {
  std::size_t batch = 0, src_len = 0, tgt_len = 0;
  std::vector<TokenId> input;      // [batch, src_len], pad-filled
  std::vector<TokenId> dec_input;  // [batch, tgt_len], pad-filled
  std::vector<TokenId> labels;     // [batch, tgt_len], kIgnoreLabel-filled
  std::size_t label_tokens = 0;
};

inline Seq2SeqBatch make_batch(std::span<const Seq2SeqExample> examples, std::span<const std::size_t> idx,
                               const Seq2SeqSpecials& sp) {
  Seq2SeqBatch b;
  b.batch = idx.size();
  for (auto i : idx) {
    b.src_len = std::max(b.src_len, examples[i].input.size());
    b.tgt_len = std::max(b.tgt_len, examples[i].labels.size());
  }
  b.input.assign(b.batch * b.src_len, sp.pad);
  b.dec_input.assign(b.batch * b.tgt_len, sp.pad);
  b.labels.assign(b.batch * b.tgt_len, kIgnoreLabel);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& e = examples[idx[r]];
    std::copy(e.input.begin(), e.input.end(), b.input.begin() + static_cast<std::ptrdiff_t>(r * b.src_len));
    for (std::size_t t = 0; t < e.labels.size(); ++t) {
      b.labels[r * b.tgt_len + t] = e.labels[t];
      b.dec_input[r * b.tgt_len + t] = t == 0 ? sp.begin : e.labels[t - 1];
    }
    b.label_tokens += e.labels.size();
  }
  return b;
}

// Teacher-forced mean token cross-entropy of a batch.
template <typename T>
Var<T> seq2seq_loss(const Seq2SeqModel<T>& m, const Seq2SeqBatch& b, Rng* dropout_rng = nullptr) {
  Var<T> memory = m.encode(b.input, b.batch, dropout_rng);
  std::vector<std::uint8_t> dec_valid(b.labels.size());
  for (std::size_t i = 0; i < dec_valid.size(); ++i) dec_valid[i] = b.labels[i] != kIgnoreLabel;
  Var<T> logits = m.decoder.forward(memory, m.valid_mask(b.input), b.src_len, b.dec_input, dec_valid, b.batch, dropout_rng);
  return cross_entropy(logits, std::span<const TokenId>(b.labels));
}

// Token-weighted mean cross-entropy over a dataset, without dropout.
template <typename T>
double evaluate_loss(const Seq2SeqModel<T>& m, std::span<const Seq2SeqExample> examples, std::size_t batch_size) {
  if (examples.empty()) throw UsageError("validation set is empty");
  NoGradGuard guard;
  double total = 0;
  std::size_t tokens = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
    const auto b = make_batch(examples, idx, m.specials);
    total += static_cast<double>(seq2seq_loss(m, b).item()) * static_cast<double>(b.label_tokens);
    tokens += b.label_tokens;
  }
  return total / static_cast<double>(tokens);
}

struct EarlyStopState {
  double best_validation_loss = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improvement = 0;
  std::size_t patience = 3;
  std::size_t best_epoch = 0;
  std::size_t epoch = 0;

  // Records one epoch's validation loss; true when it strictly improves.
  bool update(double validation_loss) {
    ++epoch;
    if (validation_loss < best_validation_loss) {
      best_validation_loss = validation_loss;
      best_epoch = epoch;
      epochs_since_improvement = 0;
      return true;
    }
    ++epochs_since_improvement;
    return false;
  }

  bool should_stop() const { return epochs_since_improvement >= patience; }
};

struct FinetuneConfig {
  std::size_t batch_size = 32;
  double lr = 7e-5;
  std::int64_t warmup_steps = 0;
  double weight_decay = 0.01;
  std::size_t max_epochs = 30;
  std::size_t patience = 3;
  std::uint64_t seed = 0;

  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size}, {"lr", c.lr},         {"warmup_steps", c.warmup_steps},
                     {"weight_decay", c.weight_decay}, {"max_epochs", c.max_epochs}, {"patience", c.patience},
                     {"seed", c.seed}};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double validation_loss = 0;
  double lr = 0;
  bool improved = false;

  nlohmann::ordered_json to_json() const {
    return {{"epoch", epoch}, {"train_loss", train_loss}, {"validation_loss", validation_loss}, {"lr", lr},
            {"improved", improved}};
  }
};

struct FinetuneResult {
  double initial_validation_loss = 0;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0;
  bool stopped_early = false;
};

// Fine-tunes in place. After each epoch the validation loss decides
// early stopping; on improvement the model is saved to `best_dir` (if
// given) and a snapshot is kept so that the model ends at its best epoch.
template <typename T>
FinetuneResult finetune(Seq2SeqModel<T>& m, std::span<const Seq2SeqExample> train,
                        std::span<const Seq2SeqExample> validation, const FinetuneConfig& cfg,
                        const std::filesystem::path& best_dir = {},
                        const std::function<void(const EpochRecord&)>& on_epoch = {},
                        nlohmann::ordered_json checkpoint_meta = {}) {
  if (train.empty()) throw UsageError("training set is empty");
  if (validation.empty()) throw UsageError("validation set is empty");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  AdamWConfig opt_cfg;
  opt_cfg.schedule = {cfg.lr, std::max<std::int64_t>(1, cfg.warmup_steps),
                      static_cast<std::int64_t>(std::max<std::size_t>(1, cfg.max_epochs * steps_per_epoch))};
  opt_cfg.weight_decay = cfg.weight_decay;
  OptimizerState<T> opt(opt_cfg);
  Rng shuffle_rng(cfg.seed, "shuffle"), dropout_rng(cfg.seed, "dropout");
  auto params = m.parameters();

  FinetuneResult res;
  res.initial_validation_loss = evaluate_loss(m, validation, cfg.batch_size);
  EarlyStopState stop;
  stop.patience = cfg.patience;
  std::vector<Tensor<T>> best;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    double train_total = 0;
    std::size_t train_tokens = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const auto idx = std::span<const std::size_t>(order).subspan(
          s * cfg.batch_size, std::min(cfg.batch_size, order.size() - s * cfg.batch_size));
      const auto b = make_batch(train, idx, m.specials);
      Var<T> loss = seq2seq_loss(m, b, &dropout_rng);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw NumericError("non-finite training loss in epoch " + std::to_string(epoch) + ", step " + std::to_string(s));
      }
      train_total += static_cast<double>(loss.item()) * static_cast<double>(b.label_tokens);
      train_tokens += b.label_tokens;
      backward(loss);
      optimizer_step<T>(params, opt);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(train_tokens);
    rec.validation_loss = evaluate_loss(m, validation, cfg.batch_size);
    rec.lr = opt.current_lr();
    rec.improved = stop.update(rec.validation_loss);
    if (rec.improved) {
      best.clear();
      for (const auto& p : params) best.push_back(p.value());
      if (!best_dir.empty()) {
        auto meta = checkpoint_meta;
        meta["epoch"] = epoch;
        meta["validation_loss"] = rec.validation_loss;
        save_seq2seq(best_dir, m, meta);
      }
    }
    res.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stop.should_stop()) {
      res.stopped_early = true;
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) params[i].value_mut() = best[i];
  res.best_epoch = stop.best_epoch;
  res.best_validation_loss = stop.best_validation_loss;
  return res;
}

// Beam search over the model for one encoded input.
template <typename T>
Hypothesis generate_ids(const Seq2SeqModel<T>& m, std::span<const TokenId> input, const GenerationParams& p) {
  p.validate();
  NoGradGuard guard;
  std::vector<TokenId> src(input.begin(), input.end());
  if (src.size() > p.max_input_length) src.resize(p.max_input_length);
  const Var<T> memory = m.encode(src, 1);
  const auto valid = m.valid_mask(src);
  const std::size_t H = memory.value().dim(1), S = src.size();
  auto step = [&](const std::vector<std::vector<TokenId>>& prefixes) {
    const std::size_t n = prefixes.size(), L = prefixes[0].size();
    Tensor<T> mem(Shape{n * S, H});
    std::vector<std::uint8_t> mem_valid(n * S);
    std::vector<TokenId> ids;
    for (std::size_t b = 0; b < n; ++b) {
      std::copy(memory.value().data().begin(), memory.value().data().end(),
                mem.data().begin() + static_cast<std::ptrdiff_t>(b * S * H));
      std::copy(valid.begin(), valid.end(), mem_valid.begin() + static_cast<std::ptrdiff_t>(b * S));
      ids.insert(ids.end(), prefixes[b].begin(), prefixes[b].end());
    }
    std::vector<std::uint8_t> ids_valid(ids.size(), 1);
    const auto logits = m.decoder.forward(constant(std::move(mem)), mem_valid, S, ids, ids_valid, n).value();
    std::vector<std::vector<double>> rows(n);
    for (std::size_t b = 0; b < n; ++b) {
      auto row = logits.row(b * L + L - 1);
      double mx = -std::numeric_limits<double>::infinity(), s = 0;
      for (T x : row) mx = std::max(mx, static_cast<double>(x));
      for (T x : row) s += std::exp(static_cast<double>(x) - mx);
      const double lse = mx + std::log(s);
      rows[b].reserve(row.size());
      for (T x : row) rows[b].push_back(static_cast<double>(x) - lse);
    }
    return rows;
  };
  return beam_search(step, m.specials.begin, m.specials.end, p);
}

template <typename T>
std::string summarize_text(const Seq2SeqModel<T>& m, const ByteBpeModel& tok, const std::string& text,
                           const GenerationParams& p, std::size_t* token_count = nullptr) {
  auto h = generate_ids(m, encode_source(tok, text, p.max_input_length), p);
  if (!h.tokens.empty() && h.tokens.back() == m.specials.end) h.tokens.pop_back();
  if (token_count) *token_count = h.tokens.size();
  return tok.decode(h.tokens);
}

// One output line per input record, in input order: {id, summary,
// token_count}, or {id, error} when that record fails.
template <typename T>
std::size_t summarize_file(const Seq2SeqModel<T>& m, const ByteBpeModel& tok, const GenerationParams& p,
                           const std::filesystem::path& in, const std::filesystem::path& out, std::size_t workers = 1) {
  const auto records = read_seq2seq_jsonl(in, false);
  std::vector<std::string> lines(records.size());
  std::vector<std::uint8_t> failed(records.size(), 0);
  auto work = [&](std::size_t i) {
    nlohmann::ordered_json j;
    j["id"] = records[i].id;
    try {
      std::size_t n = 0;
      j["summary"] = summarize_text(m, tok, records[i].text, p, &n);
      j["token_count"] = n;
    } catch (const std::exception& e) {
      j.erase("summary");
      j["error"] = e.what();
      failed[i] = 1;
    }
    lines[i] = j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  };
  workers = std::max<std::size_t>(1, std::min(workers, records.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < records.size(); i += workers) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  std::string body;
  for (const auto& l : lines) body += l + "\n";
  io::write_file_atomic(out, body);
  return static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
}

}  // namespace blf
