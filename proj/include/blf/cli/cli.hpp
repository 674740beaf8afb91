#pragma once

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "blf/core/error.hpp"
#include "blf/core/io.hpp"
#include "blf/data/corpus.hpp"
#include "blf/model/checkpoint.hpp"
#include "blf/rouge/rouge.hpp"
#include "blf/rtd/pretrain.hpp"
#include "blf/seq2seq/finetune.hpp"
#include "blf/tokenizer/bpe.hpp"

namespace blf::cli {

namespace fs = std::filesystem;

// One command setting. An empty default with `required` set means the
// value must come from the config file or a flag.
struct KeySpec {
  std::string name;
  std::string default_value;
  std::string help;
  bool required = false;
};

// Effective settings of one run: defaults, then the config file, then flags.
class RunConfig {
 public:
  RunConfig(std::string command, const std::vector<KeySpec>& keys) : command_(std::move(command)) {
    for (const auto& k : keys) {
      values_[k.name] = k.default_value;
      order_.push_back(k.name);
      if (k.required) required_.push_back(k.name);
    }
  }

  bool has_key(const std::string& k) const { return values_.count(k) > 0; }
  void set(const std::string& k, std::string v) {
    if (!has_key(k)) throw ConfigError("unknown setting '" + k + "' for command " + command_);
    values_[k] = std::move(v);
  }

  // Flat `key = value` lines; '#' starts a comment.
  void merge_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open config file " + path.string());
    std::string line;
    std::size_t n = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
      ++n;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value");
      auto key = trim(line.substr(0, eq));
      std::replace(key.begin(), key.end(), '-', '_');
      if (!seen.insert(key).second) throw ConfigError(path.string() + ":" + std::to_string(n) + ": duplicate key '" + key + "'");
      if (!has_key(key)) throw ConfigError(path.string() + ":" + std::to_string(n) + ": unknown key '" + key + "' for command " + command_);
      values_[key] = trim(line.substr(eq + 1));
    }
  }

  void check_required() const {
    for (const auto& k : required_)
      if (values_.at(k).empty()) throw UsageError(command_ + ": missing required setting --" + flag_name(k));
  }

  const std::string& str(const std::string& k) const {
    auto it = values_.find(k);
    if (it == values_.end()) throw Error("internal: undeclared setting " + k);
    return it->second;
  }
  bool empty(const std::string& k) const { return str(k).empty(); }

  template <typename N>
  N number(const std::string& k) const {
    const auto& s = str(k);
    N v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("setting " + k + ": '" + s + "' is not a valid number");
    return v;
  }
  std::size_t size(const std::string& k) const { return number<std::size_t>(k); }
  double real(const std::string& k) const { return number<double>(k); }
  bool flag(const std::string& k) const {
    const auto& s = str(k);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("setting " + k + ": '" + s + "' is not a boolean");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    for (const auto& k : order_) j[k] = values_.at(k);
    return j;
  }

  static std::string flag_name(std::string k) {
    std::replace(k.begin(), k.end(), '_', '-');
    return k;
  }

 private:
  std::string command_;
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
  std::vector<std::string> required_;
};

struct Context {
  const RunConfig& cfg;
  std::ostream& out;
  std::ostream& err;
  bool resume = false;
};

inline std::size_t workers_of(const RunConfig& c) { return std::max<std::size_t>(1, c.size("workers")); }
inline std::uint64_t seed_of(const RunConfig& c) { return c.number<std::uint64_t>("seed"); }

inline void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  io::write_file_atomic(p, j.dump(2) + "\n");
}

// ---- train-tokenizer ----

inline int cmd_train_tokenizer(const Context& ctx) {
  const auto& c = ctx.cfg;
  const fs::path out = c.str("out");
  JsonlDocumentReader reader(c.str("input"));
  BpeTrainer trainer;
  std::vector<std::string> texts;
  while (auto r = reader.next()) {
    trainer.add_text(r->text);
    texts.push_back(std::move(r->text));
  }
  if (texts.empty()) throw UsageError("train-tokenizer: " + c.str("input") + " holds no documents");
  const auto tok = trainer.train(c.size("vocab_size"));
  tok.save(out);
  const auto encoded = encode_all(tok, texts, workers_of(c));
  std::size_t chars = 0, tokens = 0, bytes = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    chars += count_code_points(texts[i]);
    bytes += texts[i].size();
    tokens += encoded[i].size();
  }
  const double mean = tokens ? static_cast<double>(chars) / static_cast<double>(tokens) : 0.0;
  nlohmann::ordered_json m;
  m["kind"] = "tokenizer";
  m["vocab_size"] = tok.vocab_size();
  m["documents"] = texts.size();
  m["bytes"] = bytes;
  m["characters"] = chars;
  m["tokens"] = tokens;
  m["mean_chars_per_token"] = mean;
  m["run_config"] = c.to_json();
  write_json(out / "tokenizer.json", m);
  ctx.out << "vocabulary: " << tok.vocab_size() << "\ndocuments: " << texts.size() << "\ntokens: " << tokens
          << "\nmean chars/token: " << mean << "\n";
  return 0;
}

// ---- prepare-data ----

inline int cmd_prepare_data(const Context& ctx) {
  const auto& c = ctx.cfg;
  const fs::path out = c.str("out");
  const auto tok = ByteBpeModel::load(c.str("tokenizer"));
  JsonlDocumentReader reader(c.str("input"));
  SubsetCapper capper(c.size("subset_cap"));
  Chunker chunker(tok, c.size("seq_len"), c.size("batch_size"), workers_of(c));
  std::size_t read = 0, admitted = 0;
  while (auto r = reader.next()) {
    ++read;
    if (!capper.admit(*r)) continue;
    ++admitted;
    chunker.add(*r);
  }
  if (admitted == 0) throw UsageError("prepare-data: " + c.str("input") + " holds no documents");
  const auto data = chunker.finish();

  // Conservation recount from the per-batch accounting.
  std::size_t stream = 0, emitted = 0, dropped = 0, chunks = 0;
  nlohmann::ordered_json batches = nlohmann::ordered_json::array();
  for (const auto& b : data.batches) {
    if (b.emitted_tokens + b.dropped_tokens != b.stream_tokens || b.emitted_tokens != b.chunks * data.sequence_length) {
      throw Error("token conservation violated");
    }
    stream += b.stream_tokens, emitted += b.emitted_tokens, dropped += b.dropped_tokens, chunks += b.chunks;
    batches.push_back({{"documents", b.documents}, {"stream_tokens", b.stream_tokens}, {"emitted_tokens", b.emitted_tokens},
                       {"dropped_tokens", b.dropped_tokens}, {"chunks", b.chunks}});
  }
  if (emitted != data.tokens.size() || chunks != data.size()) throw Error("token conservation violated");

  SplitSpec spec;
  spec.validation_size = c.size("validation_size");
  spec.seed = seed_of(c);
  spec.per_subset_cap = c.size("subset_cap");
  const auto split = sample_validation(data.size(), spec);
  auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<TokenId> t;
    t.reserve(idx.size() * data.sequence_length);
    for (auto i : idx) {
      auto ch = data.chunk(i);
      t.insert(t.end(), ch.begin(), ch.end());
    }
    return t;
  };
  fs::create_directories(out);
  write_chunk_file(out / "train.chunks", data.sequence_length, gather(split.train));
  write_chunk_file(out / "validation.chunks", data.sequence_length, gather(split.validation));

  nlohmann::ordered_json m;
  m["kind"] = "chunks";
  m["sequence_length"] = data.sequence_length;
  m["documents_read"] = read;
  m["documents_admitted"] = admitted;
  m["subsets"] = capper.admitted();
  m["stream_tokens"] = stream;
  m["emitted_tokens"] = emitted;
  m["dropped_tokens"] = dropped;
  m["chunks"] = chunks;
  m["train_chunks"] = split.train.size();
  m["validation_chunks"] = split.validation.size();
  m["validation_indices"] = split.validation;
  m["conservation"] = emitted + dropped == stream;
  m["batches"] = std::move(batches);
  m["run_config"] = c.to_json();
  write_json(out / "manifest.json", m);
  ctx.out << "documents: " << admitted << " of " << read << "\nchunks: " << chunks << " (train " << split.train.size()
          << ", validation " << split.validation.size() << ")\ntokens: " << stream << " streamed, " << emitted
          << " emitted, " << dropped << " dropped\n";
  return 0;
}

// ---- pretrain ----

inline RtdConfig rtd_config_from(const RunConfig& c, std::size_t vocab_size) {
  RtdConfig r;
  const auto preset = c.str("preset");
  r.discriminator = EncoderConfig::preset(preset);
  r.discriminator.vocab_size = vocab_size;
  if (!c.empty("window")) r.discriminator.window = c.size("window");
  if (!c.empty("max_positions")) r.discriminator.max_positions = c.size("max_positions");
  if (!c.empty("dropout")) r.discriminator.dropout = c.real("dropout");
  r.depth_divisor = c.empty("depth_divisor") ? depth_divisor_for(preset) : c.size("depth_divisor");
  r.mlm_probability = c.real("mlm_probability");
  r.disc_weight = c.real("disc_weight");
  r.batch_size = c.size("batch_size");
  r.seed = seed_of(c);
  r.optimizer.schedule = {c.real("lr"), c.number<std::int64_t>("warmup_steps"), c.number<std::int64_t>("total_steps")};
  r.optimizer.weight_decay = c.real("weight_decay");
  r.validate();
  return r;
}

// Keeps the first `n` lines of a metrics file (drops steps past the
// checkpoint being resumed).
inline void truncate_lines(const fs::path& p, std::int64_t n) {
  if (!fs::exists(p)) return;
  std::istringstream in(io::read_file(p));
  std::string kept, line;
  for (std::int64_t i = 0; i < n && std::getline(in, line); ++i) kept += line + "\n";
  io::write_file_atomic(p, kept);
}

inline int cmd_pretrain(const Context& ctx) {
  const auto& c = ctx.cfg;
  const fs::path out = c.str("out"), ckpt = out / "checkpoint", metrics = out / "metrics.jsonl";
  const auto tok = ByteBpeModel::load(c.str("tokenizer"));
  fs::path data_path = c.str("data");
  if (fs::is_directory(data_path)) data_path /= "train.chunks";
  const auto data = read_chunk_file(data_path);
  const auto cfg = rtd_config_from(c, tok.vocab_size());
  const std::int64_t steps = c.number<std::int64_t>("steps");
  const std::int64_t every = std::max<std::int64_t>(1, c.number<std::int64_t>("checkpoint_every"));
  nlohmann::ordered_json extra;
  extra["run_config"] = c.to_json();

  std::unique_ptr<PretrainState<float>> state;
  fs::create_directories(out);
  if (ctx.resume) {
    if (!fs::exists(ckpt / "manifest.json")) throw UsageError("--resume: no checkpoint in " + ckpt.string());
    state = load_pretrain<float>(ckpt);
    if (!(state->config == cfg)) throw ConfigError("--resume: settings differ from those of the checkpoint in " + ckpt.string());
    truncate_lines(metrics, state->step);
  } else {
    state = std::make_unique<PretrainState<float>>(cfg, tok.special_ids());
    if (fs::exists(metrics)) fs::remove(metrics);
    save_pretrain(ckpt, *state, extra);
  }
  state->diagnostic_dir = out;
  while (state->step < steps) {
    const std::int64_t n = std::min(every - state->step % every, steps - state->step);
    const auto m = pretrain(*state, data, n, metrics);
    save_pretrain(ckpt, *state, extra);
    const auto& last = m.back();
    ctx.out << "step " << last.step << " loss " << last.total << " (gen " << last.gen_loss << ", disc " << last.disc_loss
            << ") disc acc " << last.disc_accuracy << "\n";
  }
  ctx.out << "checkpoint: " << ckpt.string() << " at step " << state->step << "\n";
  return 0;
}

// ---- finetune ----

inline GenerationParams generation_from(const RunConfig& c) {
  auto p = GenerationParams::profile(c.str("profile"));
  if (!c.empty("max_input_length")) p.max_input_length = c.size("max_input_length");
  if (!c.empty("max_target_length")) p.max_target_length = c.size("max_target_length");
  if (c.has_key("num_beams")) {
    p.num_beams = c.size("num_beams");
    p.no_repeat_ngram_size = c.size("no_repeat_ngram_size");
    p.length_penalty = c.real("length_penalty");
  }
  p.validate();
  return p;
}

inline fs::path encoder_dir(fs::path p) {
  // A pretraining checkpoint (or its parent run directory) stands for its
  // discriminator.
  if (fs::exists(p / "checkpoint" / "manifest.json")) p /= "checkpoint";
  if (fs::exists(p / "discriminator" / "manifest.json")) p /= "discriminator";
  return p;
}

inline int cmd_finetune(const Context& ctx) {
  const auto& c = ctx.cfg;
  const fs::path out = c.str("out");
  const auto tok = ByteBpeModel::load(c.str("tokenizer"));
  const auto gp = generation_from(c);
  auto enc = load_encoder<float>(encoder_dir(c.str("encoder")));
  if (enc.config().vocab_size != tok.vocab_size()) {
    throw ConfigError("encoder vocabulary " + std::to_string(enc.config().vocab_size) + " does not match the tokenizer (" +
                      std::to_string(tok.vocab_size()) + ")");
  }
  if (gp.max_input_length > enc.config().max_positions) {
    throw ConfigError("max_input_length " + std::to_string(gp.max_input_length) + " exceeds the encoder's max_positions " +
                      std::to_string(enc.config().max_positions));
  }
  auto dc = DecoderConfig::for_encoder(c.str("decoder_preset"), enc.config(), gp.max_target_length);
  if (!c.empty("decoder_layers")) dc.layers = c.size("decoder_layers");
  if (!c.empty("decoder_heads")) dc.heads = c.size("decoder_heads");
  if (!c.empty("dropout")) dc.dropout = c.real("dropout");
  dc.validate();
  const auto& sp = tok.special_ids();
  Rng init(seed_of(c), "init");
  Seq2SeqModel<float> model(std::move(enc), dc, init, {sp.begin, sp.pad, sp.end});

  auto load = [&](const std::string& key) {
    std::vector<Seq2SeqExample> ex;
    for (const auto& r : read_seq2seq_jsonl(c.str(key), true)) ex.push_back(encode_example(tok, r, gp));
    return ex;
  };
  const auto train = load("train"), val = load("validation");
  FinetuneConfig fc;
  fc.batch_size = c.size("batch_size");
  fc.lr = c.real("lr");
  fc.warmup_steps = c.number<std::int64_t>("warmup_steps");
  fc.weight_decay = c.real("weight_decay");
  fc.max_epochs = c.size("max_epochs");
  fc.patience = c.size("patience");
  fc.seed = seed_of(c);

  fs::create_directories(out);
  std::ofstream history(out / "history.jsonl", std::ios::binary | std::ios::trunc);
  nlohmann::ordered_json meta;
  meta["generation"] = nlohmann::json(gp);
  meta["run_config"] = c.to_json();
  const auto res = finetune(model, train, val, fc, out / "best",
                            [&](const EpochRecord& r) {
                              history << r.to_json().dump() << "\n";
                              history.flush();
                              ctx.out << "epoch " << r.epoch << " train " << r.train_loss << " validation "
                                      << r.validation_loss << (r.improved ? " *" : "") << "\n";
                            },
                            meta);
  nlohmann::ordered_json m;
  m["kind"] = "finetune";
  m["initial_validation_loss"] = res.initial_validation_loss;
  m["best_epoch"] = res.best_epoch;
  m["best_validation_loss"] = res.best_validation_loss;
  m["epochs"] = res.epochs.size();
  m["stopped_early"] = res.stopped_early;
  m["decoder"] = nlohmann::json(dc);
  m["generation"] = nlohmann::json(gp);
  m["training"] = nlohmann::json(fc);
  m["run_config"] = c.to_json();
  write_json(out / "result.json", m);
  if (res.best_epoch == 0) {
    // No epoch improved on the untrained model; keep it as the result.
    save_seq2seq(out / "best", model, meta);
  }
  ctx.out << "best epoch " << res.best_epoch << " validation " << res.best_validation_loss << "\nmodel: "
          << (out / "best").string() << "\n";
  return 0;
}

// ---- generate ----

inline int cmd_generate(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto tok = ByteBpeModel::load(c.str("tokenizer"));
  fs::path model_dir = c.str("model");
  if (fs::exists(model_dir / "best" / "decoder")) model_dir /= "best";
  const auto model = load_seq2seq<float>(model_dir);
  const auto gp = generation_from(c);
  if (gp.max_input_length > model.encoder.config().max_positions) {
    throw ConfigError("max_input_length " + std::to_string(gp.max_input_length) + " exceeds the encoder's max_positions " +
                      std::to_string(model.encoder.config().max_positions));
  }
  if (gp.max_target_length > model.decoder.config().max_target_positions) {
    throw ConfigError("max_target_length " + std::to_string(gp.max_target_length) +
                      " exceeds the decoder's max_target_positions " +
                      std::to_string(model.decoder.config().max_target_positions));
  }
  const fs::path out = c.str("output");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const auto failures = summarize_file(model, tok, gp, c.str("input"), out, workers_of(c));
  const auto records = read_id_summaries(out).size();
  nlohmann::ordered_json m;
  m["kind"] = "summaries";
  m["records"] = records;
  m["failures"] = failures;
  m["generation"] = nlohmann::json(gp);
  m["run_config"] = c.to_json();
  write_json(fs::path(out.string() + ".manifest.json"), m);
  ctx.out << "summaries: " << records - failures << " of " << records << " -> " << out.string() << "\n";
  if (failures) {
    ctx.err << failures << " record(s) failed; see the \"error\" fields in " << out.string() << "\n";
    return 1;
  }
  return 0;
}

// ---- rouge ----

inline int cmd_rouge(const Context& ctx) {
  const auto& c = ctx.cfg;
  TokenizationPolicy policy;
  policy.lowercase = c.flag("lowercase");
  policy.stem = c.flag("stem");
  const auto rep = score_pairs(read_id_summaries(c.str("predictions")), read_id_summaries(c.str("references")), policy,
                               workers_of(c));
  if (!c.empty("out")) {
    auto j = report_json(rep, policy);
    j["run_config"] = c.to_json();
    write_json(c.str("out"), j);
  }
  ctx.out << "pairs: " << rep.scores.size() << "\n" << format_table(rep.mean);
  return 0;
}

// ---- inspect ----

inline std::uint64_t tensor_elements(const nlohmann::json& manifest) {
  std::uint64_t n = 0;
  for (const auto& t : manifest.at("tensors")) {
    std::uint64_t k = 1;
    for (const auto& d : t.at("shape")) k *= d.get<std::uint64_t>();
    n += k;
  }
  return n;
}

inline nlohmann::json brief(nlohmann::json m) {
  if (m.contains("tensors")) m["tensors"] = m["tensors"].size();
  return m;
}

inline int cmd_inspect(const Context& ctx) {
  fs::path p = ctx.cfg.str("path");
  if (fs::exists(p / "checkpoint" / "manifest.json")) p /= "checkpoint";
  if (fs::exists(p / "best" / "decoder")) p /= "best";
  auto& o = ctx.out;
  if (fs::exists(p / "encoder" / "manifest.json") && fs::exists(p / "decoder" / "manifest.json")) {
    const auto e = read_manifest(p / "encoder"), d = read_manifest(p / "decoder");
    const auto ne = tensor_elements(e), nd = tensor_elements(d);
    o << "encoder manifest:\n" << brief(e).dump(2) << "\ndecoder manifest:\n" << brief(d).dump(2) << "\n";
    o << "parameters: " << ne + nd << " (encoder " << ne << ", decoder " << nd << ")\n";
    return 0;
  }
  if (!fs::exists(p / "manifest.json")) throw UsageError("inspect: no manifest.json in " + p.string());
  nlohmann::json top;
  try {
    top = nlohmann::json::parse(io::read_file(p / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError((p / "manifest.json").string() + ": invalid JSON (" + e.what() + ")");
  }
  if (top.value("kind", std::string()) == "rtd") {
    const auto nd = tensor_elements(read_manifest(p / "discriminator"));
    const auto ng = tensor_elements(read_manifest(p / "generator"));
    const auto nh = tensor_elements(read_manifest(p / "state"));
    o << brief(top).dump(2) << "\nparameters: " << nd << " (discriminator; generator " << ng
      << " including shared embeddings; state tensors " << nh << ")\n";
    return 0;
  }
  const auto m = read_manifest(p);
  o << brief(m).dump(2) << "\nparameters: " << tensor_elements(m) << "\n";
  return 0;
}

// ---- dispatch ----

struct Command {
  std::string name, help;
  std::vector<KeySpec> keys;
  std::function<int(const Context&)> run;
};

inline std::vector<Command> commands() {
  const KeySpec seed{"seed", "0", "root seed for every random stream"};
  const char* env = std::getenv("BLF_WORKERS");
  const KeySpec workers{"workers", env && *env ? env : "1", "worker threads (output does not depend on it)"};
  const KeySpec profile{"profile", "billsum-short", "generation profile: billsum-short, billsum-long or pubmed"};
  const KeySpec max_in{"max_input_length", "", "override the profile's input length"};
  const KeySpec max_tgt{"max_target_length", "", "override the profile's target length"};
  return {
      {"train-tokenizer", "train a byte-level BPE tokenizer on a JSONL corpus",
       {{"input", "", "JSONL documents with a text field", true},
        {"out", "", "output directory", true},
        {"vocab_size", "8000", "vocabulary size including specials"},
        seed, workers},
       cmd_train_tokenizer},
      {"prepare-data", "tokenize, concatenate and chunk a JSONL corpus",
       {{"input", "", "JSONL documents", true},
        {"tokenizer", "", "tokenizer directory", true},
        {"out", "", "output directory", true},
        {"seq_len", "4096", "chunk length L"},
        {"batch_size", "1000", "documents per concatenation batch"},
        {"subset_cap", "500000", "maximum documents per subset"},
        {"validation_size", "1000", "chunks held out for validation"},
        seed, workers},
       cmd_prepare_data},
      {"pretrain", "replaced-token-detection pretraining",
       {{"data", "", "prepare-data output directory or chunk file", true},
        {"tokenizer", "", "tokenizer directory", true},
        {"out", "", "run directory", true},
        {"preset", "small", "encoder preset: small, base or tiny"},
        {"steps", "100000", "train until this many steps are done"},
        {"batch_size", "32", "sequences per step"},
        {"lr", "5e-4", "peak learning rate"},
        {"warmup_steps", "10000", "linear warmup steps"},
        {"total_steps", "100000", "steps at which the learning rate reaches zero"},
        {"weight_decay", "0.01", "AdamW weight decay"},
        {"mlm_probability", "0.25", "masking probability"},
        {"disc_weight", "50", "discriminator loss weight"},
        {"depth_divisor", "", "generator depth = layers / divisor (default by preset)"},
        {"window", "", "override the preset's attention window"},
        {"max_positions", "", "override the preset's position table size"},
        {"dropout", "", "override the preset's dropout"},
        {"checkpoint_every", "1000", "steps between checkpoints"},
        seed, workers},
       cmd_pretrain},
      {"finetune", "fine-tune an encoder-decoder summarizer",
       {{"train", "", "training JSONL with text and summary", true},
        {"validation", "", "validation JSONL", true},
        {"tokenizer", "", "tokenizer directory", true},
        {"encoder", "", "encoder checkpoint or pretraining run directory", true},
        {"out", "", "output directory", true},
        {"decoder_preset", "small", "decoder preset: small, base or tiny"},
        {"decoder_layers", "", "override decoder depth"},
        {"decoder_heads", "", "override decoder heads"},
        profile, max_in, max_tgt,
        {"batch_size", "32", "examples per step"},
        {"lr", "7e-5", "peak learning rate"},
        {"warmup_steps", "0", "linear warmup steps"},
        {"weight_decay", "0.01", "AdamW weight decay"},
        {"max_epochs", "30", "epoch limit"},
        {"patience", "3", "epochs without improvement before stopping"},
        {"dropout", "", "override decoder dropout"},
        seed, workers},
       cmd_finetune},
      {"generate", "summarize a JSONL file with beam search",
       {{"model", "", "fine-tuned model directory", true},
        {"tokenizer", "", "tokenizer directory", true},
        {"input", "", "JSONL with id and text", true},
        {"output", "", "output JSONL", true},
        profile, max_in, max_tgt,
        {"num_beams", "4", "beam width"},
        {"no_repeat_ngram_size", "3", "forbid repeating n-grams of this size (0 = off)"},
        {"length_penalty", "1.0", "exponent of the length normalization"},
        seed, workers},
       cmd_generate},
      {"rouge", "score predictions against references",
       {{"predictions", "", "JSONL with id and summary", true},
        {"references", "", "JSONL with id and summary", true},
        {"out", "", "optional JSON report path"},
        {"stem", "true", "Porter-stem tokens longer than 3 characters"},
        {"lowercase", "true", "lowercase before tokenizing"},
        seed, workers},
       cmd_rouge},
      {"inspect", "print a checkpoint manifest and its parameter count",
       {{"path", "", "checkpoint directory", true}},
       cmd_inspect},
  };
}

// Runs one command. Exit codes: 0 success, 1 runtime failure, 2 usage or
// configuration error.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Long-document encoder pretraining and summarization toolkit", "blf"};
  app.require_subcommand(1);
  const auto specs = commands();
  struct Bound {
    CLI::App* sub;
    std::map<std::string, std::pair<CLI::Option*, std::string>> opts;
    std::string config;
    bool resume = false;
  };
  std::vector<Bound> bound(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& b = bound[i];
    b.sub = app.add_subcommand(specs[i].name, specs[i].help);
    if (specs[i].name != "inspect") b.sub->add_option("--config", b.config, "flat key = value settings file");
    if (specs[i].name == "pretrain") b.sub->add_flag("--resume", b.resume, "continue from the run's checkpoint");
    for (const auto& k : specs[i].keys) {
      auto& slot = b.opts[k.name];
      std::string help = k.help;
      if (!k.default_value.empty()) help += " [" + k.default_value + "]";
      if (k.required) help += " (required)";
      slot.first = b.sub->add_option("--" + RunConfig::flag_name(k.name), slot.second, help);
    }
  }
  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& b = bound[i];
    if (!b.sub->parsed()) continue;
    try {
      RunConfig cfg(specs[i].name, specs[i].keys);
      if (!b.config.empty()) cfg.merge_file(b.config);
      for (const auto& [k, o] : b.opts)
        if (o.first->count()) cfg.set(k, o.second);
      cfg.check_required();
      Context ctx{cfg, out, err, b.resume};
      return specs[i].run(ctx);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n\n" << b.sub->help();
      return 2;
    } catch (const ConfigError& e) {
      err << "configuration error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 2;
}

}  // namespace blf::cli
