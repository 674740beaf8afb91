#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/io.hpp"
#include "blf/core/ops.hpp"
#include "blf/core/optim.hpp"
#include "blf/core/rng.hpp"
#include "blf/data/corpus.hpp"
#include "blf/model/checkpoint.hpp"
#include "blf/model/encoder.hpp"
#include "blf/tokenizer/bpe.hpp"

namespace blf {

// Generator depth divisor per preset. `tiny` has only two layers, so it
// uses 2 to keep the generator at a single layer.
inline std::size_t depth_divisor_for(const std::string& preset) {
  if (preset == "small") return 4;
  if (preset == "base") return 3;
  if (preset == "tiny") return 2;
  throw ConfigError("no generator depth divisor for preset '" + preset + "'");
}

// Same widths as the discriminator, depth divided (rounded down, at least 1).
inline EncoderConfig generator_config(const EncoderConfig& disc, std::size_t depth_divisor) {
  if (depth_divisor == 0) throw ConfigError("depth_divisor must be positive");
  EncoderConfig g = disc;
  g.layers = std::max<std::size_t>(1, disc.layers / depth_divisor);
  return g;
}

struct RtdConfig {
  EncoderConfig discriminator = EncoderConfig::preset("small");
  std::size_t depth_divisor = 4;
  double mlm_probability = 0.25;
  double disc_weight = 50.0;
  std::size_t batch_size = 32;
  bool global_first_token = true;
  std::uint64_t seed = 0;
  std::size_t history = 100;
  AdamWConfig optimizer{{5e-4, 10000, 100000}};

  void validate() const {
    discriminator.validate();
    if (depth_divisor == 0) throw ConfigError("depth_divisor must be positive");
    if (!(mlm_probability >= 0.0 && mlm_probability < 1.0)) throw ConfigError("mlm_probability must be in [0, 1)");
    if (!(disc_weight >= 0.0)) throw ConfigError("disc_weight must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    OptimizerState<float> check(optimizer);
  }

  EncoderConfig generator() const { return generator_config(discriminator, depth_divisor); }

  friend bool operator==(const RtdConfig&, const RtdConfig&) = default;
};

inline void to_json(nlohmann::json& j, const RtdConfig& c) {
  j = nlohmann::json{{"discriminator", c.discriminator}, {"depth_divisor", c.depth_divisor},
                     {"mlm_probability", c.mlm_probability}, {"disc_weight", c.disc_weight},
                     {"batch_size", c.batch_size}, {"global_first_token", c.global_first_token},
                     {"seed", c.seed}, {"history", c.history}, {"optimizer", c.optimizer}};
}

inline void from_json(const nlohmann::json& j, RtdConfig& c) {
  j.at("discriminator").get_to(c.discriminator);
  j.at("depth_divisor").get_to(c.depth_divisor);
  j.at("mlm_probability").get_to(c.mlm_probability);
  j.at("disc_weight").get_to(c.disc_weight);
  j.at("batch_size").get_to(c.batch_size);
  j.at("global_first_token").get_to(c.global_first_token);
  j.at("seed").get_to(c.seed);
  j.at("history").get_to(c.history);
  j.at("optimizer").get_to(c.optimizer);
}

struct RtdBatch {
  std::size_t batch = 0, seq = 0;
  std::vector<TokenId> original_ids;
  std::vector<std::uint8_t> masked_positions;
  std::vector<TokenId> generator_input;
  std::vector<TokenId> corrupted_ids;
  std::vector<std::uint8_t> disc_labels;
  std::vector<std::uint8_t> padding_mask;  // 1 at padding
};

struct MaskedInput {
  std::vector<TokenId> generator_input;
  std::vector<std::uint8_t> masked_positions;
};

inline bool is_special_id(TokenId id, const SpecialIds& s) {
  return id == s.begin || id == s.pad || id == s.end || id == s.unknown || id == s.mask;
}

// Each non-special position is selected independently with probability p
// and replaced by the mask id. One draw per eligible position.
inline MaskedInput mask_tokens(std::span<const TokenId> ids, double mlm_probability, Rng& rng,
                               const SpecialIds& specials = {}) {
  if (!(mlm_probability >= 0.0 && mlm_probability < 1.0)) throw ConfigError("mlm_probability must be in [0, 1)");
  MaskedInput out{std::vector<TokenId>(ids.begin(), ids.end()), std::vector<std::uint8_t>(ids.size(), 0)};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_special_id(ids[i], specials)) continue;
    if (rng.bernoulli(mlm_probability)) {
      out.masked_positions[i] = 1;
      out.generator_input[i] = specials.mask;
    }
  }
  return out;
}

// One categorical draw per row of `logits` [M, V] at temperature 1, by
// inverse CDF on a double-precision softmax.
template <typename T>
std::vector<TokenId> sample_replacements(const Tensor<T>& logits, Rng& rng) {
  if (logits.rank() != 2) throw DimensionError("sample_replacements expects [M, V] logits, got " + shape_string(logits.shape()));
  const std::size_t m = logits.dim(0), v = logits.dim(1);
  std::vector<TokenId> out(m);
  std::vector<double> p(v);
  for (std::size_t r = 0; r < m; ++r) {
    auto row = logits.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (T x : row) {
      if (!std::isfinite(static_cast<double>(x))) throw NumericError("non-finite generator logit in row " + std::to_string(r));
      mx = std::max(mx, static_cast<double>(x));
    }
    double s = 0;
    for (std::size_t j = 0; j < v; ++j) s += p[j] = std::exp(static_cast<double>(row[j]) - mx);
    const double u = rng.uniform() * s;
    double acc = 0;
    std::size_t pick = v - 1;
    for (std::size_t j = 0; j < v; ++j) {
      acc += p[j];
      if (u < acc) {
        pick = j;
        break;
      }
    }
    // Guard against rounding placing u past the last nonzero bucket.
    while (p[pick] == 0.0 && pick > 0) --pick;
    out[r] = static_cast<TokenId>(pick);
  }
  return out;
}

inline std::vector<std::uint8_t> build_disc_labels(std::span<const TokenId> original, std::span<const TokenId> corrupted,
                                                   std::span<const std::uint8_t> masked) {
  if (original.size() != corrupted.size() || original.size() != masked.size()) {
    throw DimensionError("build_disc_labels: lengths " + std::to_string(original.size()) + ", " +
                         std::to_string(corrupted.size()) + ", " + std::to_string(masked.size()) + " differ");
  }
  std::vector<std::uint8_t> labels(original.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = masked[i] && corrupted[i] != original[i];
  return labels;
}

template <typename T>
Var<T> rtd_loss(const Var<T>& gen_ce, const Var<T>& disc_bce, double disc_weight = 50.0) {
  return add(gen_ce, scale(disc_bce, static_cast<T>(disc_weight)));
}

// Generator and discriminator sharing token and position embeddings.
template <typename T>
class RtdModel {
 public:
  RtdModel(const RtdConfig& cfg, Rng& rng)
      : discriminator(cfg.discriminator, rng),
        generator(cfg.generator(), discriminator.token_embedding(), discriminator.position_embedding(), rng),
        gen_dense("generator.head.dense", cfg.discriminator.hidden, cfg.discriminator.hidden, rng),
        gen_norm("generator.head.norm", cfg.discriminator.hidden),
        gen_bias(init_constant<T>("generator.head.output_bias", {cfg.discriminator.vocab_size}, T{0})),
        disc_dense("discriminator.head.dense", cfg.discriminator.hidden, cfg.discriminator.hidden, rng),
        disc_out("discriminator.head.out", cfg.discriminator.hidden, 1, rng) {}

  RtdModel(const RtdModel&) = delete;
  RtdModel& operator=(const RtdModel&) = delete;

  // Vocabulary logits [rows, V] for selected generator hidden rows.
  Var<T> generator_logits(const Var<T>& hidden_rows) const {
    Var<T> h = gen_norm(gelu(gen_dense(hidden_rows)));
    return add_bias(matmul_bt<T>(h, generator.token_embedding()), Var<T>(gen_bias));
  }

  Var<T> discriminator_logits(const Var<T>& hidden) const { return disc_out(gelu(disc_dense(hidden))); }

  // Parameters updated by the generator optimizer, shared embeddings first.
  std::vector<Parameter<T>> generator_parameters() const {
    auto out = generator.parameters();
    gen_dense.collect(out);
    gen_norm.collect(out);
    out.push_back(gen_bias);
    return out;
  }

  // Discriminator-only parameters (the shared embeddings belong to the
  // generator list).
  std::vector<Parameter<T>> discriminator_parameters() const {
    auto all = discriminator.parameters();
    std::vector<Parameter<T>> out(all.begin() + 2, all.end());
    disc_dense.collect(out);
    disc_out.collect(out);
    return out;
  }

  std::vector<Parameter<T>> head_parameters() const {
    std::vector<Parameter<T>> out;
    gen_dense.collect(out);
    gen_norm.collect(out);
    out.push_back(gen_bias);
    disc_dense.collect(out);
    disc_out.collect(out);
    return out;
  }

  Encoder<T> discriminator;
  Encoder<T> generator;
  Linear<T> gen_dense;
  LayerNorm<T> gen_norm;
  Parameter<T> gen_bias;
  Linear<T> disc_dense, disc_out;
};

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0;
  double gen_loss = 0;
  double disc_loss = 0;
  double total = 0;
  double masked_fraction = 0;
  double replaced_fraction = 0;
  double disc_accuracy = 0;
  std::size_t tokens = 0;    // non-padding
  std::size_t replaced = 0;
  std::size_t replaced_correct = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["lr"] = lr;
    j["gen_loss"] = gen_loss;
    j["disc_loss"] = disc_loss;
    j["total"] = total;
    j["masked_fraction"] = masked_fraction;
    j["replaced_fraction"] = replaced_fraction;
    j["disc_accuracy"] = disc_accuracy;
    j["tokens"] = tokens;
    j["replaced"] = replaced;
    j["replaced_correct"] = replaced_correct;
    return j;
  }
};

template <typename T>
class PretrainState {
 public:
  explicit PretrainState(const RtdConfig& cfg, SpecialIds specials = {})
      : config((cfg.validate(), cfg)),
        specials(specials),
        gen_opt(cfg.optimizer),
        disc_opt(cfg.optimizer),
        mask_rng(cfg.seed, "mask"),
        sample_rng(cfg.seed, "sample"),
        dropout_rng(cfg.seed, "dropout"),
        data_rng(cfg.seed, "data") {
    Rng init(cfg.seed, "init");
    model = std::make_unique<RtdModel<T>>(cfg, init);
  }

  RtdConfig config;
  SpecialIds specials;
  std::unique_ptr<RtdModel<T>> model;
  OptimizerState<T> gen_opt, disc_opt;
  Rng mask_rng, sample_rng, dropout_rng, data_rng;
  std::int64_t step = 0;
  std::deque<double> loss_history;
  std::filesystem::path diagnostic_dir;  // where a non-finite batch is dumped; empty = cwd

  void record(double total) {
    loss_history.push_back(total);
    while (loss_history.size() > config.history) loss_history.pop_front();
  }
};

namespace rtd_detail {

inline nlohmann::ordered_json batch_dump(const RtdBatch& b) {
  nlohmann::ordered_json j;
  j["batch"] = b.batch;
  j["seq"] = b.seq;
  j["original_ids"] = b.original_ids;
  j["masked_positions"] = b.masked_positions;
  j["generator_input"] = b.generator_input;
  j["corrupted_ids"] = b.corrupted_ids;
  j["disc_labels"] = b.disc_labels;
  return j;
}

}  // namespace rtd_detail

// One training transaction: mask, generator MLM loss on masked rows,
// sample replacements, discriminator BCE over every non-padding token,
// combined loss, a single backward pass, then one update per optimizer.
// `ids` holds `batch` sequences of equal length. When `inspect` is given
// the assembled RtdBatch is copied there.
template <typename T>
StepMetrics pretrain_step(PretrainState<T>& state, std::span<const TokenId> ids, std::size_t batch,
                          RtdBatch* inspect = nullptr) {
  auto& m = *state.model;
  const auto& sp = state.specials;
  if (batch == 0 || ids.size() % batch != 0) throw DimensionError("pretrain_step: ids are not a whole number of sequences");
  RtdBatch b;
  b.batch = batch;
  b.seq = ids.size() / batch;
  b.original_ids.assign(ids.begin(), ids.end());
  b.padding_mask.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) b.padding_mask[i] = ids[i] == sp.pad;

  auto masked = mask_tokens(ids, state.config.mlm_probability, state.mask_rng, sp);
  b.masked_positions = std::move(masked.masked_positions);
  b.generator_input = std::move(masked.generator_input);

  Rng* drop = state.config.discriminator.dropout > 0.0 ? &state.dropout_rng : nullptr;
  const auto gen_roles = make_roles(b.generator_input, batch, sp.pad, state.config.global_first_token);
  Var<T> gen_hidden = m.generator.forward(b.generator_input, batch, gen_roles, drop);

  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (b.masked_positions[i]) {
      rows.push_back(i);
      targets.push_back(ids[i]);
    }
  }
  Var<T> gen_loss = constant(Tensor<T>::scalar(T{0}));
  b.corrupted_ids = b.original_ids;
  if (!rows.empty()) {
    Var<T> logits = m.generator_logits(gather_rows(gen_hidden, std::span<const std::size_t>(rows)));
    gen_loss = cross_entropy(logits, std::span<const TokenId>(targets));
    // The sample is a plain value: nothing flows back through it.
    const auto sampled = sample_replacements(logits.value(), state.sample_rng);
    for (std::size_t r = 0; r < rows.size(); ++r) b.corrupted_ids[rows[r]] = sampled[r];
  }
  b.disc_labels = build_disc_labels(b.original_ids, b.corrupted_ids, b.masked_positions);

  const auto disc_roles = make_roles(b.corrupted_ids, batch, sp.pad, state.config.global_first_token);
  Var<T> disc_logits = m.discriminator_logits(m.discriminator.forward(b.corrupted_ids, batch, disc_roles, drop));
  std::vector<T> labels(b.disc_labels.begin(), b.disc_labels.end());
  Var<T> disc_loss = binary_cross_entropy_with_logits(disc_logits, std::span<const T>(labels),
                                                      std::span<const std::uint8_t>(b.padding_mask));
  Var<T> total = rtd_loss(gen_loss, disc_loss, state.config.disc_weight);

  StepMetrics r;
  r.step = state.step + 1;
  r.gen_loss = gen_loss.item();
  r.disc_loss = disc_loss.item();
  r.total = total.item();
  if (inspect) *inspect = b;

  if (!std::isfinite(r.total)) {
    const auto dir = state.diagnostic_dir.empty() ? std::filesystem::current_path() : state.diagnostic_dir;
    const auto path = dir / ("nonfinite-step-" + std::to_string(r.step) + ".json");
    auto dump = rtd_detail::batch_dump(b);
    dump["step"] = r.step;
    dump["gen_loss"] = r.gen_loss;
    dump["disc_loss"] = r.disc_loss;
    io::write_file_atomic(path, dump.dump() + "\n");
    throw NumericError("non-finite loss at step " + std::to_string(r.step) + " (gen " + std::to_string(r.gen_loss) +
                       ", disc " + std::to_string(r.disc_loss) + "); batch dumped to " + path.string());
  }

  std::size_t masked_n = 0, correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (b.padding_mask[i]) continue;
    ++r.tokens;
    masked_n += b.masked_positions[i];
    const bool predicted = disc_logits.value()[i] > T{0};
    correct += predicted == static_cast<bool>(b.disc_labels[i]);
    if (b.disc_labels[i]) {
      ++r.replaced;
      r.replaced_correct += predicted;
    }
  }
  if (r.tokens) {
    r.masked_fraction = static_cast<double>(masked_n) / r.tokens;
    r.replaced_fraction = static_cast<double>(r.replaced) / r.tokens;
    r.disc_accuracy = static_cast<double>(correct) / r.tokens;
  }

  backward(total);
  auto gp = m.generator_parameters();
  auto dp = m.discriminator_parameters();
  optimizer_step<T>(gp, state.gen_opt);
  optimizer_step<T>(dp, state.disc_opt);
  r.lr = scheduled_lr(state.config.optimizer.schedule, state.gen_opt.step);
  state.step += 1;
  state.record(r.total);
  return r;
}

// Draws `batch_size` chunk indices uniformly with replacement from the
// data stream and concatenates them.
template <typename T>
std::vector<TokenId> next_pretrain_batch(PretrainState<T>& state, const ChunkFile& data) {
  if (data.size() == 0) throw UsageError("pretraining data holds no chunks");
  if (data.sequence_length > state.config.discriminator.max_positions) {
    throw ConfigError("chunk length " + std::to_string(data.sequence_length) + " exceeds max_positions " +
                      std::to_string(state.config.discriminator.max_positions));
  }
  std::vector<TokenId> ids;
  ids.reserve(state.config.batch_size * data.sequence_length);
  for (std::size_t i = 0; i < state.config.batch_size; ++i) {
    auto c = data.chunk(static_cast<std::size_t>(state.data_rng.below(data.size())));
    ids.insert(ids.end(), c.begin(), c.end());
  }
  return ids;
}

// Checkpoint layout: discriminator/ and generator/ are encoder
// checkpoints, state/ holds heads and optimizer moments, and manifest.json
// carries config, counters, rng states and the loss history.
template <typename T>
void save_pretrain(const std::filesystem::path& dir, const PretrainState<T>& s, nlohmann::ordered_json extra = {}) {
  const auto& m = *s.model;
  save_encoder(dir / "discriminator", m.discriminator);
  save_encoder(dir / "generator", m.generator);

  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  const auto heads = m.head_parameters();
  for (const auto& p : heads) tensors.emplace_back(p.name(), &p.value());
  const auto gp = m.generator_parameters();
  const auto dp = m.discriminator_parameters();
  auto add_moments = [&](const char* tag, const std::vector<Parameter<T>>& ps, const OptimizerState<T>& o) {
    for (std::size_t i = 0; i < o.first_moment.size(); ++i) {
      tensors.emplace_back(std::string("adam.") + tag + ".m." + ps[i].name(), &o.first_moment[i]);
      tensors.emplace_back(std::string("adam.") + tag + ".v." + ps[i].name(), &o.second_moment[i]);
    }
  };
  add_moments("generator", gp, s.gen_opt);
  add_moments("discriminator", dp, s.disc_opt);
  nlohmann::ordered_json meta;
  meta["kind"] = "rtd-state";
  save_tensors<T>(dir / "state", tensors, meta);

  nlohmann::ordered_json top;
  top["version"] = kCheckpointVersion;
  top["kind"] = "rtd";
  top["config"] = nlohmann::json(s.config);
  top["step"] = s.step;
  top["optimizer_steps"] = {{"generator", s.gen_opt.step}, {"discriminator", s.disc_opt.step}};
  top["rng"] = {{"mask", s.mask_rng.serialize()},
                {"sample", s.sample_rng.serialize()},
                {"dropout", s.dropout_rng.serialize()},
                {"data", s.data_rng.serialize()}};
  top["loss_history"] = std::vector<double>(s.loss_history.begin(), s.loss_history.end());
  top["specials"] = {s.specials.begin, s.specials.pad, s.specials.end, s.specials.unknown, s.specials.mask};
  if (!extra.is_null()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) top[it.key()] = it.value();
  }
  io::write_file_atomic(dir / "manifest.json", top.dump(2) + "\n");
}

template <typename T>
std::unique_ptr<PretrainState<T>> load_pretrain(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  nlohmann::json top;
  try {
    top = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  if (!top.is_object() || top.value("kind", std::string()) != "rtd") throw FormatError(path.string() + ": not a pretraining checkpoint");
  if (top.value("version", -1) != kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint version " + top.value("version", nlohmann::json()).dump() +
                      " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  std::unique_ptr<PretrainState<T>> s;
  try {
    const auto cfg = top.at("config").template get<RtdConfig>();
    const auto sp = top.at("specials").template get<std::vector<TokenId>>();
    if (sp.size() != 5) throw FormatError(path.string() + ": bad special ids");
    s = std::make_unique<PretrainState<T>>(cfg, SpecialIds{sp[0], sp[1], sp[2], sp[3], sp[4]});
    s->step = top.at("step").template get<std::int64_t>();
    s->gen_opt.step = top.at("optimizer_steps").at("generator").template get<std::int64_t>();
    s->disc_opt.step = top.at("optimizer_steps").at("discriminator").template get<std::int64_t>();
    s->mask_rng.deserialize(top.at("rng").at("mask").template get<std::string>());
    s->sample_rng.deserialize(top.at("rng").at("sample").template get<std::string>());
    s->dropout_rng.deserialize(top.at("rng").at("dropout").template get<std::string>());
    s->data_rng.deserialize(top.at("rng").at("data").template get<std::string>());
    for (double v : top.at("loss_history")) s->loss_history.push_back(v);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed pretraining manifest (" + e.what() + ")");
  }

  auto& m = *s->model;
  const auto disc = load_tensors<T>(dir / "discriminator");
  const auto gen = load_tensors<T>(dir / "generator");
  const auto state = load_tensors<T>(dir / "state");
  if (disc.manifest.at("config").template get<EncoderConfig>() != s->config.discriminator ||
      gen.manifest.at("config").template get<EncoderConfig>() != s->config.generator()) {
    throw FormatError(dir.string() + ": encoder configs disagree with the pretraining config");
  }
  auto dparams = m.discriminator.parameters();
  auto gparams = m.generator.parameters();
  auto heads = m.head_parameters();
  // Validate everything (including optimizer moments) before mutating.
  const auto gp = m.generator_parameters();
  const auto dp = m.discriminator_parameters();
  auto moments = [&](const char* tag, const std::vector<Parameter<T>>& ps, OptimizerState<T>& o, bool apply) {
    if (o.step == 0) return;
    for (const auto& p : ps) {
      const auto& mt = state.at(std::string("adam.") + tag + ".m." + p.name());
      const auto& vt = state.at(std::string("adam.") + tag + ".v." + p.name());
      if (mt.shape() != p.value().shape() || vt.shape() != p.value().shape()) {
        throw FormatError("optimizer moment for " + p.name() + " has the wrong shape");
      }
      if (apply) {
        o.first_moment.push_back(mt);
        o.second_moment.push_back(vt);
      }
    }
  };
  moments("generator", gp, s->gen_opt, false);
  moments("discriminator", dp, s->disc_opt, false);
  for (const auto& p : dparams) (void)disc.at(p.name());
  for (const auto& p : gparams) (void)gen.at(p.name());
  for (const auto& p : heads) (void)state.at(p.name());
  assign_parameters<T>(dparams, disc);
  assign_parameters<T>(gparams, gen);
  assign_parameters<T>(heads, state);
  moments("generator", gp, s->gen_opt, true);
  moments("discriminator", dp, s->disc_opt, true);
  return s;
}

// Runs `steps` pretraining steps, appending one JSON line per step to
// `metrics_path` (if non-empty).
template <typename T>
std::vector<StepMetrics> pretrain(PretrainState<T>& state, const ChunkFile& data, std::int64_t steps,
                                  const std::filesystem::path& metrics_path = {}) {
  std::ofstream metrics;
  if (!metrics_path.empty()) {
    if (metrics_path.has_parent_path()) std::filesystem::create_directories(metrics_path.parent_path());
    metrics.open(metrics_path, std::ios::app | std::ios::binary);
    if (!metrics) throw Error("cannot open metrics file " + metrics_path.string());
  }
  std::vector<StepMetrics> out;
  for (std::int64_t i = 0; i < steps; ++i) {
    const auto ids = next_pretrain_batch(state, data);
    out.push_back(pretrain_step(state, ids, state.config.batch_size));
    if (metrics) {
      metrics << out.back().to_json().dump() << "\n";
      metrics.flush();
    }
  }
  return out;
}

}  // namespace blf
