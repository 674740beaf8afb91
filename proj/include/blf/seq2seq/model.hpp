#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/ops.hpp"
#include "blf/core/rng.hpp"
#include "blf/model/attention.hpp"
#include "blf/model/checkpoint.hpp"
#include "blf/model/encoder.hpp"

namespace blf {

struct DecoderConfig {
  std::size_t vocab_size = 64000;
  std::size_t hidden = 256;
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t intermediate = 1024;
  std::size_t max_target_positions = 1024;
  double dropout = 0.1;

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
      throw ConfigError("decoder hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                        std::to_string(heads) + ")");
    }
    if (vocab_size == 0 || layers == 0 || intermediate == 0 || max_target_positions < 2) {
      throw ConfigError("decoder extents must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }

  // Six layers with 4x intermediate width; 12 heads at base width, 4 at
  // small width. `tiny` is a 2-layer toy decoder.
  static DecoderConfig for_encoder(const std::string& preset, const EncoderConfig& enc,
                                   std::size_t max_target_positions = 1024) {
    DecoderConfig d;
    d.vocab_size = enc.vocab_size;
    d.hidden = enc.hidden;
    d.intermediate = 4 * enc.hidden;
    d.max_target_positions = max_target_positions;
    d.dropout = enc.dropout;
    if (preset == "base") {
      d.layers = 6, d.heads = 12;
    } else if (preset == "small") {
      d.layers = 6, d.heads = 4;
    } else if (preset == "tiny") {
      d.layers = 2, d.heads = 2;
    } else {
      throw ConfigError("unknown decoder preset '" + preset + "' (expected small, base or tiny)");
    }
    return d;
  }

  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},   {"hidden", c.hidden},
                     {"layers", c.layers},           {"heads", c.heads},
                     {"intermediate", c.intermediate}, {"max_target_positions", c.max_target_positions},
                     {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("hidden").get_to(c.hidden);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("intermediate").get_to(c.intermediate);
  j.at("max_target_positions").get_to(c.max_target_positions);
  j.at("dropout").get_to(c.dropout);
}

// Decoder-only trainable scalars: embeddings (output projection tied),
// per layer three norms, self- and cross-attention q/k/v/o and the FFN,
// plus the final norm.
inline std::uint64_t count_decoder_parameters(const DecoderConfig& c) {
  const std::uint64_t H = c.hidden, I = c.intermediate;
  const std::uint64_t per_layer = 3 * (2 * H) + 8 * (H * H + H) + (H * I + I) + (I * H + H);
  return c.vocab_size * H + c.max_target_positions * H + c.layers * per_layer + 2 * H;
}

template <typename T>
struct DecoderLayer {
  LayerNorm<T> self_norm;
  Linear<T> self_query, self_key, self_value, self_output;
  LayerNorm<T> cross_norm;
  Linear<T> cross_query, cross_key, cross_value, cross_output;
  LayerNorm<T> ffn_norm;
  Linear<T> ffn_in, ffn_out;

  DecoderLayer(const std::string& p, const DecoderConfig& c, Rng& rng)
      : self_norm(p + ".self_norm", c.hidden),
        self_query(p + ".self.query", c.hidden, c.hidden, rng),
        self_key(p + ".self.key", c.hidden, c.hidden, rng),
        self_value(p + ".self.value", c.hidden, c.hidden, rng),
        self_output(p + ".self.output", c.hidden, c.hidden, rng),
        cross_norm(p + ".cross_norm", c.hidden),
        cross_query(p + ".cross.query", c.hidden, c.hidden, rng),
        cross_key(p + ".cross.key", c.hidden, c.hidden, rng),
        cross_value(p + ".cross.value", c.hidden, c.hidden, rng),
        cross_output(p + ".cross.output", c.hidden, c.hidden, rng),
        ffn_norm(p + ".ffn_norm", c.hidden),
        ffn_in(p + ".ffn.in", c.hidden, c.intermediate, rng),
        ffn_out(p + ".ffn.out", c.intermediate, c.hidden, rng) {}

  void collect(std::vector<Parameter<T>>& out) const {
    self_norm.collect(out);
    self_query.collect(out);
    self_key.collect(out);
    self_value.collect(out);
    self_output.collect(out);
    cross_norm.collect(out);
    cross_query.collect(out);
    cross_key.collect(out);
    cross_value.collect(out);
    cross_output.collect(out);
    ffn_norm.collect(out);
    ffn_in.collect(out);
    ffn_out.collect(out);
  }
};

// Pre-norm transformer decoder with causal dense self-attention and dense
// cross-attention over the encoder output.
template <typename T>
class Decoder {
 public:
  Decoder(const DecoderConfig& c, Rng& rng)
      : config_((c.validate(), c)),
        token_(init_normal<T>("decoder.embeddings.token", {c.vocab_size, c.hidden}, rng)),
        position_(init_normal<T>("decoder.embeddings.position", {c.max_target_positions, c.hidden}, rng)),
        final_norm_("decoder.final_norm", c.hidden) {
    for (std::size_t i = 0; i < c.layers; ++i) layers_.emplace_back("decoder.layers." + std::to_string(i), c, rng);
  }

  const DecoderConfig& config() const { return config_; }

  // Logits [batch * tgt_len, vocab]. `memory` is [batch * src_len, hidden]
  // with `memory_valid` marking non-padding source rows; `ids_valid`
  // marks non-padding target rows.
  Var<T> forward(const Var<T>& memory, std::span<const std::uint8_t> memory_valid, std::size_t src_len,
                 std::span<const TokenId> ids, std::span<const std::uint8_t> ids_valid, std::size_t batch,
                 Rng* dropout_rng = nullptr) const {
    if (batch == 0 || ids.size() % batch != 0) throw DimensionError("decoder ids are not a whole number of sequences");
    const std::size_t L = ids.size() / batch;
    if (L > config_.max_target_positions) {
      throw RangeError("target length " + std::to_string(L) + " exceeds max_target_positions " +
                       std::to_string(config_.max_target_positions));
    }
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(config_.vocab_size));
      }
    }
    std::vector<TokenId> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<TokenId>(i % L);
    Var<T> x = drop(add(embedding<T>(token_, ids), embedding<T>(position_, pos)), dropout_rng);
    const std::size_t heads = config_.heads;
    for (const auto& l : layers_) {
      Var<T> h = l.self_norm(x);
      Var<T> a = masked_attention(l.self_query(h), l.self_key(h), l.self_value(h), batch, heads, L, L, ids_valid, true);
      x = add(x, drop(l.self_output(a), dropout_rng));
      h = l.cross_norm(x);
      Var<T> c = masked_attention(l.cross_query(h), l.cross_key(memory), l.cross_value(memory), batch, heads, L, src_len,
                                  memory_valid, false);
      x = add(x, drop(l.cross_output(c), dropout_rng));
      Var<T> f = l.ffn_out(gelu(l.ffn_in(l.ffn_norm(x))));
      x = add(x, drop(f, dropout_rng));
    }
    return matmul_bt<T>(final_norm_(x), token_);
  }

  std::vector<Parameter<T>> parameters() const {
    std::vector<Parameter<T>> out{token_, position_};
    for (const auto& l : layers_) l.collect(out);
    final_norm_.collect(out);
    return out;
  }

 private:
  Var<T> drop(const Var<T>& x, Rng* rng) const {
    return rng && config_.dropout > 0.0 ? dropout(x, config_.dropout, *rng) : x;
  }

  DecoderConfig config_;
  Parameter<T> token_, position_;
  std::vector<DecoderLayer<T>> layers_;
  LayerNorm<T> final_norm_;
};

struct Seq2SeqSpecials {
  TokenId begin = 0, pad = 1, end = 2;
};

template <typename T>
class Seq2SeqModel {
 public:
  Seq2SeqModel(Encoder<T> encoder, const DecoderConfig& dc, Rng& rng, Seq2SeqSpecials sp = {})
      : encoder(std::move(encoder)), decoder(check(this->encoder.config(), dc), rng), specials(sp) {}

  // Encoder states for right-padded inputs [batch, src_len]; the first
  // token of each input is global.
  Var<T> encode(std::span<const TokenId> ids, std::size_t batch, Rng* dropout_rng = nullptr) const {
    const auto roles = make_roles(ids, batch, specials.pad, true);
    return encoder.forward(ids, batch, roles, dropout_rng);
  }

  std::vector<std::uint8_t> valid_mask(std::span<const TokenId> ids) const {
    std::vector<std::uint8_t> m(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] != specials.pad;
    return m;
  }

  std::vector<Parameter<T>> parameters() const {
    auto out = encoder.parameters();
    for (auto& p : decoder.parameters()) out.push_back(p);
    return out;
  }

  Encoder<T> encoder;
  Decoder<T> decoder;
  Seq2SeqSpecials specials;

 private:
  static const DecoderConfig& check(const EncoderConfig& enc, const DecoderConfig& dc) {
    if (dc.hidden != enc.hidden) {
      throw ConfigError("decoder hidden " + std::to_string(dc.hidden) + " does not match encoder hidden " +
                        std::to_string(enc.hidden));
    }
    if (dc.vocab_size != enc.vocab_size) {
      throw ConfigError("decoder vocabulary " + std::to_string(dc.vocab_size) + " does not match encoder vocabulary " +
                        std::to_string(enc.vocab_size));
    }
    return dc;
  }
};

// Pretrained encoder + freshly initialized decoder drawn from `seed`.
template <typename T>
Seq2SeqModel<T> build_seq2seq(const std::filesystem::path& encoder_checkpoint, const DecoderConfig& dc,
                              std::uint64_t seed, Seq2SeqSpecials sp = {}) {
  auto enc = load_encoder<T>(encoder_checkpoint);
  Rng rng(seed, "init");
  return Seq2SeqModel<T>(std::move(enc), dc, rng, sp);
}

// Layout: encoder/ is an encoder checkpoint, decoder/ holds the decoder
// tensors with the decoder config in its manifest.
template <typename T>
void save_seq2seq(const std::filesystem::path& dir, const Seq2SeqModel<T>& m, nlohmann::ordered_json extra = {}) {
  save_encoder(dir / "encoder", m.encoder);
  nlohmann::ordered_json meta;
  meta["kind"] = "decoder";
  meta["config"] = nlohmann::json(m.decoder.config());
  meta["specials"] = {m.specials.begin, m.specials.pad, m.specials.end};
  if (!extra.is_null()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  }
  const auto params = m.decoder.parameters();
  save_parameters<T>(dir / "decoder", params, std::move(meta));
}

template <typename T>
Seq2SeqModel<T> load_seq2seq(const std::filesystem::path& dir) {
  auto enc = load_encoder<T>(dir / "encoder");
  auto bundle = load_tensors<T>(dir / "decoder");
  DecoderConfig dc;
  Seq2SeqSpecials sp;
  try {
    dc = bundle.manifest.at("config").template get<DecoderConfig>();
    const auto s = bundle.manifest.at("specials").template get<std::vector<TokenId>>();
    if (s.size() != 3) throw FormatError("bad special ids");
    sp = {s[0], s[1], s[2]};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "decoder" / "manifest.json").string() + ": bad decoder config (" + e.what() + ")");
  }
  Rng scratch(0);
  Seq2SeqModel<T> m(std::move(enc), dc, scratch, sp);
  auto params = m.decoder.parameters();
  assign_parameters<T>(params, bundle);
  return m;
}

}  // namespace blf
