#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/ops.hpp"
#include "blf/core/rng.hpp"
#include "blf/model/attention.hpp"

namespace blf {

struct EncoderConfig {
  std::size_t vocab_size = 64000;
  std::size_t hidden = 256;
  std::size_t layers = 12;
  std::size_t heads = 4;
  std::size_t intermediate = 1024;
  std::size_t window = 256;
  std::size_t max_positions = 4096;
  double dropout = 0.1;

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
      throw ConfigError("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
    if (window == 0 || window % 2 != 0) throw ConfigError("window must be a positive even integer");
    if (window > max_positions) throw ConfigError("window exceeds max_positions");
    if (vocab_size == 0 || intermediate == 0 || max_positions == 0) throw ConfigError("extents must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }

  // `small` and `base` match the 29M / 159M encoder sizes; `tiny` is the
  // desk-scale configuration used for training checks.
  static EncoderConfig preset(const std::string& name) {
    EncoderConfig c;
    if (name == "small") {
      c.hidden = 256, c.layers = 12, c.heads = 4, c.intermediate = 1024;
    } else if (name == "base") {
      c.hidden = 768, c.layers = 12, c.heads = 12, c.intermediate = 3072;
    } else if (name == "tiny") {
      c.hidden = 64, c.layers = 2, c.heads = 2, c.intermediate = 256, c.window = 8, c.max_positions = 128, c.dropout = 0.0;
    } else {
      throw ConfigError("unknown encoder preset '" + name + "' (expected small, base or tiny)");
    }
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"hidden", c.hidden},
                     {"layers", c.layers},         {"heads", c.heads},
                     {"intermediate", c.intermediate}, {"window", c.window},
                     {"max_positions", c.max_positions}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("hidden").get_to(c.hidden);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("intermediate").get_to(c.intermediate);
  j.at("window").get_to(c.window);
  j.at("max_positions").get_to(c.max_positions);
  j.at("dropout").get_to(c.dropout);
}

// Trainable scalars of the encoder: token and position embeddings, per
// layer two norms, q/k/v/output projections, separate global q/k/v
// projections and the feed-forward block, plus the final norm. With
// untied embeddings a separate [vocab, hidden] output projection is added.
inline std::uint64_t count_parameters(const EncoderConfig& c, bool tied_embeddings = true) {
  const std::uint64_t V = c.vocab_size, H = c.hidden, I = c.intermediate, P = c.max_positions;
  const std::uint64_t per_layer = 2 * (2 * H) + 7 * (H * H + H) + (H * I + I) + (I * H + H);
  std::uint64_t total = V * H + P * H + c.layers * per_layer + 2 * H;
  if (!tied_embeddings) total += V * H;
  return total;
}

template <typename T>
Parameter<T> init_normal(const std::string& name, Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return Parameter<T>(name, std::move(t));
}

template <typename T>
Parameter<T> init_constant(const std::string& name, Shape shape, T value) {
  return Parameter<T>(name, Tensor<T>(std::move(shape), value));
}

template <typename T>
struct Linear {
  Parameter<T> weight;  // [in, out]
  Parameter<T> bias;    // [out]

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(init_normal<T>(name + ".weight", {in, out}, rng)), bias(init_constant<T>(name + ".bias", {out}, T{0})) {}

  Var<T> operator()(const Var<T>& x) const { return add_bias(matmul<T>(x, weight), Var<T>(bias)); }
  void collect(std::vector<Parameter<T>>& out) const {
    out.push_back(weight);
    out.push_back(bias);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gain, bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t d)
      : gain(init_constant<T>(name + ".gain", {d}, T{1})), bias(init_constant<T>(name + ".bias", {d}, T{0})) {}

  Var<T> operator()(const Var<T>& x) const { return layer_norm<T>(x, gain, bias, eps); }
  void collect(std::vector<Parameter<T>>& out) const {
    out.push_back(gain);
    out.push_back(bias);
  }
};

template <typename T>
struct EncoderLayer {
  LayerNorm<T> attn_norm;
  Linear<T> query, key, value, output;
  Linear<T> global_query, global_key, global_value;
  LayerNorm<T> ffn_norm;
  Linear<T> ffn_in, ffn_out;

  EncoderLayer(const std::string& p, const EncoderConfig& c, Rng& rng)
      : attn_norm(p + ".attn_norm", c.hidden),
        query(p + ".attn.query", c.hidden, c.hidden, rng),
        key(p + ".attn.key", c.hidden, c.hidden, rng),
        value(p + ".attn.value", c.hidden, c.hidden, rng),
        output(p + ".attn.output", c.hidden, c.hidden, rng),
        global_query(p + ".attn.global_query", c.hidden, c.hidden, rng),
        global_key(p + ".attn.global_key", c.hidden, c.hidden, rng),
        global_value(p + ".attn.global_value", c.hidden, c.hidden, rng),
        ffn_norm(p + ".ffn_norm", c.hidden),
        ffn_in(p + ".ffn.in", c.hidden, c.intermediate, rng),
        ffn_out(p + ".ffn.out", c.intermediate, c.hidden, rng) {}

  void collect(std::vector<Parameter<T>>& out) const {
    attn_norm.collect(out);
    query.collect(out);
    key.collect(out);
    value.collect(out);
    output.collect(out);
    global_query.collect(out);
    global_key.collect(out);
    global_value.collect(out);
    ffn_norm.collect(out);
    ffn_in.collect(out);
    ffn_out.collect(out);
  }
};

// Pre-norm Longformer encoder with learned absolute positions.
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& config, Rng& rng)
      : Encoder(config, init_normal<T>("embeddings.token", {config.vocab_size, config.hidden}, rng),
                init_normal<T>("embeddings.position", {config.max_positions, config.hidden}, rng), rng) {}

  // Shares the given embedding tables (used to tie a generator to its
  // discriminator).
  Encoder(const EncoderConfig& config, Parameter<T> token_embedding, Parameter<T> position_embedding, Rng& rng)
      : config_(config), token_(std::move(token_embedding)), position_(std::move(position_embedding)) {
    config_.validate();
    if (token_.value().shape() != Shape{config_.vocab_size, config_.hidden} ||
        position_.value().shape() != Shape{config_.max_positions, config_.hidden}) {
      throw ConfigError("embedding tables do not match the encoder configuration");
    }
    layers_.reserve(config_.layers);
    for (std::size_t i = 0; i < config_.layers; ++i) layers_.emplace_back("layers." + std::to_string(i), config_, rng);
    final_norm_ = LayerNorm<T>("final_norm", config_.hidden);
  }

  const EncoderConfig& config() const { return config_; }
  const Parameter<T>& token_embedding() const { return token_; }
  const Parameter<T>& position_embedding() const { return position_; }

  // Hidden states [batch * seq, hidden] for ids laid out [batch, seq].
  // `dropout_rng` enables dropout (training mode) when non-null.
  Var<T> forward(std::span<const TokenId> ids, std::size_t batch, std::span<const TokenRole> roles,
                 Rng* dropout_rng = nullptr) const {
    if (batch == 0 || ids.size() % batch != 0) throw DimensionError("ids length is not a multiple of the batch size");
    const std::size_t L = ids.size() / batch;
    if (L > config_.max_positions) {
      throw RangeError("sequence length " + std::to_string(L) + " exceeds max_positions " +
                       std::to_string(config_.max_positions));
    }
    if (roles.size() != ids.size()) throw DimensionError("roles length does not match ids");
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(config_.vocab_size));
      }
    }
    std::vector<TokenId> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<TokenId>(i % L);

    Var<T> x = add(embedding<T>(token_, ids), embedding<T>(position_, pos));
    x = maybe_dropout(x, dropout_rng);

    bool any_global = false;
    for (auto r : roles) any_global = any_global || r == TokenRole::global;
    const AttentionLayout layout{batch, L, config_.heads};

    for (const auto& layer : layers_) {
      Var<T> h = layer.attn_norm(x);
      Var<T> a;
      if (any_global) {
        GlobalProjections<T> g{layer.global_query(h), layer.global_key(h), layer.global_value(h)};
        a = sliding_window_attention(layer.query(h), layer.key(h), layer.value(h), layout, config_.window, roles, &g);
      } else {
        a = sliding_window_attention(layer.query(h), layer.key(h), layer.value(h), layout, config_.window, roles);
      }
      x = add(x, maybe_dropout(layer.output(a), dropout_rng));
      Var<T> f = layer.ffn_out(gelu(layer.ffn_in(layer.ffn_norm(x))));
      x = add(x, maybe_dropout(f, dropout_rng));
    }
    return final_norm_(x);
  }

  std::vector<Parameter<T>> parameters() const {
    std::vector<Parameter<T>> out{token_, position_};
    for (const auto& l : layers_) l.collect(out);
    final_norm_.collect(out);
    return out;
  }

 private:
  Var<T> maybe_dropout(const Var<T>& x, Rng* rng) const {
    return rng && config_.dropout > 0.0 ? dropout(x, config_.dropout, *rng) : x;
  }

  EncoderConfig config_;
  Parameter<T> token_;
  Parameter<T> position_;
  std::vector<EncoderLayer<T>> layers_;
  LayerNorm<T> final_norm_;
};

// Roles for a right-padded batch: tokens equal to `pad_id` become padding,
// and the first token of each sequence becomes global when requested.
inline std::vector<TokenRole> make_roles(std::span<const TokenId> ids, std::size_t batch, TokenId pad_id,
                                         bool first_token_global = false) {
  std::vector<TokenRole> roles(ids.size(), TokenRole::local);
  const std::size_t L = batch ? ids.size() / batch : 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == pad_id) roles[i] = TokenRole::padding;
  }
  if (first_token_global) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (L && roles[b * L] != TokenRole::padding) roles[b * L] = TokenRole::global;
    }
  }
  return roles;
}

}  // namespace blf
