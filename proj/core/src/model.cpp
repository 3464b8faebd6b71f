#include "apf/model.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "apf/errors.hpp"

namespace apf {

namespace {

std::string activation_name(Activation a) { return a == Activation::kRelu ? "relu" : "gelu"; }

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "' (expected gelu|relu)");
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

void ModelConfig::set_width(std::size_t model_dim, std::size_t heads) {
  taa.model_dim = taa_dec.model_dim = model_dim;
  taa.heads = taa_dec.heads = heads;
}

void ModelConfig::validate() const {
  if (input_dim == 0) throw ConfigError("input_dim must be positive");
  if (queries == 0) throw ConfigError("queries must be positive");
  if (num_classes == 0) throw ConfigError("num_classes must be at least 1");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  if (learned_positions && max_positions == 0) throw ConfigError("max_positions must be positive");
  taa.validate();
  taa_dec.validate();
  if (taa.model_dim != taa_dec.model_dim || taa.heads != taa_dec.heads) {
    throw ConfigError("encoder and decoder must share model_dim and heads");
  }
}

void to_json(nlohmann::json& j, const TAAConfig& cfg) {
  j = nlohmann::json{{"model_dim", cfg.model_dim},
                     {"heads", cfg.heads},
                     {"window", cfg.window},
                     {"shift_size", cfg.shift_size},
                     {"shift_mode", to_string(cfg.shift_mode)},
                     {"fusion_mode", to_string(cfg.fusion_mode)},
                     {"score_scale", to_string(cfg.score_scale)},
                     {"cosine_weights", cfg.cosine_weights}};
}

void from_json(const nlohmann::json& j, TAAConfig& cfg) {
  cfg.model_dim = j.value("model_dim", cfg.model_dim);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.window = j.value("window", cfg.window);
  cfg.shift_size = j.value("shift_size", cfg.shift_size);
  if (j.contains("shift_mode")) cfg.shift_mode = parse_shift_mode(j.at("shift_mode").get<std::string>());
  if (j.contains("fusion_mode")) cfg.fusion_mode = parse_fusion_mode(j.at("fusion_mode").get<std::string>());
  if (j.contains("score_scale")) cfg.score_scale = parse_score_scale(j.at("score_scale").get<std::string>());
  cfg.cosine_weights = j.value("cosine_weights", cfg.cosine_weights);
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"input_dim", cfg.input_dim},
                     {"encoder_layers", cfg.encoder_layers},
                     {"decoder_layers", cfg.decoder_layers},
                     {"queries", cfg.queries},
                     {"num_classes", cfg.num_classes},
                     {"mlp_ratio", cfg.mlp_ratio},
                     {"activation", activation_name(cfg.activation)},
                     {"learned_positions", cfg.learned_positions},
                     {"max_positions", cfg.max_positions},
                     {"taa", cfg.taa},
                     {"taa_dec", cfg.taa_dec}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  cfg.input_dim = j.value("input_dim", cfg.input_dim);
  cfg.encoder_layers = j.value("encoder_layers", cfg.encoder_layers);
  cfg.decoder_layers = j.value("decoder_layers", cfg.decoder_layers);
  cfg.queries = j.value("queries", cfg.queries);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
  cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
  if (j.contains("activation")) cfg.activation = parse_activation(j.at("activation").get<std::string>());
  cfg.learned_positions = j.value("learned_positions", cfg.learned_positions);
  cfg.max_positions = j.value("max_positions", cfg.max_positions);
  if (j.contains("taa")) from_json(j.at("taa"), cfg.taa);
  if (j.contains("taa_dec")) from_json(j.at("taa_dec"), cfg.taa_dec);
}

double Prediction::score() const {
  double best = 0.0;
  for (double z : class_logits) best = std::max(best, 1.0 / (1.0 + std::exp(-z)));
  return best;
}

int Prediction::label() const {
  return static_cast<int>(std::max_element(class_logits.begin(), class_logits.end()) - class_logits.begin());
}

Tensor positional_embedding(std::size_t length, std::size_t model_dim) {
  Tensor pe({length, model_dim});
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t c = 0; c < model_dim; ++c) {
      const double pair = static_cast<double>(c / 2 * 2);
      const double freq = std::pow(10000.0, -pair / static_cast<double>(model_dim));
      const double angle = static_cast<double>(t) * freq;
      pe.at(t, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Var conv1d_k3(Var x, Var w_prev, Var w_center, Var w_next, Var bias) {
  Var out = add(add(matmul(shift_rows(x, 1), w_prev), matmul(x, w_center)), matmul(shift_rows(x, -1), w_next));
  return add_row_bias(out, bias);
}

Var center_width_to_bounds(Var center_width) {
  const Tensor& cw = center_width.value();
  if (cw.rank() != 2 || cw.dim(1) != 2) {
    throw DimensionError("center_width_to_bounds expects [N x 2], got " + shape_string(cw.shape()));
  }
  const std::size_t n = cw.dim(0);
  Tensor out({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double c = cw.at(i, 0), w = cw.at(i, 1);
    out.at(i, 0) = std::clamp(c - 0.5 * w, 0.0, 1.0);
    out.at(i, 1) = std::clamp(c + 0.5 * w, 0.0, 1.0);
  }
  return center_width.graph().record(
      "center_width_to_bounds", std::move(out), {center_width},
      [center_width, n](Graph& g, const Tensor& go, const Tensor&) {
        const Tensor& cw = g.value(center_width);
        Tensor& gx = g.grad_buffer(center_width);
        for (std::size_t i = 0; i < n; ++i) {
          const double c = cw.at(i, 0), w = cw.at(i, 1);
          const double s = c - 0.5 * w, e = c + 0.5 * w;
          if (s > 0.0 && s < 1.0) {
            gx.at(i, 0) += go.at(i, 0);
            gx.at(i, 1) -= 0.5 * go.at(i, 0);
          }
          if (e > 0.0 && e < 1.0) {
            gx.at(i, 0) += go.at(i, 1);
            gx.at(i, 1) += 0.5 * go.at(i, 1);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  init_params(rng);
}

Model::Model(ModelConfig cfg, ParameterSet params) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(0);
  init_params(rng);
  if (params.size() != params_.size()) {
    throw ContractError("checkpoint has " + std::to_string(params.size()) + " parameters, config expects " +
                        std::to_string(params_.size()));
  }
  for (Parameter& p : params_) {
    if (!params.contains(p.name)) throw ContractError("checkpoint is missing parameter " + p.name);
    const Parameter& src = params.get(p.name);
    if (src.value.shape() != p.value.shape()) {
      throw ContractError("parameter " + p.name + " has shape " + shape_string(src.value.shape()) + ", config expects " +
                          shape_string(p.value.shape()));
    }
    p.value = src.value;
  }
}

void Model::init_params(std::mt19937_64& rng) {
  const std::size_t c_in = cfg_.input_dim, c = cfg_.model_dim(), hidden = cfg_.mlp_ratio * c;
  auto add_ln = [&](const std::string& prefix) {
    params_.add(prefix + ".g", Tensor({c}, 1.0));
    params_.add(prefix + ".b", Tensor({c}));
  };
  auto add_mlp = [&](const std::string& prefix) {
    params_.add(prefix + ".w1", xavier_uniform(c, hidden, rng));
    params_.add(prefix + ".b1", Tensor({hidden}));
    params_.add(prefix + ".w2", xavier_uniform(hidden, c, rng));
    params_.add(prefix + ".b2", Tensor({c}));
  };

  for (int conv = 1; conv <= 2; ++conv) {
    const std::string prefix = "input.conv" + std::to_string(conv);
    const std::size_t fan_in = conv == 1 ? c_in : c;
    // Xavier bound over the full kernel-3 fan-in.
    const double bound = std::sqrt(6.0 / static_cast<double>(3 * fan_in + c));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (const char* tap : {".w_prev", ".w_center", ".w_next"}) {
      Tensor w({fan_in, c});
      for (double& v : w.data()) v = dist(rng);
      params_.add(prefix + tap, std::move(w));
    }
    params_.add(prefix + ".b", Tensor({c}));
  }
  if (cfg_.learned_positions) {
    params_.add("positions", positional_embedding(cfg_.max_positions, c));
  }
  for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string prefix = "enc" + std::to_string(l);
    add_ln(prefix + ".ln1");
    init_taa_params(params_, prefix + ".taa", cfg_.taa, rng);
    add_ln(prefix + ".ln2");
    add_mlp(prefix + ".mlp");
  }
  params_.add("queries", normal_tensor({cfg_.queries, c}, 1.0, rng));
  for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string prefix = "dec" + std::to_string(l);
    add_ln(prefix + ".ln_sa");
    for (const char* name : {"q", "k", "v", "o"}) {
      params_.add(prefix + ".sa.w" + name, xavier_uniform(c, c, rng));
      params_.add(prefix + ".sa.b" + name, Tensor({c}));
    }
    add_ln(prefix + ".ln_ca");
    add_ln(prefix + ".ln_mem");
    for (const char* name : {"q", "k", "v", "o"}) {
      params_.add(prefix + ".ca.w" + name, xavier_uniform(c, c, rng));
      params_.add(prefix + ".ca.b" + name, Tensor({c}));
    }
    if (cfg_.taa_dec.fusion_mode != FusionMode::kFixed11) params_.add(prefix + ".ca.alpha", Tensor::scalar(0.5));
    if (cfg_.taa_dec.fusion_mode == FusionMode::kTwoAlphas) params_.add(prefix + ".ca.alpha2", Tensor::scalar(0.5));
    add_ln(prefix + ".ln_mlp");
    add_mlp(prefix + ".mlp");
  }
  add_ln("dec_norm");
  params_.add("head.cls.w", xavier_uniform(c, cfg_.num_classes, rng));
  // Focal-loss prior: initial foreground probability 0.01.
  params_.add("head.cls.b", Tensor({cfg_.num_classes}, -std::log((1.0 - 0.01) / 0.01)));
  params_.add("head.reg.w1", xavier_uniform(c, c, rng));
  params_.add("head.reg.b1", Tensor({c}));
  params_.add("head.reg.w2", xavier_uniform(c, 2, rng));
  params_.add("head.reg.b2", Tensor({2}));
}

Var Model::input_projection(Graph& g, const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) != cfg_.input_dim) {
    throw ConfigError("features " + shape_string(features.shape()) + " do not match input_dim " +
                      std::to_string(cfg_.input_dim));
  }
  Var x = g.constant(transpose(features));
  auto conv = [&](Var in, const std::string& prefix) {
    return conv1d_k3(in, bind_param(g, params_, prefix + ".w_prev"), bind_param(g, params_, prefix + ".w_center"),
                     bind_param(g, params_, prefix + ".w_next"), bind_param(g, params_, prefix + ".b"));
  };
  return conv(activation(conv(x, "input.conv1"), cfg_.activation), "input.conv2");
}

Var Model::positions(Graph& g, std::size_t len) {
  if (cfg_.learned_positions) {
    if (len > cfg_.max_positions) {
      throw ContractError("sequence length " + std::to_string(len) + " exceeds max_positions " +
                          std::to_string(cfg_.max_positions));
    }
    return slice_rows(bind_param(g, params_, "positions"), 0, len);
  }
  return g.constant(positional_embedding(len, cfg_.model_dim()));
}

Var Model::add_positions(Graph& g, Var projected) { return add(projected, positions(g, projected.value().dim(0))); }

Var Model::mlp(Graph& g, const std::string& prefix, Var x) {
  Var hidden = activation(linear(x, bind_param(g, params_, prefix + ".w1"), bind_param(g, params_, prefix + ".b1")), cfg_.activation);
  return linear(hidden, bind_param(g, params_, prefix + ".w2"), bind_param(g, params_, prefix + ".b2"));
}

Var Model::encoder_layer(Graph& g, std::size_t layer, Var x, AttentionStats* stats) {
  const std::string prefix = "enc" + std::to_string(layer);
  auto ln = [&](Var in, const std::string& name) {
    return layer_norm(in, bind_param(g, params_, prefix + name + ".g"), bind_param(g, params_, prefix + name + ".b"));
  };
  Var h1 = add(taa_forward(g, params_, prefix + ".taa", ln(x, ".ln1"), cfg_.taa, stats), x);
  return add(mlp(g, prefix + ".mlp", ln(h1, ".ln2")), h1);
}

Var Model::encode(Graph& g, Var x, AttentionStats* stats) {
  for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) x = encoder_layer(g, l, x, stats);
  return x;
}

Var Model::decoder_layer(Graph& g, std::size_t layer, Var queries, Var memory, Var memory_positions) {
  const std::string prefix = "dec" + std::to_string(layer);
  const std::size_t heads = cfg_.heads();
  const double scale = std::sqrt(static_cast<double>(cfg_.taa_dec.head_dim()));
  auto ln = [&](Var in, const std::string& name) {
    return layer_norm(in, bind_param(g, params_, prefix + name + ".g"), bind_param(g, params_, prefix + name + ".b"));
  };
  auto proj = [&](Var in, const std::string& block, const char* name) {
    return linear(in, bind_param(g, params_, prefix + block + ".w" + name), bind_param(g, params_, prefix + block + ".b" + name));
  };

  // Self-attention among the proposal queries.
  Var qn = ln(queries, ".ln_sa");
  Var sa = dense_attention(split_heads(proj(qn, ".sa", "q"), heads), split_heads(proj(qn, ".sa", "k"), heads),
                           split_heads(proj(qn, ".sa", "v"), heads), scale);
  Var h1 = add(proj(merge_heads(sa), ".sa", "o"), queries);

  // Cross-attention whose value stream goes through the decoder's TAA fusion.
  Var cq = ln(h1, ".ln_ca");
  Var mem = ln(memory, ".ln_mem");
  Var v = split_heads(proj(mem, ".ca", "v"), heads);
  const FusionMode mode = cfg_.taa_dec.fusion_mode;
  Var alpha = mode == FusionMode::kFixed11 ? Var() : bind_param(g, params_, prefix + ".ca.alpha");
  Var alpha2 = mode == FusionMode::kTwoAlphas ? bind_param(g, params_, prefix + ".ca.alpha2") : Var();
  Var values = fuse_branches(v, lcs_heads(v, cfg_.taa_dec.shift_size, cfg_.taa_dec.shift_mode), mode, alpha, alpha2);
  // Keys see the positional table again so queries can attend by location.
  Var keys = proj(add(mem, memory_positions), ".ca", "k");
  Var ca = dense_attention(split_heads(proj(cq, ".ca", "q"), heads), split_heads(keys, heads), values, scale);
  Var h2 = add(proj(merge_heads(ca), ".ca", "o"), h1);

  return add(mlp(g, prefix + ".mlp", ln(h2, ".ln_mlp")), h2);
}

Var Model::query_embeddings(Graph& g) { return bind_param(g, params_, "queries"); }

Var Model::decode(Graph& g, Var memory) {
  Var q = query_embeddings(g);
  Var pos = positions(g, memory.value().dim(0));
  for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) q = decoder_layer(g, l, q, memory, pos);
  return q;
}

HeadOutputs Model::prediction_heads(Graph& g, Var decoded) {
  Var x = layer_norm(decoded, bind_param(g, params_, "dec_norm.g"), bind_param(g, params_, "dec_norm.b"));
  Var logits = linear(x, bind_param(g, params_, "head.cls.w"), bind_param(g, params_, "head.cls.b"));
  Var hidden = activation(linear(x, bind_param(g, params_, "head.reg.w1"), bind_param(g, params_, "head.reg.b1")), cfg_.activation);
  Var raw = linear(hidden, bind_param(g, params_, "head.reg.w2"), bind_param(g, params_, "head.reg.b2"));
  return HeadOutputs{logits, center_width_to_bounds(sigmoid(raw))};
}

HeadOutputs Model::forward(Graph& g, const Tensor& features, AttentionStats* stats) {
  if (features.rank() != 2 || features.dim(1) < 1) throw ContractError("model_forward needs T >= 1");
  Var x = add_positions(g, input_projection(g, features));
  Var memory = encode(g, x, stats);
  return prediction_heads(g, decode(g, memory));
}

std::vector<Prediction> Model::predict(const Tensor& features) {
  Graph g;
  HeadOutputs out = forward(g, features);
  return decode_predictions(out.logits.value(), out.boundaries.value());
}

std::vector<Prediction> decode_predictions(const Tensor& logits, const Tensor& boundaries) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<Prediction> preds(n);
  for (std::size_t i = 0; i < n; ++i) {
    preds[i].t_start = boundaries.at(i, 0);
    preds[i].t_end = boundaries.at(i, 1);
    preds[i].class_logits.assign(logits.data().begin() + static_cast<long>(i * k),
                                 logits.data().begin() + static_cast<long>((i + 1) * k));
  }
  return preds;
}

DetectionSet to_detections(const std::vector<Prediction>& preds, const std::string& video_id, double duration) {
  DetectionSet set{video_id, {}};
  set.detections.reserve(preds.size());
  for (const Prediction& p : preds) {
    set.detections.push_back(Segment{p.t_start * duration, p.t_end * duration, p.label(), p.score()});
  }
  return set;
}

}  // namespace apf
