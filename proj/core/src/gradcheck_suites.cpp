#include "apf/gradcheck_suites.hpp"

#include <functional>
#include <random>

#include "apf/errors.hpp"
#include "apf/matching.hpp"
#include "apf/model.hpp"
#include "apf/taa.hpp"

namespace apf {

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

using OpFn = std::function<Var(Graph&, const std::vector<Var>&)>;

// Builds a ParameterSet from `inputs` and reduces the op output against a fixed
// random projection so every output coordinate carries a distinct weight.
class SuiteRunner {
 public:
  SuiteRunner(std::string suite, const GradSuiteOptions& opt) : suite_(std::move(suite)), opt_(opt), rng_(opt.seed) {}

  std::mt19937_64& rng() { return rng_; }

  void op(const std::string& name, std::vector<Tensor> inputs, const OpFn& fn) {
    ParameterSet params;
    for (std::size_t i = 0; i < inputs.size(); ++i) params.add("in" + std::to_string(i), std::move(inputs[i]));
    Tensor projection;
    bool have_projection = false;
    auto loss = [&](Graph& g) {
      std::vector<Var> vars;
      for (Parameter& p : params) vars.push_back(g.param(p));
      Var out = fn(g, vars);
      if (!have_projection) {
        projection = uniform(out.value().shape(), rng_, -1.0, 1.0);
        have_projection = true;
      }
      return sum(mul(out, g.constant(projection)));
    };
    results_.push_back(check_parameters(suite_ + "/" + name, params, loss, opt_.tolerance, opt_.step));
  }

  void loss(const std::string& name, ParameterSet& params, const std::function<Var(Graph&)>& fn) {
    results_.push_back(check_parameters(suite_ + "/" + name, params, fn, opt_.tolerance, opt_.step));
  }

  std::vector<GradCheckResult> take() { return std::move(results_); }

 private:
  std::string suite_;
  GradSuiteOptions opt_;
  std::mt19937_64 rng_;
  std::vector<GradCheckResult> results_;
};

// Values kept away from the kinks of clamp/relu/abs so central differences stay smooth.
Tensor away_from(Tensor t, double kink, double margin) {
  for (double& v : t.data())
    if (std::abs(v - kink) < margin) v = kink + (v < kink ? -margin : margin);
  return t;
}

void tensor_core_suite(SuiteRunner& s, const GradSuiteOptions& o) {
  auto& rng = s.rng();
  const std::size_t n = o.seq_len, c = o.model_dim;
  s.op("add", {uniform({n, c}, rng), uniform({n, c}, rng)}, [](Graph&, const auto& v) { return add(v[0], v[1]); });
  s.op("sub", {uniform({n, c}, rng), uniform({n, c}, rng)}, [](Graph&, const auto& v) { return sub(v[0], v[1]); });
  s.op("mul", {uniform({n, c}, rng), uniform({n, c}, rng)}, [](Graph&, const auto& v) { return mul(v[0], v[1]); });
  s.op("scale", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return scale(v[0], -1.7); });
  s.op("add_scalar", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return add_scalar(v[0], 0.3); });
  s.op("scale_by", {uniform({1}, rng), uniform({n, c}, rng)}, [](Graph&, const auto& v) { return scale_by(v[0], v[1]); });
  s.op("one_minus", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return one_minus(v[0]); });
  s.op("sum", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return sum(v[0]); });
  s.op("mean", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return mean(v[0]); });
  s.op("sigmoid", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return sigmoid(v[0]); });
  s.op("clamp", {away_from(away_from(uniform({n, c}, rng), -0.5, 1e-3), 0.5, 1e-3)},
       [](Graph&, const auto& v) { return clamp(v[0], -0.5, 0.5); });
  s.op("gelu", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return activation(v[0], Activation::kGelu); });
  s.op("relu", {away_from(uniform({n, c}, rng), 0.0, 1e-3)},
       [](Graph&, const auto& v) { return activation(v[0], Activation::kRelu); });
  s.op("matmul", {uniform({n, c}, rng), uniform({c, 5}, rng)}, [](Graph&, const auto& v) { return matmul(v[0], v[1]); });
  s.op("transpose", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return transpose(v[0]); });
  s.op("add_row_bias", {uniform({n, c}, rng), uniform({c}, rng)},
       [](Graph&, const auto& v) { return add_row_bias(v[0], v[1]); });
  s.op("linear", {uniform({n, c}, rng), uniform({c, 3}, rng), uniform({3}, rng)},
       [](Graph&, const auto& v) { return linear(v[0], v[1], v[2]); });
  s.op("softmax", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return softmax_lastdim(v[0]); });
  std::vector<std::uint8_t> keep(n * c);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (i % c == 0) || (rng() % 3 != 0);
  s.op("softmax_masked", {uniform({n, c}, rng)}, [keep](Graph&, const auto& v) { return softmax_lastdim(v[0], keep); });
  s.op("layer_norm", {uniform({n, c}, rng), uniform({c}, rng), uniform({c}, rng)},
       [](Graph&, const auto& v) { return layer_norm(v[0], v[1], v[2]); });
  s.op("shift_rows", {uniform({n, c}, rng)}, [](Graph&, const auto& v) { return add(shift_rows(v[0], 1), shift_rows(v[0], -2)); });
  s.op("slice_rows", {uniform({n, c}, rng)}, [n](Graph&, const auto& v) { return slice_rows(v[0], 1, n - 2); });
  s.op("select_rows", {uniform({n, c}, rng)}, [n](Graph&, const auto& v) {
    const std::size_t rows[] = {n - 1, 0, 2, 0};
    return select_rows(v[0], rows);
  });
  s.op("split_heads", {uniform({n, c}, rng)}, [o](Graph&, const auto& v) { return split_heads(v[0], o.heads); });
  s.op("merge_heads", {uniform({o.heads, n, c / o.heads}, rng)}, [](Graph&, const auto& v) { return merge_heads(v[0]); });
}

void taa_suite(SuiteRunner& s, const GradSuiteOptions& o) {
  auto& rng = s.rng();
  const std::size_t H = o.heads, c = o.model_dim, dh = c / H;
  for (std::size_t t_len : {o.seq_len, 2 * o.seq_len}) {
    const std::string tag = "[T=" + std::to_string(t_len) + "]";
    auto qkv_shape = Shape{H, t_len, dh};
    s.op("gpa_attention_cosine" + tag, {uniform(qkv_shape, rng), uniform(qkv_shape, rng), uniform(qkv_shape, rng)},
         [t_len](Graph&, const auto& v) { return gpa_attention(v[0], v[1], v[2], 3, std::sqrt(double(t_len)), true); });
    s.op("gpa_attention_plain" + tag, {uniform(qkv_shape, rng), uniform(qkv_shape, rng), uniform(qkv_shape, rng)},
         [dh](Graph&, const auto& v) { return gpa_attention(v[0], v[1], v[2], 3, std::sqrt(double(dh)), false); });
    for (ShiftMode mode : {ShiftMode::kGeneral, ShiftMode::kBidirectional}) {
      const std::string m = "[" + to_string(mode) + "]" + tag;
      s.op("temporal_shift" + m, {uniform(qkv_shape, rng)}, [mode](Graph&, const auto& v) { return temporal_shift(v[0], 3, mode); });
      s.op("channel_shift" + m, {uniform(qkv_shape, rng)}, [mode](Graph&, const auto& v) { return channel_shift(v[0], 3, mode); });
      s.op("lcs" + m, {uniform(qkv_shape, rng)}, [mode](Graph&, const auto& v) { return lcs_heads(v[0], 3, mode); });
    }
  }
  const std::size_t t_len = o.seq_len;
  s.op("dense_attention", {uniform({H, 3, dh}, rng), uniform({H, t_len, dh}, rng), uniform({H, t_len, dh}, rng)},
       [dh](Graph&, const auto& v) { return dense_attention(v[0], v[1], v[2], std::sqrt(double(dh))); });
  s.op("project_qkv",
       {uniform({t_len, c}, rng), uniform({c, c}, rng), uniform({c}, rng), uniform({c, c}, rng), uniform({c}, rng),
        uniform({c, c}, rng), uniform({c}, rng)},
       [H](Graph&, const auto& v) {
         QKV qkv = project_qkv(v[0], v[1], v[2], v[3], v[4], v[5], v[6], H);
         return add(add(qkv.q, scale(qkv.k, 0.5)), scale(qkv.v, -0.25));
       });
  for (FusionMode mode : {FusionMode::kFixed11, FusionMode::kAlphaRight, FusionMode::kAlphaLeft,
                          FusionMode::kAlphaComplement, FusionMode::kTwoAlphas}) {
    s.op("fuse[" + to_string(mode) + "]", {uniform({t_len, c}, rng), uniform({t_len, c}, rng), uniform({1}, rng), uniform({1}, rng)},
         [mode](Graph&, const auto& v) { return fuse_branches(v[0], v[1], mode, v[2], v[3]); });
  }
  // Full block over every fusion and shift mode, both sequence lengths.
  for (std::size_t len : {o.seq_len, 2 * o.seq_len}) {
    for (FusionMode fusion : {FusionMode::kFixed11, FusionMode::kAlphaRight, FusionMode::kAlphaLeft,
                              FusionMode::kAlphaComplement, FusionMode::kTwoAlphas}) {
      for (ShiftMode shift : {ShiftMode::kGeneral, ShiftMode::kBidirectional}) {
        TAAConfig cfg;
        cfg.model_dim = c;
        cfg.heads = H;
        cfg.window = 3;
        cfg.shift_size = 3;
        cfg.shift_mode = shift;
        cfg.fusion_mode = fusion;
        ParameterSet params;
        init_taa_params(params, "taa", cfg, rng);
        const Tensor x = uniform({len, c}, rng);
        const Tensor proj = uniform({len, c}, rng, -1.0, 1.0);
        s.loss("taa_forward[" + to_string(fusion) + "," + to_string(shift) + ",T=" + std::to_string(len) + "]", params,
               [&](Graph& g) { return sum(mul(taa_forward(g, params, "taa", g.constant(x), cfg), g.constant(proj))); });
      }
    }
  }
}

ModelConfig suite_model_config(const GradSuiteOptions& o) {
  ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.num_classes = 3;
  cfg.queries = o.queries;
  cfg.encoder_layers = o.encoder_layers;
  cfg.decoder_layers = o.decoder_layers;
  cfg.set_width(o.model_dim, o.heads);
  cfg.taa.window = 3;
  cfg.taa.shift_size = 3;
  cfg.taa_dec.shift_size = 3;
  return cfg;
}

void model_suite(SuiteRunner& s, const GradSuiteOptions& o) {
  auto& rng = s.rng();
  const std::size_t c = o.model_dim, t_len = o.seq_len;
  s.op("conv1d_k3", {uniform({t_len, 4}, rng), uniform({4, c}, rng), uniform({4, c}, rng), uniform({4, c}, rng), uniform({c}, rng)},
       [](Graph&, const auto& v) { return conv1d_k3(v[0], v[1], v[2], v[3], v[4]); });
  s.op("center_width_to_bounds", {uniform({6, 2}, rng, 0.2, 0.7)},
       [](Graph&, const auto& v) { return center_width_to_bounds(v[0]); });

  const ModelConfig cfg = suite_model_config(o);
  Model model(cfg, o.seed + 1);
  const Tensor features = uniform({cfg.input_dim, t_len}, rng);
  const Tensor enc_in = uniform({t_len, c}, rng);
  const Tensor enc_proj = uniform({t_len, c}, rng, -1.0, 1.0);
  const Tensor dec_proj = uniform({cfg.queries, c}, rng, -1.0, 1.0);
  s.loss("encoder_layer", model.params(), [&](Graph& g) {
    return sum(mul(model.encoder_layer(g, 0, g.constant(enc_in)), g.constant(enc_proj)));
  });
  s.loss("decoder_layer", model.params(), [&](Graph& g) {
    Var pos = model.positions(g, t_len);
    return sum(mul(model.decoder_layer(g, 0, model.query_embeddings(g), g.constant(enc_in), pos), g.constant(dec_proj)));
  });

  GroundTruth gt;
  gt.segments = {{0.1, 0.4, 1, 1.0}, {0.55, 0.9, 2, 1.0}};
  Graph probe;
  const HeadOutputs first = model.forward(probe, features);
  const MatchResult match =
      hungarian_match(cost_matrix(decode_predictions(first.logits.value(), first.boundaries.value()), gt));
  s.loss("model_forward+total_loss", model.params(),
         [&](Graph& g) { return total_loss(model.forward(g, features), gt, match, LossConfig{}).total; });
}

void matching_suite(SuiteRunner& s, const GradSuiteOptions& o) {
  auto& rng = s.rng();
  const std::size_t nq = o.queries + 1;
  const std::vector<int> targets = [&] {
    std::vector<int> t(nq, -1);
    t[0] = 2;
    t[nq - 1] = 0;
    return t;
  }();
  s.op("focal_loss", {uniform({nq, 3}, rng)}, [targets](Graph&, const auto& v) { return focal_loss(v[0], targets); });
  Tensor gt_bounds({3, 2});
  for (std::size_t i = 0; i < 3; ++i) {
    gt_bounds.at(i, 0) = 0.1 + 0.2 * static_cast<double>(i);
    gt_bounds.at(i, 1) = gt_bounds.at(i, 0) + 0.25;
  }
  auto pred_bounds = [&] {
    Tensor b = uniform({3, 2}, rng, 0.05, 0.95);
    for (std::size_t i = 0; i < 3; ++i)
      if (b.at(i, 0) > b.at(i, 1)) std::swap(b.at(i, 0), b.at(i, 1));
    return b;
  };
  s.op("diou_loss", {pred_bounds()}, [gt_bounds](Graph&, const auto& v) { return diou_loss(v[0], gt_bounds); });
  s.op("l1_boundary_loss", {away_from(pred_bounds(), 0.3, 1e-3)},
       [gt_bounds](Graph&, const auto& v) { return l1_boundary_loss(v[0], gt_bounds); });

  GroundTruth gt;
  gt.segments = {{0.1, 0.35, 0, 1.0}, {0.5, 0.8, 2, 1.0}};
  ParameterSet params;
  params.add("logits", uniform({nq, 3}, rng));
  params.add("center_width", uniform({nq, 2}, rng, 0.2, 0.6));
  MatchResult match;
  match.pairs = {{1, 0}, {0, 1}};
  for (std::size_t i = 2; i < nq; ++i) match.unmatched.push_back(i);
  s.loss("total_loss", params, [&](Graph& g) {
    HeadOutputs out{g.param(params.get("logits")), center_width_to_bounds(g.param(params.get("center_width")))};
    return total_loss(out, gt, match, LossConfig{}).total;
  });
}

}  // namespace

std::vector<std::string> gradcheck_suite_names() { return {"tensor-core", "taa", "model", "matching"}; }

std::vector<GradCheckResult> run_gradcheck_suite(const std::string& suite, const GradSuiteOptions& options) {
  if (options.model_dim % options.heads != 0) throw ConfigError("gradcheck: heads must divide model_dim");
  SuiteRunner runner(suite, options);
  if (suite == "tensor-core") {
    tensor_core_suite(runner, options);
  } else if (suite == "taa") {
    taa_suite(runner, options);
  } else if (suite == "model") {
    model_suite(runner, options);
  } else if (suite == "matching") {
    matching_suite(runner, options);
  } else {
    throw ConfigError("unknown gradcheck suite '" + suite + "'");
  }
  return runner.take();
}

}  // namespace apf
