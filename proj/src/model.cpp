#include "uasr/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace uasr {

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void check_positive(int64_t v, const char* field) {
  if (v < 1) throw ConfigError(std::string(field) + ": must be >= 1");
}

Tensor ffn_block(const Tensor& x, const Tensor& w1, const Tensor& b1,
                 const Tensor& w2, const Tensor& b2, Tape* tape) {
  Tensor h = relu(add_rowvec(matmul(x, w1, tape), b1, tape), tape);
  return add_rowvec(matmul(h, w2, tape), b2, tape);
}

}  // namespace

// ---- ModelConfig ----------------------------------------------------------

void ModelConfig::validate() const {
  check_positive(d_input, "d_input");
  check_positive(d_model, "d_model");
  check_positive(heads, "heads");
  if (d_model % heads != 0)
    throw ConfigError("heads: d_model " + std::to_string(d_model) +
                      " not divisible by " + std::to_string(heads));
  if (vocab_size < kNumSpecialTokens + 1)
    throw ConfigError("vocab_size: must leave room for PAD/BOS/EOS plus at "
                      "least one content token");
  check_positive(online_encoder_layers, "online_encoder_layers");
  check_positive(online_decoder_layers, "online_decoder_layers");
  check_positive(offline_encoder_layers, "offline_encoder_layers");
  check_positive(text_encoder_layers, "text_encoder_layers");
  check_positive(offline_decoder_layers, "offline_decoder_layers");
  check_positive(fsmn_l_online, "fsmn_l_online");
  check_positive(fsmn_l_left, "fsmn_l_left");
  if (fsmn_l_right < 0) throw ConfigError("fsmn_l_right: must be >= 0");
  check_positive(d_ff, "d_ff");
  check_positive(d_hidden_predictor, "d_hidden_predictor");
  if (chunk_size_set.empty())
    throw ConfigError("chunk_size_set: must be non-empty");
  for (int64_t c : chunk_size_set)
    if (c < 1) throw ConfigError("chunk_size_set: sizes must be >= 1");
  for (std::size_t i = 0; i < chunk_size_set.size(); ++i)
    for (std::size_t j = i + 1; j < chunk_size_set.size(); ++j)
      if (chunk_size_set[i] == chunk_size_set[j])
        throw ConfigError("chunk_size_set: duplicate size " +
                          std::to_string(chunk_size_set[i]));
  check_positive(n_max, "n_max");
  if (stride_kernel < 1 || stride_kernel % 2 == 0)
    throw ConfigError("stride_kernel: must be odd and >= 1");
  if (stride != 2) throw ConfigError("stride: only 2 is supported");
  if (alpha < 0.0) throw ConfigError("alpha: must be >= 0");
  if (lambda_offline < 0.0) throw ConfigError("lambda_offline: must be >= 0");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw ConfigError("label_smoothing: must be in [0, 1)");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ConfigError("dropout: must be in [0, 1)");
  if (!(frame_period_ms > 0.0))
    throw ConfigError("frame_period_ms: must be > 0");
  if (!(sched_k > 0.0)) throw ConfigError("sched_k: must be > 0");
  if (!(sched_d_model > 0.0)) throw ConfigError("sched_d_model: must be > 0");
  if (!(sched_warmup > 0.0)) throw ConfigError("sched_warmup: must be > 0");
}

bool ModelConfig::has_chunk_size(int64_t c) const {
  for (int64_t s : chunk_size_set)
    if (s == c) return true;
  return false;
}

KvMap ModelConfig::to_kv() const {
  KvMap kv;
  kv["d_input"] = std::to_string(d_input);
  kv["d_model"] = std::to_string(d_model);
  kv["heads"] = std::to_string(heads);
  kv["vocab_size"] = std::to_string(vocab_size);
  kv["online_encoder_layers"] = std::to_string(online_encoder_layers);
  kv["online_decoder_layers"] = std::to_string(online_decoder_layers);
  kv["offline_encoder_layers"] = std::to_string(offline_encoder_layers);
  kv["text_encoder_layers"] = std::to_string(text_encoder_layers);
  kv["offline_decoder_layers"] = std::to_string(offline_decoder_layers);
  kv["fsmn_l_online"] = std::to_string(fsmn_l_online);
  kv["fsmn_l_left"] = std::to_string(fsmn_l_left);
  kv["fsmn_l_right"] = std::to_string(fsmn_l_right);
  kv["d_ff"] = std::to_string(d_ff);
  kv["d_hidden_predictor"] = std::to_string(d_hidden_predictor);
  kv["chunk_size_set"] = int_list_str(chunk_size_set);
  kv["n_max"] = std::to_string(n_max);
  kv["stride_kernel"] = std::to_string(stride_kernel);
  kv["stride"] = std::to_string(stride);
  kv["alpha"] = fmt_double(alpha);
  kv["lambda_offline"] = fmt_double(lambda_offline);
  kv["label_smoothing"] = fmt_double(label_smoothing);
  kv["dropout"] = fmt_double(dropout);
  kv["frame_period_ms"] = fmt_double(frame_period_ms);
  kv["text_encoder_enabled"] = text_encoder_enabled ? "1" : "0";
  kv["text_input_mode"] =
      text_input_mode == TextInputMode::kGreedy ? "greedy" : "ground_truth";
  kv["sched_k"] = fmt_double(sched_k);
  kv["sched_d_model"] = fmt_double(sched_d_model);
  kv["sched_warmup"] = fmt_double(sched_warmup);
  kv["adam_beta1"] = fmt_double(adam_beta1);
  kv["adam_beta2"] = fmt_double(adam_beta2);
  kv["adam_eps"] = fmt_double(adam_eps);
  return kv;
}

ModelConfig ModelConfig::from_kv(const KvMap& kv) {
  ModelConfig c;
  const KvMap known = c.to_kv();
  for (const auto& [k, v] : kv)
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  auto geti = [&](const char* k, int64_t& out) {
    if (kv.count(k)) out = kv_get_int(kv, k);
  };
  auto getd = [&](const char* k, double& out) {
    if (kv.count(k)) out = kv_get_double(kv, k);
  };
  geti("d_input", c.d_input);
  geti("d_model", c.d_model);
  geti("heads", c.heads);
  geti("vocab_size", c.vocab_size);
  geti("online_encoder_layers", c.online_encoder_layers);
  geti("online_decoder_layers", c.online_decoder_layers);
  geti("offline_encoder_layers", c.offline_encoder_layers);
  geti("text_encoder_layers", c.text_encoder_layers);
  geti("offline_decoder_layers", c.offline_decoder_layers);
  geti("fsmn_l_online", c.fsmn_l_online);
  geti("fsmn_l_left", c.fsmn_l_left);
  geti("fsmn_l_right", c.fsmn_l_right);
  geti("d_ff", c.d_ff);
  geti("d_hidden_predictor", c.d_hidden_predictor);
  if (kv.count("chunk_size_set"))
    c.chunk_size_set = kv_get_int_list(kv, "chunk_size_set");
  geti("n_max", c.n_max);
  geti("stride_kernel", c.stride_kernel);
  geti("stride", c.stride);
  getd("alpha", c.alpha);
  getd("lambda_offline", c.lambda_offline);
  getd("label_smoothing", c.label_smoothing);
  getd("dropout", c.dropout);
  getd("frame_period_ms", c.frame_period_ms);
  if (kv.count("text_encoder_enabled"))
    c.text_encoder_enabled = kv_get_int(kv, "text_encoder_enabled") != 0;
  if (kv.count("text_input_mode")) {
    std::string m = kv_get_string(kv, "text_input_mode");
    if (m == "greedy")
      c.text_input_mode = TextInputMode::kGreedy;
    else if (m == "ground_truth")
      c.text_input_mode = TextInputMode::kGroundTruth;
    else
      throw ConfigError("text_input_mode: expected greedy|ground_truth, got '" +
                        m + "'");
  }
  getd("sched_k", c.sched_k);
  getd("sched_d_model", c.sched_d_model);
  getd("sched_warmup", c.sched_warmup);
  getd("adam_beta1", c.adam_beta1);
  getd("adam_beta2", c.adam_beta2);
  getd("adam_eps", c.adam_eps);
  c.validate();
  return c;
}

ModelConfig ModelConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_kv(kv_parse(ss.str()));
}

void ModelConfig::to_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file: " + path);
  out << kv_serialize(to_kv());
}

// ---- parameter inventory ---------------------------------------------------

namespace {

struct InventoryBuilder {
  std::vector<ParamSpec> specs;

  void weight(const std::string& name, Shape shape) {
    specs.push_back({name, std::move(shape), InitKind::kFanInUniform});
  }
  void zeros(const std::string& name, Shape shape) {
    specs.push_back({name, std::move(shape), InitKind::kZeros});
  }
  void ones(const std::string& name, Shape shape) {
    specs.push_back({name, std::move(shape), InitKind::kOnes});
  }
  void norm(const std::string& prefix, int64_t d) {
    ones(prefix + ".g", {d});
    zeros(prefix + ".b", {d});
  }
  void ffn(const std::string& prefix, int64_t d, int64_t d_ff) {
    weight(prefix + ".w1", {d, d_ff});
    zeros(prefix + ".b1", {d_ff});
    weight(prefix + ".w2", {d_ff, d});
    zeros(prefix + ".b2", {d});
  }
  void mha(const std::string& prefix, int64_t d) {
    weight(prefix + ".wq", {d, d});
    weight(prefix + ".wk", {d, d});
    weight(prefix + ".wv", {d, d});
    weight(prefix + ".wo", {d, d});
  }
  void san_m_layer(const std::string& prefix, const ModelConfig& c,
                   bool unidirectional) {
    norm(prefix + ".ln1", c.d_model);
    mha(prefix + ".attn", c.d_model);
    if (unidirectional) {
      weight(prefix + ".fsmn.a", {c.fsmn_l_online, c.d_model});
    } else {
      weight(prefix + ".fsmn.a", {c.fsmn_l_left, c.d_model});
      if (c.fsmn_l_right > 0)
        weight(prefix + ".fsmn.c", {c.fsmn_l_right, c.d_model});
    }
    norm(prefix + ".ln2", c.d_model);
    ffn(prefix + ".ffn", c.d_model, c.d_ff);
  }
  void decoder_layer(const std::string& prefix, const ModelConfig& c,
                     bool dual_attention) {
    norm(prefix + ".ln_f", c.d_model);
    weight(prefix + ".fsmn.a", {c.fsmn_l_online, c.d_model});
    norm(prefix + ".ln_c", c.d_model);
    if (dual_attention) {
      weight(prefix + ".ac.wq", {c.d_model, c.d_model});
      weight(prefix + ".ac.wk", {c.d_model, c.d_model});
      weight(prefix + ".ac.wv", {c.d_model, c.d_model});
      weight(prefix + ".sem.wq", {c.d_model, c.d_model});
      weight(prefix + ".sem.wk", {c.d_model, c.d_model});
      weight(prefix + ".sem.wv", {c.d_model, c.d_model});
      weight(prefix + ".merge.w", {2 * c.d_model, c.d_model});
      zeros(prefix + ".merge.b", {c.d_model});
    } else {
      mha(prefix + ".cross", c.d_model);
    }
    norm(prefix + ".ln2", c.d_model);
    ffn(prefix + ".ffn", c.d_model, c.d_ff);
  }
};

}  // namespace

std::vector<ParamSpec> param_inventory(const ModelConfig& c) {
  c.validate();
  InventoryBuilder b;
  b.weight("in_proj.w", {c.d_input, c.d_model});
  b.zeros("in_proj.b", {c.d_model});
  for (int64_t i = 0; i < c.online_encoder_layers; ++i)
    b.san_m_layer("online_enc.l" + std::to_string(i), c, true);
  b.norm("online_enc.final_ln", c.d_model);

  b.weight("online_dec.embed", {c.vocab_size, c.d_model});
  for (int64_t i = 0; i < c.online_decoder_layers; ++i)
    b.decoder_layer("online_dec.l" + std::to_string(i), c, false);
  b.norm("online_dec.final_ln", c.d_model);
  b.weight("online_dec.out.w", {c.d_model, c.vocab_size});
  b.zeros("online_dec.out.b", {c.vocab_size});

  for (int64_t cs : c.chunk_size_set) {
    std::string prefix = "predictor.c" + std::to_string(cs);
    b.weight(prefix + ".w1", {cs * c.d_model, c.d_hidden_predictor});
    b.zeros(prefix + ".b1", {c.d_hidden_predictor});
    b.weight(prefix + ".w2", {c.d_hidden_predictor, c.n_max + 1});
    b.zeros(prefix + ".b2", {c.n_max + 1});
  }

  b.weight("stride_conv.w",
           {c.stride_kernel * (c.d_input + c.d_model), c.d_model});
  b.zeros("stride_conv.b", {c.d_model});
  b.norm("stride_conv.ln", c.d_model);

  for (int64_t i = 0; i < c.offline_encoder_layers; ++i)
    b.san_m_layer("offline_enc.l" + std::to_string(i), c, false);
  b.norm("offline_enc.final_ln", c.d_model);

  b.weight("text_enc.embed", {c.vocab_size, c.d_model});
  for (int64_t i = 0; i < c.text_encoder_layers; ++i)
    b.san_m_layer("text_enc.l" + std::to_string(i), c, false);
  b.norm("text_enc.final_ln", c.d_model);

  b.weight("offline_dec.embed", {c.vocab_size, c.d_model});
  for (int64_t i = 0; i < c.offline_decoder_layers; ++i)
    b.decoder_layer("offline_dec.l" + std::to_string(i), c, true);
  b.norm("offline_dec.final_ln", c.d_model);
  b.weight("offline_dec.out.w", {c.d_model, c.vocab_size});
  b.zeros("offline_dec.out.b", {c.vocab_size});
  return b.specs;
}

ParamStore init_model(const ModelConfig& config, uint64_t seed) {
  auto inventory = param_inventory(config);
  RngStream rng(seed);
  ParamStore store;
  for (const ParamSpec& spec : inventory) {
    int64_t n = shape_numel(spec.shape);
    std::vector<double> data(static_cast<std::size_t>(n), 0.0);
    switch (spec.kind) {
      case InitKind::kZeros:
        break;
      case InitKind::kOnes:
        std::fill(data.begin(), data.end(), 1.0);
        break;
      case InitKind::kFanInUniform: {
        // Embeddings scale by width; everything else by fan-in rows.
        int64_t fan_in = spec.shape[0];
        if (spec.name.ends_with(".embed")) fan_in = spec.shape[1];
        double s = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(
                             2, fan_in)));
        for (double& v : data) v = rng.uniform(-s, s);
        break;
      }
    }
    store.add(spec.name, Tensor::from_data(spec.shape, std::move(data), true));
  }
  return store;
}

OptimizerState make_optimizer(const ModelConfig& config) {
  OptimizerState s;
  s.sched_k = config.sched_k;
  s.sched_d_model = config.sched_d_model;
  s.sched_warmup = config.sched_warmup;
  s.beta1 = config.adam_beta1;
  s.beta2 = config.adam_beta2;
  s.eps = config.adam_eps;
  return s;
}

// ---- typed views ------------------------------------------------------------

SanMLayerParams san_m_layer_params(const ParamStore& params,
                                   const std::string& prefix,
                                   const ModelConfig& config,
                                   bool unidirectional) {
  SanMLayerParams p;
  p.attn.wq = params.at(prefix + ".attn.wq");
  p.attn.wk = params.at(prefix + ".attn.wk");
  p.attn.wv = params.at(prefix + ".attn.wv");
  p.attn.wo = params.at(prefix + ".attn.wo");
  p.attn.heads = config.heads;
  p.fsmn_left_taps = params.at(prefix + ".fsmn.a");
  if (!unidirectional && config.fsmn_l_right > 0)
    p.fsmn_right_taps = params.at(prefix + ".fsmn.c");
  p.ln1_gamma = params.at(prefix + ".ln1.g");
  p.ln1_beta = params.at(prefix + ".ln1.b");
  p.ln2_gamma = params.at(prefix + ".ln2.g");
  p.ln2_beta = params.at(prefix + ".ln2.b");
  p.ffn_w1 = params.at(prefix + ".ffn.w1");
  p.ffn_b1 = params.at(prefix + ".ffn.b1");
  p.ffn_w2 = params.at(prefix + ".ffn.w2");
  p.ffn_b2 = params.at(prefix + ".ffn.b2");
  return p;
}

namespace {

DecoderLayerParams decoder_layer_params(const ParamStore& params,
                                        const std::string& prefix,
                                        const ModelConfig& config) {
  DecoderLayerParams p;
  p.ln_f_gamma = params.at(prefix + ".ln_f.g");
  p.ln_f_beta = params.at(prefix + ".ln_f.b");
  p.fsmn_taps = params.at(prefix + ".fsmn.a");
  p.ln_c_gamma = params.at(prefix + ".ln_c.g");
  p.ln_c_beta = params.at(prefix + ".ln_c.b");
  p.cross.wq = params.at(prefix + ".cross.wq");
  p.cross.wk = params.at(prefix + ".cross.wk");
  p.cross.wv = params.at(prefix + ".cross.wv");
  p.cross.wo = params.at(prefix + ".cross.wo");
  p.cross.heads = config.heads;
  p.ln2_gamma = params.at(prefix + ".ln2.g");
  p.ln2_beta = params.at(prefix + ".ln2.b");
  p.ffn_w1 = params.at(prefix + ".ffn.w1");
  p.ffn_b1 = params.at(prefix + ".ffn.b1");
  p.ffn_w2 = params.at(prefix + ".ffn.w2");
  p.ffn_b2 = params.at(prefix + ".ffn.b2");
  return p;
}

OfflineDecoderLayerParams offline_decoder_layer_params(
    const ParamStore& params, const std::string& prefix,
    const ModelConfig& config) {
  (void)config;
  OfflineDecoderLayerParams p;
  p.ln_f_gamma = params.at(prefix + ".ln_f.g");
  p.ln_f_beta = params.at(prefix + ".ln_f.b");
  p.fsmn_taps = params.at(prefix + ".fsmn.a");
  p.ln_c_gamma = params.at(prefix + ".ln_c.g");
  p.ln_c_beta = params.at(prefix + ".ln_c.b");
  p.ac_wq = params.at(prefix + ".ac.wq");
  p.ac_wk = params.at(prefix + ".ac.wk");
  p.ac_wv = params.at(prefix + ".ac.wv");
  p.sem_wq = params.at(prefix + ".sem.wq");
  p.sem_wk = params.at(prefix + ".sem.wk");
  p.sem_wv = params.at(prefix + ".sem.wv");
  p.merge_w = params.at(prefix + ".merge.w");
  p.merge_b = params.at(prefix + ".merge.b");
  p.ln2_gamma = params.at(prefix + ".ln2.g");
  p.ln2_beta = params.at(prefix + ".ln2.b");
  p.ffn_w1 = params.at(prefix + ".ffn.w1");
  p.ffn_b1 = params.at(prefix + ".ffn.b1");
  p.ffn_w2 = params.at(prefix + ".ffn.w2");
  p.ffn_b2 = params.at(prefix + ".ffn.b2");
  return p;
}

}  // namespace

PredictorParams predictor_params(const ParamStore& params,
                                 int64_t chunk_size) {
  std::string prefix = "predictor.c" + std::to_string(chunk_size);
  if (!params.has(prefix + ".w1"))
    throw ConfigError("chunk_size " + std::to_string(chunk_size) +
                      ": no predictor head was trained for this size");
  PredictorParams p;
  p.w1 = params.at(prefix + ".w1");
  p.b1 = params.at(prefix + ".b1");
  p.w2 = params.at(prefix + ".w2");
  p.b2 = params.at(prefix + ".b2");
  return p;
}

// ---- encoder ----------------------------------------------------------------

OnlineEncoderState make_online_encoder_state(const ModelConfig& config) {
  OnlineEncoderState st;
  st.layers.resize(static_cast<std::size_t>(config.online_encoder_layers));
  return st;
}

Tensor online_encoder_chunk(const Tensor& x_chunk, const ParamStore& params,
                            const ModelConfig& config,
                            OnlineEncoderState& state, const FwdCtx& ctx) {
  if (x_chunk.cols() != config.d_input)
    throw ShapeError("online_encoder_chunk: input width " +
                     shape_str(x_chunk.shape()) + " does not match d_input " +
                     std::to_string(config.d_input));
  for (const LayerStreamState& ls : state.layers)
    if (ls.chunk_index != state.chunks)
      throw ContractError("online_encoder_chunk: layer states out of sync");
  Tensor h = add_rowvec(matmul(x_chunk, params.at("in_proj.w"), ctx.tape),
                        params.at("in_proj.b"), ctx.tape);
  for (int64_t i = 0; i < config.online_encoder_layers; ++i) {
    SanMLayerParams p = san_m_layer_params(
        params, "online_enc.l" + std::to_string(i), config, true);
    h = lc_san_m_chunk_step(h, p, state.layers[static_cast<std::size_t>(i)],
                            ctx);
  }
  h = layer_norm(h, params.at("online_enc.final_ln.g"),
                 params.at("online_enc.final_ln.b"), kLayerNormEps, ctx.tape);
  state.frames += x_chunk.rows();
  state.chunks += 1;
  return h;
}

Tensor online_encoder_oracle_full(const Tensor& x, const ParamStore& params,
                                  const ModelConfig& config,
                                  int64_t chunk_size, const FwdCtx& ctx) {
  Tensor h = add_rowvec(matmul(x, params.at("in_proj.w"), ctx.tape),
                        params.at("in_proj.b"), ctx.tape);
  for (int64_t i = 0; i < config.online_encoder_layers; ++i) {
    SanMLayerParams p = san_m_layer_params(
        params, "online_enc.l" + std::to_string(i), config, true);
    h = lc_san_m_oracle_full(h, p, chunk_size, ctx);
  }
  return layer_norm(h, params.at("online_enc.final_ln.g"),
                    params.at("online_enc.final_ln.b"), kLayerNormEps,
                    ctx.tape);
}

// ---- decoders ----------------------------------------------------------------

namespace {

Tensor decoder_layer_forward(const Tensor& h_in, const DecoderLayerParams& p,
                             const Tensor& memory, const AttnMask* mask,
                             const FwdCtx& ctx) {
  Tape* tape = ctx.tape;
  Tensor m = layer_norm(h_in, p.ln_f_gamma, p.ln_f_beta, kLayerNormEps, tape);
  Tensor conv = depthwise_conv1d(m, p.fsmn_taps, Tensor(), Tensor(), tape);
  Tensor h = add(h_in, apply_dropout(conv, ctx), tape);

  Tensor q_in = layer_norm(h, p.ln_c_gamma, p.ln_c_beta, kLayerNormEps, tape);
  Tensor ctx_vec = multi_head_attention(q_in, memory, p.cross, mask, tape);
  h = add(h, apply_dropout(ctx_vec, ctx), tape);

  Tensor f = layer_norm(h, p.ln2_gamma, p.ln2_beta, kLayerNormEps, tape);
  Tensor ff = ffn_block(f, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, tape);
  return add(h, apply_dropout(ff, ctx), tape);
}

}  // namespace

Tensor online_decoder_forward(const std::vector<int>& input_tokens,
                              const Tensor& e1, const AttnMask& frame_mask,
                              const ParamStore& params,
                              const ModelConfig& config, const FwdCtx& ctx) {
  int64_t n = static_cast<int64_t>(input_tokens.size());
  if (n == 0)
    throw ContractError("online_decoder_forward: empty input sequence");
  if (frame_mask.rows != n || frame_mask.cols != e1.rows())
    throw ShapeError("online_decoder_forward: mask " +
                     std::to_string(frame_mask.rows) + "x" +
                     std::to_string(frame_mask.cols) + " does not match " +
                     std::to_string(n) + " tokens x " +
                     std::to_string(e1.rows()) + " memory rows");
  for (int64_t r = 0; r < n; ++r) {
    bool any = false;
    for (int64_t c = 0; c < frame_mask.cols && !any; ++c)
      any = frame_mask.allowed(r, c);
    if (!any)
      throw ContractError("online_decoder_forward: mask row " +
                          std::to_string(r) + " allows no chunks");
  }
  Tensor h = gather_rows(params.at("online_dec.embed"), input_tokens, ctx.tape);
  for (int64_t i = 0; i < config.online_decoder_layers; ++i) {
    DecoderLayerParams p = decoder_layer_params(
        params, "online_dec.l" + std::to_string(i), config);
    h = decoder_layer_forward(h, p, e1, &frame_mask, ctx);
  }
  h = layer_norm(h, params.at("online_dec.final_ln.g"),
                 params.at("online_dec.final_ln.b"), kLayerNormEps, ctx.tape);
  return add_rowvec(matmul(h, params.at("online_dec.out.w"), ctx.tape),
                    params.at("online_dec.out.b"), ctx.tape);
}

Tensor stride_conv_downsample(const Tensor& x_cat, const ParamStore& params,
                              const ModelConfig& config, const FwdCtx& ctx) {
  Tensor y = conv1d_stride2(x_cat, params.at("stride_conv.w"),
                            params.at("stride_conv.b"), config.stride_kernel,
                            ctx.tape);
  y = relu(y, ctx.tape);
  return layer_norm(y, params.at("stride_conv.ln.g"),
                    params.at("stride_conv.ln.b"), kLayerNormEps, ctx.tape);
}

Tensor offline_encoder_forward(const Tensor& x_downsampled,
                               const ParamStore& params,
                               const ModelConfig& config, const FwdCtx& ctx) {
  Tensor h = x_downsampled;
  for (int64_t i = 0; i < config.offline_encoder_layers; ++i) {
    SanMLayerParams p = san_m_layer_params(
        params, "offline_enc.l" + std::to_string(i), config, false);
    h = san_m_layer(h, p, nullptr, ctx);
  }
  return layer_norm(h, params.at("offline_enc.final_ln.g"),
                    params.at("offline_enc.final_ln.b"), kLayerNormEps,
                    ctx.tape);
}

Tensor text_encoder_forward(const std::vector<int>& tokens,
                            const ParamStore& params,
                            const ModelConfig& config, const FwdCtx& ctx) {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 1);
  ids.push_back(kBosToken);
  ids.insert(ids.end(), tokens.begin(), tokens.end());
  Tensor h = gather_rows(params.at("text_enc.embed"), ids, ctx.tape);
  for (int64_t i = 0; i < config.text_encoder_layers; ++i) {
    SanMLayerParams p = san_m_layer_params(
        params, "text_enc.l" + std::to_string(i), config, false);
    h = san_m_layer(h, p, nullptr, ctx);
  }
  return layer_norm(h, params.at("text_enc.final_ln.g"),
                    params.at("text_enc.final_ln.b"), kLayerNormEps, ctx.tape);
}

Tensor offline_decoder_logits(const std::vector<int>& input_tokens,
                              const Tensor& e2, const Tensor& e3,
                              const ParamStore& params,
                              const ModelConfig& config, const FwdCtx& ctx) {
  Tape* tape = ctx.tape;
  Tensor h = gather_rows(params.at("offline_dec.embed"), input_tokens, tape);
  int64_t n = h.rows();
  for (int64_t i = 0; i < config.offline_decoder_layers; ++i) {
    OfflineDecoderLayerParams p = offline_decoder_layer_params(
        params, "offline_dec.l" + std::to_string(i), config);
    Tensor m = layer_norm(h, p.ln_f_gamma, p.ln_f_beta, kLayerNormEps, tape);
    Tensor conv = depthwise_conv1d(m, p.fsmn_taps, Tensor(), Tensor(), tape);
    h = add(h, apply_dropout(conv, ctx), tape);

    Tensor q_in = layer_norm(h, p.ln_c_gamma, p.ln_c_beta, kLayerNormEps,
                             tape);
    Tensor ctx_ac =
        mha_core(matmul(q_in, p.ac_wq, tape), matmul(e2, p.ac_wk, tape),
                 matmul(e2, p.ac_wv, tape), config.heads, nullptr, tape);
    Tensor ctx_sem;
    if (e3.defined()) {
      ctx_sem =
          mha_core(matmul(q_in, p.sem_wq, tape), matmul(e3, p.sem_wk, tape),
                   matmul(e3, p.sem_wv, tape), config.heads, nullptr, tape);
    } else {
      ctx_sem = Tensor::zeros({n, config.d_model});
    }
    Tensor merged = add_rowvec(
        matmul(concat_cols({ctx_ac, ctx_sem}, tape), p.merge_w, tape),
        p.merge_b, tape);
    h = add(h, apply_dropout(merged, ctx), tape);

    Tensor f = layer_norm(h, p.ln2_gamma, p.ln2_beta, kLayerNormEps, tape);
    Tensor ff = ffn_block(f, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, tape);
    h = add(h, apply_dropout(ff, ctx), tape);
  }
  h = layer_norm(h, params.at("offline_dec.final_ln.g"),
                 params.at("offline_dec.final_ln.b"), kLayerNormEps, tape);
  return add_rowvec(matmul(h, params.at("offline_dec.out.w"), tape),
                    params.at("offline_dec.out.b"), tape);
}

Tensor offline_forward(const Tensor& x_full, const Tensor& e1_full,
                       const std::vector<int>& y1_tokens,
                       const std::vector<int>& decoder_input_tokens,
                       const ParamStore& params, const ModelConfig& config,
                       const FwdCtx& ctx) {
  if (x_full.rows() != e1_full.rows())
    throw ShapeError("offline_forward: raw frames " +
                     shape_str(x_full.shape()) + " and chunk memory " +
                     shape_str(e1_full.shape()) + " disagree on length");
  Tensor cat = concat_cols({x_full, e1_full}, ctx.tape);
  Tensor ds = stride_conv_downsample(cat, params, config, ctx);
  Tensor e2 = offline_encoder_forward(ds, params, config, ctx);
  Tensor e3;
  if (config.text_encoder_enabled)
    e3 = text_encoder_forward(y1_tokens, params, config, ctx);
  return offline_decoder_logits(decoder_input_tokens, e2, e3, params, config,
                                ctx);
}

// ---- incremental first-pass decoding ------------------------------------

IncrementalDecoder::IncrementalDecoder(const ParamStore& params,
                                       const ModelConfig& config)
    : params_(params), config_(config) {
  layers_.resize(static_cast<std::size_t>(config.online_decoder_layers));
}

void IncrementalDecoder::extend_memory(const Tensor& e1_chunk) {
  for (int64_t i = 0; i < config_.online_decoder_layers; ++i) {
    DecoderLayerParams p = decoder_layer_params(
        params_, "online_dec.l" + std::to_string(i), config_);
    LayerState& ls = layers_[static_cast<std::size_t>(i)];
    Tensor k = matmul(e1_chunk, p.cross.wk, nullptr);
    Tensor v = matmul(e1_chunk, p.cross.wv, nullptr);
    ls.mem_k = ls.mem_k.defined() ? concat_rows({ls.mem_k, k}, nullptr) : k;
    ls.mem_v = ls.mem_v.defined() ? concat_rows({ls.mem_v, v}, nullptr) : v;
  }
  memory_rows_ += e1_chunk.rows();
}

int IncrementalDecoder::step() {
  if (memory_rows_ == 0)
    throw ContractError("IncrementalDecoder: no memory rows to attend");
  int prev = emitted_.empty() ? kBosToken : emitted_.back();
  Tensor h = gather_rows(params_.at("online_dec.embed"), {prev}, nullptr);
  for (int64_t i = 0; i < config_.online_decoder_layers; ++i) {
    DecoderLayerParams p = decoder_layer_params(
        params_, "online_dec.l" + std::to_string(i), config_);
    LayerState& ls = layers_[static_cast<std::size_t>(i)];
    Tensor m = layer_norm(h, p.ln_f_gamma, p.ln_f_beta, kLayerNormEps,
                          nullptr);
    Tensor conv =
        depthwise_conv1d(m, p.fsmn_taps, Tensor(), ls.fsmn_tail, nullptr);
    h = add(h, conv, nullptr);
    // carry the last L-1 pre-conv rows forward
    Tensor joined = ls.fsmn_tail.defined()
                        ? concat_rows({ls.fsmn_tail, m}, nullptr)
                        : m;
    int64_t keep = std::min<int64_t>(joined.rows(), p.fsmn_taps.rows() - 1);
    ls.fsmn_tail = keep > 0 ? slice_rows(joined, joined.rows() - keep, keep,
                                         nullptr)
                            : Tensor();

    Tensor q_in = layer_norm(h, p.ln_c_gamma, p.ln_c_beta, kLayerNormEps,
                             nullptr);
    Tensor q = matmul(q_in, p.cross.wq, nullptr);
    Tensor ctx_vec = matmul(
        mha_core(q, ls.mem_k, ls.mem_v, config_.heads, nullptr, nullptr),
        p.cross.wo, nullptr);
    h = add(h, ctx_vec, nullptr);

    Tensor f = layer_norm(h, p.ln2_gamma, p.ln2_beta, kLayerNormEps, nullptr);
    Tensor ff =
        ffn_block(f, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, nullptr);
    h = add(h, ff, nullptr);
  }
  h = layer_norm(h, params_.at("online_dec.final_ln.g"),
                 params_.at("online_dec.final_ln.b"), kLayerNormEps, nullptr);
  Tensor logits = add_rowvec(matmul(h, params_.at("online_dec.out.w"), nullptr),
                             params_.at("online_dec.out.b"), nullptr);
  int tok = static_cast<int>(argmax(logits.data()));
  emitted_.push_back(tok);
  return tok;
}

// ---- training ------------------------------------------------------------

int64_t dlt_sample_chunk_size(const ModelConfig& config, RngStream& rng) {
  if (config.chunk_size_set.empty())
    throw ConfigError("chunk_size_set: must be non-empty");
  return config.chunk_size_set[rng.uniform_index(
      config.chunk_size_set.size())];
}

namespace {

// Detached greedy first pass over already-computed chunk memories, emitting
// argmax(p_k) tokens per chunk exactly as the streaming runtime does.
std::vector<int> greedy_first_pass(const std::vector<Tensor>& e1_chunks,
                                   const std::vector<Tensor>& chunk_probs,
                                   const ParamStore& params,
                                   const ModelConfig& config) {
  IncrementalDecoder dec(params, config);
  for (std::size_t k = 0; k < e1_chunks.size(); ++k) {
    dec.extend_memory(e1_chunks[k]);
    int64_t n_k = argmax(chunk_probs[k].data());
    for (int64_t i = 0; i < n_k; ++i) dec.step();
  }
  return dec.emitted();
}

}  // namespace

Tensor universal_training_loss(const std::vector<Utterance>& batch,
                               const ParamStore& params,
                               const ModelConfig& config, RngStream& rng,
                               Tape* tape, LossReport* report) {
  if (batch.empty())
    throw ContractError("universal_training_loss: empty batch");
  FwdCtx ctx{tape, &rng, tape ? config.dropout : 0.0};
  Tensor online_sum, offline_sum, pred_sum;
  for (std::size_t u = 0; u < batch.size(); ++u) {
    const Utterance& utt = batch[u];
    int64_t T = utt.features.rows();
    if (T < 1)
      throw ContractError("utterance " + std::to_string(u) + ": no frames");
    int64_t c = dlt_sample_chunk_size(config, rng);

    ChunkAlignment align;
    try {
      align = chunk_counts_from_alignment(utt.alignment, T, c,
                                          static_cast<int>(config.n_max));
    } catch (const LabelError& e) {
      throw LabelError("utterance " + std::to_string(u) + ": " + e.what());
    }

    // online encoder, chunk by chunk
    OnlineEncoderState enc_state = make_online_encoder_state(config);
    std::vector<Tensor> e1_chunks;
    for (int64_t f = 0; f < T; f += c) {
      int64_t len = std::min(c, T - f);
      Tensor x_k = slice_rows(utt.features, f, len, tape);
      e1_chunks.push_back(
          online_encoder_chunk(x_k, params, config, enc_state, ctx));
    }
    Tensor e1_full =
        e1_chunks.size() == 1 ? e1_chunks[0] : concat_rows(e1_chunks, tape);

    // predictor loss over all chunks
    PredictorParams pp = predictor_params(params, c);
    std::vector<Tensor> prob_rows;
    for (const Tensor& e1_k : e1_chunks)
      prob_rows.push_back(
          predictor_forward(splice_chunk(e1_k, c, tape), pp, tape));
    Tensor probs =
        prob_rows.size() == 1 ? prob_rows[0] : concat_rows(prob_rows, tape);
    Tensor l_pred_u = predictor_loss(probs, align.counts, tape);

    // online decoder CE (teacher forced, BOS-shifted)
    int64_t n_tokens = static_cast<int64_t>(utt.tokens.size());
    Tensor l_online_u;
    if (n_tokens > 0) {
      std::vector<int> dec_in;
      dec_in.reserve(n_tokens);
      dec_in.push_back(kBosToken);
      dec_in.insert(dec_in.end(), utt.tokens.begin(),
                    utt.tokens.end() - 1);
      AttnMask mask = scama_frame_mask(align, n_tokens, T);
      Tensor logits =
          online_decoder_forward(dec_in, e1_full, mask, params, config, ctx);
      l_online_u = cross_entropy_label_smoothed(
          logits, utt.tokens, config.label_smoothing, {}, tape);
    } else {
      l_online_u = Tensor::scalar(0.0);
    }

    // first-pass tokens feeding the text encoder
    std::vector<int> y1;
    if (config.text_input_mode == TextInputMode::kGroundTruth) {
      y1 = utt.tokens;
    } else {
      y1 = greedy_first_pass(e1_chunks, prob_rows, params, config);
    }

    // offline CE over transcript + EOS
    std::vector<int> off_in;
    off_in.reserve(n_tokens + 1);
    off_in.push_back(kBosToken);
    off_in.insert(off_in.end(), utt.tokens.begin(), utt.tokens.end());
    std::vector<int> off_targets = utt.tokens;
    off_targets.push_back(kEosToken);
    Tensor off_logits = offline_forward(utt.features, e1_full, y1, off_in,
                                        params, config, ctx);
    Tensor l_offline_u = cross_entropy_label_smoothed(
        off_logits, off_targets, config.label_smoothing, {}, tape);

    online_sum = online_sum.defined() ? add(online_sum, l_online_u, tape)
                                      : l_online_u;
    offline_sum = offline_sum.defined() ? add(offline_sum, l_offline_u, tape)
                                        : l_offline_u;
    pred_sum =
        pred_sum.defined() ? add(pred_sum, l_pred_u, tape) : l_pred_u;
  }
  double inv_b = 1.0 / static_cast<double>(batch.size());
  Tensor l_online = scale(online_sum, inv_b, tape);
  Tensor l_offline = scale(offline_sum, inv_b, tape);
  Tensor l_pred = scale(pred_sum, inv_b, tape);
  Tensor l_e2e =
      add(l_online, scale(l_offline, config.lambda_offline, tape), tape);
  Tensor l_total = joint_loss(l_e2e, l_pred, config.alpha, tape);
  if (report) {
    report->l_online = l_online.item();
    report->l_offline = l_offline.item();
    report->l_pred = l_pred.item();
    report->l_total = l_total.item();
  }
  return l_total;
}

LossReport universal_training_step(const std::vector<Utterance>& batch,
                                   ParamStore& params, OptimizerState& opt,
                                   const ModelConfig& config, RngStream& rng) {
  Tape tape;
  LossReport report;
  Tensor loss =
      universal_training_loss(batch, params, config, rng, &tape, &report);
  if (!std::isfinite(report.l_total))
    throw NumericError("training loss is not finite");
  backward(loss, tape);
  optimizer_step(params, opt);
  return report;
}

}  // namespace uasr
