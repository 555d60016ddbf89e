#include "raypose/model.hpp"

#include <cmath>
#include <stdexcept>

#include "raypose/checkpoint.hpp"
#include "raypose/rng.hpp"

namespace raypose {

void ModelConfig::validate() const {
  if (d_model < 1 || heads < 1 || encoder_layers < 1 || decoder_layers < 1 ||
      harmonic_frequencies < 1 || num_joints < 1 || max_rel_time < 1) {
    throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  }
  if (d_model % heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be divisible by heads");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"heads", heads},
          {"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers},
          {"harmonic_frequencies", harmonic_frequencies},
          {"num_joints", num_joints},
          {"max_rel_time", max_rel_time},
          {"use_conf_bias", use_conf_bias},
          {"use_dist_bias", use_dist_bias},
          {"embed_confidence", embed_confidence}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.encoder_layers = j.value("encoder_layers", cfg.encoder_layers);
  cfg.decoder_layers = j.value("decoder_layers", cfg.decoder_layers);
  cfg.harmonic_frequencies = j.value("harmonic_frequencies", cfg.harmonic_frequencies);
  cfg.num_joints = j.value("num_joints", cfg.num_joints);
  cfg.max_rel_time = j.value("max_rel_time", cfg.max_rel_time);
  cfg.use_conf_bias = j.value("use_conf_bias", cfg.use_conf_bias);
  cfg.use_dist_bias = j.value("use_dist_bias", cfg.use_dist_bias);
  cfg.embed_confidence = j.value("embed_confidence", cfg.embed_confidence);
  cfg.validate();
  return cfg;
}

QuerySpec QuerySpec::window(int num_joints, int t_out) {
  if (num_joints < 1 || t_out < 1) throw std::invalid_argument("QuerySpec: counts must be >= 1");
  QuerySpec q;
  q.items.reserve(static_cast<size_t>(num_joints) * t_out);
  for (int t = -(t_out - 1); t <= 0; ++t) {
    for (int j = 0; j < num_joints; ++j) q.items.push_back({j, t});
  }
  return q;
}

std::vector<double> harmonic_embed(std::span<const double> x, int frequencies) {
  if (frequencies < 1) throw std::invalid_argument("harmonic_embed: frequencies must be >= 1");
  std::vector<double> out;
  out.reserve(2 * static_cast<size_t>(frequencies) * x.size());
  double freq = M_PI;
  for (int i = 0; i < frequencies; ++i, freq *= 2.0) {
    for (const double v : x) out.push_back(std::sin(freq * v));
    for (const double v : x) out.push_back(std::cos(freq * v));
  }
  return out;
}

BiasMatrices build_bias_matrices(std::span<const ObservationToken> tokens) {
  const int n = static_cast<int>(tokens.size());
  if (n < 1) throw std::invalid_argument("build_bias_matrices: need at least one token");
  BiasMatrices m;
  m.conf = Tensor(n, n);
  m.dist = Tensor(n, n);
  for (int j = 0; j < n; ++j) {
    const float c = static_cast<float>(tokens[j].confidence);
    for (int i = 0; i < n; ++i) m.conf.at(i, j) = c;
  }
  for (int i = 0; i < n; ++i) {
    m.dist.at(i, i) = 0.0f;
    for (int j = i + 1; j < n; ++j) {
      const float d = static_cast<float>(ray_distance(tokens[i].ray, tokens[j].ray));
      m.dist.at(i, j) = d;
      m.dist.at(j, i) = d;
    }
  }
  return m;
}

namespace {

Tensor uniform_init(Rng& rng, int rows, int cols, double scale) {
  Tensor t(rows, cols);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-scale, scale));
  return t;
}

Tensor normal_init(Rng& rng, int rows, int cols, double sigma) {
  Tensor t(rows, cols);
  for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, sigma));
  return t;
}

}  // namespace

PoseModel::PoseModel(ModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  const int d = cfg_.d_model;
  const int ffn = 4 * d;

  const auto add_linear = [&](const std::string& prefix, int in, int out) {
    params_.add(prefix + ".weight", uniform_init(rng, in, out, 1.0 / std::sqrt(in)));
    params_.add(prefix + ".bias", Tensor::zeros(1, out));
  };
  const auto add_norm = [&](const std::string& prefix) {
    params_.add(prefix + ".gain", Tensor::constant(1, d, 1.0f));
    params_.add(prefix + ".shift", Tensor::zeros(1, d));
  };
  const auto add_attention = [&](const std::string& prefix) {
    for (const char* part : {"wq", "wk", "wv", "wo"}) {
      params_.add(prefix + "." + part, uniform_init(rng, d, d, 1.0 / std::sqrt(d)));
    }
    for (const char* part : {"bq", "bk", "bv", "bo"}) {
      params_.add(prefix + "." + part, Tensor::zeros(1, d));
    }
  };

  add_linear("embed.ray", 2 * cfg_.harmonic_frequencies * 6, d);
  add_linear("embed.time", 2 * cfg_.harmonic_frequencies, d);
  params_.add("embed.joint", normal_init(rng, cfg_.num_joints, d, 0.02));
  params_.add("embed.conf", normal_init(rng, 1, d, 0.02));

  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l);
    add_norm(p + ".ln1");
    add_attention(p + ".attn");
    params_.add(p + ".eta", Tensor::scalar(cfg_.use_conf_bias ? 1.0f : 0.0f));
    params_.add(p + ".gamma", Tensor::scalar(cfg_.use_dist_bias ? 0.1f : 0.0f));
    add_norm(p + ".ln2");
    add_linear(p + ".ffn.fc1", d, ffn);
    add_linear(p + ".ffn.fc2", ffn, d);
  }
  add_norm("enc.final");

  params_.add("dec.query_joint", normal_init(rng, cfg_.num_joints, d, 0.02));
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "dec.l" + std::to_string(l);
    add_norm(p + ".ln1");
    add_attention(p + ".attn");
    add_norm(p + ".ln2");
    add_linear(p + ".ffn.fc1", d, ffn);
    add_linear(p + ".ffn.fc2", ffn, d);
  }
  add_norm("dec.final");

  add_linear("head.fc1", d, d);
  add_linear("head.fc2", d, 3);
}

PoseModel PoseModel::from_checkpoint(const std::string& path) {
  const ModelConfig cfg = ModelConfig::from_json(read_checkpoint_config(path));
  PoseModel model(cfg, 0);
  load_checkpoint(path, model.params_);
  return model;
}

void PoseModel::save(const std::string& path) const {
  save_checkpoint(path, params_, cfg_.to_json());
}

Tensor PoseModel::temporal_features(std::span<const int> rel_times) const {
  Tensor out(static_cast<int>(rel_times.size()), 2 * cfg_.harmonic_frequencies);
  for (size_t i = 0; i < rel_times.size(); ++i) {
    const double scaled = static_cast<double>(rel_times[i]) / cfg_.max_rel_time;
    const auto h = harmonic_embed(std::span<const double>(&scaled, 1), cfg_.harmonic_frequencies);
    for (size_t k = 0; k < h.size(); ++k) out.at(static_cast<int>(i), static_cast<int>(k)) = static_cast<float>(h[k]);
  }
  return out;
}

Tape::Var PoseModel::embed_tokens(Tape& tape, std::span<const ObservationToken> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("embed_tokens: no tokens");
  const int n = static_cast<int>(tokens.size());
  const int hdim = 2 * cfg_.harmonic_frequencies * 6;
  Tensor ray_features(n, hdim);
  std::vector<int> joint_ids(n);
  std::vector<int> rel_times(n);
  for (int i = 0; i < n; ++i) {
    const auto& tok = tokens[i];
    if (tok.joint_id < 0 || tok.joint_id >= cfg_.num_joints) {
      throw std::invalid_argument("embed_tokens: joint_id out of range");
    }
    if (!(tok.confidence >= 0.0 && tok.confidence <= 1.0)) {
      throw std::invalid_argument("embed_tokens: confidence outside [0,1]");
    }
    const double coords[6] = {tok.ray.d.x(), tok.ray.d.y(), tok.ray.d.z(),
                              tok.ray.m.x(), tok.ray.m.y(), tok.ray.m.z()};
    const auto h = harmonic_embed(coords, cfg_.harmonic_frequencies);
    for (int k = 0; k < hdim; ++k) ray_features.at(i, k) = static_cast<float>(h[k]);
    joint_ids[i] = tok.joint_id;
    rel_times[i] = tok.rel_time;
  }

  const Tape::Var ray_proj = tape.linear(tape.constant(std::move(ray_features)),
                                         tape.param(params_, "embed.ray.weight"),
                                         tape.param(params_, "embed.ray.bias"));
  const Tape::Var time_proj = tape.linear(tape.constant(temporal_features(rel_times)),
                                          tape.param(params_, "embed.time.weight"),
                                          tape.param(params_, "embed.time.bias"));
  const Tape::Var joint_emb = tape.gather_rows(tape.param(params_, "embed.joint"), joint_ids);
  Tape::Var features = tape.add(tape.add(ray_proj, time_proj), joint_emb);
  if (cfg_.embed_confidence) {
    Tensor conf_col(n, 1);
    for (int i = 0; i < n; ++i) conf_col.at(i, 0) = static_cast<float>(tokens[i].confidence);
    const Tape::Var conf_proj = tape.linear(tape.constant(std::move(conf_col)),
                                            tape.param(params_, "embed.conf"),
                                            tape.constant(Tensor::zeros(1, cfg_.d_model)));
    features = tape.add(features, conf_proj);
  }
  return features;
}

PoseModel::AttnParamVars PoseModel::bind_attention(Tape& tape, const std::string& prefix) const {
  AttnParamVars v;
  v.wq = tape.param(params_, prefix + ".wq");
  v.bq = tape.param(params_, prefix + ".bq");
  v.wk = tape.param(params_, prefix + ".wk");
  v.bk = tape.param(params_, prefix + ".bk");
  v.wv = tape.param(params_, prefix + ".wv");
  v.bv = tape.param(params_, prefix + ".bv");
  v.wo = tape.param(params_, prefix + ".wo");
  v.bo = tape.param(params_, prefix + ".bo");
  return v;
}

Tape::Var PoseModel::multi_head_attention(Tape& tape, Tape::Var query_src, Tape::Var kv_src,
                                          const AttnParamVars& p, std::optional<Tape::Var> bias,
                                          std::vector<Tensor>* probe_out) const {
  const int d = cfg_.d_model;
  const int head_dim = d / cfg_.heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
  const Tape::Var q = tape.linear(query_src, p.wq, p.bq);
  const Tape::Var k = tape.linear(kv_src, p.wk, p.bk);
  const Tape::Var v = tape.linear(kv_src, p.wv, p.bv);
  std::vector<Tape::Var> heads;
  heads.reserve(cfg_.heads);
  for (int h = 0; h < cfg_.heads; ++h) {
    const int at = h * head_dim;
    const Tape::Var logits =
        tape.matmul_nt(tape.slice_cols(q, at, head_dim), tape.slice_cols(k, at, head_dim), scale);
    const Tape::Var attn = tape.softmax_rows(logits, bias);
    if (probe_out != nullptr) probe_out->push_back(tape.value(attn));
    heads.push_back(tape.matmul(attn, tape.slice_cols(v, at, head_dim)));
  }
  return tape.linear(tape.concat_cols(heads), p.wo, p.bo);
}

Tape::Var PoseModel::layer_norm_named(Tape& tape, Tape::Var x, const std::string& prefix) const {
  return tape.layer_norm(x, tape.param(params_, prefix + ".gain"), tape.param(params_, prefix + ".shift"));
}

Tape::Var PoseModel::feed_forward(Tape& tape, Tape::Var x, const std::string& prefix) const {
  const Tape::Var h = tape.gelu(tape.linear(x, tape.param(params_, prefix + ".fc1.weight"),
                                            tape.param(params_, prefix + ".fc1.bias")));
  return tape.linear(h, tape.param(params_, prefix + ".fc2.weight"),
                     tape.param(params_, prefix + ".fc2.bias"));
}

Tape::Var PoseModel::encode_features(Tape& tape, Tape::Var features, const Tensor& conf_matrix,
                                     const Tensor& dist_matrix, AttentionProbe* probe) const {
  const int n = tape.value(features).rows;
  if (cfg_.use_conf_bias && (conf_matrix.rows != n || conf_matrix.cols != n)) {
    throw std::invalid_argument("encode_features: confidence matrix must be n x n");
  }
  if (cfg_.use_dist_bias && (dist_matrix.rows != n || dist_matrix.cols != n)) {
    throw std::invalid_argument("encode_features: distance matrix must be n x n");
  }
  const Tape::Var conf_var = cfg_.use_conf_bias ? tape.constant(conf_matrix) : -1;
  const Tape::Var dist_var = cfg_.use_dist_bias ? tape.constant(dist_matrix) : -1;
  if (probe != nullptr) probe->encoder_layers.assign(cfg_.encoder_layers, {});

  Tape::Var x = features;
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l);
    std::optional<Tape::Var> bias;
    if (conf_var >= 0 || dist_var >= 0) {
      bias = tape.attention_bias(tape.param(params_, p + ".eta"), tape.param(params_, p + ".gamma"),
                                 conf_var, dist_var);
    }
    const Tape::Var normed = layer_norm_named(tape, x, p + ".ln1");
    std::vector<Tensor>* probe_out = probe != nullptr ? &probe->encoder_layers[l] : nullptr;
    x = tape.add(x, multi_head_attention(tape, normed, normed, bind_attention(tape, p + ".attn"),
                                         bias, probe_out));
    x = tape.add(x, feed_forward(tape, layer_norm_named(tape, x, p + ".ln2"), p + ".ffn"));
  }
  return layer_norm_named(tape, x, "enc.final");
}

Tape::Var PoseModel::decode(Tape& tape, Tape::Var memory, const QuerySpec& query) const {
  if (tape.value(memory).rows < 1) throw std::invalid_argument("decode: empty memory");
  if (query.items.empty()) throw std::invalid_argument("decode: empty query");
  std::vector<int> joint_ids;
  std::vector<int> rel_times;
  joint_ids.reserve(query.items.size());
  rel_times.reserve(query.items.size());
  for (const auto& item : query.items) {
    if (item.joint_id < 0 || item.joint_id >= cfg_.num_joints) {
      throw std::invalid_argument("decode: query joint_id out of range");
    }
    joint_ids.push_back(item.joint_id);
    rel_times.push_back(item.rel_time);
  }
  const Tape::Var joint_emb = tape.gather_rows(tape.param(params_, "dec.query_joint"), joint_ids);
  const Tape::Var time_proj = tape.linear(tape.constant(temporal_features(rel_times)),
                                          tape.param(params_, "embed.time.weight"),
                                          tape.param(params_, "embed.time.bias"));
  Tape::Var x = tape.add(joint_emb, time_proj);
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "dec.l" + std::to_string(l);
    x = tape.add(x, multi_head_attention(tape, layer_norm_named(tape, x, p + ".ln1"), memory,
                                         bind_attention(tape, p + ".attn"), std::nullopt, nullptr));
    x = tape.add(x, feed_forward(tape, layer_norm_named(tape, x, p + ".ln2"), p + ".ffn"));
  }
  return layer_norm_named(tape, x, "dec.final");
}

Tape::Var PoseModel::regress_head(Tape& tape, Tape::Var decoded) const {
  const Tape::Var h = tape.gelu(tape.linear(decoded, tape.param(params_, "head.fc1.weight"),
                                            tape.param(params_, "head.fc1.bias")));
  return tape.linear(h, tape.param(params_, "head.fc2.weight"), tape.param(params_, "head.fc2.bias"));
}

Tape::Var PoseModel::forward(Tape& tape, std::span<const ObservationToken> tokens,
                             const QuerySpec& query, AttentionProbe* probe) const {
  if (tokens.empty()) throw std::invalid_argument("forward: no tokens");
  const Tape::Var features = embed_tokens(tape, tokens);
  const BiasMatrices bias = build_bias_matrices(tokens);
  const Tape::Var memory = encode_features(tape, features, bias.conf, bias.dist, probe);
  return regress_head(tape, decode(tape, memory, query));
}

Eigen::MatrixXd PoseModel::predict(std::span<const ObservationToken> tokens, const QuerySpec& query,
                                   AttentionProbe* probe) const {
  Tape tape;
  const Tape::Var out = forward(tape, tokens, query, probe);
  const Tensor& value = tape.value(out);
  if (!value.all_finite()) throw std::runtime_error("predict: non-finite output");
  return value.mat().cast<double>();
}

}  // namespace raypose
