#pragma once

#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "raypose/geometry.hpp"
#include "raypose/tensor.hpp"

namespace raypose {

struct ModelConfig {
  int d_model = 192;
  int heads = 6;
  int encoder_layers = 3;
  int decoder_layers = 2;
  int harmonic_frequencies = 15;
  int num_joints = 17;
  int max_rel_time = 9;
  bool use_conf_bias = true;
  bool use_dist_bias = true;
  bool embed_confidence = false;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// One 2D joint detection lifted to a ray, with bookkeeping. rel_time is the
// signed frame offset from the current frame (<= 0 during causal inference).
struct ObservationToken {
  int joint_id = 0;
  int camera_id = 0;
  int rel_time = 0;
  PluckerRay ray;
  double confidence = 1.0;
};

struct QueryItem {
  int joint_id = 0;
  int rel_time = 0;
};

struct QuerySpec {
  std::vector<QueryItem> items;

  // Queries for the last t_out frames (rel_time -(t_out-1)..0), all joints,
  // frame-major.
  static QuerySpec window(int num_joints, int t_out);
  static QuerySpec latest_frame(int num_joints) { return window(num_joints, 1); }
};

// Sines and cosines at frequencies 2^i * pi, i = 0..frequencies-1, grouped
// as [sin(f_i x), cos(f_i x)] per frequency. Output length 2*frequencies*n.
std::vector<double> harmonic_embed(std::span<const double> x, int frequencies);

struct BiasMatrices {
  Tensor conf;  // conf[i][j] = confidence of token j (identical rows)
  Tensor dist;  // dist[i][j] = ray_distance(ray_i, ray_j), meters
};

BiasMatrices build_bias_matrices(std::span<const ObservationToken> tokens);

// Captured encoder attention maps: [layer][head], each queries x keys.
struct AttentionProbe {
  std::vector<std::vector<Tensor>> encoder_layers;
};

// Encoder-decoder transformer over ray tokens. The encoder self-attention is
// biased per layer with eta_l^2 * M_conf - gamma_l^2 * M_dist; the decoder is
// cross-attention only, so each decoded row depends only on its own query and
// the encoder memory.
class PoseModel {
 public:
  PoseModel(ModelConfig cfg, uint64_t init_seed);
  static PoseModel from_checkpoint(const std::string& path);

  void save(const std::string& path) const;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  Tape::Var embed_tokens(Tape& tape, std::span<const ObservationToken> tokens) const;
  Tape::Var encode_features(Tape& tape, Tape::Var features, const Tensor& conf_matrix,
                            const Tensor& dist_matrix, AttentionProbe* probe = nullptr) const;
  Tape::Var decode(Tape& tape, Tape::Var memory, const QuerySpec& query) const;
  Tape::Var regress_head(Tape& tape, Tape::Var decoded) const;
  Tape::Var forward(Tape& tape, std::span<const ObservationToken> tokens, const QuerySpec& query,
                    AttentionProbe* probe = nullptr) const;

  // Convenience forward without gradients; |query| x 3 predictions in meters,
  // in the (centered) frame of the input rays.
  Eigen::MatrixXd predict(std::span<const ObservationToken> tokens, const QuerySpec& query,
                          AttentionProbe* probe = nullptr) const;

 private:
  struct AttnParamVars {
    Tape::Var wq, bq, wk, bk, wv, bv, wo, bo;
  };
  AttnParamVars bind_attention(Tape& tape, const std::string& prefix) const;
  Tape::Var multi_head_attention(Tape& tape, Tape::Var query_src, Tape::Var kv_src,
                                 const AttnParamVars& p, std::optional<Tape::Var> bias,
                                 std::vector<Tensor>* probe_out) const;
  Tape::Var feed_forward(Tape& tape, Tape::Var x, const std::string& prefix) const;
  Tape::Var layer_norm_named(Tape& tape, Tape::Var x, const std::string& prefix) const;
  Tensor temporal_features(std::span<const int> rel_times) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace raypose
