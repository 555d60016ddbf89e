#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "raypose/model.hpp"
#include "raypose/rng.hpp"
#include "raypose/synthdata.hpp"
#include "raypose/tensor.hpp"

namespace raypose {

struct TrainConfig {
  int t_in = 9;
  int t_out = 9;
  int views_per_sample = 2;
  int batch_size = 256;
  int64_t total_steps = 300000;
  int64_t warmup_steps = 10000;
  double base_lr = 1e-4;
  double dropout_rate = 0.2;
  double centering_noise_radius = 0.3;  // meters
  int synthetic_views_per_sample = 1;
  double synthetic_view_pixel_noise = 0.0;
  uint64_t seed = 1;
  int64_t log_interval = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Rigid scene motion used for body-centric centering: translate by
// -translation, then rotate by yaw around the vertical axis.
struct SceneTransform {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double yaw = 0.0;

  Eigen::Matrix3d rotation() const {
    return Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  }
  Eigen::Vector3d apply_point(const Eigen::Vector3d& p) const { return rotation() * (p - translation); }
  Eigen::Vector3d invert_point(const Eigen::Vector3d& p) const {
    return rotation().transpose() * p + translation;
  }
  PluckerRay apply_ray(const PluckerRay& r) const;
};

// Centering transform anchored at the floor projection of `anchor` (the neck
// joint, meters), optionally with planar noise and a random yaw. rng may be
// null when noise_radius == 0 and with_yaw is false.
SceneTransform make_centering_transform(const Eigen::Vector3d& anchor, double noise_radius,
                                        bool with_yaw, Rng* rng);

// Perfect-ray tokens from freshly sampled cameras through every ground-truth
// joint of the (centered, meters) window; confidence 1. rel_time runs over
// the window like the real observations. When pixel_noise > 0 the rays go
// through a jittered reprojection instead (tokens behind a camera are
// skipped).
std::vector<ObservationToken> add_synthetic_views(
    const std::vector<Eigen::Vector3d>& gt_window_m, int frames, int num_joints, int n_views,
    int first_camera_id, const CameraRigConfig& rig, double pixel_noise, Rng& rng);

// Keeps each token independently with probability 1-rate; redraws until at
// least one token survives.
std::vector<ObservationToken> token_dropout(std::vector<ObservationToken> tokens, double rate,
                                            Rng& rng);

// Mean over (frame, joint) of the squared L2 distance, meters^2; shapes must
// match. Standalone double-precision counterpart of the differentiable loss.
double mse_loss(const Eigen::MatrixXd& pred_m, const Eigen::MatrixXd& gt_m);

struct TrainingSample {
  std::vector<ObservationToken> tokens;
  QuerySpec query;
  Tensor target;  // (t_out * J) x 3, centered meters
  SceneTransform transform;
};

// Window selection, view subsampling, centering, synthetic views and token
// dropout, in that order. Deterministic given the rng stream.
TrainingSample assemble_sample(const Dataset& dataset, const ModelConfig& model_cfg,
                               const TrainConfig& cfg, const CameraRigConfig& synth_rig, Rng& rng);

struct StepResult {
  float loss = 0.0f;
  float lr = 0.0f;
};

// Forward/backward over the batch (parallel over samples; gradients reduced
// in sample order so results do not depend on the thread count), then one
// Adam update at the scheduled learning rate. Throws std::runtime_error on a
// non-finite loss or gradient.
StepResult training_step(PoseModel& model, AdamState& adam, std::vector<TrainingSample>& batch,
                         int64_t step, const TrainConfig& cfg, int threads);

struct TrainResult {
  float final_loss = 0.0f;
  int64_t steps = 0;
};

// Full training loop; writes the checkpoint and a step,loss,lr,wallclock_s
// metrics CSV (one row every log_interval steps).
TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg, const Dataset& dataset,
                  const std::string& checkpoint_path, const std::string& metrics_path, int threads);

}  // namespace raypose
