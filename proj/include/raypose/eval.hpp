#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "raypose/model.hpp"
#include "raypose/synthdata.hpp"
#include "raypose/training.hpp"

namespace raypose {

struct EvalRecord {
  std::string condition;
  int n_cams = 0;
  int t_in = 0;
  double occl_prob = 0.0;
  double mpjpe_mm = 0.0;
  int64_t n_poses = 0;
  std::vector<double> per_joint_mpjpe_mm;
  // baseline bookkeeping: fraction of (frame, joint) entries skipped because
  // fewer than 2 selected views saw the joint
  double excluded_joint_fraction = 0.0;
  // causal-inference bookkeeping: first-frame neck triangulations replaced by
  // the capture-area center
  int64_t centering_fallbacks = 0;
};

// Absolute mean per-joint position error, millimeters, no alignment.
double mpjpe_mm(const PoseSequence3D& pred, const PoseSequence3D& gt);

// Streaming inference: window of the latest min(t_in, available) frames,
// first step centered on the confidence-weighted DLT of the neck joint (no
// yaw), later steps on the previous prediction's neck floor projection;
// decodes only the latest frame and un-centers back to world mm.
PoseSequence3D causal_infer(const PoseModel& model, const SceneSequence& seq, int neck_joint,
                            int t_in, const std::vector<int>& camera_ids,
                            int64_t* centering_fallbacks = nullptr);

// All size-n_cams camera combinations, MPJPE averaged over combinations.
EvalRecord eval_camera_subsets(const PoseModel& model, const Dataset& dataset, int n_cams, int t_in,
                               int threads = 1, const std::string& condition = "camera_subsets");

// Confidence-weighted per-joint DLT over the same combinations; joints seen
// by fewer than 2 selected views are excluded from the average (the excluded
// fraction is reported).
EvalRecord triangulation_baseline(const Dataset& dataset, int n_cams, int threads = 1,
                                  const std::string& condition = "triangulation");

// Copy of the dataset with detections re-simulated at the given occlusion
// probability (other noise parameters from `noise`), keyed by the eval seed.
Dataset resimulate_occlusion(const Dataset& dataset, const NoiseConfig& noise, double occlusion_prob,
                             uint64_t eval_seed);

// Model and baseline rows per occlusion level. Pass model == nullptr for
// baseline-only evaluation.
std::vector<EvalRecord> eval_occlusion(const PoseModel* model, const Dataset& dataset,
                                       const std::vector<double>& occlusion_probs, int n_cams,
                                       int t_in, const NoiseConfig& noise, uint64_t eval_seed,
                                       int threads = 1);

// One row per t_in value.
std::vector<EvalRecord> eval_time_frames(const PoseModel& model, const Dataset& dataset,
                                         const std::vector<int>& t_in_values, int n_cams,
                                         int threads = 1);

// condition,n_cams,t_in,occl_prob,mpjpe_mm,n_poses
void write_report_csv(const std::string& path, const std::vector<EvalRecord>& records);
void write_report_json(const std::string& path, const std::vector<EvalRecord>& records,
                       uint64_t eval_seed, const nlohmann::json& config_echo);

}  // namespace raypose
