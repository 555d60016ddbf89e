#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "raypose/geometry.hpp"

namespace raypose {

struct SkeletonJoint {
  std::string name;
  int parent = -1;           // -1 for the root; parents precede children
  double bone_length = 0.0;  // meters, 0 for the root
  Eigen::Vector3d rest_dir = Eigen::Vector3d::UnitZ();  // unit offset in the parent frame
};

struct SkeletonModel {
  std::vector<SkeletonJoint> joints;

  int num_joints() const { return static_cast<int>(joints.size()); }
  int neck_index() const;  // throws when no joint is named "neck"
  void validate() const;

  static SkeletonModel human17();
};

// Ground-truth or predicted joint positions over time, world millimeters.
struct PoseSequence3D {
  int frames = 0;
  int num_joints = 0;
  std::vector<Eigen::Vector3d> points;  // [t * num_joints + j]

  PoseSequence3D() = default;
  PoseSequence3D(int t, int j) : frames(t), num_joints(j), points(static_cast<size_t>(t) * j, Eigen::Vector3d::Zero()) {}

  Eigen::Vector3d& at(int t, int j) { return points[static_cast<size_t>(t) * num_joints + j]; }
  const Eigen::Vector3d& at(int t, int j) const { return points[static_cast<size_t>(t) * num_joints + j]; }
  // World meters, for the compute pipeline.
  Eigen::Vector3d joint_m(int t, int j) const { return at(t, j) / 1000.0; }
};

struct Detection {
  float u = 0.0f;
  float v = 0.0f;
  float confidence = 0.0f;
  bool visible = false;
};

struct SceneSequence {
  std::vector<CameraParams> cameras;
  PoseSequence3D gt;                  // millimeters
  std::vector<Detection> detections;  // [t][camera][joint], flattened
  double frame_rate = 50.0;
  uint64_t seed = 0;

  int num_cameras() const { return static_cast<int>(cameras.size()); }
  Detection& det(int t, int c, int j) {
    return detections[(static_cast<size_t>(t) * cameras.size() + c) * gt.num_joints + j];
  }
  const Detection& det(int t, int c, int j) const {
    return detections[(static_cast<size_t>(t) * cameras.size() + c) * gt.num_joints + j];
  }
};

struct NoiseConfig {
  double pixel_noise_sigma = 2.0;  // px
  double occlusion_prob = 0.1;
  double outlier_prob = 0.25;  // within an occlusion event: outlier vs dropout
  double outlier_sigma = 30.0;
  double confidence_sigma0 = 5.0;  // confidence = exp(-error_px / sigma0)
  double confidence_floor = 0.05;

  void validate() const;
};

struct MotionConfig {
  double capture_half_x = 2.0;  // capture area 4 m x 4 m
  double capture_half_y = 2.0;
  double root_height = 0.95;
  double root_amp = 1.4;       // total planar Fourier amplitude, m
  double root_freq_max = 0.2;  // Hz
  double joint_amp = 0.3;      // total joint angle amplitude, rad
  double joint_freq_max = 0.3;
  double yaw_amp = 0.5;
  double yaw_freq_max = 0.15;
};

struct CameraRigConfig {
  double radius_min = 2.0;
  double radius_max = 5.0;
  double height_min = 0.5;
  double height_max = 2.5;
  double focal_min = 800.0;
  double focal_max = 1200.0;
  double image_width = 1000.0;
  double image_height = 1000.0;
  double principal_jitter = 20.0;
  double lookat_jitter = 0.3;
  Eigen::Vector3d look_at = Eigen::Vector3d(0.0, 0.0, 1.0);
};

struct GenConfig {
  int sequences = 10;
  int frames = 30;
  int cameras = 8;
  double frame_rate = 50.0;
  uint64_t seed = 1;
  MotionConfig motion;
  CameraRigConfig rig;
  NoiseConfig noise;

  void validate() const;
  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
};

struct Dataset {
  SkeletonModel skeleton;
  double frame_rate = 50.0;
  std::vector<SceneSequence> sequences;
};

struct DatasetError : std::runtime_error {
  enum class Kind { kVersionMismatch, kMalformedRecord };
  Kind kind;
  DatasetError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// Forward-kinematics motion: a smooth random root trajectory inside the
// capture area plus smoothly varying joint rotations; bone lengths are
// constant across frames. Output in millimeters, floor at z=0.
PoseSequence3D generate_motion(const SkeletonModel& skeleton, const MotionConfig& cfg, int frames,
                               double frame_rate, uint64_t seed);

// Cameras on an annulus around the capture area, oriented toward a jittered
// look-at point.
std::vector<CameraParams> sample_cameras(int n, const CameraRigConfig& cfg, uint64_t seed);

// Fills sequence.detections from gt and cameras: projection, Gaussian pixel
// noise, occlusion dropouts/outliers and error-linked confidences.
void simulate_detections(SceneSequence& sequence, const NoiseConfig& noise, uint64_t seed);

Dataset generate_dataset(const GenConfig& cfg, int threads = 1);

// JSON-Lines: header record then one record per sequence. Poses in mm,
// camera translations in meters; floats keep full round-trip precision.
inline constexpr int kDatasetFormatVersion = 1;
void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);

}  // namespace raypose
