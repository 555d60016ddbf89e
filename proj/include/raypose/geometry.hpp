#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

namespace raypose {

using Point3D = Eigen::Vector3d;

// Calibrated pinhole camera. R and t map world to camera coordinates
// (x_cam = R * x_world + t); translation is in meters.
struct CameraParams {
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d center() const { return -R.transpose() * t; }

  // Throws std::invalid_argument if R is not a proper rotation, K is not
  // upper triangular with positive diagonal, or the center is not finite.
  void validate() const;
};

// Oriented 3D line through a camera center and a detection: unit direction d
// plus moment m = p x d for any point p on the line (so d . m == 0).
struct PluckerRay {
  Eigen::Vector3d d = Eigen::Vector3d::UnitZ();
  Eigen::Vector3d m = Eigen::Vector3d::Zero();

  static PluckerRay through_point(const Eigen::Vector3d& point, const Eigen::Vector3d& direction);

  // Point on the line closest to the origin.
  Eigen::Vector3d point_on_line() const { return d.cross(m); }

  void validate() const;
};

// Projects a world point to pixel coordinates. Returns nullopt when the point
// is not strictly in front of the camera; the caller decides visibility.
std::optional<Eigen::Vector2d> project(const CameraParams& camera, const Point3D& p);

// Back-projects a pixel to the viewing ray through the camera center.
PluckerRay pixel_to_ray(const CameraParams& camera, double u, double v);

// Minimum distance between two lines in Plücker form. Falls back to the
// parallel-line formula when ||d_q x d_k|| < 1e-9.
double ray_distance(const PluckerRay& rq, const PluckerRay& rk);

double ray_point_distance(const PluckerRay& r, const Point3D& p);

struct PixelObservation {
  CameraParams camera;
  Eigen::Vector2d uv = Eigen::Vector2d::Zero();
  double confidence = 1.0;
};

// Linear least-squares triangulation of the stacked DLT system. When weighted,
// each observation's two rows are scaled by its confidence. Throws
// std::invalid_argument on <2 observations and std::runtime_error when the
// system is degenerate (solution at infinity).
Point3D triangulate_dlt(const std::vector<PixelObservation>& observations, bool weighted);

}  // namespace raypose
