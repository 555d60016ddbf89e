#include "raypose/geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace raypose {

namespace {
constexpr double kRotationTol = 1e-9;
constexpr double kParallelThreshold = 1e-9;
}  // namespace

void CameraParams::validate() const {
  const Eigen::Matrix3d gram = R.transpose() * R;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > kRotationTol ||
      std::abs(R.determinant() - 1.0) > kRotationTol) {
    throw std::invalid_argument("CameraParams: R is not a proper rotation");
  }
  if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(0, 0) <= 0.0 || K(1, 1) <= 0.0 ||
      K(2, 2) <= 0.0) {
    throw std::invalid_argument("CameraParams: K must be upper triangular with positive diagonal");
  }
  if (!center().allFinite()) {
    throw std::invalid_argument("CameraParams: camera center is not finite");
  }
}

PluckerRay PluckerRay::through_point(const Eigen::Vector3d& point, const Eigen::Vector3d& direction) {
  const double norm = direction.norm();
  if (!(norm > 0.0) || !direction.allFinite()) {
    throw std::invalid_argument("PluckerRay: direction must be finite and nonzero");
  }
  PluckerRay ray;
  ray.d = direction / norm;
  ray.m = point.cross(ray.d);
  return ray;
}

void PluckerRay::validate() const {
  if (std::abs(d.norm() - 1.0) > 1e-9) {
    throw std::invalid_argument("PluckerRay: direction is not unit length");
  }
  if (std::abs(d.dot(m)) > 1e-9) {
    throw std::invalid_argument("PluckerRay: moment is not orthogonal to direction");
  }
}

std::optional<Eigen::Vector2d> project(const CameraParams& camera, const Point3D& p) {
  const Eigen::Vector3d x_cam = camera.R * p + camera.t;
  if (!(x_cam.z() > 0.0)) return std::nullopt;
  const Eigen::Vector3d uvw = camera.K * x_cam;
  return Eigen::Vector2d(uvw.x() / uvw.z(), uvw.y() / uvw.z());
}

PluckerRay pixel_to_ray(const CameraParams& camera, double u, double v) {
  if (!std::isfinite(u) || !std::isfinite(v)) {
    throw std::invalid_argument("pixel_to_ray: pixel coordinates must be finite");
  }
  if (std::abs(camera.K.determinant()) < 1e-15) {
    throw std::invalid_argument("pixel_to_ray: singular intrinsic matrix");
  }
  const Eigen::Vector3d dir = camera.R.transpose() * camera.K.inverse() * Eigen::Vector3d(u, v, 1.0);
  return PluckerRay::through_point(camera.center(), dir);
}

double ray_distance(const PluckerRay& rq, const PluckerRay& rk) {
  const Eigen::Vector3d cross = rq.d.cross(rk.d);
  const double cross_norm = cross.norm();
  if (cross_norm < kParallelThreshold) {
    return rq.d.cross(rq.m - rk.m).norm();
  }
  return std::abs(rq.d.dot(rk.m) + rk.d.dot(rq.m)) / cross_norm;
}

double ray_point_distance(const PluckerRay& r, const Point3D& p) {
  return r.d.cross(p - r.point_on_line()).norm();
}

Point3D triangulate_dlt(const std::vector<PixelObservation>& observations, bool weighted) {
  if (observations.size() < 2) {
    throw std::invalid_argument("triangulate_dlt: need at least 2 observations");
  }
  Eigen::MatrixXd A(2 * observations.size(), 4);
  for (size_t i = 0; i < observations.size(); ++i) {
    const auto& obs = observations[i];
    Eigen::Matrix<double, 3, 4> P;
    P.leftCols<3>() = obs.camera.K * obs.camera.R;
    P.col(3) = obs.camera.K * obs.camera.t;
    const double w = weighted ? obs.confidence : 1.0;
    A.row(2 * i + 0) = w * (obs.uv.x() * P.row(2) - P.row(0));
    A.row(2 * i + 1) = w * (obs.uv.y() * P.row(2) - P.row(1));
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d X = svd.matrixV().col(3);
  if (std::abs(X(3)) < 1e-12 * X.norm()) {
    throw std::runtime_error("triangulate_dlt: degenerate system (point at infinity)");
  }
  return X.head<3>() / X(3);
}

}  // namespace raypose
