#include "raypose/synthdata.hpp"

#include <cmath>
#include <fstream>

#include "raypose/rng.hpp"
#include "raypose/threading.hpp"

namespace raypose {

int SkeletonModel::neck_index() const {
  for (int i = 0; i < num_joints(); ++i) {
    if (joints[i].name == "neck") return i;
  }
  throw std::invalid_argument("SkeletonModel: no joint named neck");
}

void SkeletonModel::validate() const {
  int roots = 0;
  for (int i = 0; i < num_joints(); ++i) {
    const auto& j = joints[i];
    if (j.parent < 0) {
      ++roots;
    } else {
      if (j.parent >= i) throw std::invalid_argument("SkeletonModel: parents must precede children");
      if (!(j.bone_length > 0.0)) throw std::invalid_argument("SkeletonModel: bone lengths must be > 0");
    }
  }
  if (roots != 1) throw std::invalid_argument("SkeletonModel: exactly one root required");
  neck_index();
}

SkeletonModel SkeletonModel::human17() {
  const Eigen::Vector3d up(0, 0, 1), down(0, 0, -1), left(0, 1, 0), right(0, -1, 0);
  SkeletonModel s;
  s.joints = {
      {"pelvis", -1, 0.0, up},
      {"right_hip", 0, 0.13, right},
      {"right_knee", 1, 0.45, down},
      {"right_ankle", 2, 0.45, down},
      {"left_hip", 0, 0.13, left},
      {"left_knee", 4, 0.45, down},
      {"left_ankle", 5, 0.45, down},
      {"spine", 0, 0.24, up},
      {"neck", 7, 0.25, up},
      {"nose", 8, 0.12, (up + Eigen::Vector3d(0.5, 0, 0)).normalized()},
      {"head", 9, 0.12, up},
      {"left_shoulder", 8, 0.15, left},
      {"left_elbow", 11, 0.28, (down + 0.3 * left).normalized()},
      {"left_wrist", 12, 0.25, down},
      {"right_shoulder", 8, 0.15, right},
      {"right_elbow", 14, 0.28, (down + 0.3 * right).normalized()},
      {"right_wrist", 15, 0.25, down},
  };
  s.validate();
  return s;
}

void NoiseConfig::validate() const {
  if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0) ||
      !(outlier_prob >= 0.0 && outlier_prob <= 1.0)) {
    throw std::invalid_argument("NoiseConfig: probabilities must be in [0,1]");
  }
  if (pixel_noise_sigma < 0.0 || outlier_sigma < 0.0) {
    throw std::invalid_argument("NoiseConfig: sigmas must be >= 0");
  }
  if (!(confidence_sigma0 > 0.0)) {
    throw std::invalid_argument("NoiseConfig: confidence_sigma0 must be > 0");
  }
}

void GenConfig::validate() const {
  if (sequences < 1 || frames < 1 || cameras < 1) {
    throw std::invalid_argument("GenConfig: sequences, frames and cameras must be >= 1");
  }
  if (!(frame_rate > 0.0)) throw std::invalid_argument("GenConfig: frame_rate must be > 0");
  noise.validate();
}

nlohmann::json GenConfig::to_json() const {
  return {{"sequences", sequences},
          {"frames", frames},
          {"cameras", cameras},
          {"frame_rate", frame_rate},
          {"seed", seed},
          {"noise",
           {{"pixel_noise_sigma", noise.pixel_noise_sigma},
            {"occlusion_prob", noise.occlusion_prob},
            {"outlier_prob", noise.outlier_prob},
            {"outlier_sigma", noise.outlier_sigma},
            {"confidence_sigma0", noise.confidence_sigma0},
            {"confidence_floor", noise.confidence_floor}}},
          {"motion",
           {{"capture_half_x", motion.capture_half_x},
            {"capture_half_y", motion.capture_half_y},
            {"root_height", motion.root_height},
            {"root_amp", motion.root_amp},
            {"root_freq_max", motion.root_freq_max},
            {"joint_amp", motion.joint_amp},
            {"joint_freq_max", motion.joint_freq_max},
            {"yaw_amp", motion.yaw_amp},
            {"yaw_freq_max", motion.yaw_freq_max}}},
          {"rig",
           {{"radius_min", rig.radius_min},
            {"radius_max", rig.radius_max},
            {"height_min", rig.height_min},
            {"height_max", rig.height_max},
            {"focal_min", rig.focal_min},
            {"focal_max", rig.focal_max},
            {"image_width", rig.image_width},
            {"image_height", rig.image_height},
            {"principal_jitter", rig.principal_jitter},
            {"lookat_jitter", rig.lookat_jitter}}}};
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  GenConfig cfg;
  cfg.sequences = j.value("sequences", cfg.sequences);
  cfg.frames = j.value("frames", cfg.frames);
  cfg.cameras = j.value("cameras", cfg.cameras);
  cfg.frame_rate = j.value("frame_rate", cfg.frame_rate);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    cfg.noise.pixel_noise_sigma = n.value("pixel_noise_sigma", cfg.noise.pixel_noise_sigma);
    cfg.noise.occlusion_prob = n.value("occlusion_prob", cfg.noise.occlusion_prob);
    cfg.noise.outlier_prob = n.value("outlier_prob", cfg.noise.outlier_prob);
    cfg.noise.outlier_sigma = n.value("outlier_sigma", cfg.noise.outlier_sigma);
    cfg.noise.confidence_sigma0 = n.value("confidence_sigma0", cfg.noise.confidence_sigma0);
    cfg.noise.confidence_floor = n.value("confidence_floor", cfg.noise.confidence_floor);
  }
  if (j.contains("motion")) {
    const auto& m = j["motion"];
    cfg.motion.capture_half_x = m.value("capture_half_x", cfg.motion.capture_half_x);
    cfg.motion.capture_half_y = m.value("capture_half_y", cfg.motion.capture_half_y);
    cfg.motion.root_height = m.value("root_height", cfg.motion.root_height);
    cfg.motion.root_amp = m.value("root_amp", cfg.motion.root_amp);
    cfg.motion.root_freq_max = m.value("root_freq_max", cfg.motion.root_freq_max);
    cfg.motion.joint_amp = m.value("joint_amp", cfg.motion.joint_amp);
    cfg.motion.joint_freq_max = m.value("joint_freq_max", cfg.motion.joint_freq_max);
    cfg.motion.yaw_amp = m.value("yaw_amp", cfg.motion.yaw_amp);
    cfg.motion.yaw_freq_max = m.value("yaw_freq_max", cfg.motion.yaw_freq_max);
  }
  if (j.contains("rig")) {
    const auto& r = j["rig"];
    cfg.rig.radius_min = r.value("radius_min", cfg.rig.radius_min);
    cfg.rig.radius_max = r.value("radius_max", cfg.rig.radius_max);
    cfg.rig.height_min = r.value("height_min", cfg.rig.height_min);
    cfg.rig.height_max = r.value("height_max", cfg.rig.height_max);
    cfg.rig.focal_min = r.value("focal_min", cfg.rig.focal_min);
    cfg.rig.focal_max = r.value("focal_max", cfg.rig.focal_max);
    cfg.rig.image_width = r.value("image_width", cfg.rig.image_width);
    cfg.rig.image_height = r.value("image_height", cfg.rig.image_height);
    cfg.rig.principal_jitter = r.value("principal_jitter", cfg.rig.principal_jitter);
    cfg.rig.lookat_jitter = r.value("lookat_jitter", cfg.rig.lookat_jitter);
  }
  cfg.validate();
  return cfg;
}

namespace {

// Sum of a few random-phase sinusoids with amplitudes summing to `amp`.
struct FourierSignal {
  struct Term {
    double amp, freq, phase;
  };
  std::vector<Term> terms;
  double offset = 0.0;

  static FourierSignal random(Rng& rng, int n_terms, double total_amp, double freq_max) {
    FourierSignal s;
    double weight_sum = 0.0;
    std::vector<double> weights(n_terms);
    for (auto& w : weights) {
      w = rng.uniform(0.2, 1.0);
      weight_sum += w;
    }
    for (int k = 0; k < n_terms; ++k) {
      s.terms.push_back({total_amp * weights[k] / weight_sum, rng.uniform(0.02, freq_max),
                         rng.uniform(0.0, 2.0 * M_PI)});
    }
    return s;
  }

  double operator()(double t) const {
    double v = offset;
    for (const auto& term : terms) v += term.amp * std::sin(2.0 * M_PI * term.freq * t + term.phase);
    return v;
  }
};

}  // namespace

PoseSequence3D generate_motion(const SkeletonModel& skeleton, const MotionConfig& cfg, int frames,
                               double frame_rate, uint64_t seed) {
  if (frames < 1) throw std::invalid_argument("generate_motion: frames must be >= 1");
  skeleton.validate();
  Rng rng(seed);
  const int num_joints = skeleton.num_joints();

  const double amp = std::min({cfg.root_amp, 0.9 * cfg.capture_half_x, 0.9 * cfg.capture_half_y});
  const FourierSignal root_x = FourierSignal::random(rng, 3, amp, cfg.root_freq_max);
  const FourierSignal root_y = FourierSignal::random(rng, 3, amp, cfg.root_freq_max);
  FourierSignal root_z = FourierSignal::random(rng, 2, 0.04, cfg.root_freq_max);
  root_z.offset = cfg.root_height;
  const FourierSignal yaw = FourierSignal::random(rng, 2, cfg.yaw_amp, cfg.yaw_freq_max);

  std::vector<Eigen::Vector3d> joint_axes(num_joints);
  std::vector<FourierSignal> joint_angles;
  joint_angles.reserve(num_joints);
  for (int j = 0; j < num_joints; ++j) {
    Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
    if (axis.norm() < 1e-6) axis = Eigen::Vector3d::UnitX();
    joint_axes[j] = axis.normalized();
    joint_angles.push_back(FourierSignal::random(rng, 2, cfg.joint_amp, cfg.joint_freq_max));
  }

  PoseSequence3D seq(frames, num_joints);
  std::vector<Eigen::Vector3d> world_pos(num_joints);
  std::vector<Eigen::Matrix3d> world_rot(num_joints);
  for (int f = 0; f < frames; ++f) {
    const double t = f / frame_rate;
    for (int j = 0; j < num_joints; ++j) {
      const auto& joint = skeleton.joints[j];
      const Eigen::Matrix3d local =
          Eigen::AngleAxisd(joint_angles[j](t), joint_axes[j]).toRotationMatrix();
      if (joint.parent < 0) {
        world_pos[j] = Eigen::Vector3d(root_x(t), root_y(t), root_z(t));
        world_rot[j] =
            (Eigen::AngleAxisd(yaw(t), Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(joint_angles[j](t), joint_axes[j]))
                .toRotationMatrix();
      } else {
        world_pos[j] = world_pos[joint.parent] +
                       world_rot[joint.parent] * (joint.bone_length * joint.rest_dir);
        world_rot[j] = world_rot[joint.parent] * local;
      }
      seq.at(f, j) = world_pos[j] * 1000.0;  // meters -> mm at the data boundary
    }
  }
  return seq;
}

std::vector<CameraParams> sample_cameras(int n, const CameraRigConfig& cfg, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_cameras: n must be >= 1");
  std::vector<CameraParams> cameras;
  cameras.reserve(n);
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
    const double azimuth = rng.uniform(0.0, 2.0 * M_PI);
    const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double height = rng.uniform(cfg.height_min, cfg.height_max);
    const Eigen::Vector3d center(radius * std::cos(azimuth), radius * std::sin(azimuth), height);
    Eigen::Vector3d target = cfg.look_at;
    for (int k = 0; k < 3; ++k) target[k] += rng.uniform(-cfg.lookat_jitter, cfg.lookat_jitter);

    const Eigen::Vector3d forward = (target - center).normalized();
    Eigen::Vector3d up = Eigen::Vector3d::UnitZ();
    if (std::abs(forward.dot(up)) > 0.999) up = Eigen::Vector3d::UnitY();
    const Eigen::Vector3d right = forward.cross(up).normalized();
    const Eigen::Vector3d down = forward.cross(right);

    CameraParams cam;
    cam.R.row(0) = right;
    cam.R.row(1) = down;
    cam.R.row(2) = forward;
    cam.t = -cam.R * center;
    const double f = rng.uniform(cfg.focal_min, cfg.focal_max);
    cam.K << f, 0.0, cfg.image_width / 2.0 + rng.uniform(-cfg.principal_jitter, cfg.principal_jitter),
        0.0, f, cfg.image_height / 2.0 + rng.uniform(-cfg.principal_jitter, cfg.principal_jitter),
        0.0, 0.0, 1.0;
    cam.validate();
    cameras.push_back(cam);
  }
  return cameras;
}

void simulate_detections(SceneSequence& sequence, const NoiseConfig& noise, uint64_t seed) {
  noise.validate();
  const int frames = sequence.gt.frames;
  const int num_joints = sequence.gt.num_joints;
  const int num_cams = sequence.num_cameras();
  sequence.detections.assign(static_cast<size_t>(frames) * num_cams * num_joints, Detection{});
  Rng rng(seed);
  // image bounds assumed from the principal point; detectors report inside
  // the frame only
  for (int t = 0; t < frames; ++t) {
    for (int c = 0; c < num_cams; ++c) {
      const auto& cam = sequence.cameras[c];
      const double width = 2.0 * cam.K(0, 2);
      const double height = 2.0 * cam.K(1, 2);
      for (int j = 0; j < num_joints; ++j) {
        Detection& det = sequence.det(t, c, j);
        const auto uv = project(cam, sequence.gt.joint_m(t, j));
        if (!uv) continue;  // behind the camera
        double u = uv->x(), v = uv->y(), conf = 1.0;
        if (noise.occlusion_prob > 0.0 && rng.bernoulli(noise.occlusion_prob)) {
          if (!(noise.outlier_prob > 0.0) || !rng.bernoulli(noise.outlier_prob)) continue;  // dropout
          u += rng.normal(0.0, noise.outlier_sigma);
          v += rng.normal(0.0, noise.outlier_sigma);
          conf = rng.uniform(noise.confidence_floor, 0.3);
        } else if (noise.pixel_noise_sigma > 0.0) {
          const double du = rng.normal(0.0, noise.pixel_noise_sigma);
          const double dv = rng.normal(0.0, noise.pixel_noise_sigma);
          u += du;
          v += dv;
          conf = std::max(noise.confidence_floor, std::exp(-std::hypot(du, dv) / noise.confidence_sigma0));
        }
        if (u < 0.0 || u > width || v < 0.0 || v > height) continue;  // out of frame
        det.u = static_cast<float>(u);
        det.v = static_cast<float>(v);
        det.confidence = static_cast<float>(conf);
        det.visible = true;
      }
    }
  }
}

Dataset generate_dataset(const GenConfig& cfg, int threads) {
  cfg.validate();
  Dataset ds;
  ds.skeleton = SkeletonModel::human17();
  ds.frame_rate = cfg.frame_rate;
  ds.sequences.resize(cfg.sequences);
  parallel_for(cfg.sequences, threads, [&](int64_t i) {
    const uint64_t seq_seed = mix_seed(cfg.seed, 0x5e9, static_cast<uint64_t>(i));
    SceneSequence& seq = ds.sequences[i];
    seq.seed = seq_seed;
    seq.frame_rate = cfg.frame_rate;
    seq.cameras = sample_cameras(cfg.cameras, cfg.rig, mix_seed(seq_seed, 1));
    seq.gt = generate_motion(ds.skeleton, cfg.motion, cfg.frames, cfg.frame_rate, mix_seed(seq_seed, 2));
    simulate_detections(seq, cfg.noise, mix_seed(seq_seed, 3));
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset I/O

namespace {

nlohmann::json skeleton_to_json(const SkeletonModel& s) {
  nlohmann::json names = nlohmann::json::array();
  nlohmann::json parents = nlohmann::json::array();
  nlohmann::json lengths = nlohmann::json::array();
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& j : s.joints) {
    names.push_back(j.name);
    parents.push_back(j.parent);
    lengths.push_back(j.bone_length);
    dirs.push_back({j.rest_dir.x(), j.rest_dir.y(), j.rest_dir.z()});
  }
  return {{"names", names}, {"parents", parents}, {"bone_lengths_m", lengths}, {"rest_dirs", dirs}};
}

SkeletonModel skeleton_from_json(const nlohmann::json& j) {
  SkeletonModel s;
  const auto& names = j.at("names");
  const auto& parents = j.at("parents");
  const auto& lengths = j.at("bone_lengths_m");
  const auto& dirs = j.at("rest_dirs");
  for (size_t i = 0; i < names.size(); ++i) {
    SkeletonJoint joint;
    joint.name = names[i].get<std::string>();
    joint.parent = parents[i].get<int>();
    joint.bone_length = lengths[i].get<double>();
    joint.rest_dir = Eigen::Vector3d(dirs[i][0].get<double>(), dirs[i][1].get<double>(),
                                     dirs[i][2].get<double>());
    s.joints.push_back(joint);
  }
  s.validate();
  return s;
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_dataset: cannot open " + path);
  const nlohmann::json header = {{"format_version", kDatasetFormatVersion},
                                 {"skeleton", skeleton_to_json(dataset.skeleton)},
                                 {"units", "mm"},
                                 {"frame_rate", dataset.frame_rate}};
  out << header.dump() << '\n';
  for (const auto& seq : dataset.sequences) {
    nlohmann::json cameras = nlohmann::json::array();
    for (const auto& cam : seq.cameras) {
      nlohmann::json K = nlohmann::json::array(), R = nlohmann::json::array(), t = nlohmann::json::array();
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
          K.push_back(cam.K(r, c));
          R.push_back(cam.R(r, c));
        }
        t.push_back(cam.t(r));
      }
      cameras.push_back({{"K", K}, {"R", R}, {"t", t}});
    }
    nlohmann::json poses = nlohmann::json::array();
    for (int f = 0; f < seq.gt.frames; ++f) {
      nlohmann::json frame = nlohmann::json::array();
      for (int j = 0; j < seq.gt.num_joints; ++j) {
        const auto& p = seq.gt.at(f, j);
        frame.push_back({p.x(), p.y(), p.z()});
      }
      poses.push_back(std::move(frame));
    }
    nlohmann::json dets = nlohmann::json::array();
    for (int f = 0; f < seq.gt.frames; ++f) {
      nlohmann::json per_cam = nlohmann::json::array();
      for (int c = 0; c < seq.num_cameras(); ++c) {
        nlohmann::json per_joint = nlohmann::json::array();
        for (int j = 0; j < seq.gt.num_joints; ++j) {
          const auto& d = seq.det(f, c, j);
          per_joint.push_back({d.u, d.v, d.confidence, d.visible ? 1 : 0});
        }
        per_cam.push_back(std::move(per_joint));
      }
      dets.push_back(std::move(per_cam));
    }
    const nlohmann::json record = {{"seed", seq.seed},
                                   {"cameras", std::move(cameras)},
                                   {"gt_poses_mm", std::move(poses)},
                                   {"detections", std::move(dets)}};
    out << record.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write_dataset: write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) {
    throw DatasetError(DatasetError::Kind::kMalformedRecord, path + ": empty dataset file");
  }
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.contains("format_version")) {
    throw DatasetError(DatasetError::Kind::kMalformedRecord, path + ": malformed header record");
  }
  if (header["format_version"].get<int>() != kDatasetFormatVersion) {
    throw DatasetError(DatasetError::Kind::kVersionMismatch,
                       path + ": unsupported dataset format version");
  }
  Dataset ds;
  try {
    ds.skeleton = skeleton_from_json(header.at("skeleton"));
    ds.frame_rate = header.at("frame_rate").get<double>();
  } catch (const DatasetError&) {
    throw;
  } catch (const std::exception& e) {
    throw DatasetError(DatasetError::Kind::kMalformedRecord,
                       path + ": malformed header record: " + e.what());
  }

  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded()) {
      throw DatasetError(DatasetError::Kind::kMalformedRecord,
                         path + ": malformed record at line " + std::to_string(line_no));
    }
    try {
      SceneSequence seq;
      seq.frame_rate = ds.frame_rate;
      seq.seed = rec.at("seed").get<uint64_t>();
      for (const auto& cj : rec.at("cameras")) {
        CameraParams cam;
        const auto& K = cj.at("K");
        const auto& R = cj.at("R");
        const auto& t = cj.at("t");
        for (int r = 0; r < 3; ++r) {
          for (int c = 0; c < 3; ++c) {
            cam.K(r, c) = K.at(3 * r + c).get<double>();
            cam.R(r, c) = R.at(3 * r + c).get<double>();
          }
          cam.t(r) = t.at(r).get<double>();
        }
        cam.validate();
        seq.cameras.push_back(cam);
      }
      const auto& poses = rec.at("gt_poses_mm");
      const int frames = static_cast<int>(poses.size());
      const int num_joints = ds.skeleton.num_joints();
      seq.gt = PoseSequence3D(frames, num_joints);
      for (int f = 0; f < frames; ++f) {
        const auto& frame = poses.at(f);
        if (static_cast<int>(frame.size()) != num_joints) {
          throw std::runtime_error("joint count mismatch");
        }
        for (int j = 0; j < num_joints; ++j) {
          seq.gt.at(f, j) = Eigen::Vector3d(frame[j][0].get<double>(), frame[j][1].get<double>(),
                                            frame[j][2].get<double>());
        }
      }
      const auto& dets = rec.at("detections");
      if (static_cast<int>(dets.size()) != frames) throw std::runtime_error("detection frame mismatch");
      seq.detections.assign(static_cast<size_t>(frames) * seq.cameras.size() * num_joints, Detection{});
      for (int f = 0; f < frames; ++f) {
        const auto& per_cam = dets.at(f);
        if (per_cam.size() != seq.cameras.size()) throw std::runtime_error("detection camera mismatch");
        for (size_t c = 0; c < per_cam.size(); ++c) {
          const auto& per_joint = per_cam.at(c);
          if (static_cast<int>(per_joint.size()) != num_joints) {
            throw std::runtime_error("detection joint mismatch");
          }
          for (int j = 0; j < num_joints; ++j) {
            Detection& d = seq.det(f, static_cast<int>(c), j);
            d.u = per_joint[j][0].get<float>();
            d.v = per_joint[j][1].get<float>();
            d.confidence = per_joint[j][2].get<float>();
            d.visible = per_joint[j][3].get<int>() != 0;
          }
        }
      }
      ds.sequences.push_back(std::move(seq));
    } catch (const std::exception& e) {
      throw DatasetError(DatasetError::Kind::kMalformedRecord,
                         path + ": malformed record at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace raypose
