#include "raypose/eval.hpp"

#include <cmath>
#include <fstream>

#include "raypose/rng.hpp"
#include "raypose/threading.hpp"

namespace raypose {

namespace {

struct ErrorAccumulator {
  double sum = 0.0;
  int64_t count = 0;
  std::vector<double> joint_sum;
  std::vector<int64_t> joint_count;
  int64_t excluded = 0;
  int64_t considered = 0;
  int64_t fallbacks = 0;

  void init(int num_joints) {
    joint_sum.assign(num_joints, 0.0);
    joint_count.assign(num_joints, 0);
  }
  void add(int joint, double err_mm) {
    sum += err_mm;
    ++count;
    joint_sum[joint] += err_mm;
    ++joint_count[joint];
  }
  void merge(const ErrorAccumulator& o) {
    sum += o.sum;
    count += o.count;
    excluded += o.excluded;
    considered += o.considered;
    fallbacks += o.fallbacks;
    for (size_t j = 0; j < joint_sum.size(); ++j) {
      joint_sum[j] += o.joint_sum[j];
      joint_count[j] += o.joint_count[j];
    }
  }
};

std::vector<std::vector<int>> camera_combinations(int total, int choose) {
  if (choose < 1 || choose > total) {
    throw std::invalid_argument("camera_combinations: invalid subset size");
  }
  std::vector<std::vector<int>> combos;
  std::vector<int> idx(choose);
  for (int i = 0; i < choose; ++i) idx[i] = i;
  while (true) {
    combos.push_back(idx);
    int i = choose - 1;
    while (i >= 0 && idx[i] == total - choose + i) --i;
    if (i < 0) break;
    ++idx[i];
    for (int k = i + 1; k < choose; ++k) idx[k] = idx[k - 1] + 1;
  }
  return combos;
}

EvalRecord finish_record(ErrorAccumulator& acc, const std::string& condition, int n_cams, int t_in,
                         double occl_prob) {
  EvalRecord rec;
  rec.condition = condition;
  rec.n_cams = n_cams;
  rec.t_in = t_in;
  rec.occl_prob = occl_prob;
  rec.n_poses = acc.count;
  rec.mpjpe_mm = acc.count > 0 ? acc.sum / static_cast<double>(acc.count) : 0.0;
  rec.per_joint_mpjpe_mm.resize(acc.joint_sum.size());
  for (size_t j = 0; j < acc.joint_sum.size(); ++j) {
    rec.per_joint_mpjpe_mm[j] =
        acc.joint_count[j] > 0 ? acc.joint_sum[j] / static_cast<double>(acc.joint_count[j]) : 0.0;
  }
  rec.excluded_joint_fraction =
      acc.considered > 0 ? static_cast<double>(acc.excluded) / static_cast<double>(acc.considered) : 0.0;
  rec.centering_fallbacks = acc.fallbacks;
  return rec;
}

}  // namespace

double mpjpe_mm(const PoseSequence3D& pred, const PoseSequence3D& gt) {
  if (pred.frames != gt.frames || pred.num_joints != gt.num_joints) {
    throw std::invalid_argument("mpjpe_mm: shape mismatch");
  }
  if (pred.frames == 0 || pred.num_joints == 0) throw std::invalid_argument("mpjpe_mm: empty input");
  double sum = 0.0;
  for (int t = 0; t < pred.frames; ++t) {
    for (int j = 0; j < pred.num_joints; ++j) sum += (pred.at(t, j) - gt.at(t, j)).norm();
  }
  return sum / (static_cast<double>(pred.frames) * pred.num_joints);
}

PoseSequence3D causal_infer(const PoseModel& model, const SceneSequence& seq, int neck_joint,
                            int t_in, const std::vector<int>& camera_ids,
                            int64_t* centering_fallbacks) {
  if (t_in < 1) throw std::invalid_argument("causal_infer: t_in must be >= 1");
  if (seq.gt.frames < 1) throw std::invalid_argument("causal_infer: empty sequence");
  const int num_joints = seq.gt.num_joints;
  if (num_joints != model.config().num_joints) {
    throw std::invalid_argument("causal_infer: joint count mismatch between model and sequence");
  }
  const QuerySpec query = QuerySpec::latest_frame(num_joints);
  PoseSequence3D out(seq.gt.frames, num_joints);
  std::vector<Eigen::Vector3d> prev_world_m(num_joints, Eigen::Vector3d::Zero());
  bool have_prev = false;

  for (int f = 0; f < seq.gt.frames; ++f) {
    Eigen::Vector3d center(0.0, 0.0, 0.0);  // capture-area center fallback
    if (have_prev) {
      center = Eigen::Vector3d(prev_world_m[neck_joint].x(), prev_world_m[neck_joint].y(), 0.0);
    } else {
      std::vector<PixelObservation> neck_obs;
      for (const int c : camera_ids) {
        const Detection& det = seq.det(f, c, neck_joint);
        if (!det.visible) continue;
        neck_obs.push_back({seq.cameras[c], Eigen::Vector2d(det.u, det.v), det.confidence});
      }
      bool ok = false;
      if (neck_obs.size() >= 2) {
        try {
          const Point3D p = triangulate_dlt(neck_obs, /*weighted=*/true);
          center = Eigen::Vector3d(p.x(), p.y(), 0.0);
          ok = true;
        } catch (const std::exception&) {
        }
      }
      if (!ok && centering_fallbacks != nullptr) ++(*centering_fallbacks);
    }
    const SceneTransform tf{center, 0.0};

    std::vector<ObservationToken> tokens;
    const int start = std::max(0, f - t_in + 1);
    for (int t = start; t <= f; ++t) {
      for (const int c : camera_ids) {
        for (int j = 0; j < num_joints; ++j) {
          const Detection& det = seq.det(t, c, j);
          if (!det.visible) continue;
          ObservationToken tok;
          tok.joint_id = j;
          tok.camera_id = c;
          tok.rel_time = t - f;
          tok.confidence = det.confidence;
          tok.ray = tf.apply_ray(pixel_to_ray(seq.cameras[c], det.u, det.v));
          tokens.push_back(tok);
        }
      }
    }

    if (tokens.empty()) {
      // nothing visible in the whole window: hold the last estimate
      for (int j = 0; j < num_joints; ++j) {
        const Eigen::Vector3d p = have_prev ? prev_world_m[j] : center;
        out.at(f, j) = p * 1000.0;
      }
      continue;
    }

    const Eigen::MatrixXd pred = model.predict(tokens, query);  // J x 3, centered meters
    for (int j = 0; j < num_joints; ++j) {
      const Eigen::Vector3d world_m = tf.invert_point(pred.row(j).transpose());
      prev_world_m[j] = world_m;
      out.at(f, j) = world_m * 1000.0;
    }
    have_prev = true;
  }
  return out;
}

EvalRecord eval_camera_subsets(const PoseModel& model, const Dataset& dataset, int n_cams, int t_in,
                               int threads, const std::string& condition) {
  if (dataset.sequences.empty()) throw std::invalid_argument("eval_camera_subsets: empty dataset");
  const int total_cams = dataset.sequences.front().num_cameras();
  const auto combos = camera_combinations(total_cams, n_cams);
  const int neck = dataset.skeleton.neck_index();
  const int num_joints = dataset.skeleton.num_joints();
  const int64_t jobs = static_cast<int64_t>(combos.size()) * dataset.sequences.size();

  std::vector<ErrorAccumulator> slots(jobs);
  parallel_for(jobs, threads, [&](int64_t job) {
    const auto& combo = combos[job / dataset.sequences.size()];
    const auto& seq = dataset.sequences[job % dataset.sequences.size()];
    ErrorAccumulator& acc = slots[job];
    acc.init(num_joints);
    const PoseSequence3D pred = causal_infer(model, seq, neck, t_in, combo, &acc.fallbacks);
    for (int t = 0; t < pred.frames; ++t) {
      for (int j = 0; j < num_joints; ++j) acc.add(j, (pred.at(t, j) - seq.gt.at(t, j)).norm());
    }
  });

  ErrorAccumulator total;
  total.init(num_joints);
  for (const auto& acc : slots) total.merge(acc);
  return finish_record(total, condition, n_cams, t_in, 0.0);
}

EvalRecord triangulation_baseline(const Dataset& dataset, int n_cams, int threads,
                                  const std::string& condition) {
  if (dataset.sequences.empty()) throw std::invalid_argument("triangulation_baseline: empty dataset");
  const int total_cams = dataset.sequences.front().num_cameras();
  const auto combos = camera_combinations(total_cams, n_cams);
  const int num_joints = dataset.skeleton.num_joints();
  const int64_t jobs = static_cast<int64_t>(combos.size()) * dataset.sequences.size();

  std::vector<ErrorAccumulator> slots(jobs);
  parallel_for(jobs, threads, [&](int64_t job) {
    const auto& combo = combos[job / dataset.sequences.size()];
    const auto& seq = dataset.sequences[job % dataset.sequences.size()];
    ErrorAccumulator& acc = slots[job];
    acc.init(num_joints);
    for (int t = 0; t < seq.gt.frames; ++t) {
      for (int j = 0; j < num_joints; ++j) {
        ++acc.considered;
        std::vector<PixelObservation> obs;
        for (const int c : combo) {
          const Detection& det = seq.det(t, c, j);
          if (!det.visible) continue;
          obs.push_back({seq.cameras[c], Eigen::Vector2d(det.u, det.v), det.confidence});
        }
        if (obs.size() < 2) {
          ++acc.excluded;
          continue;
        }
        try {
          const Point3D p_m = triangulate_dlt(obs, /*weighted=*/true);
          acc.add(j, (p_m * 1000.0 - seq.gt.at(t, j)).norm());
        } catch (const std::exception&) {
          ++acc.excluded;
        }
      }
    }
  });

  ErrorAccumulator total;
  total.init(num_joints);
  for (const auto& acc : slots) total.merge(acc);
  return finish_record(total, condition, n_cams, 0, 0.0);
}

Dataset resimulate_occlusion(const Dataset& dataset, const NoiseConfig& noise, double occlusion_prob,
                             uint64_t eval_seed) {
  NoiseConfig n = noise;
  n.occlusion_prob = occlusion_prob;
  n.validate();
  Dataset out;
  out.skeleton = dataset.skeleton;
  out.frame_rate = dataset.frame_rate;
  out.sequences = dataset.sequences;
  const uint64_t permille = static_cast<uint64_t>(std::llround(occlusion_prob * 1000.0));
  for (size_t i = 0; i < out.sequences.size(); ++i) {
    simulate_detections(out.sequences[i], n, mix_seed(eval_seed, permille, i));
  }
  return out;
}

std::vector<EvalRecord> eval_occlusion(const PoseModel* model, const Dataset& dataset,
                                       const std::vector<double>& occlusion_probs, int n_cams,
                                       int t_in, const NoiseConfig& noise, uint64_t eval_seed,
                                       int threads) {
  std::vector<EvalRecord> records;
  for (const double prob : occlusion_probs) {
    if (!(prob >= 0.0 && prob <= 1.0)) {
      throw std::invalid_argument("eval_occlusion: probabilities must be in [0,1]");
    }
    const Dataset resim = resimulate_occlusion(dataset, noise, prob, eval_seed);
    if (model != nullptr) {
      EvalRecord rec = eval_camera_subsets(*model, resim, n_cams, t_in, threads, "model_occlusion");
      rec.occl_prob = prob;
      records.push_back(std::move(rec));
    }
    EvalRecord base = triangulation_baseline(resim, n_cams, threads, "triangulation_occlusion");
    base.occl_prob = prob;
    records.push_back(std::move(base));
  }
  return records;
}

std::vector<EvalRecord> eval_time_frames(const PoseModel& model, const Dataset& dataset,
                                         const std::vector<int>& t_in_values, int n_cams,
                                         int threads) {
  std::vector<EvalRecord> records;
  records.reserve(t_in_values.size());
  for (const int t_in : t_in_values) {
    if (t_in < 1) throw std::invalid_argument("eval_time_frames: t_in values must be >= 1");
    records.push_back(eval_camera_subsets(model, dataset, n_cams, t_in, threads, "time_frames"));
  }
  return records;
}

void write_report_csv(const std::string& path, const std::vector<EvalRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_report_csv: cannot open " + path);
  out << "condition,n_cams,t_in,occl_prob,mpjpe_mm,n_poses\n";
  for (const auto& r : records) {
    out << r.condition << ',' << r.n_cams << ',' << r.t_in << ',' << r.occl_prob << ','
        << r.mpjpe_mm << ',' << r.n_poses << '\n';
  }
  if (!out) throw std::runtime_error("write_report_csv: write failed for " + path);
}

void write_report_json(const std::string& path, const std::vector<EvalRecord>& records,
                       uint64_t eval_seed, const nlohmann::json& config_echo) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : records) {
    rows.push_back({{"condition", r.condition},
                    {"n_cams", r.n_cams},
                    {"t_in", r.t_in},
                    {"occl_prob", r.occl_prob},
                    {"mpjpe_mm", r.mpjpe_mm},
                    {"n_poses", r.n_poses},
                    {"per_joint_mpjpe_mm", r.per_joint_mpjpe_mm},
                    {"excluded_joint_fraction", r.excluded_joint_fraction},
                    {"centering_fallbacks", r.centering_fallbacks}});
  }
  const nlohmann::json doc = {{"eval_seed", eval_seed}, {"config", config_echo}, {"records", rows}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_report_json: cannot open " + path);
  out << doc.dump(2) << '\n';
}

}  // namespace raypose
