#include "raypose/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "raypose/threading.hpp"

namespace raypose {

void TrainConfig::validate() const {
  if (t_in < 1 || t_out < 1) throw std::invalid_argument("TrainConfig: t_in and t_out must be >= 1");
  if (t_out > t_in) throw std::invalid_argument("TrainConfig: t_out must be <= t_in");
  if (views_per_sample < 1) throw std::invalid_argument("TrainConfig: views_per_sample must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (total_steps < 1) throw std::invalid_argument("TrainConfig: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw std::invalid_argument("TrainConfig: warmup_steps must be in [0, total_steps]");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("TrainConfig: dropout_rate must be in [0,1)");
  }
  if (centering_noise_radius < 0.0 || synthetic_views_per_sample < 0 ||
      synthetic_view_pixel_noise < 0.0 || base_lr < 0.0 || log_interval < 1) {
    throw std::invalid_argument("TrainConfig: negative rate or interval");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"t_in", t_in},
          {"t_out", t_out},
          {"views_per_sample", views_per_sample},
          {"batch_size", batch_size},
          {"total_steps", total_steps},
          {"warmup_steps", warmup_steps},
          {"base_lr", base_lr},
          {"dropout_rate", dropout_rate},
          {"centering_noise_radius", centering_noise_radius},
          {"synthetic_views_per_sample", synthetic_views_per_sample},
          {"synthetic_view_pixel_noise", synthetic_view_pixel_noise},
          {"seed", seed},
          {"log_interval", log_interval}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.t_in = j.value("t_in", cfg.t_in);
  cfg.t_out = j.value("t_out", cfg.t_out);
  cfg.views_per_sample = j.value("views_per_sample", cfg.views_per_sample);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.total_steps = j.value("total_steps", cfg.total_steps);
  cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.dropout_rate = j.value("dropout_rate", cfg.dropout_rate);
  cfg.centering_noise_radius = j.value("centering_noise_radius", cfg.centering_noise_radius);
  cfg.synthetic_views_per_sample = j.value("synthetic_views_per_sample", cfg.synthetic_views_per_sample);
  cfg.synthetic_view_pixel_noise = j.value("synthetic_view_pixel_noise", cfg.synthetic_view_pixel_noise);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.log_interval = j.value("log_interval", cfg.log_interval);
  cfg.validate();
  return cfg;
}

PluckerRay SceneTransform::apply_ray(const PluckerRay& r) const {
  const Eigen::Matrix3d rot = rotation();
  PluckerRay out;
  out.d = rot * r.d;
  // moment about the new origin, then rotated with the frame
  out.m = rot * (r.m - translation.cross(r.d));
  return out;
}

SceneTransform make_centering_transform(const Eigen::Vector3d& anchor, double noise_radius,
                                        bool with_yaw, Rng* rng) {
  SceneTransform tf;
  tf.translation = Eigen::Vector3d(anchor.x(), anchor.y(), 0.0);  // floor projection
  if (noise_radius > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("make_centering_transform: rng required for noise");
    const double angle = rng->uniform(0.0, 2.0 * M_PI);
    const double radius = noise_radius * std::sqrt(rng->uniform());
    tf.translation.x() += radius * std::cos(angle);
    tf.translation.y() += radius * std::sin(angle);
  }
  if (with_yaw) {
    if (rng == nullptr) throw std::invalid_argument("make_centering_transform: rng required for yaw");
    tf.yaw = rng->uniform(0.0, 2.0 * M_PI);
  }
  return tf;
}

std::vector<ObservationToken> add_synthetic_views(
    const std::vector<Eigen::Vector3d>& gt_window_m, int frames, int num_joints, int n_views,
    int first_camera_id, const CameraRigConfig& rig, double pixel_noise, Rng& rng) {
  if (n_views < 0) throw std::invalid_argument("add_synthetic_views: n must be >= 0");
  if (static_cast<int>(gt_window_m.size()) != frames * num_joints) {
    throw std::invalid_argument("add_synthetic_views: window size mismatch");
  }
  std::vector<ObservationToken> tokens;
  if (n_views == 0) return tokens;
  tokens.reserve(static_cast<size_t>(n_views) * frames * num_joints);
  // centered frame: cameras sampled around the origin
  CameraRigConfig centered_rig = rig;
  centered_rig.look_at = Eigen::Vector3d(0.0, 0.0, 1.0);
  const std::vector<CameraParams> cams = sample_cameras(n_views, centered_rig, rng.next_u64());
  for (int v = 0; v < n_views; ++v) {
    const Eigen::Vector3d center = cams[v].center();
    for (int t = 0; t < frames; ++t) {
      for (int j = 0; j < num_joints; ++j) {
        const Eigen::Vector3d& p = gt_window_m[static_cast<size_t>(t) * num_joints + j];
        ObservationToken tok;
        tok.joint_id = j;
        tok.camera_id = first_camera_id + v;
        tok.rel_time = t - (frames - 1);
        tok.confidence = 1.0;
        if (pixel_noise > 0.0) {
          const auto uv = project(cams[v], p);
          if (!uv) continue;
          tok.ray = pixel_to_ray(cams[v], uv->x() + rng.normal(0.0, pixel_noise),
                                 uv->y() + rng.normal(0.0, pixel_noise));
        } else {
          tok.ray = PluckerRay::through_point(center, p - center);
        }
        tokens.push_back(tok);
      }
    }
  }
  return tokens;
}

std::vector<ObservationToken> token_dropout(std::vector<ObservationToken> tokens, double rate,
                                            Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("token_dropout: rate must be in [0,1)");
  if (rate == 0.0 || tokens.empty()) return tokens;
  std::vector<ObservationToken> kept;
  kept.reserve(tokens.size());
  while (kept.empty()) {
    for (const auto& tok : tokens) {
      if (!rng.bernoulli(rate)) kept.push_back(tok);
    }
  }
  return kept;
}

double mse_loss(const Eigen::MatrixXd& pred_m, const Eigen::MatrixXd& gt_m) {
  if (pred_m.rows() != gt_m.rows() || pred_m.cols() != gt_m.cols()) {
    throw std::invalid_argument("mse_loss: shape mismatch");
  }
  if (pred_m.rows() == 0) throw std::invalid_argument("mse_loss: empty input");
  return (pred_m - gt_m).squaredNorm() / static_cast<double>(pred_m.rows());
}

TrainingSample assemble_sample(const Dataset& dataset, const ModelConfig& model_cfg,
                               const TrainConfig& cfg, const CameraRigConfig& synth_rig, Rng& rng) {
  if (dataset.sequences.empty()) throw std::invalid_argument("assemble_sample: empty dataset");
  const int neck = dataset.skeleton.neck_index();

  for (int attempt = 0; attempt < 64; ++attempt) {
    const auto& seq = dataset.sequences[rng.uniform_int(0, static_cast<int64_t>(dataset.sequences.size()) - 1)];
    const int t_in = std::min(cfg.t_in, seq.gt.frames);
    const int start = static_cast<int>(rng.uniform_int(0, seq.gt.frames - t_in));
    const int last = start + t_in - 1;
    const int num_joints = seq.gt.num_joints;

    // view subsampling: partial Fisher-Yates over camera indices
    std::vector<int> cams(seq.cameras.size());
    for (size_t i = 0; i < cams.size(); ++i) cams[i] = static_cast<int>(i);
    const int n_views = std::min<int>(cfg.views_per_sample, static_cast<int>(cams.size()));
    for (int i = 0; i < n_views; ++i) {
      const int pick = static_cast<int>(rng.uniform_int(i, static_cast<int64_t>(cams.size()) - 1));
      std::swap(cams[i], cams[pick]);
    }
    cams.resize(n_views);

    // centering on a random frame's neck
    const int anchor_frame = static_cast<int>(rng.uniform_int(start, last));
    const SceneTransform tf = make_centering_transform(seq.gt.joint_m(anchor_frame, neck),
                                                       cfg.centering_noise_radius, true, &rng);

    TrainingSample sample;
    sample.transform = tf;
    for (int t = start; t <= last; ++t) {
      for (const int c : cams) {
        for (int j = 0; j < num_joints; ++j) {
          const Detection& det = seq.det(t, c, j);
          if (!det.visible) continue;
          ObservationToken tok;
          tok.joint_id = j;
          tok.camera_id = c;
          tok.rel_time = t - last;
          tok.confidence = det.confidence;
          tok.ray = tf.apply_ray(pixel_to_ray(seq.cameras[c], det.u, det.v));
          sample.tokens.push_back(tok);
        }
      }
    }

    if (cfg.synthetic_views_per_sample > 0) {
      std::vector<Eigen::Vector3d> window_m(static_cast<size_t>(t_in) * num_joints);
      for (int t = 0; t < t_in; ++t) {
        for (int j = 0; j < num_joints; ++j) {
          window_m[static_cast<size_t>(t) * num_joints + j] = tf.apply_point(seq.gt.joint_m(start + t, j));
        }
      }
      const auto synth = add_synthetic_views(window_m, t_in, num_joints, cfg.synthetic_views_per_sample,
                                             seq.num_cameras(), synth_rig,
                                             cfg.synthetic_view_pixel_noise, rng);
      sample.tokens.insert(sample.tokens.end(), synth.begin(), synth.end());
    }

    if (sample.tokens.empty()) continue;  // fully occluded window; redraw
    sample.tokens = token_dropout(std::move(sample.tokens), cfg.dropout_rate, rng);

    const int t_out = std::min(cfg.t_out, t_in);
    sample.query = QuerySpec::window(model_cfg.num_joints, t_out);
    sample.target = Tensor(t_out * num_joints, 3);
    int row = 0;
    for (int t = last - t_out + 1; t <= last; ++t) {
      for (int j = 0; j < num_joints; ++j, ++row) {
        const Eigen::Vector3d p = tf.apply_point(seq.gt.joint_m(t, j));
        sample.target.at(row, 0) = static_cast<float>(p.x());
        sample.target.at(row, 1) = static_cast<float>(p.y());
        sample.target.at(row, 2) = static_cast<float>(p.z());
      }
    }
    return sample;
  }
  throw std::runtime_error("assemble_sample: could not draw a window with any visible detection");
}

StepResult training_step(PoseModel& model, AdamState& adam, std::vector<TrainingSample>& batch,
                         int64_t step, const TrainConfig& cfg, int threads) {
  if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
  const int batch_size = static_cast<int>(batch.size());
  std::vector<std::vector<Tensor>> grad_slots(batch_size);
  std::vector<float> losses(batch_size, 0.0f);

  parallel_for(batch_size, threads, [&](int64_t i) {
    Tape tape;
    const auto& sample = batch[i];
    const Tape::Var pred = model.forward(tape, sample.tokens, sample.query);
    const Tape::Var loss = tape.mse_rows(pred, tape.constant(sample.target));
    tape.backward(loss);
    losses[i] = tape.value(loss).data[0];
    tape.export_param_grads(grad_slots[i]);
  });

  ParamStore& params = model.params();
  params.zero_grads();
  const float inv_batch = 1.0f / static_cast<float>(batch_size);
  float loss_sum = 0.0f;
  for (int i = 0; i < batch_size; ++i) {
    loss_sum += losses[i];
    for (size_t p = 0; p < grad_slots[i].size(); ++p) {
      if (grad_slots[i][p].empty()) continue;
      params.param(static_cast<int>(p)).grad.mat() += inv_batch * grad_slots[i][p].mat();
    }
  }
  const float mean_loss = loss_sum * inv_batch;
  if (!std::isfinite(mean_loss)) {
    throw std::runtime_error("training_step: non-finite loss at step " + std::to_string(step));
  }
  if (!params.grads_all_finite()) {
    throw std::runtime_error("training_step: non-finite gradient at step " + std::to_string(step));
  }
  const float lr = lr_schedule(step, static_cast<float>(cfg.base_lr), cfg.warmup_steps, cfg.total_steps);
  adam_step(params, adam, lr);
  return {mean_loss, lr};
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg, const Dataset& dataset,
                  const std::string& checkpoint_path, const std::string& metrics_path, int threads) {
  cfg.validate();
  model_cfg.validate();
  if (dataset.skeleton.num_joints() != model_cfg.num_joints) {
    throw std::invalid_argument("train: dataset joint count does not match the model config");
  }
  PoseModel model(model_cfg, mix_seed(cfg.seed, 0x1417));
  AdamState adam;
  adam.init(model.params());

  std::ofstream metrics;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("train: cannot open metrics file " + metrics_path);
    metrics << "step,loss,lr,wallclock_s\n";
  }

  const CameraRigConfig synth_rig;  // defaults; centered scenes
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<TrainingSample> batch(cfg.batch_size);
  float last_loss = 0.0f;
  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    parallel_for(cfg.batch_size, threads, [&](int64_t i) {
      Rng rng(mix_seed(cfg.seed, 0xba7c4, static_cast<uint64_t>(step), static_cast<uint64_t>(i)));
      batch[i] = assemble_sample(dataset, model_cfg, cfg, synth_rig, rng);
    });
    const StepResult result = training_step(model, adam, batch, step, cfg, threads);
    last_loss = result.loss;
    if ((step + 1) % cfg.log_interval == 0 && metrics.is_open()) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      metrics << (step + 1) << ',' << std::setprecision(9) << result.loss << ',' << result.lr << ','
              << std::fixed << std::setprecision(3) << wall << std::defaultfloat << '\n';
      metrics.flush();
    }
  }
  if (!checkpoint_path.empty()) model.save(checkpoint_path);
  return {last_loss, cfg.total_steps};
}

}  // namespace raypose
