#include "raypose/refmodel.hpp"

#include <cmath>
#include <stdexcept>

namespace raypose::reference {

namespace {
constexpr double kEps = 1e-5;
constexpr double kGeluC0 = 0.7978845608028654;
constexpr double kGeluC1 = 0.044715;

std::vector<double> harmonic(std::span<const double> x, int frequencies) {
  std::vector<double> out;
  out.reserve(2 * static_cast<size_t>(frequencies) * x.size());
  double f = M_PI;
  for (int i = 0; i < frequencies; ++i, f *= 2.0) {
    for (const double v : x) out.push_back(std::sin(f * v));
    for (const double v : x) out.push_back(std::cos(f * v));
  }
  return out;
}

}  // namespace

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits, const Eigen::MatrixXd* bias) {
  Eigen::MatrixXd z = logits;
  if (bias != nullptr) z += *bias;
  Eigen::MatrixXd out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    const Eigen::ArrayXd e = (z.row(r).array() - mx).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& shift) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const Eigen::ArrayXd centered = x.row(r).array() - mean;
    const double var = centered.square().mean();
    const Eigen::ArrayXd xhat = centered / std::sqrt(var + kEps);
    out.row(r) = (xhat * gain.array().transpose() + shift.array().transpose()).matrix();
  }
  return out;
}

Eigen::MatrixXd gelu(const Eigen::MatrixXd& x) {
  const Eigen::ArrayXXd a = x.array();
  return (0.5 * a * (1.0 + (kGeluC0 * (a + kGeluC1 * a.cube())).tanh())).matrix();
}

Eigen::MatrixXd multi_head_attention(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& keys,
                                     const Eigen::MatrixXd& values, int heads,
                                     const Eigen::MatrixXd* bias, const AttentionWeights& w) {
  const int d = static_cast<int>(w.wq.cols());
  if (d % heads != 0) throw std::invalid_argument("reference attention: d not divisible by heads");
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const Eigen::MatrixXd q = (queries * w.wq).rowwise() + w.bq.transpose();
  const Eigen::MatrixXd k = (keys * w.wk).rowwise() + w.bk.transpose();
  const Eigen::MatrixXd v = (values * w.wv).rowwise() + w.bv.transpose();
  Eigen::MatrixXd concat(q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const Eigen::MatrixXd logits =
        scale * q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose();
    const Eigen::MatrixXd attn = softmax_rows(logits, bias);
    concat.middleCols(h * hd, hd) = attn * v.middleCols(h * hd, hd);
  }
  return (concat * w.wo).rowwise() + w.bo.transpose();
}

DoubleParams DoubleParams::from(const ParamStore& store) {
  DoubleParams out;
  out.values.reserve(store.size());
  for (int i = 0; i < store.size(); ++i) {
    out.values.push_back(store.param(i).value.mat().cast<double>());
  }
  return out;
}

namespace {

struct ParamLookup {
  const ParamStore& store;
  const DoubleParams& params;
  const Eigen::MatrixXd& operator()(const std::string& name) const {
    return params.values[store.index_of(name)];
  }
  Eigen::VectorXd row(const std::string& name) const { return (*this)(name).row(0).transpose(); }
};

AttentionWeights attention_weights(const ParamLookup& p, const std::string& prefix) {
  AttentionWeights w;
  w.wq = p(prefix + ".wq");
  w.wk = p(prefix + ".wk");
  w.wv = p(prefix + ".wv");
  w.wo = p(prefix + ".wo");
  w.bq = p.row(prefix + ".bq");
  w.bk = p.row(prefix + ".bk");
  w.bv = p.row(prefix + ".bv");
  w.bo = p.row(prefix + ".bo");
  return w;
}

Eigen::MatrixXd ffn(const ParamLookup& p, const std::string& prefix, const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd h =
      gelu(((x * p(prefix + ".fc1.weight")).rowwise() + p.row(prefix + ".fc1.bias").transpose()));
  return (h * p(prefix + ".fc2.weight")).rowwise() + p.row(prefix + ".fc2.bias").transpose();
}

Eigen::MatrixXd norm(const ParamLookup& p, const std::string& prefix, const Eigen::MatrixXd& x) {
  return layer_norm(x, p.row(prefix + ".gain"), p.row(prefix + ".shift"));
}

Eigen::MatrixXd temporal(const ModelConfig& cfg, const ParamLookup& p, std::span<const int> rel) {
  Eigen::MatrixXd h(rel.size(), 2 * cfg.harmonic_frequencies);
  for (size_t i = 0; i < rel.size(); ++i) {
    const double scaled = static_cast<double>(rel[i]) / cfg.max_rel_time;
    const auto e = harmonic(std::span<const double>(&scaled, 1), cfg.harmonic_frequencies);
    for (size_t k = 0; k < e.size(); ++k) h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = e[k];
  }
  return (h * p("embed.time.weight")).rowwise() + p.row("embed.time.bias").transpose();
}

}  // namespace

Eigen::MatrixXd forward(const ModelConfig& cfg, const ParamStore& store, const DoubleParams& params,
                        std::span<const ObservationToken> tokens, const QuerySpec& query) {
  const ParamLookup p{store, params};
  const int n = static_cast<int>(tokens.size());

  // token features
  Eigen::MatrixXd ray_h(n, 2 * cfg.harmonic_frequencies * 6);
  std::vector<int> rel_times(n);
  for (int i = 0; i < n; ++i) {
    const auto& tok = tokens[i];
    const double coords[6] = {tok.ray.d.x(), tok.ray.d.y(), tok.ray.d.z(),
                              tok.ray.m.x(), tok.ray.m.y(), tok.ray.m.z()};
    const auto h = harmonic(coords, cfg.harmonic_frequencies);
    for (size_t k = 0; k < h.size(); ++k) ray_h(i, static_cast<Eigen::Index>(k)) = h[k];
    rel_times[i] = tok.rel_time;
  }
  Eigen::MatrixXd x = (ray_h * p("embed.ray.weight")).rowwise() + p.row("embed.ray.bias").transpose();
  x += temporal(cfg, p, rel_times);
  for (int i = 0; i < n; ++i) x.row(i) += p("embed.joint").row(tokens[i].joint_id);
  if (cfg.embed_confidence) {
    for (int i = 0; i < n; ++i) x.row(i) += tokens[i].confidence * p("embed.conf").row(0);
  }

  // bias matrices
  Eigen::MatrixXd conf(n, n), dist(n, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) conf(i, j) = tokens[j].confidence;
  }
  for (int i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (int j = i + 1; j < n; ++j) {
      dist(i, j) = dist(j, i) = ray_distance(tokens[i].ray, tokens[j].ray);
    }
  }

  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string pre = "enc.l" + std::to_string(l);
    Eigen::MatrixXd bias = Eigen::MatrixXd::Zero(n, n);
    bool any_bias = false;
    if (cfg.use_conf_bias) {
      const double eta = p(pre + ".eta")(0, 0);
      bias += eta * eta * conf;
      any_bias = true;
    }
    if (cfg.use_dist_bias) {
      const double gamma = p(pre + ".gamma")(0, 0);
      bias -= gamma * gamma * dist;
      any_bias = true;
    }
    const Eigen::MatrixXd normed = norm(p, pre + ".ln1", x);
    x += multi_head_attention(normed, normed, normed, cfg.heads, any_bias ? &bias : nullptr,
                              attention_weights(p, pre + ".attn"));
    x += ffn(p, pre + ".ffn", norm(p, pre + ".ln2", x));
  }
  const Eigen::MatrixXd memory = norm(p, "enc.final", x);

  const int m = static_cast<int>(query.items.size());
  std::vector<int> q_rel(m);
  Eigen::MatrixXd q(m, cfg.d_model);
  for (int i = 0; i < m; ++i) {
    q.row(i) = p("dec.query_joint").row(query.items[i].joint_id);
    q_rel[i] = query.items[i].rel_time;
  }
  q += temporal(cfg, p, q_rel);
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    const std::string pre = "dec.l" + std::to_string(l);
    q += multi_head_attention(norm(p, pre + ".ln1", q), memory, memory, cfg.heads, nullptr,
                              attention_weights(p, pre + ".attn"));
    q += ffn(p, pre + ".ffn", norm(p, pre + ".ln2", q));
  }
  const Eigen::MatrixXd decoded = norm(p, "dec.final", q);
  const Eigen::MatrixXd h1 =
      gelu((decoded * p("head.fc1.weight")).rowwise() + p.row("head.fc1.bias").transpose());
  return (h1 * p("head.fc2.weight")).rowwise() + p.row("head.fc2.bias").transpose();
}

double mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
  return (pred - target).squaredNorm() / static_cast<double>(pred.rows());
}

double fd_loss_gradient(const ModelConfig& cfg, const ParamStore& store,
                        std::span<const ObservationToken> tokens, const QuerySpec& query,
                        const Eigen::MatrixXd& target, int param_index, int element_index,
                        double step) {
  DoubleParams params = DoubleParams::from(store);
  auto& value = params.values[param_index];
  double* coord = value.data() + element_index;
  const double original = *coord;
  *coord = original + step;
  const double plus = mse_loss(forward(cfg, store, params, tokens, query), target);
  *coord = original - step;
  const double minus = mse_loss(forward(cfg, store, params, tokens, query), target);
  *coord = original;
  return (plus - minus) / (2.0 * step);
}

double line_line_distance(const PluckerRay& a, const PluckerRay& b) {
  const Eigen::Vector3d p1 = a.point_on_line();
  const Eigen::Vector3d p2 = b.point_on_line();
  const Eigen::Vector3d w = p1 - p2;
  const double c = a.d.dot(b.d);
  const double det = c * c - 1.0;
  if (std::abs(det) < 1e-14) {
    return (w - w.dot(a.d) * a.d).norm();
  }
  // minimize ||w + s*da - u*db||^2 over (s, u)
  const double s = (-w.dot(a.d) + c * w.dot(b.d)) / (1.0 - c * c) * (1.0 - c * c) /
                   (1.0 - c * c);  // solved below
  (void)s;
  const double rhs1 = -w.dot(a.d);
  const double rhs2 = -w.dot(b.d);
  // [ 1  -c ] [s]   [rhs1]
  // [ c  -1 ] [u] = [rhs2]
  const double denom = -1.0 + c * c;
  const double s_star = (-rhs1 + c * rhs2) / denom;
  const double u_star = (-c * rhs1 + rhs2) / denom;
  return (w + s_star * a.d - u_star * b.d).norm();
}

double line_point_distance(const PluckerRay& r, const Eigen::Vector3d& p) {
  const Eigen::Vector3d q = r.point_on_line();
  const auto dist_at = [&](double s) { return (p - (q + s * r.d)).norm(); };
  const double radius = (p - q).norm() + 1.0;
  double best_s = 0.0;
  double best = dist_at(0.0);
  const int steps = 1000;
  for (int i = 0; i <= steps; ++i) {
    const double s = -radius + 2.0 * radius * i / steps;
    const double d = dist_at(s);
    if (d < best) {
      best = d;
      best_s = s;
    }
  }
  // golden-section refinement around the best grid cell
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = best_s - 2.0 * radius / steps;
  double hi = best_s + 2.0 * radius / steps;
  double x1 = hi - phi * (hi - lo);
  double x2 = lo + phi * (hi - lo);
  double f1 = dist_at(x1);
  double f2 = dist_at(x2);
  for (int it = 0; it < 200; ++it) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - phi * (hi - lo);
      f1 = dist_at(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + phi * (hi - lo);
      f2 = dist_at(x2);
    }
  }
  return std::min(f1, f2);
}

}  // namespace raypose::reference
