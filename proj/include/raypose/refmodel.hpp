#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "raypose/model.hpp"

// Double-precision reference implementations, written independently of the
// float32 tape path. They back the self-check suites and the test oracles;
// keep them free of any Tape/Tensor compute.
namespace raypose::reference {

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits, const Eigen::MatrixXd* bias = nullptr);
Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& shift);
Eigen::MatrixXd gelu(const Eigen::MatrixXd& x);

struct AttentionWeights {
  Eigen::MatrixXd wq, wk, wv, wo;
  Eigen::VectorXd bq, bk, bv, bo;
};

// Step-by-step multi-head attention with an optional shared additive bias.
Eigen::MatrixXd multi_head_attention(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& keys,
                                     const Eigen::MatrixXd& values, int heads,
                                     const Eigen::MatrixXd* bias, const AttentionWeights& w);

// Snapshot of a ParamStore as double matrices, indexed like the store.
struct DoubleParams {
  std::vector<Eigen::MatrixXd> values;
  static DoubleParams from(const ParamStore& store);
};

// Full-model forward in double precision; |query| x 3 predictions (meters,
// centered frame).
Eigen::MatrixXd forward(const ModelConfig& cfg, const ParamStore& names, const DoubleParams& params,
                        std::span<const ObservationToken> tokens, const QuerySpec& query);

double mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target);

// Central finite difference of the double-precision loss with respect to one
// parameter coordinate.
double fd_loss_gradient(const ModelConfig& cfg, const ParamStore& store,
                        std::span<const ObservationToken> tokens, const QuerySpec& query,
                        const Eigen::MatrixXd& target, int param_index, int element_index,
                        double step);

// Exact minimization of the distance between two lines over their two
// parameters (closest point pair).
double line_line_distance(const PluckerRay& a, const PluckerRay& b);

// 1-D parameter sweep with golden-section refinement.
double line_point_distance(const PluckerRay& r, const Eigen::Vector3d& p);

}  // namespace raypose::reference
