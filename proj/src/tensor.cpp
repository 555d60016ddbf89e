#include "raypose/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace raypose {

namespace {
constexpr float kLayerNormEps = 1e-5f;
constexpr float kGeluC0 = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluC1 = 0.044715f;

using VecF = Eigen::Matrix<float, Eigen::Dynamic, 1>;
}  // namespace

int ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  const int idx = static_cast<int>(params_.size());
  Parameter p;
  p.name = name;
  p.grad = Tensor::zeros(init.rows, init.cols);
  p.value = std::move(init);
  params_.push_back(std::move(p));
  index_[name] = idx;
  return idx;
}

int ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

int ParamStore::index_of(const std::string& name) const {
  const int idx = find(name);
  if (idx < 0) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return idx;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0f);
}

bool ParamStore::grads_all_finite() const {
  for (const auto& p : params_) {
    if (!p.grad.all_finite()) return false;
  }
  return true;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void AdamState::init(const ParamStore& params) {
  step = 0;
  m.clear();
  v.clear();
  m.reserve(params.size());
  v.reserve(params.size());
  for (int i = 0; i < params.size(); ++i) {
    const auto& t = params.param(i).value;
    m.push_back(Tensor::zeros(t.rows, t.cols));
    v.push_back(Tensor::zeros(t.rows, t.cols));
  }
}

void adam_step(ParamStore& params, AdamState& state, float lr, const AdamConfig& cfg) {
  if (static_cast<int>(state.m.size()) != params.size()) {
    throw std::invalid_argument("adam_step: state not initialized for this store");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));
  for (int i = 0; i < params.size(); ++i) {
    auto& p = params.param(i);
    auto g = p.grad.mat().array();
    auto m = state.m[i].mat().array();
    auto v = state.v[i].mat().array();
    m = cfg.beta1 * m + (1.0f - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0f - cfg.beta2) * g.square();
    p.value.mat().array() -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
  }
}

float lr_schedule(int64_t step, float base_lr, int64_t warmup_steps, int64_t total_steps) {
  if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<float>(static_cast<double>(step) / static_cast<double>(warmup_steps));
  }
  if (step >= total_steps) return 0.0f;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * static_cast<float>(0.5 * (1.0 + std::cos(M_PI * progress)));
}

// ---------------------------------------------------------------------------
// Tape

Tape::Var Tape::push_leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::Var Tape::push(Node n) {
  if (check_finite_ && !n.value.all_finite()) {
    throw std::runtime_error("Tape: non-finite values produced by op");
  }
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

Tape::Var Tape::param(const ParamStore& store, int param_index) {
  if (store_ == nullptr) {
    store_ = &store;
    param_memo_.assign(store.size(), -1);
  } else if (store_ != &store) {
    throw std::logic_error("Tape: bound to a different ParamStore");
  }
  if (param_index < 0 || param_index >= store.size()) {
    throw std::invalid_argument("Tape: parameter index out of range");
  }
  if (param_memo_[param_index] >= 0) return param_memo_[param_index];
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = true;
  n.value = store.param(param_index).value;
  n.param_index = param_index;
  const Var v = push(std::move(n));
  param_memo_[param_index] = v;
  return v;
}

Tape::Var Tape::add(Var a, Var b) {
  const auto& ta = node(a).value;
  const auto& tb = node(b).value;
  if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.requires_grad = needs_grad(a) || needs_grad(b);
  n.value = Tensor(ta.rows, ta.cols);
  n.value.mat() = ta.mat() + tb.mat();
  return push(std::move(n));
}

Tape::Var Tape::linear(Var x, Var weight, Var bias) {
  const auto& tx = node(x).value;
  const auto& tw = node(weight).value;
  const auto& tb = node(bias).value;
  if (tx.cols != tw.rows || tb.rows != 1 || tb.cols != tw.cols) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  Node n;
  n.op = Op::kLinear;
  n.a = x;
  n.b = weight;
  n.c = bias;
  n.requires_grad = needs_grad(x) || needs_grad(weight) || needs_grad(bias);
  n.value = Tensor(tx.rows, tw.cols);
  n.value.mat().noalias() = tx.mat() * tw.mat();
  n.value.mat().rowwise() += tb.mat().row(0);
  return push(std::move(n));
}

Tape::Var Tape::matmul(Var a, Var b) {
  const auto& ta = node(a).value;
  const auto& tb = node(b).value;
  if (ta.cols != tb.rows) throw std::invalid_argument("matmul: shape mismatch");
  Node n;
  n.op = Op::kMatmulNN;
  n.a = a;
  n.b = b;
  n.requires_grad = needs_grad(a) || needs_grad(b);
  n.value = Tensor(ta.rows, tb.cols);
  n.value.mat().noalias() = ta.mat() * tb.mat();
  return push(std::move(n));
}

Tape::Var Tape::matmul_nt(Var a, Var b, float scale) {
  const auto& ta = node(a).value;
  const auto& tb = node(b).value;
  if (ta.cols != tb.cols) throw std::invalid_argument("matmul_nt: shape mismatch");
  Node n;
  n.op = Op::kMatmulNT;
  n.a = a;
  n.b = b;
  n.scalar = scale;
  n.requires_grad = needs_grad(a) || needs_grad(b);
  n.value = Tensor(ta.rows, tb.rows);
  n.value.mat().noalias() = ta.mat() * tb.mat().transpose();
  if (scale != 1.0f) n.value.mat() *= scale;
  return push(std::move(n));
}

Tape::Var Tape::softmax_rows(Var logits, std::optional<Var> bias) {
  const auto& tl = node(logits).value;
  Node n;
  n.op = Op::kSoftmax;
  n.a = logits;
  n.b = bias.value_or(-1);
  n.requires_grad = needs_grad(logits) || (bias && needs_grad(*bias));
  n.value = Tensor(tl.rows, tl.cols);
  auto out = n.value.mat();
  if (bias) {
    const auto& tb = node(*bias).value;
    if (!tl.same_shape(tb)) throw std::invalid_argument("softmax_rows: bias shape mismatch");
    out = tl.mat() + tb.mat();
  } else {
    out = tl.mat();
  }
  const VecF row_max = out.rowwise().maxCoeff();
  out = (out.colwise() - row_max).array().exp();
  const VecF row_sum = out.rowwise().sum();
  out.array().colwise() /= row_sum.array();
  return push(std::move(n));
}

Tape::Var Tape::layer_norm(Var x, Var gain, Var shift) {
  const auto& tx = node(x).value;
  const auto& tg = node(gain).value;
  const auto& ts = node(shift).value;
  if (tg.rows != 1 || tg.cols != tx.cols || ts.rows != 1 || ts.cols != tx.cols) {
    throw std::invalid_argument("layer_norm: gain/shift shape mismatch");
  }
  Node n;
  n.op = Op::kLayerNorm;
  n.a = x;
  n.b = gain;
  n.c = shift;
  n.requires_grad = needs_grad(x) || needs_grad(gain) || needs_grad(shift);
  n.value = Tensor(tx.rows, tx.cols);
  // aux holds the normalized rows and, in the last column, 1/stddev.
  n.aux = Tensor(tx.rows, tx.cols + 1);
  auto xm = tx.mat();
  const VecF mean = xm.rowwise().mean();
  const MatF centered = xm.colwise() - mean;
  const VecF var = centered.array().square().rowwise().mean();
  const VecF inv_std = (var.array() + kLayerNormEps).rsqrt();
  auto xhat = n.aux.mat().leftCols(tx.cols);
  xhat = centered.array().colwise() * inv_std.array();
  n.aux.mat().col(tx.cols) = inv_std;
  n.value.mat() = (xhat.array().rowwise() * tg.mat().row(0).array()).rowwise() +
                  ts.mat().row(0).array();
  return push(std::move(n));
}

Tape::Var Tape::gelu(Var x) {
  const auto& tx = node(x).value;
  Node n;
  n.op = Op::kGelu;
  n.a = x;
  n.requires_grad = needs_grad(x);
  n.value = Tensor(tx.rows, tx.cols);
  auto xa = tx.mat().array();
  n.value.mat().array() = 0.5f * xa * (1.0f + (kGeluC0 * (xa + kGeluC1 * xa.cube())).tanh());
  return push(std::move(n));
}

Tape::Var Tape::slice_cols(Var x, int start, int len) {
  const auto& tx = node(x).value;
  if (start < 0 || len <= 0 || start + len > tx.cols) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  Node n;
  n.op = Op::kSliceCols;
  n.a = x;
  n.i0 = start;
  n.i1 = len;
  n.requires_grad = needs_grad(x);
  n.value = Tensor(tx.rows, len);
  n.value.mat() = tx.mat().middleCols(start, len);
  return push(std::move(n));
}

Tape::Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  int cols = 0;
  const int rows = node(parts[0]).value.rows;
  bool req = false;
  for (Var v : parts) {
    const auto& t = node(v).value;
    if (t.rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += t.cols;
    req = req || needs_grad(v);
  }
  Node n;
  n.op = Op::kConcatCols;
  n.list = parts;
  n.requires_grad = req;
  n.value = Tensor(rows, cols);
  int at = 0;
  for (Var v : parts) {
    const auto& t = node(v).value;
    n.value.mat().middleCols(at, t.cols) = t.mat();
    at += t.cols;
  }
  return push(std::move(n));
}

Tape::Var Tape::gather_rows(Var table, std::vector<int> row_indices) {
  const auto& tt = node(table).value;
  for (int r : row_indices) {
    if (r < 0 || r >= tt.rows) throw std::invalid_argument("gather_rows: index out of range");
  }
  Node n;
  n.op = Op::kGatherRows;
  n.a = table;
  n.requires_grad = needs_grad(table);
  n.value = Tensor(static_cast<int>(row_indices.size()), tt.cols);
  for (size_t i = 0; i < row_indices.size(); ++i) {
    n.value.mat().row(static_cast<int>(i)) = tt.mat().row(row_indices[i]);
  }
  n.indices = std::move(row_indices);
  return push(std::move(n));
}

Tape::Var Tape::attention_bias(Var eta, Var gamma, Var conf_matrix, Var dist_matrix) {
  if (conf_matrix < 0 && dist_matrix < 0) {
    throw std::invalid_argument("attention_bias: at least one matrix required");
  }
  const Tensor& shape_src = conf_matrix >= 0 ? node(conf_matrix).value : node(dist_matrix).value;
  if (conf_matrix >= 0 && dist_matrix >= 0 &&
      !node(conf_matrix).value.same_shape(node(dist_matrix).value)) {
    throw std::invalid_argument("attention_bias: matrix shape mismatch");
  }
  const auto check_scalar = [&](Var v, const char* what) {
    if (node(v).value.numel() != 1) {
      throw std::invalid_argument(std::string("attention_bias: ") + what + " must be 1x1");
    }
  };
  check_scalar(eta, "eta");
  check_scalar(gamma, "gamma");
  Node n;
  n.op = Op::kAttnBias;
  n.a = eta;
  n.b = gamma;
  n.c = conf_matrix;
  n.d = dist_matrix;
  n.requires_grad = needs_grad(eta) || needs_grad(gamma);
  n.value = Tensor(shape_src.rows, shape_src.cols);
  const float eta2 = node(eta).value.data[0] * node(eta).value.data[0];
  const float gamma2 = node(gamma).value.data[0] * node(gamma).value.data[0];
  if (conf_matrix >= 0) {
    n.value.mat() = eta2 * node(conf_matrix).value.mat();
  } else {
    n.value.mat().setZero();
  }
  if (dist_matrix >= 0) {
    n.value.mat() -= gamma2 * node(dist_matrix).value.mat();
  }
  return push(std::move(n));
}

Tape::Var Tape::sum(Var x) {
  Node n;
  n.op = Op::kSum;
  n.a = x;
  n.requires_grad = needs_grad(x);
  n.value = Tensor::scalar(node(x).value.mat().sum());
  return push(std::move(n));
}

Tape::Var Tape::mse_rows(Var pred, Var target) {
  const auto& tp = node(pred).value;
  const auto& tt = node(target).value;
  if (!tp.same_shape(tt)) throw std::invalid_argument("mse_rows: shape mismatch");
  if (tp.rows == 0) throw std::invalid_argument("mse_rows: empty input");
  Node n;
  n.op = Op::kMseRows;
  n.a = pred;
  n.b = target;
  n.requires_grad = needs_grad(pred) || needs_grad(target);
  n.scalar = 1.0f / static_cast<float>(tp.rows);
  n.value = Tensor::scalar((tp.mat() - tt.mat()).squaredNorm() * n.scalar);
  return push(std::move(n));
}

const Tensor& Tape::grad(Var v) {
  if (!ran_backward_) throw std::logic_error("Tape::grad: backward has not run");
  Node& n = node(v);
  if (!n.requires_grad) throw std::logic_error("Tape::grad: node does not require gradients");
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.rows, n.value.cols);
  return n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.rows, n.value.cols);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw std::logic_error("Tape::backward: nothing recorded");
  if (loss < 0 || loss >= static_cast<Var>(nodes_.size())) {
    throw std::logic_error("Tape::backward: invalid loss var");
  }
  if (ran_backward_) throw std::logic_error("Tape::backward: already ran on this tape");
  if (node(loss).value.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be a 1x1 tensor");
  }
  if (!node(loss).value.all_finite()) {
    throw std::runtime_error("Tape::backward: loss is not finite");
  }
  ran_backward_ = true;
  if (!node(loss).requires_grad) return;  // loss does not depend on anything differentiable
  grad_buffer(loss).data[0] = 1.0f;
  for (Var v = loss; v >= 0; --v) {
    Node& n = node(v);
    if (!n.requires_grad || n.grad.empty()) continue;
    backward_node(v);
  }
}

void Tape::backward_node(Var v) {
  Node& n = node(v);
  const auto g = n.grad.mat();
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
      if (needs_grad(n.a)) grad_buffer(n.a).mat() += g;
      if (needs_grad(n.b)) grad_buffer(n.b).mat() += g;
      break;
    case Op::kLinear: {
      const auto x = node(n.a).value.mat();
      const auto w = node(n.b).value.mat();
      if (needs_grad(n.a)) grad_buffer(n.a).mat().noalias() += g * w.transpose();
      if (needs_grad(n.b)) grad_buffer(n.b).mat().noalias() += x.transpose() * g;
      if (needs_grad(n.c)) grad_buffer(n.c).mat().row(0) += g.colwise().sum();
      break;
    }
    case Op::kMatmulNN: {
      const auto a = node(n.a).value.mat();
      const auto b = node(n.b).value.mat();
      if (needs_grad(n.a)) grad_buffer(n.a).mat().noalias() += g * b.transpose();
      if (needs_grad(n.b)) grad_buffer(n.b).mat().noalias() += a.transpose() * g;
      break;
    }
    case Op::kMatmulNT: {
      const auto a = node(n.a).value.mat();
      const auto b = node(n.b).value.mat();
      if (needs_grad(n.a)) grad_buffer(n.a).mat().noalias() += n.scalar * (g * b);
      if (needs_grad(n.b)) grad_buffer(n.b).mat().noalias() += n.scalar * (g.transpose() * a);
      break;
    }
    case Op::kSoftmax: {
      const auto y = n.value.mat();
      const VecF dot = (g.array() * y.array()).rowwise().sum();
      const MatF dz = y.array() * (g.colwise() - dot).array();
      if (needs_grad(n.a)) grad_buffer(n.a).mat() += dz;
      if (n.b >= 0 && needs_grad(n.b)) grad_buffer(n.b).mat() += dz;
      break;
    }
    case Op::kLayerNorm: {
      const int dcols = n.value.cols;
      const auto xhat = n.aux.mat().leftCols(dcols);
      const VecF inv_std = n.aux.mat().col(dcols);
      const auto gain = node(n.b).value.mat().row(0);
      if (needs_grad(n.b)) grad_buffer(n.b).mat().row(0) += (g.array() * xhat.array()).colwise().sum().matrix();
      if (needs_grad(n.c)) grad_buffer(n.c).mat().row(0) += g.colwise().sum();
      if (needs_grad(n.a)) {
        const MatF dxhat = g.array().rowwise() * gain.array();
        const VecF mean_dxhat = dxhat.rowwise().mean();
        const VecF mean_dxhat_xhat = (dxhat.array() * xhat.array()).rowwise().mean();
        grad_buffer(n.a).mat().array() +=
            ((dxhat.colwise() - mean_dxhat).array() - xhat.array().colwise() * mean_dxhat_xhat.array())
                .colwise() *
            inv_std.array();
      }
      break;
    }
    case Op::kGelu: {
      if (needs_grad(n.a)) {
        const auto xa = node(n.a).value.mat().array();
        const auto th = (kGeluC0 * (xa + kGeluC1 * xa.cube())).tanh();
        const auto dudx = kGeluC0 * (1.0f + 3.0f * kGeluC1 * xa.square());
        grad_buffer(n.a).mat().array() +=
            g.array() * (0.5f * (1.0f + th) + 0.5f * xa * (1.0f - th.square()) * dudx);
      }
      break;
    }
    case Op::kSliceCols:
      if (needs_grad(n.a)) grad_buffer(n.a).mat().middleCols(n.i0, n.i1) += g;
      break;
    case Op::kConcatCols: {
      int at = 0;
      for (Var part : n.list) {
        const int w = node(part).value.cols;
        if (needs_grad(part)) grad_buffer(part).mat() += g.middleCols(at, w);
        at += w;
      }
      break;
    }
    case Op::kGatherRows:
      if (needs_grad(n.a)) {
        auto dt = grad_buffer(n.a).mat();
        for (size_t i = 0; i < n.indices.size(); ++i) {
          dt.row(n.indices[i]) += g.row(static_cast<int>(i));
        }
      }
      break;
    case Op::kAttnBias: {
      const float eta = node(n.a).value.data[0];
      const float gamma = node(n.b).value.data[0];
      if (n.c >= 0 && needs_grad(n.a)) {
        grad_buffer(n.a).data[0] += 2.0f * eta * (g.array() * node(n.c).value.mat().array()).sum();
      }
      if (n.d >= 0 && needs_grad(n.b)) {
        grad_buffer(n.b).data[0] -= 2.0f * gamma * (g.array() * node(n.d).value.mat().array()).sum();
      }
      break;
    }
    case Op::kSum:
      if (needs_grad(n.a)) grad_buffer(n.a).mat().array() += g(0, 0);
      break;
    case Op::kMseRows: {
      const auto p = node(n.a).value.mat();
      const auto t = node(n.b).value.mat();
      const float c = 2.0f * n.scalar * g(0, 0);
      if (needs_grad(n.a)) grad_buffer(n.a).mat() += c * (p - t);
      if (needs_grad(n.b)) grad_buffer(n.b).mat() -= c * (p - t);
      break;
    }
  }
}

void Tape::export_param_grads(std::vector<Tensor>& slots) const {
  if (store_ == nullptr) return;
  if (slots.size() < static_cast<size_t>(store_->size())) slots.resize(store_->size());
  for (int i = 0; i < static_cast<int>(param_memo_.size()); ++i) {
    const Var v = param_memo_[i];
    if (v < 0) continue;
    const Node& n = node(v);
    if (n.grad.empty()) continue;
    if (slots[i].empty()) slots[i] = Tensor::zeros(n.value.rows, n.value.cols);
    slots[i].mat() += n.grad.mat();
  }
}

void Tape::accumulate_param_grads(ParamStore& store) const {
  if (store_ == nullptr) return;
  if (&store != store_) throw std::logic_error("Tape: accumulating into a different ParamStore");
  for (int i = 0; i < static_cast<int>(param_memo_.size()); ++i) {
    const Var v = param_memo_[i];
    if (v < 0) continue;
    const Node& n = node(v);
    if (n.grad.empty()) continue;
    store.param(i).grad.mat() += n.grad.mat();
  }
}

void Tape::reset() {
  nodes_.clear();
  store_ = nullptr;
  param_memo_.clear();
  ran_backward_ = false;
}

}  // namespace raypose
