#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace raypose {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense 2-D float tensor, row-major. Vectors are 1 x n.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor constant(int r, int c, float v) {
    Tensor t(r, c);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(float v) { return constant(1, 1, v); }
  static Tensor from(const Eigen::Ref<const Eigen::MatrixXd>& m) {
    Tensor t(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
    t.mat() = m.cast<float>();
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(rows) * cols; }
  bool empty() const { return numel() == 0; }

  Eigen::Map<MatF> mat() { return {data.data(), rows, cols}; }
  Eigen::Map<const MatF> mat() const { return {data.data(), rows, cols}; }

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  bool all_finite() const { return mat().allFinite(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value, accumulated across a step
};

// Ordered, uniquely named parameter tensors with gradient accumulators.
// Creation order is the serialization order.
class ParamStore {
 public:
  int add(const std::string& name, Tensor init);
  int find(const std::string& name) const;  // -1 when absent
  int index_of(const std::string& name) const;  // throws when absent
  int size() const { return static_cast<int>(params_.size()); }

  Parameter& param(int i) { return params_.at(i); }
  const Parameter& param(int i) const { return params_.at(i); }
  Parameter& param(const std::string& name) { return params_.at(index_of(name)); }
  const Parameter& param(const std::string& name) const { return params_.at(index_of(name)); }

  void zero_grads();
  bool grads_all_finite() const;
  int64_t total_elements() const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, int> index_;
};

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void init(const ParamStore& params);
};

// Bias-corrected Adam update from the gradients accumulated in the store.
void adam_step(ParamStore& params, AdamState& state, float lr, const AdamConfig& cfg = {});

// Linear warmup to base_lr over warmup_steps, then cosine decay to zero at
// total_steps.
float lr_schedule(int64_t step, float base_lr, int64_t warmup_steps, int64_t total_steps);

// Reverse-mode autodiff over eagerly evaluated 2-D tensor ops. One tape per
// forward pass; values live until reset(). Parameter leaves are memoized per
// tape and bound to one ParamStore.
class Tape {
 public:
  using Var = int32_t;

  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}

  Var constant(Tensor value) { return push_leaf(std::move(value), false); }
  Var input(Tensor value) { return push_leaf(std::move(value), true); }  // differentiable non-param leaf
  Var param(const ParamStore& store, int param_index);
  Var param(const ParamStore& store, const std::string& name) {
    return param(store, store.index_of(name));
  }

  Var add(Var a, Var b);
  Var linear(Var x, Var weight, Var bias);          // x[n,p] * W[p,q] + b[1,q]
  Var matmul(Var a, Var b);                         // A[n,k] * B[k,m]
  Var matmul_nt(Var a, Var b, float scale = 1.0f);  // scale * A[n,d] * B[m,d]^T
  Var softmax_rows(Var logits, std::optional<Var> bias = std::nullopt);
  Var layer_norm(Var x, Var gain, Var shift);       // per-row, eps 1e-5
  Var gelu(Var x);                                  // tanh-form GELU
  Var slice_cols(Var x, int start, int len);
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_rows(Var table, std::vector<int> row_indices);
  // eta^2 * conf - gamma^2 * dist with 1x1 parameters; either matrix may be
  // absent (pass -1) when that bias term is disabled.
  Var attention_bias(Var eta, Var gamma, Var conf_matrix, Var dist_matrix);
  Var sum(Var x);                                   // scalar sum of all entries
  Var mse_rows(Var pred, Var target);               // mean over rows of squared row L2

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v);

  // Accumulates d(loss)/d(node) for every recorded node reachable from loss.
  // loss must be a 1x1 tensor. Throws std::logic_error when nothing was
  // recorded or the var is invalid.
  void backward(Var loss);

  // Adds this tape's parameter-leaf gradients into slots (indexed like the
  // bound ParamStore; resized on demand).
  void export_param_grads(std::vector<Tensor>& slots) const;
  // Adds them straight into the store's accumulators; must be the store the
  // tape was bound to.
  void accumulate_param_grads(ParamStore& store) const;

  void reset();
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op : uint8_t {
    kLeaf,
    kAdd,
    kLinear,
    kMatmulNN,
    kMatmulNT,
    kSoftmax,
    kLayerNorm,
    kGelu,
    kSliceCols,
    kConcatCols,
    kGatherRows,
    kAttnBias,
    kSum,
    kMseRows,
  };

  struct Node {
    Op op = Op::kLeaf;
    bool requires_grad = false;
    Tensor value;
    Tensor grad;
    Var a = -1, b = -1, c = -1, d = -1;
    float scalar = 0.0f;
    int i0 = 0, i1 = 0;
    std::vector<Var> list;
    std::vector<int> indices;
    Tensor aux;
    int param_index = -1;
  };

  Var push_leaf(Tensor value, bool requires_grad);
  Var push(Node node);
  Node& node(Var v) { return nodes_.at(static_cast<size_t>(v)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v)); }
  Tensor& grad_buffer(Var v);
  bool needs_grad(Var v) const { return v >= 0 && node(v).requires_grad; }
  void backward_node(Var v);

  std::vector<Node> nodes_;
  const ParamStore* store_ = nullptr;
  std::vector<Var> param_memo_;
  bool check_finite_ = false;
  bool ran_backward_ = false;
};

}  // namespace raypose
