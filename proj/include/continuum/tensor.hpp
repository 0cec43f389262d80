#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace continuum {

/// Thrown on dimension/shape violations (usage errors).
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a computation produces non-finite values (divergence, NaN loss).
class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of doubles. Also acts as a node of the reverse-mode
// graph: each op output records its parents and a closure that pulls the
// output gradient into the parents. Node ids increase monotonically with
// creation order, so sorting reachable nodes by id gives a topological order.
//
// Tensors are immutable after creation except for gradient accumulation; a
// graph must stay confined to one thread.
class Tensor : public std::enable_shared_from_this<Tensor> {
 public:
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation

  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;  // set only on recorded op outputs
  std::uint64_t node_id = 0;

  static TensorPtr create(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static TensorPtr zeros(Shape shape, bool requires_grad = false);
  static TensorPtr full(Shape shape, double value, bool requires_grad = false);
  static TensorPtr scalar(double value, bool requires_grad = false);
  /// Fresh leaf with the same data, detached from any graph.
  static TensorPtr leaf_like(const Tensor& src, bool requires_grad);

  ~Tensor();
  Tensor(const Tensor&) = delete;
  Tensor& operator=(const Tensor&) = delete;

  int size() const { return static_cast<int>(data.size()); }
  bool is_scalar() const { return data.size() == 1; }
  double item() const;
  bool all_finite() const;

  void accum_grad(const double* g, std::size_t n);
  void zero_grad();

  // Instrumentation for the constant-memory contract: live tensor count and
  // its high-water mark.
  static long live_count();
  static long peak_live_count();
  static void reset_peak_live_count();

 private:
  Tensor(Shape s, std::vector<double> d, bool rg);
};

/// Gradient recording is on by default; disable it for pure numeric work.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

enum class Activation { Relu, Softplus, Sigmoid, Tanh };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation kind);

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
/// a + c*b, the one combination fixed-step solvers need.
TensorPtr add_scaled(const TensorPtr& a, double c, const TensorPtr& b);
/// Pass-through op; gives state components an explicit graph edge.
TensorPtr identity(const TensorPtr& a);
TensorPtr sum(const TensorPtr& a);
TensorPtr activation(const TensorPtr& a, Activation kind);
TensorPtr reshape(const TensorPtr& a, Shape shape);

/// Cross-correlation with zero padding. input [N,C,H,W] or [C,H,W],
/// kernel [F,C,k,k] with k odd, bias [F].
TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int padding);

/// 2x2 max pooling; extents must be even.
TensorPtr downsample(const TensorPtr& input);

/// Nearest-neighbor 2x duplication; backward sums the four replicas.
TensorPtr upsample(const TensorPtr& input);

/// Channel-wise concatenation, a first. Spatial/batch extents must match.
TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b);

/// Mean over elements of -[t*ln p + (1-t)*ln(1-p)], p clamped to
/// [1e-7, 1-1e-7].
TensorPtr bce_loss(const TensorPtr& pred, const TensorPtr& target);

/// Register `out` as the result of a custom op with an explicit backward
/// closure. No-op when grad recording is off or no parent wants gradients.
void record_custom(const TensorPtr& out, std::vector<TensorPtr> parents,
                   std::function<void(Tensor&)> fn);

/// Reverse-topological gradient accumulation from a scalar loss.
void backward(const TensorPtr& loss);

/// Same traversal with an arbitrary seed gradient on `out` (internal hook for
/// vector-Jacobian products).
void backward_seeded(const TensorPtr& out, const std::vector<double>& seed);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

/// Standard Adam with bias correction. Missing grads are treated as zero.
void adam_step(const std::vector<TensorPtr>& params, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

}  // namespace continuum
