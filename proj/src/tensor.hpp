#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace c3s {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Storage {
  std::vector<double> value;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major f64 tensor. Copies are shallow (shared storage); reshape
// aliases the same buffers, so gradients accumulated through a view land on
// the original parameter.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = true);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;
  int64_t numel() const;
  bool requires_grad() const { return storage_ && storage_->requires_grad; }

  double* data() { return storage_->value.data(); }
  const double* data() const { return storage_->value.data(); }
  std::vector<double>& values() { return storage_->value; }
  const std::vector<double>& values() const { return storage_->value; }

  // Allocates a zero gradient on first access.
  double* grad();
  const std::vector<double>& grad_values();
  bool has_grad() const { return storage_ && !storage_->grad.empty(); }
  void zero_grad();

  double scalar() const;  // requires numel() == 1

  // Aliasing view with a new shape; element count must match.
  Tensor reshape(Shape shape) const;

 private:
  std::shared_ptr<detail::Storage> storage_;
  Shape shape_;

  friend class Tape;
};

// Records every executed op so a single reverse sweep can accumulate
// gradients. A tape and its tensors belong to one thread; build a fresh tape
// per batch. Construct with grad_enabled=false for pure inference.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse, once.
  void backward(const Tensor& loss);

  // --- linear algebra ---
  Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                bool trans_b = false);

  // --- elementwise ---
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor affine(const Tensor& a, double scale, double shift);  // scale*a+shift
  Tensor tanh(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor exp(const Tensor& a);

  // --- softmax family ---
  Tensor softmax(const Tensor& a, int axis);
  Tensor log_softmax_rows(const Tensor& a);  // [N,C]

  // --- shape & indexing ---
  Tensor concat(const Tensor& a, const Tensor& b, int axis);  // 2-D
  Tensor slice_rows(const Tensor& a, int64_t row0, int64_t row1);
  Tensor gather_rows(const Tensor& a, std::vector<int64_t> idx);
  Tensor gather_per_row(const Tensor& a, std::vector<int64_t> idx);  // ->[N]
  Tensor embedding_gather(const Tensor& table, std::vector<int32_t> ids);

  // --- sequence helpers ---
  // x is [B*T, d]; adds pos[t] to every row (b, t).
  Tensor add_position(const Tensor& x, const Tensor& pos, int64_t batch,
                      int64_t len);
  // x is [B*T, d] -> [B*T, k*d]; row (b,t) is the flattened window
  // x[b, t-k+1 .. t] with zero rows left of the sequence start.
  Tensor causal_unfold(const Tensor& x, int64_t batch, int64_t len, int64_t k);
  // One window per batch row, ending at positions[b]; -> [B, k*d].
  Tensor gather_windows(const Tensor& x, int64_t batch, int64_t len,
                        std::vector<int64_t> positions, int64_t k);
  Tensor row_broadcast_mul(const Tensor& x, const Tensor& v);  // [N,C]*[C]
  Tensor layer_norm_rows(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-8);
  Tensor mask_rows(const Tensor& x, std::vector<uint8_t> keep);
  Tensor dropout(const Tensor& x, double p, Rng& rng);

  // --- reductions ---
  Tensor sum_all(const Tensor& a);
  Tensor mean_all(const Tensor& a);
  Tensor row_cosine(const Tensor& a, const Tensor& b);  // [N,C]x[N,C]->[N]

  // --- attention kernels (causal, lower-triangular) ---
  // Q,K are [B*T, d]; result is [B, T, T] with rows softmax-normalized over
  // columns j <= t and exact zeros above the diagonal.
  Tensor causal_softmax_qk(const Tensor& q, const Tensor& k, int64_t batch,
                           int64_t len, double scale);
  // probs [B,T,T] x V [B*T,d] -> [B*T,d], out[t] = sum_{j<=t} P[t,j] V[j].
  Tensor attn_apply(const Tensor& probs, const Tensor& v, int64_t batch,
                    int64_t len);

  // repr [B,d] x emb [V+1,d] -> [B,V]; scores against rows 1..V (row 0 is
  // the padding item and is excluded).
  Tensor item_logits(const Tensor& repr, const Tensor& emb);

 private:
  struct Record {
    std::function<void()> fn;
  };
  std::vector<Record> records_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;

  // A new op output: tracks gradients iff the tape allows it and some input
  // requires them.
  Tensor make_output(Shape shape, bool needs_grad);
  void record(std::function<void()> fn) { records_.push_back({std::move(fn)}); }
};

}  // namespace c3s
