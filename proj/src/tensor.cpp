#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gemm.hpp"
#include "vecmath.hpp"

namespace c3s {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.storage_ = std::make_shared<detail::Storage>();
  t.storage_->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  t.storage_->requires_grad = requires_grad;
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.storage_->value.begin(), t.storage_->value.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  check(shape_numel(shape) == static_cast<int64_t>(values.size()),
        "tensor init: shape " + shape_str(shape) + " does not hold " +
            std::to_string(values.size()) + " values");
  Tensor t;
  t.storage_ = std::make_shared<detail::Storage>();
  t.storage_->value = std::move(values);
  t.storage_->requires_grad = requires_grad;
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.storage_->value) v = rng.uniform(lo, hi);
  return t;
}

int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  return shape_[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return shape_numel(shape_); }

double* Tensor::grad() {
  if (storage_->grad.empty())
    storage_->grad.assign(storage_->value.size(), 0.0);
  return storage_->grad.data();
}

const std::vector<double>& Tensor::grad_values() {
  grad();
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (storage_ && !storage_->grad.empty())
    std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

double Tensor::scalar() const {
  check(numel() == 1, "scalar(): tensor has shape " + shape_str(shape_));
  return storage_->value[0];
}

Tensor Tensor::reshape(Shape shape) const {
  check(shape_numel(shape) == numel(),
        "reshape: cannot view " + shape_str(shape_) + " as " +
            shape_str(shape));
  Tensor t;
  t.storage_ = storage_;
  t.shape_ = std::move(shape);
  return t;
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::make_output(Shape shape, bool needs_grad) {
  return Tensor::zeros(std::move(shape), grad_enabled_ && needs_grad);
}

void Tape::backward(const Tensor& loss) {
  check(loss.defined() && loss.numel() == 1,
        "backward: loss must be a scalar, got shape " +
            (loss.defined() ? shape_str(loss.shape()) : std::string("<none>")));
  if (!grad_enabled_)
    throw std::logic_error("backward: tape was built with gradients disabled");
  if (backward_done_)
    throw std::logic_error("backward: tape already consumed");
  backward_done_ = true;
  const_cast<Tensor&>(loss).grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();
}

// --- linear algebra --------------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b, bool trans_a,
                    bool trans_b) {
  check(a.rank() == 2 && b.rank() == 2,
        "matmul: expects 2-D tensors, got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  const int64_t m = trans_a ? a.dim(1) : a.dim(0);
  const int64_t ka = trans_a ? a.dim(0) : a.dim(1);
  const int64_t kb = trans_b ? b.dim(1) : b.dim(0);
  const int64_t n = trans_b ? b.dim(0) : b.dim(1);
  check(ka == kb, "matmul: inner dimensions disagree for shapes " +
                      shape_str(a.shape()) + (trans_a ? "^T" : "") + " and " +
                      shape_str(b.shape()) + (trans_b ? "^T" : ""));
  const int64_t lda = a.dim(1), ldb = b.dim(1);

  bool needs = a.requires_grad() || b.requires_grad();
  Tensor out = make_output({m, n}, needs);
  backend::gemm(trans_a, trans_b, m, n, ka, 1.0, a.data(), lda, b.data(), ldb,
                0.0, out.data(), n);

  if (grad_enabled_ && needs) {
    Tensor ac = a, bc = b, oc = out;
    int64_t k = ka;
    record([ac, bc, oc, trans_a, trans_b, m, n, k, lda, ldb]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      if (ac.requires_grad()) {
        if (!trans_a) {
          // dA[m,k] += dY * op(B)^T
          backend::gemm(false, !trans_b, m, k, n, 1.0, dy, n, bc.data(), ldb,
                        1.0, ac.grad(), lda);
        } else {
          // A stored [k,m]: dA += op(B) * dY^T
          backend::gemm(trans_b, true, k, m, n, 1.0, bc.data(), ldb, dy, n,
                        1.0, ac.grad(), lda);
        }
      }
      if (bc.requires_grad()) {
        if (!trans_b) {
          // dB[k,n] += op(A)^T * dY
          backend::gemm(!trans_a, false, k, n, m, 1.0, ac.data(), lda, dy, n,
                        1.0, bc.grad(), ldb);
        } else {
          // B stored [n,k]: dB += dY^T * op(A)
          backend::gemm(true, trans_a, n, k, m, 1.0, dy, n, ac.data(), lda,
                        1.0, bc.grad(), ldb);
        }
      }
    });
  }
  return out;
}

// --- elementwise -----------------------------------------------------------

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  bool needs = a.requires_grad() || b.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  const int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

  if (grad_enabled_ && needs) {
    Tensor ac = a, bc = b, oc = out;
    record([ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      if (ac.requires_grad()) {
        double* da = ac.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  bool needs = a.requires_grad() || b.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  const int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];

  if (grad_enabled_ && needs) {
    Tensor ac = a, bc = b, oc = out;
    record([ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      if (ac.requires_grad()) {
        double* da = ac.grad();
        const double* pb2 = bc.data();
        for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * pb2[i];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        const double* pa2 = ac.data();
        for (int64_t i = 0; i < n; ++i) db[i] += dy[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor Tape::affine(const Tensor& a, double scale, double shift) {
  bool needs = a.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  const int64_t n = a.numel();
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = scale * pa[i] + shift;

  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    record([ac, oc, scale, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* da = ac.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += scale * dy[i];
    });
  }
  return out;
}

Tensor Tape::tanh(const Tensor& a) {
  bool needs = a.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  vecmath::tanh_array(out.data(), a.data(), static_cast<size_t>(a.numel()));

  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    int64_t n = a.numel();
    record([ac, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      const double* y = oc.data();
      double* da = ac.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * (1.0 - y[i] * y[i]);
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  bool needs = a.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  const int64_t n = a.numel();
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;

  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    record([ac, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      const double* x = ac.data();
      double* da = ac.grad();
      for (int64_t i = 0; i < n; ++i)
        if (x[i] > 0.0) da[i] += dy[i];
    });
  }
  return out;
}

Tensor Tape::exp(const Tensor& a) {
  bool needs = a.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  vecmath::exp_array(out.data(), a.data(), static_cast<size_t>(a.numel()));

  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    int64_t n = a.numel();
    record([ac, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      const double* y = oc.data();
      double* da = ac.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * y[i];
    });
  }
  return out;
}

// --- softmax family ---------------------------------------------------------

Tensor Tape::softmax(const Tensor& a, int axis) {
  if (axis < 0) axis += a.rank();
  check(axis >= 0 && axis < a.rank(),
        "softmax: axis out of range for shape " + shape_str(a.shape()));
  const int64_t c = a.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);

  bool needs = a.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  const double* px = a.data();
  double* py = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const double* x = px + o * c * inner + in;
      double* y = py + o * c * inner + in;
      double mx = x[0];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j * inner]);
      double sum = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        double e = vecmath::fast_exp(x[j * inner] - mx);
        y[j * inner] = e;
        sum += e;
      }
      double is = 1.0 / sum;
      for (int64_t j = 0; j < c; ++j) y[j * inner] *= is;
    }
  }

  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    record([ac, oc, outer, inner, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      const double* y = oc.data();
      double* da = ac.grad();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * c * inner + in;
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j)
            dot += dy[base + j * inner] * y[base + j * inner];
          for (int64_t j = 0; j < c; ++j)
            da[base + j * inner] +=
                y[base + j * inner] * (dy[base + j * inner] - dot);
        }
      }
    });
  }
  return out;
}

Tensor Tape::log_softmax_rows(const Tensor& a) {
  check(a.rank() == 2, "log_softmax_rows: expects [N,C], got " +
                           shape_str(a.shape()));
  const int64_t n = a.dim(0), c = a.dim(1);
  bool needs = a.requires_grad();
  Tensor out = make_output(a.shape(), needs);
  const double* px = a.data();
  double* py = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const double* x = px + i * c;
    double* y = py + i * c;
    double mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) sum += vecmath::fast_exp(x[j] - mx);
    double lse = mx + std::log(sum);
    for (int64_t j = 0; j < c; ++j) y[j] = x[j] - lse;
  }

  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    record([ac, oc, n, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      const double* y = oc.data();
      double* da = ac.grad();
      for (int64_t i = 0; i < n; ++i) {
        double tot = 0.0;
        for (int64_t j = 0; j < c; ++j) tot += dy[i * c + j];
        for (int64_t j = 0; j < c; ++j)
          da[i * c + j] +=
              dy[i * c + j] - tot * vecmath::fast_exp(y[i * c + j]);
      }
    });
  }
  return out;
}

// --- shape & indexing --------------------------------------------------------

Tensor Tape::concat(const Tensor& a, const Tensor& b, int axis) {
  check(a.rank() == 2 && b.rank() == 2,
        "concat: expects 2-D tensors, got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  check(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  bool needs = a.requires_grad() || b.requires_grad();
  Tensor out;
  if (axis == 1) {
    check(a.dim(0) == b.dim(0), "concat: row counts differ, " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    out = make_output({n, ca + cb}, needs);
    for (int64_t i = 0; i < n; ++i) {
      std::memcpy(out.data() + i * (ca + cb), a.data() + i * ca,
                  static_cast<size_t>(ca) * sizeof(double));
      std::memcpy(out.data() + i * (ca + cb) + ca, b.data() + i * cb,
                  static_cast<size_t>(cb) * sizeof(double));
    }
    if (grad_enabled_ && needs) {
      Tensor ac = a, bc = b, oc = out;
      record([ac, bc, oc, n, ca, cb]() mutable {
        if (!oc.has_grad()) return;
        const double* dy = oc.grad();
        if (ac.requires_grad()) {
          double* da = ac.grad();
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < ca; ++j)
              da[i * ca + j] += dy[i * (ca + cb) + j];
        }
        if (bc.requires_grad()) {
          double* db = bc.grad();
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < cb; ++j)
              db[i * cb + j] += dy[i * (ca + cb) + ca + j];
        }
      });
    }
  } else {
    check(a.dim(1) == b.dim(1), "concat: column counts differ, " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int64_t na = a.dim(0), nb = b.dim(0), c = a.dim(1);
    out = make_output({na + nb, c}, needs);
    std::memcpy(out.data(), a.data(), static_cast<size_t>(na * c) * sizeof(double));
    std::memcpy(out.data() + na * c, b.data(),
                static_cast<size_t>(nb * c) * sizeof(double));
    if (grad_enabled_ && needs) {
      Tensor ac = a, bc = b, oc = out;
      record([ac, bc, oc, na, nb, c]() mutable {
        if (!oc.has_grad()) return;
        const double* dy = oc.grad();
        if (ac.requires_grad()) {
          double* da = ac.grad();
          for (int64_t i = 0; i < na * c; ++i) da[i] += dy[i];
        }
        if (bc.requires_grad()) {
          double* db = bc.grad();
          for (int64_t i = 0; i < nb * c; ++i) db[i] += dy[na * c + i];
        }
      });
    }
  }
  return out;
}

Tensor Tape::slice_rows(const Tensor& a, int64_t row0, int64_t row1) {
  check(a.rank() == 2, "slice_rows: expects [N,C], got " + shape_str(a.shape()));
  check(0 <= row0 && row0 <= row1 && row1 <= a.dim(0),
        "slice_rows: range [" + std::to_string(row0) + "," +
            std::to_string(row1) + ") out of bounds for " +
            shape_str(a.shape()));
  const int64_t c = a.dim(1), m = row1 - row0;
  bool needs = a.requires_grad();
  Tensor out = make_output({m, c}, needs);
  std::memcpy(out.data(), a.data() + row0 * c,
              static_cast<size_t>(m * c) * sizeof(double));
  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    record([ac, oc, row0, m, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* da = ac.grad();
      for (int64_t i = 0; i < m * c; ++i) da[row0 * c + i] += dy[i];
    });
  }
  return out;
}

Tensor Tape::gather_rows(const Tensor& a, std::vector<int64_t> idx) {
  check(a.rank() == 2, "gather_rows: expects [N,C], got " + shape_str(a.shape()));
  const int64_t c = a.dim(1), n = a.dim(0);
  for (int64_t i : idx)
    check(0 <= i && i < n, "gather_rows: index " + std::to_string(i) +
                               " out of range for " + shape_str(a.shape()));
  bool needs = a.requires_grad();
  Tensor out = make_output({static_cast<int64_t>(idx.size()), c}, needs);
  for (size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data() + r * c, a.data() + idx[r] * c,
                static_cast<size_t>(c) * sizeof(double));
  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    auto ix = std::move(idx);
    record([ac, oc, ix, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* da = ac.grad();
      for (size_t r = 0; r < ix.size(); ++r)
        for (int64_t j = 0; j < c; ++j) da[ix[r] * c + j] += dy[r * c + j];
    });
  }
  return out;
}

Tensor Tape::gather_per_row(const Tensor& a, std::vector<int64_t> idx) {
  check(a.rank() == 2, "gather_per_row: expects [N,C], got " +
                           shape_str(a.shape()));
  check(static_cast<int64_t>(idx.size()) == a.dim(0),
        "gather_per_row: need one index per row");
  const int64_t c = a.dim(1);
  for (int64_t i : idx)
    check(0 <= i && i < c, "gather_per_row: column " + std::to_string(i) +
                               " out of range for " + shape_str(a.shape()));
  bool needs = a.requires_grad();
  Tensor out = make_output({a.dim(0)}, needs);
  for (size_t r = 0; r < idx.size(); ++r)
    out.data()[r] = a.data()[static_cast<int64_t>(r) * c + idx[r]];
  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    auto ix = std::move(idx);
    record([ac, oc, ix, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* da = ac.grad();
      for (size_t r = 0; r < ix.size(); ++r)
        da[static_cast<int64_t>(r) * c + ix[r]] += dy[r];
    });
  }
  return out;
}

Tensor Tape::embedding_gather(const Tensor& table, std::vector<int32_t> ids) {
  check(table.rank() == 2, "embedding_gather: table must be [V,d], got " +
                               shape_str(table.shape()));
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw DataError("embedding_gather: item id " + std::to_string(id) +
                      " outside vocabulary of size " + std::to_string(v));
  bool needs = table.requires_grad();
  Tensor out = make_output({static_cast<int64_t>(ids.size()), d}, needs);
  for (size_t r = 0; r < ids.size(); ++r)
    std::memcpy(out.data() + r * d, table.data() + static_cast<int64_t>(ids[r]) * d,
                static_cast<size_t>(d) * sizeof(double));
  if (grad_enabled_ && needs) {
    Tensor tc = table, oc = out;
    auto ix = std::move(ids);
    record([tc, oc, ix, d]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* dt = tc.grad();
      for (size_t r = 0; r < ix.size(); ++r) {
        double* row = dt + static_cast<int64_t>(ix[r]) * d;
        const double* g = dy + r * d;
        for (int64_t j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return out;
}

// --- sequence helpers --------------------------------------------------------

Tensor Tape::add_position(const Tensor& x, const Tensor& pos, int64_t batch,
                          int64_t len) {
  check(x.rank() == 2 && pos.rank() == 2 && x.dim(0) == batch * len &&
            pos.dim(0) >= len && pos.dim(1) == x.dim(1),
        "add_position: incompatible shapes " + shape_str(x.shape()) + " and " +
            shape_str(pos.shape()));
  const int64_t d = x.dim(1);
  bool needs = x.requires_grad() || pos.requires_grad();
  Tensor out = make_output(x.shape(), needs);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < len; ++t) {
      const double* px = x.data() + (b * len + t) * d;
      const double* pp = pos.data() + t * d;
      double* po = out.data() + (b * len + t) * d;
      for (int64_t j = 0; j < d; ++j) po[j] = px[j] + pp[j];
    }
  if (grad_enabled_ && needs) {
    Tensor xc = x, pc = pos, oc = out;
    record([xc, pc, oc, batch, len, d]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      if (xc.requires_grad()) {
        double* dx = xc.grad();
        const int64_t n = batch * len * d;
        for (int64_t i = 0; i < n; ++i) dx[i] += dy[i];
      }
      if (pc.requires_grad()) {
        double* dp = pc.grad();
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t t = 0; t < len; ++t) {
            const double* g = dy + (b * len + t) * d;
            double* row = dp + t * d;
            for (int64_t j = 0; j < d; ++j) row[j] += g[j];
          }
      }
    });
  }
  return out;
}

Tensor Tape::causal_unfold(const Tensor& x, int64_t batch, int64_t len,
                           int64_t k) {
  check(x.rank() == 2 && x.dim(0) == batch * len,
        "causal_unfold: expects [B*T,d], got " + shape_str(x.shape()));
  check(k >= 1, "causal_unfold: window must be >= 1");
  const int64_t d = x.dim(1);
  bool needs = x.requires_grad();
  Tensor out = make_output({batch * len, k * d}, needs);
  const double* px = x.data();
  double* po = out.data();
#pragma omp parallel for schedule(static) if (batch > 1)
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < len; ++t) {
      double* row = po + (b * len + t) * k * d;
      for (int64_t w = 0; w < k; ++w) {
        const int64_t src = t - (k - 1) + w;
        if (src >= 0)
          std::memcpy(row + w * d, px + (b * len + src) * d,
                      static_cast<size_t>(d) * sizeof(double));
      }
    }
  }
  if (grad_enabled_ && needs) {
    Tensor xc = x, oc = out;
    record([xc, oc, batch, len, k, d]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* dx = xc.grad();
#pragma omp parallel for schedule(static) if (batch > 1)
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t < len; ++t) {
          const double* row = dy + (b * len + t) * k * d;
          for (int64_t w = 0; w < k; ++w) {
            const int64_t src = t - (k - 1) + w;
            if (src < 0) continue;
            double* g = dx + (b * len + src) * d;
            const double* r = row + w * d;
            for (int64_t j = 0; j < d; ++j) g[j] += r[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::gather_windows(const Tensor& x, int64_t batch, int64_t len,
                            std::vector<int64_t> positions, int64_t k) {
  check(x.rank() == 2 && x.dim(0) == batch * len,
        "gather_windows: expects [B*T,d], got " + shape_str(x.shape()));
  check(static_cast<int64_t>(positions.size()) == batch,
        "gather_windows: one position per batch row required");
  const int64_t d = x.dim(1);
  for (int64_t p : positions)
    check(0 <= p && p < len, "gather_windows: position " + std::to_string(p) +
                                 " outside sequence of length " +
                                 std::to_string(len));
  bool needs = x.requires_grad();
  Tensor out = make_output({batch, k * d}, needs);
  for (int64_t b = 0; b < batch; ++b) {
    double* row = out.data() + b * k * d;
    for (int64_t w = 0; w < k; ++w) {
      const int64_t src = positions[b] - (k - 1) + w;
      if (src >= 0)
        std::memcpy(row + w * d, x.data() + (b * len + src) * d,
                    static_cast<size_t>(d) * sizeof(double));
    }
  }
  if (grad_enabled_ && needs) {
    Tensor xc = x, oc = out;
    auto posc = std::move(positions);
    record([xc, oc, posc, batch, len, k, d]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* dx = xc.grad();
      for (int64_t b = 0; b < batch; ++b) {
        const double* row = dy + b * k * d;
        for (int64_t w = 0; w < k; ++w) {
          const int64_t src = posc[b] - (k - 1) + w;
          if (src < 0) continue;
          double* g = dx + (b * len + src) * d;
          const double* r = row + w * d;
          for (int64_t j = 0; j < d; ++j) g[j] += r[j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::row_broadcast_mul(const Tensor& x, const Tensor& v) {
  check(x.rank() == 2 && v.rank() == 1 && v.dim(0) == x.dim(1),
        "row_broadcast_mul: shapes " + shape_str(x.shape()) + " and " +
            shape_str(v.shape()) + " incompatible");
  const int64_t n = x.dim(0), c = x.dim(1);
  bool needs = x.requires_grad() || v.requires_grad();
  Tensor out = make_output(x.shape(), needs);
  for (int64_t i = 0; i < n; ++i) {
    const double* px = x.data() + i * c;
    double* po = out.data() + i * c;
    const double* pv = v.data();
    for (int64_t j = 0; j < c; ++j) po[j] = px[j] * pv[j];
  }
  if (grad_enabled_ && needs) {
    Tensor xc = x, vc = v, oc = out;
    record([xc, vc, oc, n, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      if (xc.requires_grad()) {
        double* dx = xc.grad();
        const double* pv = vc.data();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < c; ++j) dx[i * c + j] += dy[i * c + j] * pv[j];
      }
      if (vc.requires_grad()) {
        double* dv = vc.grad();
        const double* px = xc.data();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < c; ++j) dv[j] += dy[i * c + j] * px[i * c + j];
      }
    });
  }
  return out;
}

Tensor Tape::layer_norm_rows(const Tensor& x, const Tensor& gain,
                             const Tensor& bias, double eps) {
  check(x.rank() == 2 && gain.rank() == 1 && bias.rank() == 1 &&
            gain.dim(0) == x.dim(1) && bias.dim(0) == x.dim(1),
        "layer_norm_rows: shapes " + shape_str(x.shape()) + ", " +
            shape_str(gain.shape()) + ", " + shape_str(bias.shape()) +
            " incompatible");
  const int64_t n = x.dim(0), d = x.dim(1);
  bool needs = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  Tensor out = make_output(x.shape(), needs);

  auto xhat = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n * d));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* px = x.data() + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += px[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = px[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    double* po = out.data() + i * d;
    for (int64_t j = 0; j < d; ++j) {
      double h = (px[j] - mean) * is;
      (*xhat)[static_cast<size_t>(i * d + j)] = h;
      po[j] = h * gain.data()[j] + bias.data()[j];
    }
  }

  if (grad_enabled_ && needs) {
    Tensor xc = x, gc = gain, bc = bias, oc = out;
    record([xc, gc, bc, oc, xhat, inv_std, n, d]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      if (gc.requires_grad()) {
        double* dg = gc.grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j)
            dg[j] += dy[i * d + j] * (*xhat)[static_cast<size_t>(i * d + j)];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) db[j] += dy[i * d + j];
      }
      if (xc.requires_grad()) {
        double* dx = xc.grad();
        const double* g = gc.data();
        for (int64_t i = 0; i < n; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            double dh = dy[i * d + j] * g[j];
            m1 += dh;
            m2 += dh * (*xhat)[static_cast<size_t>(i * d + j)];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          double is = (*inv_std)[static_cast<size_t>(i)];
          for (int64_t j = 0; j < d; ++j) {
            double dh = dy[i * d + j] * g[j];
            double h = (*xhat)[static_cast<size_t>(i * d + j)];
            dx[i * d + j] += is * (dh - m1 - h * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::mask_rows(const Tensor& x, std::vector<uint8_t> keep) {
  check(x.rank() == 2 && static_cast<int64_t>(keep.size()) == x.dim(0),
        "mask_rows: need one flag per row of " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1);
  bool needs = x.requires_grad();
  Tensor out = make_output(x.shape(), needs);
  for (int64_t i = 0; i < n; ++i)
    if (keep[static_cast<size_t>(i)])
      std::memcpy(out.data() + i * c, x.data() + i * c,
                  static_cast<size_t>(c) * sizeof(double));
  if (grad_enabled_ && needs) {
    Tensor xc = x, oc = out;
    auto kc = std::move(keep);
    record([xc, oc, kc, n, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* dx = xc.grad();
      for (int64_t i = 0; i < n; ++i)
        if (kc[static_cast<size_t>(i)])
          for (int64_t j = 0; j < c; ++j) dx[i * c + j] += dy[i * c + j];
    });
  }
  return out;
}

Tensor Tape::dropout(const Tensor& x, double p, Rng& rng) {
  check(0.0 <= p && p < 1.0, "dropout: rate must be in [0,1), got " +
                                 std::to_string(p));
  if (p == 0.0) return x;
  const int64_t n = x.numel();
  bool needs = x.requires_grad();
  Tensor out = make_output(x.shape(), needs);
  auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  const double keep_scale = 1.0 / (1.0 - p);
  for (int64_t i = 0; i < n; ++i) {
    double m = rng.uniform() >= p ? keep_scale : 0.0;
    (*mask)[static_cast<size_t>(i)] = m;
    out.data()[i] = x.data()[i] * m;
  }
  if (grad_enabled_ && needs) {
    Tensor xc = x, oc = out;
    record([xc, oc, mask, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      double* dx = xc.grad();
      for (int64_t i = 0; i < n; ++i)
        dx[i] += dy[i] * (*mask)[static_cast<size_t>(i)];
    });
  }
  return out;
}

// --- reductions ---------------------------------------------------------------

Tensor Tape::sum_all(const Tensor& a) {
  bool needs = a.requires_grad();
  Tensor out = make_output({1}, needs);
  const int64_t n = a.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += a.data()[i];
  out.data()[0] = acc;
  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    record([ac, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0];
      double* da = ac.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += g;
    });
  }
  return out;
}

Tensor Tape::mean_all(const Tensor& a) {
  bool needs = a.requires_grad();
  Tensor out = make_output({1}, needs);
  const int64_t n = a.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += a.data()[i];
  out.data()[0] = acc / static_cast<double>(n);
  if (grad_enabled_ && needs) {
    Tensor ac = a, oc = out;
    record([ac, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0] / static_cast<double>(n);
      double* da = ac.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += g;
    });
  }
  return out;
}

Tensor Tape::row_cosine(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && a.shape() == b.shape(),
        "row_cosine: shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()) + " must match");
  const int64_t n = a.dim(0), c = a.dim(1);
  bool needs = a.requires_grad() || b.requires_grad();
  Tensor out = make_output({n}, needs);
  auto na = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  auto nb = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* pa = a.data() + i * c;
    const double* pb = b.data() + i * c;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      saa += pa[j] * pa[j];
      sbb += pb[j] * pb[j];
      sab += pa[j] * pb[j];
    }
    if (saa == 0.0 || sbb == 0.0)
      throw DataError("row_cosine: zero vector in row " + std::to_string(i));
    (*na)[static_cast<size_t>(i)] = std::sqrt(saa);
    (*nb)[static_cast<size_t>(i)] = std::sqrt(sbb);
    out.data()[i] = sab / ((*na)[static_cast<size_t>(i)] *
                           (*nb)[static_cast<size_t>(i)]);
  }
  if (grad_enabled_ && needs) {
    Tensor ac = a, bc = b, oc = out;
    record([ac, bc, oc, na, nb, n, c]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      for (int64_t i = 0; i < n; ++i) {
        const double g = dy[i];
        if (g == 0.0) continue;
        const double* pa = ac.data() + i * c;
        const double* pb = bc.data() + i * c;
        const double la = (*na)[static_cast<size_t>(i)];
        const double lb = (*nb)[static_cast<size_t>(i)];
        const double y = oc.data()[i];
        if (ac.requires_grad()) {
          double* da = ac.grad() + i * c;
          for (int64_t j = 0; j < c; ++j)
            da[j] += g * (pb[j] / (la * lb) - y * pa[j] / (la * la));
        }
        if (bc.requires_grad()) {
          double* db = bc.grad() + i * c;
          for (int64_t j = 0; j < c; ++j)
            db[j] += g * (pa[j] / (la * lb) - y * pb[j] / (lb * lb));
        }
      }
    });
  }
  return out;
}

// --- attention kernels ----------------------------------------------------------

Tensor Tape::causal_softmax_qk(const Tensor& q, const Tensor& k, int64_t batch,
                               int64_t len, double scale) {
  check(q.rank() == 2 && k.rank() == 2 && q.shape() == k.shape() &&
            q.dim(0) == batch * len,
        "causal_softmax_qk: shapes " + shape_str(q.shape()) + " and " +
            shape_str(k.shape()) + " must both be [B*T,d]");
  const int64_t d = q.dim(1);
  bool needs = q.requires_grad() || k.requires_grad();
  Tensor out = make_output({batch, len, len}, needs);
  const double* pq = q.data();
  const double* pk = k.data();
  double* po = out.data();
#pragma omp parallel for schedule(static) if (batch > 1)
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < len; ++t) {
      const double* qrow = pq + (b * len + t) * d;
      double* prow = po + (b * len + t) * len;
      double mx = -1e300;
      for (int64_t j = 0; j <= t; ++j) {
        const double* krow = pk + (b * len + j) * d;
        double dot = 0.0;
        for (int64_t l = 0; l < d; ++l) dot += qrow[l] * krow[l];
        prow[j] = dot * scale;
        mx = std::max(mx, prow[j]);
      }
      double sum = 0.0;
      for (int64_t j = 0; j <= t; ++j) {
        prow[j] = vecmath::fast_exp(prow[j] - mx);
        sum += prow[j];
      }
      const double is = 1.0 / sum;
      for (int64_t j = 0; j <= t; ++j) prow[j] *= is;
    }
  }
  if (grad_enabled_ && needs) {
    Tensor qc = q, kc = k, oc = out;
    record([qc, kc, oc, batch, len, d, scale]() mutable {
      if (!oc.has_grad()) return;
      const double* dp = oc.grad();
      const double* p = oc.data();
#pragma omp parallel for schedule(static) if (batch > 1)
      for (int64_t b = 0; b < batch; ++b) {
        std::vector<double> dl(static_cast<size_t>(len));
        for (int64_t t = 0; t < len; ++t) {
          const int64_t row = (b * len + t) * len;
          double dot = 0.0;
          for (int64_t j = 0; j <= t; ++j) dot += dp[row + j] * p[row + j];
          for (int64_t j = 0; j <= t; ++j)
            dl[static_cast<size_t>(j)] = p[row + j] * (dp[row + j] - dot);
          const double* qrow = qc.data() + (b * len + t) * d;
          double* dqrow =
              qc.requires_grad() ? qc.grad() + (b * len + t) * d : nullptr;
          for (int64_t j = 0; j <= t; ++j) {
            const double w = dl[static_cast<size_t>(j)] * scale;
            if (w == 0.0) continue;
            const double* krow = kc.data() + (b * len + j) * d;
            if (dqrow)
              for (int64_t l = 0; l < d; ++l) dqrow[l] += w * krow[l];
            if (kc.requires_grad()) {
              double* dkrow = kc.grad() + (b * len + j) * d;
              for (int64_t l = 0; l < d; ++l) dkrow[l] += w * qrow[l];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::attn_apply(const Tensor& probs, const Tensor& v, int64_t batch,
                        int64_t len) {
  check(probs.rank() == 3 && probs.dim(0) == batch && probs.dim(1) == len &&
            probs.dim(2) == len && v.rank() == 2 && v.dim(0) == batch * len,
        "attn_apply: shapes " + shape_str(probs.shape()) + " and " +
            shape_str(v.shape()) + " incompatible");
  const int64_t d = v.dim(1);
  bool needs = probs.requires_grad() || v.requires_grad();
  Tensor out = make_output({batch * len, d}, needs);
  const double* pp = probs.data();
  const double* pv = v.data();
  double* po = out.data();
#pragma omp parallel for schedule(static) if (batch > 1)
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < len; ++t) {
      const double* prow = pp + (b * len + t) * len;
      double* orow = po + (b * len + t) * d;
      for (int64_t j = 0; j <= t; ++j) {
        const double w = prow[j];
        const double* vrow = pv + (b * len + j) * d;
        for (int64_t l = 0; l < d; ++l) orow[l] += w * vrow[l];
      }
    }
  }
  if (grad_enabled_ && needs) {
    Tensor pc = probs, vc = v, oc = out;
    record([pc, vc, oc, batch, len, d]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
#pragma omp parallel for schedule(static) if (batch > 1)
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t < len; ++t) {
          const double* dorow = dy + (b * len + t) * d;
          const double* prow = pc.data() + (b * len + t) * len;
          double* dprow =
              pc.requires_grad() ? pc.grad() + (b * len + t) * len : nullptr;
          for (int64_t j = 0; j <= t; ++j) {
            const double* vrow = vc.data() + (b * len + j) * d;
            if (dprow) {
              double acc = 0.0;
              for (int64_t l = 0; l < d; ++l) acc += dorow[l] * vrow[l];
              dprow[j] += acc;
            }
            if (vc.requires_grad()) {
              double* dvrow = vc.grad() + (b * len + j) * d;
              const double w = prow[j];
              for (int64_t l = 0; l < d; ++l) dvrow[l] += w * dorow[l];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::item_logits(const Tensor& repr, const Tensor& emb) {
  check(repr.rank() == 2 && emb.rank() == 2 && repr.dim(1) == emb.dim(1),
        "item_logits: shapes " + shape_str(repr.shape()) + " and " +
            shape_str(emb.shape()) + " incompatible");
  const int64_t bsz = repr.dim(0), d = repr.dim(1);
  const int64_t n_items = emb.dim(0) - 1;
  check(n_items >= 1, "item_logits: embedding table needs a padding row plus "
                      "at least one item");
  bool needs = repr.requires_grad() || emb.requires_grad();
  Tensor out = make_output({bsz, n_items}, needs);
  backend::gemm(false, true, bsz, n_items, d, 1.0, repr.data(), d,
                emb.data() + d, d, 0.0, out.data(), n_items);
  if (grad_enabled_ && needs) {
    Tensor rc = repr, ec = emb, oc = out;
    record([rc, ec, oc, bsz, d, n_items]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad();
      if (rc.requires_grad())
        backend::gemm(false, false, bsz, d, n_items, 1.0, dy, n_items,
                      ec.data() + d, d, 1.0, rc.grad(), d);
      if (ec.requires_grad())
        backend::gemm(true, false, n_items, d, bsz, 1.0, dy, n_items,
                      rc.data(), d, 1.0, ec.grad() + d, d);
    });
  }
  return out;
}

}  // namespace c3s
