#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace p2det {

/// Dense float64 n-d array, row-major. A Tensor is a cheap shared handle;
/// op outputs are written once by the producing op and treated as immutable
/// afterwards. Gradient buffers are allocated lazily during backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const;
  int dim(int i) const;
  int64_t size() const;

  std::span<const double> data() const;
  double value() const;  // 1-element tensors only
  double at(int64_t flat_index) const;

  /// Mutable access to the data buffer. Only meaningful for leaves
  /// (parameter init, optimizer steps, finite-difference probes).
  std::vector<double>& raw();

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::vector<double>& grad_buffer();  // allocates zero-filled if absent
  void zero_grad();                    // drops the buffer

  bool same_impl(const Tensor& other) const { return impl_.get() == other.impl_.get(); }

 private:
  friend class Graph;
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

/// Reverse-mode tape. Ops append records in execution order; backward()
/// replays them once, in reverse. Graph construction is single-threaded;
/// independent graphs may live on independent threads.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // elementwise (same shape unless noted)
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);  // denominator guarded away from 0
  Tensor minimum(const Tensor& a, const Tensor& b);
  Tensor maximum(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& x, double c);
  Tensor add_const(const Tensor& x, double c);
  Tensor neg(const Tensor& x) { return scale(x, -1.0); }
  Tensor exp(const Tensor& x);   // input clamped at 700
  Tensor log(const Tensor& x);   // input clamped at 1e-30
  Tensor sqrt(const Tensor& x);  // input clamped at 0
  Tensor abs(const Tensor& x);
  Tensor pow(const Tensor& x, double exponent);  // base clamped at 0
  Tensor relu(const Tensor& x);
  Tensor gelu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor clamp(const Tensor& x, double lo, double hi);

  // shape
  Tensor reshape(const Tensor& x, std::vector<int> shape);
  Tensor transpose(const Tensor& x);                           // 2-D
  Tensor slice_cols(const Tensor& x, int start, int count);    // 2-D
  Tensor concat_cols(const std::vector<Tensor>& parts);        // 2-D, equal rows
  Tensor element(const Tensor& x, int64_t flat_index);         // 1-element gather
  Tensor gather_rows(const Tensor& x, std::vector<int> rows);  // 2-D

  // reductions
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);

  // linear algebra / nn
  Tensor matmul(const Tensor& a, const Tensor& b);              // [m,k]x[k,n]
  Tensor add_rowwise(const Tensor& x, const Tensor& bias);      // [n,d]+[d]
  Tensor softmax(const Tensor& x);                              // last axis
  Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                   double eps = 1e-5);                          // last axis
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                int pad);                                       // [Ci,H,W],[Co,Ci,kh,kw],[Co]
  Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                          int pad);                             // [C,H,W],[C,k,k],[C]
  Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w);  // [C,h,w]

  /// Seeds d(loss)/d(loss)=1 and replays the tape in reverse, accumulating
  /// into the grad buffers of every tensor with requires_grad.
  void backward(const Tensor& loss);

  size_t num_ops() const { return records_.size(); }

 private:
  struct Record {
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Record> records_;

  Tensor unary(const Tensor& x, const std::function<double(double)>& f,
               const std::function<double(double, double)>& dfdx);
  Tensor binary(const Tensor& a, const Tensor& b,
                const std::function<double(double, double)>& f,
                const std::function<double(double, double, double)>& dfda,
                const std::function<double(double, double, double)>& dfdb);
  void record(Tensor output, std::function<void()> fn);
};

/// Multilayer perceptron block: gelu(x W1 + b1) W2 + b2.
Tensor mlp_forward(Graph& g, const Tensor& x, const Tensor& w1, const Tensor& b1,
                   const Tensor& w2, const Tensor& b2);

/// Central-difference gradient verification for a scalar-valued graph
/// builder. Perturbs every coordinate of x by +/-eps and compares against
/// the analytic gradient; returns max over coordinates of
/// |a - n| / max(1, |a|, |n|).
double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, Tensor x,
                  double eps = 1e-5);

}  // namespace p2det
