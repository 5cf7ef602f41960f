#include "p2det/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace p2det {

namespace {

int64_t shape_product(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
    n *= d;
  }
  return n;
}

constexpr double kExpClamp = 700.0;
constexpr double kLogFloor = 1e-30;
constexpr double kDivFloor = 1e-30;

double guarded_denominator(double d) {
  if (std::fabs(d) >= kDivFloor) return d;
  return d < 0.0 ? -kDivFloor : kDivFloor;
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

struct Tensor::Impl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until needed
  bool requires_grad = false;
};

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_product(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_product(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("tensor: shape/data size mismatch");
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
int64_t Tensor::size() const { return static_cast<int64_t>(impl_->data.size()); }

std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("tensor: value() needs a 1-element tensor");
  return impl_->data[0];
}

double Tensor::at(int64_t flat_index) const { return impl_->data.at(static_cast<size_t>(flat_index)); }

std::vector<double>& Tensor::raw() { return impl_->data; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::vector<double>& Tensor::grad_buffer() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

void Graph::record(Tensor output, std::function<void()> fn) {
  records_.push_back({std::move(output), std::move(fn)});
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  loss.impl_->grad.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output.has_grad() && it->backward) it->backward();
  }
}

Tensor Graph::unary(const Tensor& x, const std::function<double(double)>& f,
                    const std::function<double(double, double)>& dfdx) {
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.data();
  auto& od = out.raw();
  for (int64_t i = 0; i < x.size(); ++i) od[static_cast<size_t>(i)] = f(xs[static_cast<size_t>(i)]);
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc, dfdx]() mutable {
      auto go = oc.grad();
      auto& gx = xc.grad_buffer();
      auto xs2 = xc.data();
      auto os2 = oc.data();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * dfdx(xs2[i], os2[i]);
    });
  }
  return out;
}

Tensor Graph::binary(const Tensor& a, const Tensor& b,
                     const std::function<double(double, double)>& f,
                     const std::function<double(double, double, double)>& dfda,
                     const std::function<double(double, double, double)>& dfdb) {
  if (a.shape() != b.shape()) throw std::invalid_argument("elementwise op: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  auto as = a.data();
  auto bs = b.data();
  auto& od = out.raw();
  for (size_t i = 0; i < od.size(); ++i) od[i] = f(as[i], bs[i]);
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    record(out, [ac, bc, oc, dfda, dfdb]() mutable {
      auto go = oc.grad();
      auto as2 = ac.data();
      auto bs2 = bc.data();
      auto os2 = oc.data();
      if (ac.requires_grad()) {
        auto& ga = ac.grad_buffer();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * dfda(as2[i], bs2[i], os2[i]);
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad_buffer();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * dfdb(as2[i], bs2[i], os2[i]);
      }
    });
  }
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor Graph::div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x / guarded_denominator(y); },
      [](double, double y, double) { return 1.0 / guarded_denominator(y); },
      [](double, double y, double o) { return -o / guarded_denominator(y); });
}

Tensor Graph::minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x < y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor Graph::maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x > y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor Graph::scale(const Tensor& x, double c) {
  return unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor Graph::add_const(const Tensor& x, double c) {
  return unary(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor Graph::exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(std::min(v, kExpClamp)); },
      [](double v, double o) { return v < kExpClamp ? o : 0.0; });
}

Tensor Graph::log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(std::max(v, kLogFloor)); },
      [](double v, double) { return v > kLogFloor ? 1.0 / v : 0.0; });
}

Tensor Graph::sqrt(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sqrt(std::max(v, 0.0)); },
      [](double v, double o) { return v > 0.0 ? 0.5 / o : 0.0; });
}

Tensor Graph::abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v >= 0.0 ? 1.0 : -1.0; });
}

Tensor Graph::pow(const Tensor& x, double exponent) {
  return unary(
      x, [exponent](double v) { return std::pow(std::max(v, 0.0), exponent); },
      [exponent](double v, double) {
        const double base = std::max(v, 0.0);
        if (base == 0.0 && exponent < 1.0) return 0.0;
        return exponent * std::pow(base, exponent - 1.0);
      });
}

Tensor Graph::relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor Graph::gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
               v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor Graph::sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-std::min(v, kExpClamp)));
        const double e = std::exp(std::max(v, -kExpClamp));
        return e / (1.0 + e);
      },
      [](double, double o) { return o * (1.0 - o); });
}

Tensor Graph::clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor Graph::reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_product(shape) != x.size()) throw std::invalid_argument("reshape: element count mismatch");
  Tensor out = Tensor::from_data(std::move(shape),
                                 std::vector<double>(x.data().begin(), x.data().end()));
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc]() mutable {
      auto go = oc.grad();
      auto& gx = xc.grad_buffer();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

Tensor Graph::transpose(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: 2-D only");
  const int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c, r});
  auto xs = x.data();
  auto& od = out.raw();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) od[static_cast<size_t>(j) * r + i] = xs[static_cast<size_t>(i) * c + j];
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc, r, c]() mutable {
      auto go = oc.grad();
      auto& gx = xc.grad_buffer();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          gx[static_cast<size_t>(i) * c + j] += go[static_cast<size_t>(j) * r + i];
    });
  }
  return out;
}

Tensor Graph::slice_cols(const Tensor& x, int start, int count) {
  if (x.rank() != 2) throw std::invalid_argument("slice_cols: 2-D only");
  const int r = x.dim(0), c = x.dim(1);
  if (start < 0 || count <= 0 || start + count > c)
    throw std::invalid_argument("slice_cols: range out of bounds");
  Tensor out = Tensor::zeros({r, count});
  auto xs = x.data();
  auto& od = out.raw();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < count; ++j)
      od[static_cast<size_t>(i) * count + j] = xs[static_cast<size_t>(i) * c + start + j];
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc, r, c, start, count]() mutable {
      auto go = oc.grad();
      auto& gx = xc.grad_buffer();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < count; ++j)
          gx[static_cast<size_t>(i) * c + start + j] += go[static_cast<size_t>(i) * count + j];
    });
  }
  return out;
}

Tensor Graph::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int r = parts[0].dim(0);
  int total = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.dim(1);
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({r, total});
  auto& od = out.raw();
  int col = 0;
  for (const Tensor& p : parts) {
    const int c = p.dim(1);
    auto ps = p.data();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        od[static_cast<size_t>(i) * total + col + j] = ps[static_cast<size_t>(i) * c + j];
    col += c;
  }
  if (needs_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> pc = parts;
    Tensor oc = out;
    record(out, [pc, oc, r, total]() mutable {
      auto go = oc.grad();
      int col2 = 0;
      for (Tensor& p : pc) {
        const int c = p.dim(1);
        if (p.requires_grad()) {
          auto& gp = p.grad_buffer();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              gp[static_cast<size_t>(i) * c + j] += go[static_cast<size_t>(i) * total + col2 + j];
        }
        col2 += c;
      }
    });
  }
  return out;
}

Tensor Graph::element(const Tensor& x, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.size())
    throw std::invalid_argument("element: index out of bounds");
  Tensor out = Tensor::scalar(x.at(flat_index));
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc, flat_index]() mutable {
      xc.grad_buffer()[static_cast<size_t>(flat_index)] += oc.grad()[0];
    });
  }
  return out;
}

Tensor Graph::gather_rows(const Tensor& x, std::vector<int> rows) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: 2-D only");
  const int c = x.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), c});
  auto xs = x.data();
  auto& od = out.raw();
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.dim(0)) throw std::invalid_argument("gather_rows: row out of bounds");
    for (int j = 0; j < c; ++j) od[i * c + j] = xs[static_cast<size_t>(rows[i]) * c + j];
  }
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc, rows = std::move(rows), c]() mutable {
      auto go = oc.grad();
      auto& gx = xc.grad_buffer();
      for (size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < c; ++j) gx[static_cast<size_t>(rows[i]) * c + j] += go[i * c + j];
    });
  }
  return out;
}

Tensor Graph::sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc]() mutable {
      const double g = oc.grad()[0];
      auto& gx = xc.grad_buffer();
      for (double& v : gx) v += g;
    });
  }
  return out;
}

Tensor Graph::mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: shape mismatch");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  auto as = a.data();
  auto bs = b.data();
  auto& od = out.raw();
  // i-l-j order keeps B and the output row contiguous; per-element sums still
  // accumulate in ascending l, so results match the naive i-j-l loop bit for bit.
  for (int i = 0; i < m; ++i) {
    double* orow = od.data() + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double av = as[static_cast<size_t>(i) * k + l];
      const double* brow = bs.data() + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    record(out, [ac, bc, oc, m, k, n]() mutable {
      auto go = oc.grad();
      auto as2 = ac.data();
      auto bs2 = bc.data();
      if (ac.requires_grad()) {
        auto& ga = ac.grad_buffer();  // dA = dC * B^T
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j)
              acc += go[static_cast<size_t>(i) * n + j] * bs2[static_cast<size_t>(l) * n + j];
            ga[static_cast<size_t>(i) * k + l] += acc;
          }
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad_buffer();  // dB = A^T * dC, accumulated in ascending i
        for (int i = 0; i < m; ++i) {
          const double* gorow = go.data() + static_cast<size_t>(i) * n;
          for (int l = 0; l < k; ++l) {
            const double av = as2[static_cast<size_t>(i) * k + l];
            double* gbrow = gb.data() + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * gorow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor Graph::add_rowwise(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw std::invalid_argument("add_rowwise: shape mismatch");
  const int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({r, c});
  auto xs = x.data();
  auto bs = bias.data();
  auto& od = out.raw();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      od[static_cast<size_t>(i) * c + j] = xs[static_cast<size_t>(i) * c + j] + bs[static_cast<size_t>(j)];
  if (x.requires_grad() || bias.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, bc = bias, oc = out;
    record(out, [xc, bc, oc, r, c]() mutable {
      auto go = oc.grad();
      if (xc.requires_grad()) {
        auto& gx = xc.grad_buffer();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad_buffer();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * c + j];
      }
    });
  }
  return out;
}

Tensor Graph::softmax(const Tensor& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax: rank >= 1 required");
  const int n = x.dim(x.rank() - 1);
  const int64_t rows = x.size() / n;
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.data();
  auto& od = out.raw();
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r) * n;
    double mx = xs[base];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xs[base + j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      od[base + j] = std::exp(xs[base + j] - mx);
      denom += od[base + j];
    }
    for (int j = 0; j < n; ++j) od[base + j] /= denom;
  }
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc, rows, n]() mutable {
      auto go = oc.grad();
      auto os = oc.data();
      auto& gx = xc.grad_buffer();
      for (int64_t r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += go[base + j] * os[base + j];
        for (int j = 0; j < n; ++j) gx[base + j] += os[base + j] * (go[base + j] - dot);
      }
    });
  }
  return out;
}

Tensor Graph::layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layernorm: rank >= 1 required");
  const int n = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
    throw std::invalid_argument("layernorm: gain/bias shape mismatch");
  const int64_t rows = x.size() / n;
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.data();
  auto gs = gain.data();
  auto bs = bias.data();
  auto& od = out.raw();
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r) * n;
    double m = 0.0;
    for (int j = 0; j < n; ++j) m += xs[base + j];
    m /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xs[base + j] - m) * (xs[base + j] - m);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) od[base + j] = (xs[base + j] - m) * inv * gs[static_cast<size_t>(j)] + bs[static_cast<size_t>(j)];
  }
  if (x.requires_grad() || gain.requires_grad() || bias.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gain, bc = bias, oc = out;
    record(out, [xc, gc, bc, oc, rows, n, eps]() mutable {
      auto go = oc.grad();
      auto xs2 = xc.data();
      auto gs2 = gc.data();
      for (int64_t r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * n;
        double m = 0.0;
        for (int j = 0; j < n; ++j) m += xs2[base + j];
        m /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xs2[base + j] - m) * (xs2[base + j] - m);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        if (gc.requires_grad() || bc.requires_grad()) {
          for (int j = 0; j < n; ++j) {
            const double xhat = (xs2[base + j] - m) * inv;
            if (gc.requires_grad()) gc.grad_buffer()[static_cast<size_t>(j)] += go[base + j] * xhat;
            if (bc.requires_grad()) bc.grad_buffer()[static_cast<size_t>(j)] += go[base + j];
          }
        }
        if (xc.requires_grad()) {
          auto& gx = xc.grad_buffer();
          // dxhat = dy * gain; dx via mean/variance chain
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dxhat = go[base + j] * gs2[static_cast<size_t>(j)];
            const double xhat = (xs2[base + j] - m) * inv;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          for (int j = 0; j < n; ++j) {
            const double dxhat = go[base + j] * gs2[static_cast<size_t>(j)];
            const double xhat = (xs2[base + j] - m) * inv;
            gx[base + j] += inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
          }
        }
      }
    });
  }
  return out;
}

Tensor Graph::conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw std::invalid_argument("conv2d: expected x[Ci,H,W], w[Co,Ci,kh,kw], b[Co]");
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci || b.dim(0) != co) throw std::invalid_argument("conv2d: channel mismatch");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");
  Tensor out = Tensor::zeros({co, oh, ow});
  auto xs = x.data();
  auto ws = w.data();
  auto bs = b.data();
  auto& od = out.raw();
  // Bias first, then one row-sweep per (ci, tap): each output element still
  // accumulates its taps in ascending (cc, u, v) order, but the inner loop
  // walks rows contiguously instead of striding across channel planes.
  // Valid output ranges per tap are solved up front so the hot loop has no
  // bounds checks: 0 <= oy*stride - pad + u < h.
  auto out_range = [stride, pad](int tap, int limit, int extent) {
    int lo = 0;
    while (lo < extent && lo * stride - pad + tap < 0) ++lo;
    int hi = extent;
    while (hi > lo && (hi - 1) * stride - pad + tap >= limit) --hi;
    return std::pair<int, int>{lo, hi};
  };
  for (int c = 0; c < co; ++c)
    std::fill_n(od.data() + static_cast<size_t>(c) * oh * ow,
                static_cast<size_t>(oh) * ow, bs[static_cast<size_t>(c)]);
  for (int c = 0; c < co; ++c)
    for (int cc = 0; cc < ci; ++cc)
      for (int u = 0; u < kh; ++u) {
        const auto [oy0, oy1] = out_range(u, h, oh);
        for (int v = 0; v < kw; ++v) {
          const auto [ox0, ox1] = out_range(v, wd, ow);
          const double wv = ws[((static_cast<size_t>(c) * ci + cc) * kh + u) * kw + v];
          const int xoff = v - pad;
          for (int oy = oy0; oy < oy1; ++oy) {
            const double* xrow =
                xs.data() + (static_cast<size_t>(cc) * h + oy * stride - pad + u) * wd;
            double* orow = od.data() + (static_cast<size_t>(c) * oh + oy) * ow;
            if (stride == 1) {
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * xrow[ox + xoff];
            } else {
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * xrow[ox * stride + xoff];
            }
          }
        }
      }
  if (x.requires_grad() || w.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = b, oc = out;
    record(out, [xc, wc, bc, oc, ci, h, wd, co, kh, kw, oh, ow, stride, pad]() mutable {
      auto go = oc.grad();
      auto xs2 = xc.data();
      auto ws2 = wc.data();
      const bool need_x = xc.requires_grad();
      const bool need_w = wc.requires_grad();
      const bool need_b = bc.requires_grad();
      std::vector<double>* gx = need_x ? &xc.grad_buffer() : nullptr;
      std::vector<double>* gw = need_w ? &wc.grad_buffer() : nullptr;
      std::vector<double>* gb = need_b ? &bc.grad_buffer() : nullptr;
      auto out_range = [stride, pad](int tap, int limit, int extent) {
        int lo = 0;
        while (lo < extent && lo * stride - pad + tap < 0) ++lo;
        int hi = extent;
        while (hi > lo && (hi - 1) * stride - pad + tap >= limit) --hi;
        return std::pair<int, int>{lo, hi};
      };
      if (need_b) {
        for (int c = 0; c < co; ++c) {
          double acc = 0.0;
          const double* grow = go.data() + static_cast<size_t>(c) * oh * ow;
          for (int64_t t = 0; t < static_cast<int64_t>(oh) * ow; ++t) acc += grow[t];
          (*gb)[static_cast<size_t>(c)] += acc;
        }
      }
      for (int c = 0; c < co; ++c)
        for (int cc = 0; cc < ci; ++cc)
          for (int u = 0; u < kh; ++u) {
            const auto [oy0, oy1] = out_range(u, h, oh);
            for (int v = 0; v < kw; ++v) {
              const auto [ox0, ox1] = out_range(v, wd, ow);
              const size_t wi = ((static_cast<size_t>(c) * ci + cc) * kh + u) * kw + v;
              const double wv = ws2[wi];
              const int xoff = v - pad;
              double wacc = 0.0;
              for (int oy = oy0; oy < oy1; ++oy) {
                const size_t xbase = (static_cast<size_t>(cc) * h + oy * stride - pad + u) * wd;
                const double* grow = go.data() + (static_cast<size_t>(c) * oh + oy) * ow;
                if (need_x) {
                  double* gxrow = gx->data() + xbase;
                  for (int ox = ox0; ox < ox1; ++ox) gxrow[ox * stride + xoff] += wv * grow[ox];
                }
                if (need_w) {
                  const double* xrow = xs2.data() + xbase;
                  for (int ox = ox0; ox < ox1; ++ox) wacc += grow[ox] * xrow[ox * stride + xoff];
                }
              }
              if (need_w) (*gw)[wi] += wacc;
            }
          }
    });
  }
  return out;
}

Tensor Graph::depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
  if (x.rank() != 3 || w.rank() != 3 || b.rank() != 1)
    throw std::invalid_argument("depthwise_conv2d: expected x[C,H,W], w[C,k,k], b[C]");
  const int ch = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int kh = w.dim(1), kw = w.dim(2);
  if (w.dim(0) != ch || b.dim(0) != ch) throw std::invalid_argument("depthwise_conv2d: channel mismatch");
  const int oh = h + 2 * pad - kh + 1;
  const int ow = wd + 2 * pad - kw + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("depthwise_conv2d: empty output");
  Tensor out = Tensor::zeros({ch, oh, ow});
  auto xs = x.data();
  auto ws = w.data();
  auto bs = b.data();
  auto& od = out.raw();
  for (int c = 0; c < ch; ++c)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        double acc = bs[static_cast<size_t>(c)];
        for (int u = 0; u < kh; ++u)
          for (int v = 0; v < kw; ++v) {
            const int ii = i - pad + u;
            const int jj = j - pad + v;
            if (ii < 0 || ii >= h || jj < 0 || jj >= wd) continue;
            acc += xs[(static_cast<size_t>(c) * h + ii) * wd + jj] *
                   ws[(static_cast<size_t>(c) * kh + u) * kw + v];
          }
        od[(static_cast<size_t>(c) * oh + i) * ow + j] = acc;
      }
  if (x.requires_grad() || w.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = b, oc = out;
    record(out, [xc, wc, bc, oc, ch, h, wd, kh, kw, oh, ow, pad]() mutable {
      auto go = oc.grad();
      auto xs2 = xc.data();
      auto ws2 = wc.data();
      const bool need_x = xc.requires_grad();
      const bool need_w = wc.requires_grad();
      const bool need_b = bc.requires_grad();
      std::vector<double>* gx = need_x ? &xc.grad_buffer() : nullptr;
      std::vector<double>* gw = need_w ? &wc.grad_buffer() : nullptr;
      std::vector<double>* gb = need_b ? &bc.grad_buffer() : nullptr;
      for (int c = 0; c < ch; ++c)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            const double g = go[(static_cast<size_t>(c) * oh + i) * ow + j];
            if (g == 0.0) continue;
            if (need_b) (*gb)[static_cast<size_t>(c)] += g;
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                const int ii = i - pad + u;
                const int jj = j - pad + v;
                if (ii < 0 || ii >= h || jj < 0 || jj >= wd) continue;
                const size_t xi = (static_cast<size_t>(c) * h + ii) * wd + jj;
                const size_t wi = (static_cast<size_t>(c) * kh + u) * kw + v;
                if (need_x) (*gx)[xi] += g * ws2[wi];
                if (need_w) (*gw)[wi] += g * xs2[xi];
              }
          }
    });
  }
  return out;
}

Tensor Graph::bilinear_upsample(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 3) throw std::invalid_argument("bilinear_upsample: expected [C,h,w]");
  const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 1 || w < 1) throw std::invalid_argument("bilinear_upsample: empty input");
  if (out_h < h || out_w < w) throw std::invalid_argument("bilinear_upsample: output smaller than input");
  // align-corners-false: source center (i + 0.5) * in/out - 0.5, clamped
  const double sh = static_cast<double>(h) / out_h;
  const double sw = static_cast<double>(w) / out_w;
  struct Tap {
    int i0, i1;
    double w1;  // weight of the i1 sample; i0 gets (1 - w1)
  };
  auto make_taps = [](int out_n, int in_n, double s) {
    std::vector<Tap> taps(static_cast<size_t>(out_n));
    for (int i = 0; i < out_n; ++i) {
      double src = (i + 0.5) * s - 0.5;
      src = std::min(std::max(src, 0.0), static_cast<double>(in_n - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in_n - 1);
      taps[static_cast<size_t>(i)] = {i0, i1, src - i0};
    }
    return taps;
  };
  const auto rows = make_taps(out_h, h, sh);
  const auto cols = make_taps(out_w, w, sw);
  Tensor out = Tensor::zeros({ch, out_h, out_w});
  auto xs = x.data();
  auto& od = out.raw();
  for (int c = 0; c < ch; ++c)
    for (int i = 0; i < out_h; ++i)
      for (int j = 0; j < out_w; ++j) {
        const Tap& ri = rows[static_cast<size_t>(i)];
        const Tap& cj = cols[static_cast<size_t>(j)];
        auto src = [&](int ii, int jj) { return xs[(static_cast<size_t>(c) * h + ii) * w + jj]; };
        od[(static_cast<size_t>(c) * out_h + i) * out_w + j] =
            (1.0 - ri.w1) * ((1.0 - cj.w1) * src(ri.i0, cj.i0) + cj.w1 * src(ri.i0, cj.i1)) +
            ri.w1 * ((1.0 - cj.w1) * src(ri.i1, cj.i0) + cj.w1 * src(ri.i1, cj.i1));
      }
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    record(out, [xc, oc, rows, cols, ch, h, w, out_h, out_w]() mutable {
      auto go = oc.grad();
      auto& gx = xc.grad_buffer();
      for (int c = 0; c < ch; ++c)
        for (int i = 0; i < out_h; ++i)
          for (int j = 0; j < out_w; ++j) {
            const Tap& ri = rows[static_cast<size_t>(i)];
            const Tap& cj = cols[static_cast<size_t>(j)];
            const double g = go[(static_cast<size_t>(c) * out_h + i) * out_w + j];
            auto acc = [&](int ii, int jj, double wgt) {
              gx[(static_cast<size_t>(c) * h + ii) * w + jj] += g * wgt;
            };
            acc(ri.i0, cj.i0, (1.0 - ri.w1) * (1.0 - cj.w1));
            acc(ri.i0, cj.i1, (1.0 - ri.w1) * cj.w1);
            acc(ri.i1, cj.i0, ri.w1 * (1.0 - cj.w1));
            acc(ri.i1, cj.i1, ri.w1 * cj.w1);
          }
    });
  }
  return out;
}

Tensor mlp_forward(Graph& g, const Tensor& x, const Tensor& w1, const Tensor& b1,
                   const Tensor& w2, const Tensor& b2) {
  Tensor hidden = g.gelu(g.add_rowwise(g.matmul(x, w1), b1));
  return g.add_rowwise(g.matmul(hidden, w2), b2);
}

double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, Tensor x, double eps) {
  if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-3]");
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Graph g;
    Tensor y = f(g, x);
    if (y.size() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    g.backward(y);
  }
  std::vector<double> analytic(static_cast<size_t>(x.size()), 0.0);
  if (x.has_grad()) {
    auto gx = x.grad();
    analytic.assign(gx.begin(), gx.end());
  }
  double max_err = 0.0;
  auto& data = x.raw();
  for (size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + eps;
    double up;
    {
      Graph g;
      up = f(g, x).value();
    }
    data[i] = orig - eps;
    double down;
    {
      Graph g;
      down = f(g, x).value();
    }
    data[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric)});
    max_err = std::max(max_err, std::fabs(analytic[i] - numeric) / denom);
  }
  return max_err;
}

}  // namespace p2det
