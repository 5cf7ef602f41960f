#pragma once

#include <cmath>

#include "p2det/tensor.hpp"

namespace p2det {

/// One-element tensor with operator sugar, so scalar-heavy code (polygon
/// clipping, per-sample losses) can be written once as a template over the
/// scalar type and instantiated with either double or TapeScalar.
/// Branch decisions read the current value; the arithmetic on the taken
/// branch is recorded on the tape, which gives almost-everywhere-correct
/// gradients for piecewise-smooth geometry.
struct TapeScalar {
  Graph* graph = nullptr;
  Tensor node;

  TapeScalar() = default;
  TapeScalar(Graph& g, double v) : graph(&g), node(Tensor::scalar(v)) {}
  TapeScalar(Graph& g, Tensor t) : graph(&g), node(std::move(t)) {}

  double value() const { return node.value(); }
};

inline double value_of(double v) { return v; }
inline double value_of(const TapeScalar& v) { return v.value(); }

inline TapeScalar operator+(const TapeScalar& a, const TapeScalar& b) {
  return {*a.graph, a.graph->add(a.node, b.node)};
}
inline TapeScalar operator-(const TapeScalar& a, const TapeScalar& b) {
  return {*a.graph, a.graph->sub(a.node, b.node)};
}
inline TapeScalar operator*(const TapeScalar& a, const TapeScalar& b) {
  return {*a.graph, a.graph->mul(a.node, b.node)};
}
inline TapeScalar operator/(const TapeScalar& a, const TapeScalar& b) {
  return {*a.graph, a.graph->div(a.node, b.node)};
}
inline TapeScalar operator-(const TapeScalar& a) { return {*a.graph, a.graph->neg(a.node)}; }

inline TapeScalar operator*(const TapeScalar& a, double c) {
  return {*a.graph, a.graph->scale(a.node, c)};
}
inline TapeScalar operator*(double c, const TapeScalar& a) { return a * c; }
inline TapeScalar operator+(const TapeScalar& a, double c) {
  return {*a.graph, a.graph->add_const(a.node, c)};
}
inline TapeScalar operator+(double c, const TapeScalar& a) { return a + c; }
inline TapeScalar operator-(const TapeScalar& a, double c) { return a + (-c); }
inline TapeScalar operator-(double c, const TapeScalar& a) { return (-a) + c; }
inline TapeScalar operator/(const TapeScalar& a, double c) { return a * (1.0 / c); }

// unqualified-call math shims shared by double and TapeScalar instantiations
inline double ad_abs(double v) { return std::fabs(v); }
inline double ad_sqrt(double v) { return std::sqrt(v); }
inline double ad_exp(double v) { return std::exp(v); }
inline double ad_max(double a, double b) { return a > b ? a : b; }
inline double ad_min(double a, double b) { return a < b ? a : b; }

inline TapeScalar ad_abs(const TapeScalar& v) { return {*v.graph, v.graph->abs(v.node)}; }
inline TapeScalar ad_sqrt(const TapeScalar& v) { return {*v.graph, v.graph->sqrt(v.node)}; }
inline TapeScalar ad_exp(const TapeScalar& v) { return {*v.graph, v.graph->exp(v.node)}; }
inline TapeScalar ad_max(const TapeScalar& a, const TapeScalar& b) {
  return {*a.graph, a.graph->maximum(a.node, b.node)};
}
inline TapeScalar ad_min(const TapeScalar& a, const TapeScalar& b) {
  return {*a.graph, a.graph->minimum(a.node, b.node)};
}

}  // namespace p2det
