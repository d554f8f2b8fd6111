#pragma once

// Forward-mode dual number. Running the model's forward *and* hand-written
// backward pass on Dual scalars yields exact directional derivatives of
// gradients, which is how the analytic Hessian mode gets second derivatives.

#include <cmath>

namespace propdec {

struct Dual {
    double v = 0.0; // value
    double t = 0.0; // tangent

    Dual() = default;
    Dual(double value) : v(value), t(0.0) {}
    Dual(double value, double tangent) : v(value), t(tangent) {}

    Dual& operator+=(const Dual& o) { v += o.v; t += o.t; return *this; }
    Dual& operator-=(const Dual& o) { v -= o.v; t -= o.t; return *this; }
    Dual& operator*=(const Dual& o) { t = t * o.v + v * o.t; v *= o.v; return *this; }
    Dual& operator/=(const Dual& o) { t = (t * o.v - v * o.t) / (o.v * o.v); v /= o.v; return *this; }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(Dual a, const Dual& b) { return a /= b; }
inline Dual operator-(const Dual& a) { return Dual(-a.v, -a.t); }

inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }

inline Dual exp(const Dual& a) {
    double e = std::exp(a.v);
    return Dual(e, e * a.t);
}
inline Dual log(const Dual& a) { return Dual(std::log(a.v), a.t / a.v); }
inline Dual sqrt(const Dual& a) {
    double s = std::sqrt(a.v);
    return Dual(s, 0.5 * a.t / s);
}
inline Dual tanh(const Dual& a) {
    double th = std::tanh(a.v);
    return Dual(th, (1.0 - th * th) * a.t);
}

// scalar-type adaptors so templated numeric code works for double and Dual
inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }

} // namespace propdec
