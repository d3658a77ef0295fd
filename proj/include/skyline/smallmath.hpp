#pragma once

#include <array>
#include <cmath>

namespace skyline::km {

// 3-vector and 3x3 matrix over an arbitrary scalar. Every operation is
// written out explicitly with a fixed evaluation order, so running the same
// algorithm on plain doubles and on trace nodes produces bitwise-identical
// results. Do not replace these with Eigen types: Eigen may reorder or
// vectorize differently between scalar types.

template <typename T>
struct Vec3 {
  T x{}, y{}, z{};

  Vec3() = default;
  Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(const T& s) const { return {x * s, y * s, z * s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  Vec3& operator-=(const Vec3& o) {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }
};

template <typename T>
Vec3<T> operator*(const T& s, const Vec3<T>& v) {
  return {s * v.x, s * v.y, s * v.z};
}

template <typename T>
T dot(const Vec3<T>& a, const Vec3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <typename T>
Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

// Row-major 3x3 matrix.
template <typename T>
struct Mat3 {
  std::array<T, 9> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m = {T(1), T(0), T(0), T(0), T(1), T(0), T(0), T(0), T(1)};
    return r;
  }

  static Mat3 zero() { return Mat3{}; }

  T& operator()(int i, int j) { return m[3 * i + j]; }
  const T& operator()(int i, int j) const { return m[3 * i + j]; }

  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
    return r;
  }
  Mat3 operator-(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] - o.m[i];
    return r;
  }
  Mat3 operator*(const T& s) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
    return r;
  }
  Mat3& operator+=(const Mat3& o) {
    for (int i = 0; i < 9; ++i) m[i] += o.m[i];
    return *this;
  }

  Vec3<T> operator*(const Vec3<T>& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  // transpose(*this) * v
  Vec3<T> tmul(const Vec3<T>& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        r(i, j) = (*this)(i, 0) * o(0, j) + (*this)(i, 1) * o(1, j) +
                  (*this)(i, 2) * o(2, j);
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
};

template <typename T>
Mat3<T> skew(const Vec3<T>& v) {
  Mat3<T> r;
  r.m = {T(0), -v.z, v.y, v.z, T(0), -v.x, -v.y, v.x, T(0)};
  return r;
}

template <typename T>
Mat3<T> outer(const Vec3<T>& a, const Vec3<T>& b) {
  Mat3<T> r;
  r.m = {a.x * b.x, a.x * b.y, a.x * b.z, a.y * b.x, a.y * b.y,
         a.y * b.z, a.z * b.x, a.z * b.y, a.z * b.z};
  return r;
}

// R * I * R^T, the congruence used to rotate inertia tensors.
template <typename T>
Mat3<T> rotate_tensor(const Mat3<T>& R, const Mat3<T>& I) {
  return R * I * R.transposed();
}

// Rodrigues rotation about a unit axis.
template <typename T>
Mat3<T> axis_angle(const Vec3<T>& axis, const T& angle) {
  using std::cos;
  using std::sin;
  const T c = cos(angle);
  const T s = sin(angle);
  const T v = T(1) - c;
  Mat3<T> r;
  r.m = {axis.x * axis.x * v + c,
         axis.x * axis.y * v - axis.z * s,
         axis.x * axis.z * v + axis.y * s,
         axis.x * axis.y * v + axis.z * s,
         axis.y * axis.y * v + c,
         axis.y * axis.z * v - axis.x * s,
         axis.x * axis.z * v - axis.y * s,
         axis.y * axis.z * v + axis.x * s,
         axis.z * axis.z * v + c};
  return r;
}

// Quaternion (x, y, z, w) to rotation matrix; the input need not be
// normalized exactly, callers divide by the norm first when required.
template <typename T>
Mat3<T> quat_to_mat(const std::array<T, 4>& q) {
  const T &x = q[0], &y = q[1], &z = q[2], &w = q[3];
  const T xx = x * x, yy = y * y, zz = z * z;
  const T xy = x * y, xz = x * z, yz = y * z;
  const T wx = w * x, wy = w * y, wz = w * z;
  Mat3<T> r;
  r.m = {T(1) - T(2) * (yy + zz), T(2) * (xy - wz), T(2) * (xz + wy),
         T(2) * (xy + wz), T(1) - T(2) * (xx + zz), T(2) * (yz - wx),
         T(2) * (xz - wy), T(2) * (yz + wx), T(1) - T(2) * (xx + yy)};
  return r;
}

// Hamilton product a (x) b, both (x, y, z, w).
template <typename T>
std::array<T, 4> quat_mul(const std::array<T, 4>& a, const std::array<T, 4>& b) {
  const Vec3<T> av{a[0], a[1], a[2]}, bv{b[0], b[1], b[2]};
  const T &aw = a[3], &bw = b[3];
  const Vec3<T> v = aw * bv + bw * av + cross(av, bv);
  const T w = aw * bw - dot(av, bv);
  return {v.x, v.y, v.z, w};
}

}  // namespace skyline::km
