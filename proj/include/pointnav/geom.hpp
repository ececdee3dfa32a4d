#pragma once

#include <cmath>

#include "pointnav/common.hpp"

// Planar geometry shared by the simulator, the agent and the losses.
//
// Conventions (used everywhere): headings are CCW-positive radians wrapped
// into (-pi, pi]; ground-truth GPS readings, ego-motion deltas and goal
// coordinates live in the episode start frame, i.e. the agent's initial pose
// defines the origin and zero heading, x-forward.
namespace pointnav::geom {

// Wrap an angle into (-pi, pi]. -pi maps to +pi.
inline double wrap_angle(double a) {
  require(std::isfinite(a), "wrap_angle: non-finite input");
  double r = std::remainder(a, kTwoPi);  // [-pi, pi]
  if (r <= -kPi) r = kPi;
  return r;
}

// |wrap(a - b)|, in [0, pi]. Symmetric, zero iff a == b (mod 2pi).
inline double angular_distance(double a, double b) {
  require(std::isfinite(a) && std::isfinite(b), "angular_distance: non-finite input");
  return std::abs(wrap_angle(a - b));
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::hypot(x, y); }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;  // always wrapped into (-pi, pi]

  Pose() = default;
  Pose(double x_, double y_, double theta_) : x(x_), y(y_), theta(wrap_angle(theta_)) {
    require(std::isfinite(x) && std::isfinite(y), "Pose: non-finite position");
  }

  Vec2 position() const { return {x, y}; }
};

// Goal expressed in polar form relative to some pose: range rho >= 0 and
// bearing phi in (-pi, pi].
struct PolarGoal {
  double rho = 0.0;
  double phi = 0.0;
};

// Express `point` in the frame of `pose` (polar form).
inline PolarGoal to_egocentric(const Pose& pose, Vec2 point) {
  const double dx = point.x - pose.x;
  const double dy = point.y - pose.y;
  PolarGoal g;
  g.rho = std::hypot(dx, dy);
  g.phi = wrap_angle(std::atan2(dy, dx) - pose.theta);
  return g;
}

// Inverse of to_egocentric: map a pose-relative polar goal back to the frame
// the pose lives in.
inline Vec2 from_egocentric(const Pose& pose, const PolarGoal& goal) {
  const double bearing = pose.theta + goal.phi;
  return {pose.x + goal.rho * std::cos(bearing), pose.y + goal.rho * std::sin(bearing)};
}

// Component-wise pose update; the delta is expressed in the same frame as the
// pose (the start frame for GPS-style deltas), not in the body frame.
inline Pose compose_delta(const Pose& pose, double dx, double dy, double dtheta) {
  return Pose(pose.x + dx, pose.y + dy, wrap_angle(pose.theta + dtheta));
}

// Rotate a world-frame displacement into the frame of a pose with heading
// theta (no translation).
inline Vec2 rotate_into(double theta, Vec2 v) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  return {c * v.x + s * v.y, -s * v.x + c * v.y};
}

}  // namespace pointnav::geom
