#pragma once

#include "kpnerf/tensor.hpp"

namespace kpnerf {

struct Projection {
  double u = 0.0;      // pixel coordinate; pixel i covers [i, i + 1)
  double depth = 0.0;  // coordinate along the optical axis
  bool in_front = false;
};

struct Ray {
  Vec2 origin;
  Vec2 direction;  // unit length
};

/// Flatland pinhole camera. The world is a plane and the image is a single row
/// of `width` pixels. At angle 0 the optical axis is +y and image u grows with +x.
struct Camera {
  Vec2 origin = Vec2::Zero();
  double angle = 0.0;
  double focal = 1.0;
  double principal = 0.0;
  int width = 1;
  double near = 0.1;
  double far = 10.0;

  Vec2 forward() const;
  Vec2 right() const;

  /// Throws std::invalid_argument when f <= 0, near >= far or width < 1.
  void validate() const;

  Projection project(const Vec2& x) const;
  /// Inverse of project(): the point at axis depth `depth` seen at pixel `u`.
  Vec2 unproject(double u, double depth) const;
  /// Point at Euclidean ray distance `distance` from the camera along pixel `u`.
  Vec2 lift(double u, double distance) const;
  Ray ray(double u) const;
  double distance(const Vec2& x) const { return (x - origin).norm(); }
  bool inside(double u) const { return u >= 0.0 && u <= static_cast<double>(width); }

  /// d(u)/d(x) for a point in front of the camera.
  Vec2 project_gradient(const Vec2& x) const;
};

/// Camera placed on a circle of `radius` around `target`, looking at it.
/// `azimuth` is measured from +y, counter-clockwise positive.
Camera look_at_orbit(const Vec2& target, double radius, double azimuth, double focal, int width,
                     double near, double far);

}  // namespace kpnerf
