#include "kpnerf/camera.hpp"

#include <cmath>
#include <string>

namespace kpnerf {

Vec2 Camera::forward() const { return {-std::sin(angle), std::cos(angle)}; }
Vec2 Camera::right() const { return {std::cos(angle), std::sin(angle)}; }

void Camera::validate() const {
  if (!(focal > 0.0)) throw std::invalid_argument("camera focal length must be positive");
  if (!(near < far)) throw std::invalid_argument("camera near bound must be below far bound");
  if (width < 1) throw std::invalid_argument("camera width must be at least one pixel");
  if (!origin.allFinite() || !std::isfinite(angle)) {
    throw std::invalid_argument("camera pose must be finite");
  }
}

Projection Camera::project(const Vec2& x) const {
  const Vec2 rel = x - origin;
  const double z = rel.dot(forward());
  const double lateral = rel.dot(right());
  Projection p;
  p.depth = z;
  p.in_front = z > 1e-12;
  p.u = p.in_front ? focal * lateral / z + principal : principal;
  return p;
}

Vec2 Camera::unproject(double u, double depth) const {
  const double lateral = (u - principal) * depth / focal;
  return origin + depth * forward() + lateral * right();
}

Vec2 Camera::lift(double u, double distance) const { return origin + distance * ray(u).direction; }

Ray Camera::ray(double u) const {
  Vec2 d = forward() + ((u - principal) / focal) * right();
  return {origin, d.normalized()};
}

Vec2 Camera::project_gradient(const Vec2& x) const {
  const Vec2 rel = x - origin;
  const double z = rel.dot(forward());
  const double lateral = rel.dot(right());
  return focal * (right() / z - lateral / (z * z) * forward());
}

Camera look_at_orbit(const Vec2& target, double radius, double azimuth, double focal, int width,
                     double near, double far) {
  Camera c;
  c.origin = target + radius * Vec2(-std::sin(azimuth), std::cos(azimuth));
  // forward must point from the origin to the target
  const Vec2 f = (target - c.origin).normalized();
  c.angle = std::atan2(-f.x(), f.y());
  c.focal = focal;
  c.principal = 0.5 * width;
  c.width = width;
  c.near = near;
  c.far = far;
  return c;
}

}  // namespace kpnerf
