#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hopbo/rng.hpp"

namespace hopbo::terrain {

/// Uniformly sampled terrain elevations along the horizontal axis.
struct Heightmap {
  Eigen::VectorXd x;  ///< sample locations (m), strictly increasing, uniform spacing
  Eigen::VectorXd z;  ///< sampled heights (m)

  double spacing() const { return x[1] - x[0]; }
};

/// Heights of the designated variable heightmap nodes, used as context features.
struct TerrainFeatures {
  Eigen::VectorXd node_heights;
};

inline void validate_heightmap(const Heightmap& hm) {
  if (hm.x.size() != hm.z.size())
    throw std::invalid_argument("heightmap: x and z must have equal length");
  if (hm.x.size() < 2)
    throw std::invalid_argument("heightmap: need at least 2 samples");
  const double dx = hm.x[1] - hm.x[0];
  if (!(dx > 0.0))
    throw std::invalid_argument("heightmap: x samples must be strictly increasing");
  for (Eigen::Index i = 1; i < hm.x.size(); ++i) {
    const double step = hm.x[i] - hm.x[i - 1];
    if (!(step > 0.0))
      throw std::invalid_argument("heightmap: x samples must be strictly increasing");
    if (std::abs(step - dx) > 1e-9 * std::max(1.0, std::abs(dx)))
      throw std::invalid_argument("heightmap: x samples must be uniformly spaced");
  }
}

/// Slope and outward unit normal of the ground surface at a query point.
struct SurfaceGradient {
  double slope;            ///< dh/dx
  Eigen::Vector2d normal;  ///< unit normal, positive vertical component
};

/// C1 ground model built from a heightmap by shape-preserving piecewise
/// cubic interpolation (Fritsch-Carlson / PCHIP knot slopes).
///
/// The interpolant passes through every sample, is monotone wherever the
/// data is, and never leaves the [min, max] band of the two samples
/// bounding each interval. Queries outside the sampled range are errors;
/// there is no extrapolation.
class TerrainModel {
public:
  explicit TerrainModel(Heightmap hm) : hm_(std::move(hm)) {
    validate_heightmap(hm_);
    build_coefficients();
  }

  double x_min() const { return hm_.x[0]; }
  double x_max() const { return hm_.x[hm_.x.size() - 1]; }
  const Heightmap& heightmap() const { return hm_; }

  double height_at(double x) const {
    const int i = segment_index(x);
    const double t = x - hm_.x[i];
    return coef_(i, 0) + t * (coef_(i, 1) + t * (coef_(i, 2) + t * coef_(i, 3)));
  }

  double slope_at(double x) const {
    const int i = segment_index(x);
    const double t = x - hm_.x[i];
    return coef_(i, 1) + t * (2.0 * coef_(i, 2) + t * 3.0 * coef_(i, 3));
  }

  /// Second derivative of the segment cubic (piecewise linear, jumps at knots).
  double curvature_at(double x) const {
    const int i = segment_index(x);
    const double t = x - hm_.x[i];
    return 2.0 * coef_(i, 2) + 6.0 * t * coef_(i, 3);
  }

  SurfaceGradient gradient_at(double x) const {
    const double s = slope_at(x);
    const double inv_norm = 1.0 / std::sqrt(1.0 + s * s);
    return {s, Eigen::Vector2d(-s * inv_norm, inv_norm)};
  }

private:
  int segment_index(double x) const {
    const double slack = 1e-9 * (x_max() - x_min());
    if (x < x_min() - slack || x > x_max() + slack)
      throw std::out_of_range("terrain query outside sampled range");
    const double* begin = hm_.x.data();
    const double* end = begin + hm_.x.size();
    int i = static_cast<int>(std::upper_bound(begin, end, x) - begin) - 1;
    return std::clamp(i, 0, static_cast<int>(hm_.x.size()) - 2);
  }

  void build_coefficients() {
    const Eigen::Index n = hm_.x.size();
    Eigen::VectorXd h(n - 1), d(n - 1);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      h[i] = hm_.x[i + 1] - hm_.x[i];
      d[i] = (hm_.z[i + 1] - hm_.z[i]) / h[i];
    }

    Eigen::VectorXd m(n);  // knot slopes
    if (n == 2) {
      m[0] = m[1] = d[0];
    } else {
      for (Eigen::Index i = 1; i + 1 < n; ++i) {
        if (d[i - 1] * d[i] > 0.0) {
          // weighted harmonic mean; keeps slopes inside the monotone region
          const double w1 = 2.0 * h[i] + h[i - 1];
          const double w2 = h[i] + 2.0 * h[i - 1];
          m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        } else {
          m[i] = 0.0;  // local extremum or flat: no overshoot past the knot
        }
      }
      m[0] = endpoint_slope(h[0], h[1], d[0], d[1]);
      m[n - 1] = endpoint_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    }

    coef_.resize(n - 1, 4);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      coef_(i, 0) = hm_.z[i];
      coef_(i, 1) = m[i];
      coef_(i, 2) = (3.0 * d[i] - 2.0 * m[i] - m[i + 1]) / h[i];
      coef_(i, 3) = (m[i] + m[i + 1] - 2.0 * d[i]) / (h[i] * h[i]);
    }
  }

  // Three-point end slope, clamped so the boundary interval stays shape-preserving.
  static double endpoint_slope(double h0, double h1, double d0, double d1) {
    double m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if (m * d0 <= 0.0)
      m = 0.0;
    else if (d0 * d1 < 0.0 && std::abs(m) > 3.0 * std::abs(d0))
      m = 3.0 * d0;
    return m;
  }

  Heightmap hm_;
  Eigen::Matrix<double, Eigen::Dynamic, 4> coef_;
};

inline TerrainModel build_terrain(Heightmap hm) { return TerrainModel(std::move(hm)); }

/// Sampling grid and variable-node setup for generated terrains.
struct TerrainConfig {
  double x_min = -0.5;
  double x_max = 1.5;
  double dx = 0.1;
  std::vector<double> feature_xs = {0.4, 0.5, 0.6};  ///< variable-node locations
  double sigma = 0.1;                                ///< Gaussian height std dev (m)
  double clip = 0.2;                                 ///< height magnitude bound (m)
};

inline Heightmap flat_heightmap(const TerrainConfig& cfg) {
  const int n = static_cast<int>(std::lround((cfg.x_max - cfg.x_min) / cfg.dx)) + 1;
  Heightmap hm;
  hm.x = Eigen::VectorXd::LinSpaced(n, cfg.x_min, cfg.x_max);
  hm.z = Eigen::VectorXd::Zero(n);
  return hm;
}

/// Indices of the heightmap knots nearest to the configured variable-node locations.
inline std::vector<int> feature_indices(const Heightmap& base, const TerrainConfig& cfg,
                                        int n_features) {
  if (n_features > static_cast<int>(cfg.feature_xs.size()))
    throw std::invalid_argument("more terrain features requested than configured locations");
  std::vector<int> idx;
  for (int f = 0; f < n_features; ++f) {
    int best = 0;
    for (Eigen::Index i = 1; i < base.x.size(); ++i)
      if (std::abs(base.x[i] - cfg.feature_xs[f]) < std::abs(base.x[best] - cfg.feature_xs[f]))
        best = static_cast<int>(i);
    idx.push_back(best);
  }
  return idx;
}

/// Replaces the designated nodes of the base heightmap with clipped Gaussian
/// draws. n_features == 0 returns the base unchanged (flat scenario).
inline std::pair<Heightmap, TerrainFeatures> sample_random_terrain(Rng& rng, int n_features,
                                                                   const Heightmap& base,
                                                                   const TerrainConfig& cfg) {
  Heightmap hm = base;
  TerrainFeatures features;
  features.node_heights.resize(n_features);
  const std::vector<int> idx = feature_indices(base, cfg, n_features);
  for (int f = 0; f < n_features; ++f) {
    const double height = std::clamp(rng.gaussian(0.0, cfg.sigma), -cfg.clip, cfg.clip);
    hm.z[idx[f]] = height;
    features.node_heights[f] = height;
  }
  return {std::move(hm), std::move(features)};
}

// --- plain-text heightmap format: one "x z" pair per line, '#' comments ---

inline void save_heightmap(std::ostream& os, const Heightmap& hm) {
  os << "# heightmap: x [m]  z [m]\n";
  os.precision(17);
  for (Eigen::Index i = 0; i < hm.x.size(); ++i) os << hm.x[i] << " " << hm.z[i] << "\n";
}

inline Heightmap load_heightmap(std::istream& is) {
  std::vector<double> xs, zs;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    double x, z;
    if (ls >> x >> z) {
      xs.push_back(x);
      zs.push_back(z);
    }
  }
  Heightmap hm;
  hm.x = Eigen::Map<Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  hm.z = Eigen::Map<Eigen::VectorXd>(zs.data(), static_cast<Eigen::Index>(zs.size()));
  validate_heightmap(hm);
  return hm;
}

inline Heightmap load_heightmap_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open heightmap file: " + path);
  return load_heightmap(is);
}

inline void save_heightmap_file(const std::string& path, const Heightmap& hm) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write heightmap file: " + path);
  save_heightmap(os, hm);
}

}  // namespace hopbo::terrain
