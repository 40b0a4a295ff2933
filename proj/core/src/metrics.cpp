#include <lofa/metrics.hpp>

#include <cmath>
#include <stdexcept>

namespace lofa {

double mean_pairwise_distance(const Mat& X, const Mat& Y) {
  if (X.cols() != Y.cols()) throw ShapeError("energy distance: point dimension mismatch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < Y.rows(); ++j) {
      double sq = 0.0;
      for (Eigen::Index c = 0; c < X.cols(); ++c) {
        const double diff = static_cast<double>(X(i, c)) - static_cast<double>(Y(j, c));
        sq += diff * diff;
      }
      row += std::sqrt(sq);
    }
    total += row;
  }
  return total / (static_cast<double>(X.rows()) * static_cast<double>(Y.rows()));
}

double energy_distance(const Mat& X, const Mat& Y) {
  if (X.rows() < 2 || Y.rows() < 2) throw std::invalid_argument("energy distance needs at least two points per set");
  const double xy = mean_pairwise_distance(X, Y);
  const double xx = mean_pairwise_distance(X, X);
  const double yy = mean_pairwise_distance(Y, Y);
  // Exactly symmetric: the cross term is averaged in both orders.
  const double yx = mean_pairwise_distance(Y, X);
  return std::max(0.0, xy + yx - xx - yy);
}

}  // namespace lofa
