#pragma once

#include <lofa/tensor.hpp>

namespace lofa {

// E(X, Y) = 2 E|x - y| - E|x - x'| - E|y - y'| over all pairs (V-statistic,
// so identical sets give exactly 0). Both sets need at least two points.
double energy_distance(const Mat& X, const Mat& Y);

// Mean pairwise Euclidean distance between the rows of X and Y.
double mean_pairwise_distance(const Mat& X, const Mat& Y);

}  // namespace lofa
