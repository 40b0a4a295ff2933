#pragma once

// Straight-line double-precision re-implementation of the toy denoiser, used
// as an independent oracle for losses and finite-difference gradients.

#include <lofa/toybase.hpp>

#include <map>
#include <string>

namespace lofa::testing {

using MatD = Eigen::MatrixXd;

struct RefModel {
  ModelDims dims;
  FlowTarget target = FlowTarget::Velocity;
  std::map<std::string, MatD> p;

  static RefModel from(const BaseModel& model);
};

using RefDeltas = std::map<BlockKey, MatD>;

MatD ref_forward(const RefModel& m, const MatD& x, const Eigen::VectorXd& t, const RefDeltas& deltas = {});
double ref_fm_loss(const RefModel& m, const FlowBatch& batch, const RefDeltas& deltas = {});

// Element-wise loop matmul.
MatD loop_matmul(const MatD& a, const MatD& b);

// Central difference of f along every entry of x (x is restored afterwards).
template <class F>
MatD central_difference(MatD& x, double h, F&& f) {
  MatD g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double keep = x(i, j);
      x(i, j) = keep + h;
      const double up = f();
      x(i, j) = keep - h;
      const double down = f();
      x(i, j) = keep;
      g(i, j) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

// ||a - b|| / max(||b||, floor)
double relative_error(const MatD& a, const MatD& b, double floor = 1e-12);

inline MatD to_double(const Mat& m) { return m.cast<double>(); }

}  // namespace lofa::testing
