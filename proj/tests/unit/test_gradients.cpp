#include <doctest.h>

#include "oracles.hpp"

using namespace lofa::testing;

TEST_CASE("fm_loss gradients match the double-precision finite-difference oracle") {
  const auto errors = fm_loss_gradient_errors(0);
  CHECK(errors.size() > 40);
  for (const auto& e : errors) {
    INFO(e.name << " rel " << e.relative_error);
    CHECK(e.relative_error < 1e-4);
  }
}

TEST_CASE("stage2_loss gradients match the double-precision finite-difference oracle") {
  for (const auto& e : stage2_loss_gradient_errors(0)) {
    INFO(e.name << " rel " << e.relative_error);
    CHECK(e.relative_error < 1e-4);
  }
}
