#include <gtest/gtest.h>

#include "gradsuite.hpp"

TEST(GradCheck, EveryOpAndTheFullModelMatchFiniteDifferences) {
  auto result = gradsuite::run_gradient_suite();
  EXPECT_GE(result.cases, 100);
  EXPECT_LT(result.max_rel_err, 1e-3) << "worst relative error over " << result.cases << " cases";
}
