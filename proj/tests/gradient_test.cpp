#include <string>

#include <gtest/gtest.h>

#include "gradcheck.hpp"

namespace gova {
namespace {

using test::gradient_errors;
using test::Problem;
using test::worst_error;

class GradientCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(GradientCheck, FullVariantMatchesFiniteDifferences) {
  const Problem pr(Variant::kFull);
  for (const auto& [name, err] : gradient_errors(pr, GetParam(), 3)) EXPECT_LT(err, 1e-4) << GetParam() << " / " << name;
}

INSTANTIATE_TEST_SUITE_P(Terms, GradientCheck, ::testing::Values("total", "mlm", "l1", "giou", "pos", "contrast"));

TEST(GradientCheckVariants, OtherVariantsMatchFiniteDifferences) {
  for (Variant v : {Variant::kNoGrounding, Variant::kNoObjects, Variant::kTextOnly}) {
    const Problem pr(v);
    EXPECT_LT(worst_error(gradient_errors(pr, "total", 5)), 1e-4) << variant_name(v);
  }
}

}  // namespace
}  // namespace gova
