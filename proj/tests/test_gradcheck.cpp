#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "cvt/gradcheck.hpp"

TEST_CASE("every differentiable op and the full micro model pass finite differences") {
  const auto entries = cvt::run_gradcheck(42, true);
  REQUIRE(entries.size() >= 11);
  for (const auto& e : entries) {
    INFO(e.name << " max_rel_err=" << e.max_rel_err << " tol=" << e.tolerance);
    CHECK(e.pass());
    std::printf("  gradcheck %-40s %.3e (tol %.0e)\n", e.name.c_str(), e.max_rel_err,
                e.tolerance);
  }
}
