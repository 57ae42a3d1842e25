#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "hopbo/action.hpp"

using namespace hopbo;

TEST_CASE("enumeration covers exactly the canonical schedules", "[action]") {
  const ActionSpace space = enumerate_actions();

  SECTION("count is 4 + 4^3 + 4^5") {
    // brute force over the raw grid with the canonical filter
    int expected = 0;
    for (int n1 = 3; n1 <= 6; ++n1)
      for (int n2 = 0; n2 <= 6; ++n2)
        for (int n3 = 0; n3 <= 6; ++n3)
          for (int n4 = 0; n4 <= 6; ++n4)
            for (int n5 = 0; n5 <= 6; ++n5) {
              const std::array<int, 5> raw{n1, n2, n3, n4, n5};
              bool values_ok = true;
              for (int i = 1; i < 5; ++i)
                if (raw[i] != 0 && (raw[i] < 3 || raw[i] > 6)) values_ok = false;
              if (!values_ok) continue;
              bool trailing = true, seen_zero = false;
              int active = 0;
              for (int v : raw) {
                if (v == 0)
                  seen_zero = true;
                else {
                  if (seen_zero) trailing = false;
                  ++active;
                }
              }
              if (trailing && (active == 1 || active == 3 || active == 5)) ++expected;
            }
    CHECK(expected == 1092);
    CHECK(space.size() == 1092);
  }

  SECTION("no duplicates, all canonical, lexicographic order") {
    std::set<std::array<int, 5>> seen;
    for (int i = 0; i < space.size(); ++i) {
      CHECK(seen.insert(space[i].nodes).second);
      CHECK_NOTHROW(canonicalize(space[i].nodes));
      if (i > 0) CHECK(space[i - 1] < space[i]);
    }
  }

  SECTION("contains the named members") {
    CHECK_NOTHROW(space.index_of(Action{{3, 0, 0, 0, 0}}));
    CHECK_NOTHROW(space.index_of(Action{{5, 4, 3, 4, 6}}));
    CHECK(space[0].nodes == std::array<int, 5>{3, 0, 0, 0, 0});
  }

  SECTION("excludes the uncompacted single-jump form") {
    CHECK_THROWS_AS(space.index_of(Action{{4, 0, 0, 3, 5}}), std::invalid_argument);
  }
}

TEST_CASE("canonicalization", "[action]") {
  SECTION("the gap form compacts into a single jump") {
    CHECK(canonicalize({4, 0, 0, 3, 5}).nodes == std::array<int, 5>{4, 3, 5, 0, 0});
  }
  SECTION("canonical inputs are unchanged") {
    CHECK(canonicalize({3, 0, 0, 0, 0}).nodes == std::array<int, 5>{3, 0, 0, 0, 0});
    CHECK(canonicalize({5, 4, 3, 4, 6}).nodes == std::array<int, 5>{5, 4, 3, 4, 6});
  }
  SECTION("flight-first is rejected") {
    CHECK_THROWS_AS(canonicalize({0, 3, 3, 0, 0}), std::invalid_argument);
  }
  SECTION("even phase counts are rejected") {
    CHECK_THROWS_AS(canonicalize({4, 3, 0, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(canonicalize({4, 3, 3, 3, 0}), std::invalid_argument);
  }
  SECTION("other zero gaps are rejected") {
    CHECK_THROWS_AS(canonicalize({4, 3, 0, 3, 4}), std::invalid_argument);
    CHECK_THROWS_AS(canonicalize({4, 0, 3, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(canonicalize({4, 0, 0, 3, 0}), std::invalid_argument);
  }
  SECTION("out-of-set node counts are rejected") {
    CHECK_THROWS_AS(canonicalize({2, 0, 0, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(canonicalize({7, 0, 0, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(canonicalize({4, 2, 3, 0, 0}), std::invalid_argument);
  }
}

TEST_CASE("phase rendering", "[action]") {
  CHECK(phase_string(Action{{4, 3, 5, 0, 0}}) == "SSSS.FFF.SSSSS");
  CHECK(phase_string(Action{{3, 0, 0, 0, 0}}) == "SSS");
  CHECK(phase_string(Action{{3, 3, 3, 3, 3}}) == "SSS.FFF.SSS.FFF.SSS");
  CHECK(to_string(Action{{4, 3, 5, 0, 0}}) == "[4,3,5,0,0]");
}

TEST_CASE("context vector stacks goal and features", "[action]") {
  Context ctx;
  ctx.goal_distance = 0.7;
  ctx.terrain_features = Eigen::Vector3d(0.1, -0.05, 0.2);
  const Eigen::VectorXd v = ctx.as_vector();
  REQUIRE(v.size() == 4);
  CHECK(v[0] == 0.7);
  CHECK(v[3] == 0.2);
}
