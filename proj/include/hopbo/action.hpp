#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace hopbo {

/// Contact schedule: five alternating stance/flight phases encoded by node
/// counts. Canonical form packs the active phases first (trailing zeros),
/// so the number of nonzero slots is 1 (stance only), 3 (single jump), or
/// 5 (double jump). The first phase is always stance.
struct Action {
  std::array<int, 5> nodes = {3, 0, 0, 0, 0};

  int phase_count() const {
    int n = 0;
    for (int v : nodes)
      if (v != 0) ++n;
    return n;
  }
  int total_nodes() const {
    int n = 0;
    for (int v : nodes) n += v;
    return n;
  }
  bool operator==(const Action& other) const { return nodes == other.nodes; }
  bool operator<(const Action& other) const { return nodes < other.nodes; }

  Eigen::Matrix<double, 5, 1> as_vector() const {
    Eigen::Matrix<double, 5, 1> v;
    for (int i = 0; i < 5; ++i) v[i] = static_cast<double>(nodes[i]);
    return v;
  }
};

/// Task descriptor: goal distance plus the variable terrain node heights.
struct Context {
  double goal_distance = 0.0;
  Eigen::VectorXd terrain_features;  // length n_T (empty on flat ground)

  Eigen::VectorXd as_vector() const {
    Eigen::VectorXd v(1 + terrain_features.size());
    v[0] = goal_distance;
    v.tail(terrain_features.size()) = terrain_features;
    return v;
  }
};

namespace detail {
inline bool slot_value_ok(int v, bool first) {
  if (first) return v >= 3 && v <= 6;
  return v == 0 || (v >= 3 && v <= 6);
}
}  // namespace detail

/// Validates a raw 5-slot vector and returns its canonical form. The only
/// permitted compaction maps [n1,0,0,n4,n5] (single jump written with the
/// gap in the middle) to [n1,n4,n5,0,0]; anything else must already be in
/// trailing-zero form with 1, 3, or 5 active phases.
inline Action canonicalize(const std::array<int, 5>& raw) {
  for (int i = 0; i < 5; ++i) {
    if (!detail::slot_value_ok(raw[i], i == 0))
      throw std::invalid_argument(i == 0
                                      ? "action: first phase must be stance with 3..6 nodes"
                                      : "action: phase node counts must be 0 or 3..6");
  }
  std::array<int, 5> slots = raw;
  if (slots[1] == 0 && slots[2] == 0 && slots[3] != 0 && slots[4] != 0)
    slots = {slots[0], slots[3], slots[4], 0, 0};

  bool seen_zero = false;
  int active = 0;
  for (int v : slots) {
    if (v == 0) {
      seen_zero = true;
    } else {
      if (seen_zero)
        throw std::invalid_argument("action: zero phases must trail the active phases");
      ++active;
    }
  }
  if (active != 1 && active != 3 && active != 5)
    throw std::invalid_argument("action: number of active phases must be 1, 3, or 5");
  return Action{slots};
}

/// All canonical actions in ascending lexicographic order.
struct ActionSpace {
  std::vector<Action> actions;

  int size() const { return static_cast<int>(actions.size()); }
  const Action& operator[](int i) const { return actions[i]; }

  int index_of(const Action& a) const {
    const auto it = std::lower_bound(actions.begin(), actions.end(), a);
    if (it == actions.end() || !(*it == a))
      throw std::invalid_argument("action not in the enumerated action space");
    return static_cast<int>(it - actions.begin());
  }
};

inline ActionSpace enumerate_actions() {
  ActionSpace space;
  const std::array<int, 4> counts = {3, 4, 5, 6};
  for (int n1 : counts) {
    space.actions.push_back(Action{{n1, 0, 0, 0, 0}});
    for (int n2 : counts)
      for (int n3 : counts) {
        space.actions.push_back(Action{{n1, n2, n3, 0, 0}});
        for (int n4 : counts)
          for (int n5 : counts) space.actions.push_back(Action{{n1, n2, n3, n4, n5}});
      }
  }
  std::sort(space.actions.begin(), space.actions.end());
  return space;
}

/// Stance/flight rendering, e.g. [4,3,5,0,0] -> "SSSS.FFF.SSSSS".
inline std::string phase_string(const Action& a) {
  std::string out;
  for (int i = 0; i < 5 && a.nodes[i] != 0; ++i) {
    if (i > 0) out += '.';
    out.append(static_cast<size_t>(a.nodes[i]), i % 2 == 0 ? 'S' : 'F');
  }
  return out;
}

inline std::string to_string(const Action& a) {
  std::string out = "[";
  for (int i = 0; i < 5; ++i) {
    if (i > 0) out += ',';
    out += std::to_string(a.nodes[i]);
  }
  return out + "]";
}

}  // namespace hopbo
