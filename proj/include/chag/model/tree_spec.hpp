#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace chag {

/// Shape of a hierarchical aggregation tree. Level 0 partitions the input
/// channels into contiguous groups; level k partitions the outputs of level
/// k-1; the last level is a single group.
struct TreeSpec {
  std::vector<std::vector<std::size_t>> levels;
  std::size_t fanout_max = 0;

  std::size_t inputs() const;
  std::size_t node_count() const;
  /// Throws ConfigError unless it partitions `local_channels`.
  void validate(std::size_t local_channels) const;
  std::string to_string() const;

  bool operator==(const TreeSpec&) const = default;
};

/// Greedy balanced partition: each level splits its inputs into
/// ceil(n / max_group) contiguous groups whose sizes differ by at most one.
TreeSpec build_tree_spec(std::size_t local_channels, std::size_t max_group);

}  // namespace chag
